use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use bytes::Bytes;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use super::cache::{CacheConfig, CacheStats, CacheTier, TieredCache};
use super::segment::{parse_segment_file_name, Location, Segment, RECORD_OVERHEAD};
use super::{BlobHash, StorageError};

const TOMBSTONES: &str = "tombstones.log";
const TOMBSTONE_LEN: usize = 32 + 8 + 8 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobStoreConfig {
    /// A segment is sealed once the next record would push it past this size.
    pub segment_bytes: u64,
    /// Sealed segments at or above this dead ratio are rewritten by `compact`.
    pub compaction_threshold: f64,
    /// Total on-disk limit; `None` means unbounded.
    pub max_total_bytes: Option<u64>,
    /// fsync after every write call.
    pub sync_writes: bool,
    pub cache: CacheConfig,
}

impl Default for BlobStoreConfig {
    fn default() -> Self {
        BlobStoreConfig {
            segment_bytes: 64 << 20,
            compaction_threshold: 0.4,
            max_total_bytes: None,
            sync_writes: true,
            cache: CacheConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SegmentInfo {
    pub id: u64,
    pub live_bytes: u64,
    pub dead_bytes: u64,
    pub file_bytes: u64,
    pub sealed: bool,
}

struct State {
    segments: BTreeMap<u64, Arc<Segment>>,
    index: HashMap<BlobHash, Location>,
}

struct Active {
    segment: Arc<Segment>,
    next_id: u64,
}

/// Content-addressed, append-only blob storage.
pub struct BlobStore {
    dir: PathBuf,
    cfg: BlobStoreConfig,
    state: RwLock<State>,
    active: Mutex<Active>,
    tombstones: Mutex<File>,
    compaction: Mutex<()>,
    cache: TieredCache,
}

impl std::fmt::Debug for BlobStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlobStore")
            .field("dir", &self.dir)
            .finish_non_exhaustive()
    }
}

fn encode_tombstone(h: &BlobHash, loc: &Location) -> [u8; TOMBSTONE_LEN] {
    let mut out = [0u8; TOMBSTONE_LEN];
    out[..32].copy_from_slice(&h.0);
    out[32..40].copy_from_slice(&loc.segment.to_be_bytes());
    out[40..48].copy_from_slice(&loc.offset.to_be_bytes());
    let crc = crc32fast::hash(&out[..48]);
    out[48..].copy_from_slice(&crc.to_be_bytes());
    out
}

/// Reads the tombstone log; a torn final entry is ignored.
fn read_tombstones(path: &Path) -> Result<Vec<(BlobHash, u64, u64)>, StorageError> {
    let mut raw = Vec::new();
    match File::open(path) {
        Ok(mut f) => {
            f.read_to_end(&mut raw)?;
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    }
    Ok(raw
        .chunks_exact(TOMBSTONE_LEN)
        .filter(|c| crc32fast::hash(&c[..48]).to_be_bytes() == c[48..])
        .map(|c| {
            (
                BlobHash(c[..32].try_into().unwrap()),
                u64::from_be_bytes(c[32..40].try_into().unwrap()),
                u64::from_be_bytes(c[40..48].try_into().unwrap()),
            )
        })
        .collect())
}

impl BlobStore {
    /// Opens (or creates) a store in `dir`, rebuilding the index from the
    /// segment files and the tombstone log.
    pub fn open(dir: impl AsRef<Path>, cfg: BlobStoreConfig) -> Result<BlobStore, StorageError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let mut ids = Vec::new();
        for entry in fs::read_dir(&dir)? {
            let entry = entry?;
            if let Some(id) = entry.file_name().to_str().and_then(parse_segment_file_name) {
                ids.push(id);
            }
        }
        ids.sort_unstable();

        let ts_path = dir.join(TOMBSTONES);
        let killed: HashSet<(u64, u64)> = read_tombstones(&ts_path)?.into_iter().map(|(_, s, o)| (s, o)).collect();

        let mut segments = BTreeMap::new();
        let mut index = HashMap::new();
        for id in &ids {
            let (seg, records) = Segment::open(&dir.join(super::segment::segment_file_name(*id)))?;
            if seg.id != *id {
                return Err(StorageError::Corrupt(format!(
                    "segment file {id} has header id {}",
                    seg.id
                )));
            }
            for rec in records {
                // tombstoned, or a duplicate left behind by an interrupted compaction
                if killed.contains(&(rec.loc.segment, rec.loc.offset)) || index.contains_key(&rec.hash) {
                    seg.mark_dead(rec.loc.len);
                } else {
                    index.insert(rec.hash, rec.loc);
                }
            }
            segments.insert(*id, Arc::new(seg));
        }
        let active = match segments.values().next_back() {
            Some(last) => last.clone(),
            None => {
                let seg = Arc::new(Segment::create(&dir, 1)?);
                segments.insert(1, seg.clone());
                seg
            }
        };
        for seg in segments.values() {
            if seg.id != active.id {
                seg.seal();
            }
        }
        let tombstones = OpenOptions::new().create(true).append(true).open(&ts_path)?;
        let next_id = active.id + 1;
        Ok(BlobStore {
            dir,
            cfg,
            state: RwLock::new(State { segments, index }),
            active: Mutex::new(Active {
                segment: active,
                next_id,
            }),
            tombstones: Mutex::new(tombstones),
            compaction: Mutex::new(()),
            cache: TieredCache::new(cfg.cache),
        })
    }

    pub fn config(&self) -> &BlobStoreConfig {
        &self.cfg
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn total_file_bytes(&self) -> u64 {
        self.state.read().segments.values().map(|s| s.end()).sum()
    }

    /// Appends under the active lock, rolling to a fresh segment when full.
    fn append_locked(&self, active: &mut Active, hash: &BlobHash, bytes: &[u8]) -> Result<Location, StorageError> {
        let rec = RECORD_OVERHEAD + bytes.len() as u64;
        if let Some(limit) = self.cfg.max_total_bytes {
            if self.total_file_bytes() + rec > limit {
                return Err(StorageError::Full { limit });
            }
        }
        let seg = &active.segment;
        let has_records = seg.end() > super::segment::HEADER_LEN;
        if has_records && seg.end() + rec > self.cfg.segment_bytes {
            seg.sync()?;
            seg.seal();
            let fresh = Arc::new(Segment::create(&self.dir, active.next_id)?);
            active.next_id += 1;
            self.state.write().segments.insert(fresh.id, fresh.clone());
            active.segment = fresh;
        }
        active.segment.append(hash, bytes)
    }

    /// Stores `bytes` and returns their hash. Storing content that is already
    /// live is a no-op returning the same hash.
    pub fn put_blob(&self, bytes: &[u8]) -> Result<BlobHash, StorageError> {
        Ok(self.put_blobs(&[bytes])?[0])
    }

    /// Batch variant of [`put_blob`](Self::put_blob) with one sync at the end.
    pub fn put_blobs(&self, blobs: &[&[u8]]) -> Result<Vec<BlobHash>, StorageError> {
        if blobs.iter().any(|b| b.is_empty()) {
            return Err(StorageError::EmptyBlob);
        }
        let hashes: Vec<BlobHash> = blobs.iter().map(|b| BlobHash::of(b)).collect();
        let mut active = self.active.lock();
        let mut wrote = false;
        for (h, b) in hashes.iter().zip(blobs) {
            if self.state.read().index.contains_key(h) {
                continue;
            }
            let loc = self.append_locked(&mut active, h, b)?;
            self.state.write().index.insert(*h, loc);
            wrote = true;
        }
        if wrote && self.cfg.sync_writes {
            active.segment.sync()?;
        }
        Ok(hashes)
    }

    pub fn contains(&self, h: &BlobHash) -> bool {
        self.state.read().index.contains_key(h)
    }

    pub fn get_blob(&self, h: &BlobHash) -> Result<Bytes, StorageError> {
        Ok(self.get_blob_traced(h)?.0)
    }

    /// Like [`get_blob`](Self::get_blob), also reporting the serving tier.
    pub fn get_blob_traced(&self, h: &BlobHash) -> Result<(Bytes, CacheTier), StorageError> {
        if let Some(hit) = self.cache.get(h) {
            return Ok(hit);
        }
        let (seg, loc) = {
            let st = self.state.read();
            let loc = *st.index.get(h).ok_or(StorageError::NotFound(*h))?;
            (st.segments[&loc.segment].clone(), loc)
        };
        let bytes = seg.read(&loc, h)?;
        self.cache.admit_cold(*h, bytes.clone());
        Ok((bytes, CacheTier::Cold))
    }

    /// Marks the record dead. A later `get_blob` fails with `NotFound`.
    pub fn delete_blob(&self, h: &BlobHash) -> Result<(), StorageError> {
        let mut st = self.state.write();
        let loc = *st.index.get(h).ok_or(StorageError::NotFound(*h))?;
        {
            let mut ts = self.tombstones.lock();
            ts.write_all(&encode_tombstone(h, &loc))?;
            if self.cfg.sync_writes {
                ts.sync_data()?;
            }
        }
        st.index.remove(h);
        st.segments[&loc.segment].mark_dead(loc.len);
        drop(st);
        self.cache.invalidate(h);
        Ok(())
    }

    /// Seals the active segment so it becomes eligible for compaction.
    pub fn seal_active(&self) -> Result<(), StorageError> {
        let mut active = self.active.lock();
        if active.segment.end() == super::segment::HEADER_LEN {
            return Ok(());
        }
        active.segment.sync()?;
        active.segment.seal();
        let fresh = Arc::new(Segment::create(&self.dir, active.next_id)?);
        active.next_id += 1;
        self.state.write().segments.insert(fresh.id, fresh.clone());
        active.segment = fresh;
        Ok(())
    }

    /// Rewrites sealed segments whose dead ratio reaches the threshold and
    /// returns the number of dead payload bytes reclaimed.
    ///
    /// Live records are copied and synced before the old file is removed, so
    /// an interruption leaves at worst duplicate records, which `open`
    /// resolves.
    pub fn compact(&self) -> Result<u64, StorageError> {
        let _exclusive = self.compaction.lock();
        let victims: Vec<Arc<Segment>> = self
            .state
            .read()
            .segments
            .values()
            .filter(|s| s.is_sealed() && s.dead_ratio() >= self.cfg.compaction_threshold)
            .cloned()
            .collect();
        let mut reclaimed = 0;
        for seg in victims {
            let live: Vec<(BlobHash, Location)> = self
                .state
                .read()
                .index
                .iter()
                .filter(|(_, l)| l.segment == seg.id)
                .map(|(h, l)| (*h, *l))
                .collect();
            {
                let mut active = self.active.lock();
                for (h, old) in &live {
                    let bytes = seg.read(old, h)?;
                    let new = self.append_locked(&mut active, h, &bytes)?;
                    let mut st = self.state.write();
                    match st.index.get_mut(h) {
                        Some(l) if l == old => *l = new,
                        // deleted while we copied: the copy is dead on arrival
                        _ => st.segments[&new.segment].mark_dead(new.len),
                    }
                }
                active.segment.sync()?;
            }
            reclaimed += seg.dead_bytes();
            self.state.write().segments.remove(&seg.id);
            fs::remove_file(&seg.path)?;
        }
        self.rewrite_tombstones()?;
        Ok(reclaimed)
    }

    /// Drops tombstones that refer to segments which no longer exist.
    fn rewrite_tombstones(&self) -> Result<(), StorageError> {
        let existing: HashSet<u64> = self.state.read().segments.keys().copied().collect();
        let mut ts = self.tombstones.lock();
        let path = self.dir.join(TOMBSTONES);
        let kept: Vec<_> = read_tombstones(&path)?
            .into_iter()
            .filter(|(_, s, _)| existing.contains(s))
            .collect();
        let tmp = self.dir.join("tombstones.log.tmp");
        {
            let mut f = File::create(&tmp)?;
            for (h, s, o) in &kept {
                let loc = Location {
                    segment: *s,
                    offset: *o,
                    len: 0,
                };
                f.write_all(&encode_tombstone(h, &loc))?;
            }
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        *ts = OpenOptions::new().append(true).open(&path)?;
        Ok(())
    }

    pub fn segments(&self) -> Vec<SegmentInfo> {
        self.state
            .read()
            .segments
            .values()
            .map(|s| SegmentInfo {
                id: s.id,
                live_bytes: s.live_bytes(),
                dead_bytes: s.dead_bytes(),
                file_bytes: s.end(),
                sealed: s.is_sealed(),
            })
            .collect()
    }

    /// Number of live blobs.
    pub fn len(&self) -> usize {
        self.state.read().index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn live_hashes(&self) -> Vec<BlobHash> {
        let mut v: Vec<_> = self.state.read().index.keys().copied().collect();
        v.sort_unstable();
        v
    }

    pub fn clear_cache(&self) {
        self.cache.clear();
    }

    pub fn cache_stats(&self) -> CacheStats {
        self.cache.stats()
    }

    pub fn reset_cache_stats(&self) {
        self.cache.reset_stats();
    }

    pub fn cache_tier(&self, h: &BlobHash) -> CacheTier {
        self.cache.tier_of(h)
    }
}
