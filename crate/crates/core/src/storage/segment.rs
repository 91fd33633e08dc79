//! Append-only segment files.
//!
//! ```text
//! header : "BSEG" | version u8 | segment_id u64 BE
//! record : hash [32] | len u32 BE | payload [len] | crc32(payload) u32 BE
//! ```

use std::fs::{File, OpenOptions};
use std::io::{BufReader, Read, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use bytes::Bytes;

use super::{BlobHash, StorageError};

pub(crate) const MAGIC: &[u8; 4] = b"BSEG";
pub(crate) const VERSION: u8 = 1;
pub(crate) const HEADER_LEN: u64 = 13;
/// Record bytes excluding the payload.
pub(crate) const RECORD_OVERHEAD: u64 = 32 + 4 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Location {
    pub segment: u64,
    pub offset: u64,
    pub len: u32,
}

impl Location {
    pub fn record_len(&self) -> u64 {
        RECORD_OVERHEAD + self.len as u64
    }
}

#[derive(Debug)]
pub(crate) struct Segment {
    pub id: u64,
    pub path: PathBuf,
    file: File,
    /// Current file length; the next record goes here.
    end: AtomicU64,
    live: AtomicU64,
    dead: AtomicU64,
    sealed: AtomicBool,
}

/// One record found while scanning a segment file.
pub(crate) struct ScannedRecord {
    pub hash: BlobHash,
    pub loc: Location,
}

pub(crate) fn segment_file_name(id: u64) -> String {
    format!("seg-{id:016}.bseg")
}

pub(crate) fn parse_segment_file_name(name: &str) -> Option<u64> {
    name.strip_prefix("seg-")?.strip_suffix(".bseg")?.parse().ok()
}

impl Segment {
    pub fn create(dir: &Path, id: u64) -> Result<Segment, StorageError> {
        let path = dir.join(segment_file_name(id));
        let mut file = OpenOptions::new().read(true).write(true).create_new(true).open(&path)?;
        let mut header = Vec::with_capacity(HEADER_LEN as usize);
        header.extend_from_slice(MAGIC);
        header.push(VERSION);
        header.extend_from_slice(&id.to_be_bytes());
        file.write_all(&header)?;
        file.sync_all()?;
        Ok(Segment {
            id,
            path,
            file,
            end: AtomicU64::new(HEADER_LEN),
            live: AtomicU64::new(0),
            dead: AtomicU64::new(0),
            sealed: AtomicBool::new(false),
        })
    }

    /// Opens an existing segment and returns every intact record. A torn
    /// tail (partial record or bad checksum at the end) is truncated away.
    pub fn open(path: &Path) -> Result<(Segment, Vec<ScannedRecord>), StorageError> {
        let file = OpenOptions::new().read(true).write(true).open(path)?;
        let file_len = file.metadata()?.len();
        let mut r = BufReader::with_capacity(1 << 20, &file);
        let mut header = [0u8; HEADER_LEN as usize];
        r.read_exact(&mut header)
            .map_err(|_| StorageError::Corrupt(format!("{}: short header", path.display())))?;
        if &header[..4] != MAGIC || header[4] != VERSION {
            return Err(StorageError::Corrupt(format!("{}: bad segment header", path.display())));
        }
        let id = u64::from_be_bytes(header[5..13].try_into().unwrap());
        let mut records = Vec::new();
        let mut pos = HEADER_LEN;
        let mut payload = Vec::new();
        loop {
            let mut head = [0u8; 36];
            if pos + RECORD_OVERHEAD > file_len || r.read_exact(&mut head).is_err() {
                break;
            }
            let len = u32::from_be_bytes(head[32..36].try_into().unwrap());
            if pos + RECORD_OVERHEAD + len as u64 > file_len {
                break;
            }
            payload.resize(len as usize, 0);
            let mut crc = [0u8; 4];
            if r.read_exact(&mut payload).is_err() || r.read_exact(&mut crc).is_err() {
                break;
            }
            if crc32fast::hash(&payload) != u32::from_be_bytes(crc) {
                break;
            }
            let hash = BlobHash(head[..32].try_into().unwrap());
            records.push(ScannedRecord {
                hash,
                loc: Location {
                    segment: id,
                    offset: pos,
                    len,
                },
            });
            pos += RECORD_OVERHEAD + len as u64;
        }
        drop(r);
        if pos < file_len {
            file.set_len(pos)?;
            file.sync_all()?;
        }
        let live: u64 = records.iter().map(|r| r.loc.len as u64).sum();
        Ok((
            Segment {
                id,
                path: path.to_path_buf(),
                file,
                end: AtomicU64::new(pos),
                live: AtomicU64::new(live),
                dead: AtomicU64::new(0),
                sealed: AtomicBool::new(false),
            },
            records,
        ))
    }

    /// Appends one record. Callers serialize appends per segment.
    pub fn append(&self, hash: &BlobHash, payload: &[u8]) -> Result<Location, StorageError> {
        let offset = self.end.load(Ordering::Acquire);
        let mut rec = Vec::with_capacity(RECORD_OVERHEAD as usize + payload.len());
        rec.extend_from_slice(&hash.0);
        rec.extend_from_slice(&(payload.len() as u32).to_be_bytes());
        rec.extend_from_slice(payload);
        rec.extend_from_slice(&crc32fast::hash(payload).to_be_bytes());
        self.file.write_all_at(&rec, offset)?;
        self.end.store(offset + rec.len() as u64, Ordering::Release);
        self.live.fetch_add(payload.len() as u64, Ordering::Relaxed);
        Ok(Location {
            segment: self.id,
            offset,
            len: payload.len() as u32,
        })
    }

    pub fn sync(&self) -> Result<(), StorageError> {
        self.file.sync_data()?;
        Ok(())
    }

    /// Positional read of one record; verifies hash position and checksum.
    pub fn read(&self, loc: &Location, expect: &BlobHash) -> Result<Bytes, StorageError> {
        let mut buf = vec![0u8; loc.record_len() as usize];
        self.file
            .read_exact_at(&mut buf, loc.offset)
            .map_err(|_| StorageError::Checksum(*expect))?;
        let n = loc.len as usize;
        if &buf[..32] != expect.0.as_slice() || u32::from_be_bytes(buf[32..36].try_into().unwrap()) != loc.len {
            return Err(StorageError::Checksum(*expect));
        }
        let crc = u32::from_be_bytes(buf[36 + n..].try_into().unwrap());
        if crc32fast::hash(&buf[36..36 + n]) != crc {
            return Err(StorageError::Checksum(*expect));
        }
        buf.truncate(36 + n);
        let mut b = Bytes::from(buf);
        Ok(b.split_off(36))
    }

    pub fn mark_dead(&self, len: u32) {
        self.live.fetch_sub(len as u64, Ordering::Relaxed);
        self.dead.fetch_add(len as u64, Ordering::Relaxed);
    }

    pub fn end(&self) -> u64 {
        self.end.load(Ordering::Acquire)
    }

    pub fn live_bytes(&self) -> u64 {
        self.live.load(Ordering::Relaxed)
    }

    pub fn dead_bytes(&self) -> u64 {
        self.dead.load(Ordering::Relaxed)
    }

    pub fn dead_ratio(&self) -> f64 {
        let total = self.live_bytes() + self.dead_bytes();
        if total == 0 {
            // A sealed segment with nothing in it is pure overhead.
            1.0
        } else {
            self.dead_bytes() as f64 / total as f64
        }
    }

    pub fn seal(&self) {
        self.sealed.store(true, Ordering::Release);
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed.load(Ordering::Acquire)
    }
}
