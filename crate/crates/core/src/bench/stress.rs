//! Concurrent writers and readers against one blob store, with compaction
//! running alongside, followed by a full verification pass.

use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::workload::{sample_keys_in, SkewParams};
use crate::storage::{BlobHash, BlobStore, BlobStoreConfig, StorageError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StressConfig {
    pub writers: usize,
    pub readers: usize,
    pub writes_per_writer: usize,
    pub reads_per_reader: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Every n-th write is deleted again shortly after, to feed compaction.
    pub ephemeral_every: usize,
    /// Small segments force rollover and give compaction work.
    pub segment_bytes: u64,
    pub skew: SkewParams,
    pub seed: u64,
}

impl Default for StressConfig {
    fn default() -> Self {
        StressConfig {
            writers: 16,
            readers: 64,
            writes_per_writer: 250,
            reads_per_reader: 100,
            min_size: 64,
            max_size: 4096,
            ephemeral_every: 4,
            segment_bytes: 256 << 10,
            skew: SkewParams::default(),
            seed: 0x57e55,
        }
    }
}

impl StressConfig {
    pub fn total_ops(&self) -> usize {
        self.writers * self.writes_per_writer + self.readers * self.reads_per_reader
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StressReport {
    pub writes: u64,
    pub reads: u64,
    pub deletes: u64,
    pub compactions: u64,
    pub reclaimed_bytes: u64,
    /// Kept writes missing or wrong after the run, or after reopening.
    pub lost_writes: u64,
    pub checksum_failures: u64,
    /// Reads that returned bytes other than what was written.
    pub content_mismatches: u64,
    pub other_errors: u64,
}

impl StressReport {
    pub fn is_clean(&self) -> bool {
        self.lost_writes == 0 && self.checksum_failures == 0 && self.content_mismatches == 0 && self.other_errors == 0
    }
}

fn payload(cfg: &StressConfig, writer: usize, seq: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((writer as u64) << 32) ^ seq as u64);
    let len = rng.random_range(cfg.min_size.max(1)..=cfg.max_size.max(cfg.min_size.max(1)));
    let mut b = vec![0u8; len];
    rng.fill_bytes(&mut b);
    // writer and sequence number make every payload distinct
    let tag = ((writer as u64) << 32 | seq as u64).to_be_bytes();
    let n = tag.len().min(b.len());
    b[..n].copy_from_slice(&tag[..n]);
    b
}

#[derive(Default)]
struct Counters {
    writes: AtomicU64,
    reads: AtomicU64,
    deletes: AtomicU64,
    checksum: AtomicU64,
    mismatch: AtomicU64,
    other: AtomicU64,
}

impl Counters {
    fn error(&self, e: &StorageError) {
        match e {
            StorageError::Checksum { .. } => self.checksum.fetch_add(1, Ordering::Relaxed),
            _ => self.other.fetch_add(1, Ordering::Relaxed),
        };
    }
}

fn config(cfg: &StressConfig) -> BlobStoreConfig {
    BlobStoreConfig {
        segment_bytes: cfg.segment_bytes,
        compaction_threshold: 0.2,
        sync_writes: false,
        ..BlobStoreConfig::default()
    }
}

pub fn stress_run(dir: &Path, cfg: &StressConfig) -> Result<StressReport, StorageError> {
    let store = Arc::new(BlobStore::open(dir, config(cfg))?);
    // (hash, writer, seq) of every kept write, in commit order
    let kept: Arc<RwLock<Vec<(BlobHash, usize, usize)>>> = Arc::default();
    let c = Arc::new(Counters::default());
    let writers_done = Arc::new(AtomicBool::new(false));
    let mut report = StressReport::default();

    std::thread::scope(|s| {
        let compactor = s.spawn(|| {
            let mut runs = 0u64;
            let mut reclaimed = 0u64;
            while !writers_done.load(Ordering::Acquire) {
                std::thread::sleep(std::time::Duration::from_millis(5));
                match store.compact() {
                    Ok(r) => {
                        runs += 1;
                        reclaimed += r;
                    }
                    Err(e) => c.error(&e),
                }
            }
            (runs, reclaimed)
        });
        let writers: Vec<_> = (0..cfg.writers)
            .map(|w| {
                let (store, kept, c) = (&store, &kept, &c);
                s.spawn(move || {
                    for seq in 0..cfg.writes_per_writer {
                        let b = payload(cfg, w, seq);
                        match store.put_blob(&b) {
                            Ok(h) => {
                                c.writes.fetch_add(1, Ordering::Relaxed);
                                if cfg.ephemeral_every > 0 && seq % cfg.ephemeral_every == cfg.ephemeral_every - 1 {
                                    match store.delete_blob(&h) {
                                        Ok(()) => c.deletes.fetch_add(1, Ordering::Relaxed),
                                        Err(e) => {
                                            c.error(&e);
                                            0
                                        }
                                    };
                                } else {
                                    kept.write().push((h, w, seq));
                                }
                            }
                            Err(e) => c.error(&e),
                        }
                    }
                })
            })
            .collect();
        let readers: Vec<_> = (0..cfg.readers)
            .map(|r| {
                let (store, kept, c) = (&store, &kept, &c);
                s.spawn(move || {
                    let picks = sample_keys_in(
                        &cfg.skew,
                        1 << 20,
                        cfg.reads_per_reader,
                        cfg.seed.wrapping_add(r as u64),
                    );
                    for p in picks {
                        let target = loop {
                            let k = kept.read();
                            if !k.is_empty() {
                                // hot keys land on the most recent writes
                                let idx = k.len() - 1 - ((p as usize * k.len()) >> 20).min(k.len() - 1);
                                break k[idx];
                            }
                            drop(k);
                            std::thread::yield_now();
                        };
                        let (h, w, seq) = target;
                        match store.get_blob(&h) {
                            Ok(bytes) => {
                                c.reads.fetch_add(1, Ordering::Relaxed);
                                if bytes.as_ref() != payload(cfg, w, seq).as_slice() {
                                    c.mismatch.fetch_add(1, Ordering::Relaxed);
                                }
                            }
                            Err(e) => c.error(&e),
                        }
                    }
                })
            })
            .collect();
        for h in writers {
            let _ = h.join();
        }
        writers_done.store(true, Ordering::Release);
        for h in readers {
            let _ = h.join();
        }
        let (runs, reclaimed) = compactor.join().unwrap_or((0, 0));
        report.compactions = runs;
        report.reclaimed_bytes = reclaimed;
    });

    // final sweep: seal, compact everything eligible, then verify twice,
    // before and after reopening
    store.seal_active()?;
    report.reclaimed_bytes += store.compact()?;
    report.compactions += 1;
    let kept = kept.read().clone();
    let verify = |s: &BlobStore| {
        kept.iter()
            .filter(|(h, w, seq)| !matches!(s.get_blob(h), Ok(b) if b.as_ref() == payload(cfg, *w, *seq).as_slice()))
            .count() as u64
    };
    report.lost_writes = verify(&store);
    drop(store);
    let reopened = BlobStore::open(dir, config(cfg))?;
    report.lost_writes = report.lost_writes.max(verify(&reopened));
    report.writes = c.writes.load(Ordering::Relaxed);
    report.reads = c.reads.load(Ordering::Relaxed);
    report.deletes = c.deletes.load(Ordering::Relaxed);
    report.checksum_failures = c.checksum.load(Ordering::Relaxed);
    report.content_mismatches = c.mismatch.load(Ordering::Relaxed);
    report.other_errors = c.other.load(Ordering::Relaxed);
    Ok(report)
}
