//! Two in-memory tiers in front of the segment files.
//!
//! A blob read from disk (cold) is admitted to warm. A second access while
//! warm promotes it to hot. Hot evictions fall back to warm; warm evictions
//! drop the bytes. Capacities are in payload bytes.

use bytes::Bytes;
use lru::LruCache;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::BlobHash;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheTier {
    Hot,
    Warm,
    Cold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub hot_bytes: u64,
    pub warm_bytes: u64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            hot_bytes: 64 << 20,
            warm_bytes: 256 << 20,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hot_hits: u64,
    pub warm_hits: u64,
    pub cold_reads: u64,
    pub promotions: u64,
    pub evictions: u64,
    pub hot_resident: u64,
    pub warm_resident: u64,
}

struct Tier {
    map: LruCache<BlobHash, Bytes>,
    resident: u64,
    capacity: u64,
}

impl Tier {
    fn new(capacity: u64) -> Tier {
        Tier {
            map: LruCache::unbounded(),
            resident: 0,
            capacity,
        }
    }

    fn remove(&mut self, h: &BlobHash) -> Option<Bytes> {
        let b = self.map.pop(h)?;
        self.resident -= b.len() as u64;
        Some(b)
    }

    /// Inserts and returns whatever had to leave to stay within capacity.
    fn insert(&mut self, h: BlobHash, b: Bytes) -> Vec<(BlobHash, Bytes)> {
        let mut out = Vec::new();
        if b.len() as u64 > self.capacity {
            out.push((h, b));
            return out;
        }
        self.resident += b.len() as u64;
        if let Some(old) = self.map.put(h, b) {
            self.resident -= old.len() as u64;
        }
        while self.resident > self.capacity {
            let (k, v) = self.map.pop_lru().expect("resident bytes imply entries");
            self.resident -= v.len() as u64;
            out.push((k, v));
        }
        out
    }
}

struct Inner {
    hot: Tier,
    warm: Tier,
    stats: CacheStats,
}

pub(crate) struct TieredCache {
    inner: Mutex<Inner>,
}

impl TieredCache {
    pub fn new(cfg: CacheConfig) -> TieredCache {
        TieredCache {
            inner: Mutex::new(Inner {
                hot: Tier::new(cfg.hot_bytes),
                warm: Tier::new(cfg.warm_bytes),
                stats: CacheStats::default(),
            }),
        }
    }

    /// Looks `h` up, applying promotion. Returns the bytes and the tier
    /// that served them.
    pub fn get(&self, h: &BlobHash) -> Option<(Bytes, CacheTier)> {
        let mut g = self.inner.lock();
        if let Some(b) = g.hot.map.get(h).cloned() {
            g.stats.hot_hits += 1;
            return Some((b, CacheTier::Hot));
        }
        let b = g.warm.remove(h)?;
        // second access: promote and count as a hot hit
        g.stats.hot_hits += 1;
        g.stats.promotions += 1;
        let spilled = g.hot.insert(*h, b.clone());
        for (k, v) in spilled {
            let dropped = g.warm.insert(k, v);
            g.stats.evictions += dropped.len() as u64;
        }
        Some((b, CacheTier::Hot))
    }

    /// Admits bytes just read from disk.
    pub fn admit_cold(&self, h: BlobHash, b: Bytes) {
        let mut g = self.inner.lock();
        g.stats.cold_reads += 1;
        let dropped = g.warm.insert(h, b);
        g.stats.evictions += dropped.len() as u64;
    }

    pub fn invalidate(&self, h: &BlobHash) {
        let mut g = self.inner.lock();
        g.hot.remove(h);
        g.warm.remove(h);
    }

    pub fn clear(&self) {
        let mut g = self.inner.lock();
        g.hot.map.clear();
        g.hot.resident = 0;
        g.warm.map.clear();
        g.warm.resident = 0;
    }

    pub fn tier_of(&self, h: &BlobHash) -> CacheTier {
        let g = self.inner.lock();
        if g.hot.map.contains(h) {
            CacheTier::Hot
        } else if g.warm.map.contains(h) {
            CacheTier::Warm
        } else {
            CacheTier::Cold
        }
    }

    pub fn stats(&self) -> CacheStats {
        let g = self.inner.lock();
        CacheStats {
            hot_resident: g.hot.resident,
            warm_resident: g.warm.resident,
            ..g.stats
        }
    }

    pub fn reset_stats(&self) {
        self.inner.lock().stats = CacheStats::default();
    }
}
