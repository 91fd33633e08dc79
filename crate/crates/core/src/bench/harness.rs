//! Storage benchmark scenarios over the blob store and, for comparison, a
//! plain key-value store holding whole ciphertexts.

use std::fmt;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use redb::{Database, Durability, TableDefinition};
use serde::{Deserialize, Serialize};

use super::workload::{sample_keys, WorkloadSpec};
use crate::storage::{BlobHash, BlobStore, BlobStoreConfig, CacheConfig, StorageError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    SequentialWrite,
    BatchWrite,
    ColdRead,
    HotRead,
    BatchRead,
    ConcurrentWrite,
    ConcurrentRead,
}

impl Scenario {
    pub const ALL: [Scenario; 7] = [
        Scenario::SequentialWrite,
        Scenario::BatchWrite,
        Scenario::ColdRead,
        Scenario::HotRead,
        Scenario::BatchRead,
        Scenario::ConcurrentWrite,
        Scenario::ConcurrentRead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::SequentialWrite => "sequential_write",
            Scenario::BatchWrite => "batch_write",
            Scenario::ColdRead => "cold_read",
            Scenario::HotRead => "hot_read",
            Scenario::BatchRead => "batch_read",
            Scenario::ConcurrentWrite => "concurrent_write",
            Scenario::ConcurrentRead => "concurrent_read",
        }
    }

    pub fn from_name(s: &str) -> Option<Scenario> {
        Scenario::ALL.into_iter().find(|x| x.name() == s)
    }

    /// Runs once per size class rather than at the small size only.
    fn per_size(self) -> bool {
        matches!(self, Scenario::SequentialWrite | Scenario::ColdRead | Scenario::HotRead)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Storage path under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    /// Segment blob store with tiered cache.
    Blob,
    /// Ciphertexts stored directly as values in the metadata database.
    Kv,
}

impl Engine {
    pub fn name(self) -> &'static str {
        match self {
            Engine::Blob => "blob",
            Engine::Kv => "kv",
        }
    }
}

/// One results-table row. Latencies are per operation, or per batch for the
/// batch scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub scenario: Scenario,
    pub engine: Engine,
    pub size_bytes: usize,
    pub samples: usize,
    pub median_us: f64,
    pub p95_us: f64,
    /// Records per second.
    pub throughput: f64,
    pub errors: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvInfo {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
    pub debug_build: bool,
    pub version: String,
    pub started_at: u64,
}

impl EnvInfo {
    pub fn capture() -> EnvInfo {
        EnvInfo {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            debug_build: cfg!(debug_assertions),
            version: env!("CARGO_PKG_VERSION").into(),
            started_at: crate::access::unix_now(),
        }
    }
}

/// Medians from a reference deployment (server-class hardware), in µs:
/// `(scenario, size, blob, kv)`. Informational only.
pub const REFERENCE_MEDIANS_US: &[(&str, usize, f64, f64)] = &[
    ("sequential_write", 64 << 10, 46.323, 120.85),
    ("sequential_write", 256 << 10, 184.46, 472.17),
    ("sequential_write", 1 << 20, 739.58, 1747.0),
    ("batch_write", 64 << 10, 5249.8, 12260.0),
    ("cold_read", 64 << 10, 11.664, 5.5070),
    ("hot_read", 64 << 10, 1.1086, 2.4558),
    ("cold_read", 256 << 10, 45.579, 18.709),
    ("hot_read", 256 << 10, 4.4549, 7.3069),
    ("cold_read", 1 << 20, 181.55, 73.686),
    ("hot_read", 1 << 20, 15.796, 30.066),
    ("batch_read", 64 << 10, 157.19, 321.14),
    ("concurrent_write", 64 << 10, 131.33, 1687.2),
    ("concurrent_read", 64 << 10, 39.372, 1787.1),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub env: EnvInfo,
    pub spec: WorkloadSpec,
    pub rows: Vec<BenchRow>,
    pub wall_secs: f64,
}

impl BenchReport {
    pub fn row(&self, scenario: Scenario, engine: Engine, size: usize) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.scenario == scenario && r.engine == engine && r.size_bytes == size)
    }

    fn median(&self, scenario: Scenario, engine: Engine, size: usize) -> Option<f64> {
        self.row(scenario, engine, size)
            .filter(|r| r.error.is_none())
            .map(|r| r.median_us)
    }

    /// The relations expected to hold on any hardware, as (label, holds).
    /// Relations whose inputs were not measured are left out.
    pub fn directional_checks(&self) -> Vec<(String, bool)> {
        let mut out = Vec::new();
        for &size in &self.spec.size_classes {
            if let (Some(hot), Some(cold)) = (
                self.median(Scenario::HotRead, Engine::Blob, size),
                self.median(Scenario::ColdRead, Engine::Blob, size),
            ) {
                out.push((
                    format!("blob hot read < cold read at {size} B ({hot:.2} < {cold:.2} µs)"),
                    hot < cold,
                ));
            }
        }
        let small = self.spec.small_size();
        if let (Some(b), Some(k)) = (
            self.median(Scenario::ConcurrentRead, Engine::Blob, small),
            self.median(Scenario::ConcurrentRead, Engine::Kv, small),
        ) {
            out.push((
                format!("blob concurrent read < kv concurrent read ({b:.2} < {k:.2} µs)"),
                b < k,
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "scenario",
            "engine",
            "size_bytes",
            "samples",
            "median_us",
            "p95_us",
            "throughput",
            "errors",
            "error",
        ])
        .expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.scenario.name().to_string(),
                r.engine.name().to_string(),
                r.size_bytes.to_string(),
                r.samples.to_string(),
                format!("{:.3}", r.median_us),
                format!("{:.3}", r.p95_us),
                format!("{:.1}", r.throughput),
                r.errors.to_string(),
                r.error.clone().unwrap_or_default(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("csv is utf-8")
    }

    /// A fixed-width table for terminals.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<18} {:<5} {:>9} {:>7} {:>12} {:>12} {:>12} {:>6}\n",
            "scenario", "engine", "size", "samples", "median_us", "p95_us", "rec/s", "errors"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<18} {:<5} {:>9} {:>7} {:>12.3} {:>12.3} {:>12.1} {:>6}",
                r.scenario.name(),
                r.engine.name(),
                r.size_bytes,
                r.samples,
                r.median_us,
                r.p95_us,
                r.throughput,
                r.errors
            ));
            if let Some(e) = &r.error {
                s.push_str(&format!("  error: {e}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Median and 95th percentile in microseconds.
pub fn percentiles(samples: &mut [Duration]) -> (f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    samples.sort_unstable();
    let us = |d: Duration| d.as_secs_f64() * 1e6;
    let n = samples.len();
    let median = if n % 2 == 1 {
        us(samples[n / 2])
    } else {
        (us(samples[n / 2 - 1]) + us(samples[n / 2])) / 2.0
    };
    let p95 = us(samples[((n as f64 * 0.95).ceil() as usize).clamp(1, n) - 1]);
    (median, p95)
}

/// Distinct payloads of one size: a shared random body with a unique
/// 8-byte prefix.
struct Payloads {
    body: Vec<u8>,
}

impl Payloads {
    fn new(size: usize, seed: u64) -> Payloads {
        let mut body = vec![0u8; size.max(8)];
        ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut body);
        Payloads { body }
    }

    fn make(&self, id: u64) -> Vec<u8> {
        let mut b = self.body.clone();
        b[..8].copy_from_slice(&id.to_be_bytes());
        b
    }
}

const KV_VALUES: TableDefinition<&[u8; 32], &[u8]> = TableDefinition::new("values");

/// The comparison store: every ciphertext inline in one ordered KV table.
struct KvStore {
    db: Database,
    durability: Durability,
}

impl KvStore {
    fn open(path: &Path, sync: bool) -> Result<KvStore, StorageError> {
        let db = Database::create(path)?;
        let w = db.begin_write()?;
        w.open_table(KV_VALUES)?;
        w.commit()?;
        Ok(KvStore {
            db,
            durability: if sync {
                Durability::Immediate
            } else {
                Durability::Eventual
            },
        })
    }

    fn put_many(&self, items: &[&[u8]]) -> Result<Vec<BlobHash>, StorageError> {
        let mut w = self.db.begin_write()?;
        w.set_durability(self.durability);
        let mut out = Vec::with_capacity(items.len());
        {
            let mut t = w.open_table(KV_VALUES)?;
            for b in items {
                let h = BlobHash::of(b);
                t.insert(&h.0, *b)?;
                out.push(h);
            }
        }
        w.commit()?;
        Ok(out)
    }

    fn get(&self, h: &BlobHash) -> Result<Vec<u8>, StorageError> {
        let r = self.db.begin_read()?;
        let t = r.open_table(KV_VALUES)?;
        let v = t.get(&h.0)?.ok_or(StorageError::NotFound(*h))?;
        Ok(v.value().to_vec())
    }
}

enum Store {
    Blob(BlobStore),
    Kv(KvStore),
}

impl Store {
    fn put(&self, b: &[u8]) -> Result<BlobHash, StorageError> {
        Ok(self.put_many(&[b])?[0])
    }

    fn put_many(&self, items: &[&[u8]]) -> Result<Vec<BlobHash>, StorageError> {
        match self {
            Store::Blob(s) => s.put_blobs(items),
            Store::Kv(s) => s.put_many(items),
        }
    }

    fn get(&self, h: &BlobHash) -> Result<usize, StorageError> {
        match self {
            Store::Blob(s) => s.get_blob(h).map(|b| b.len()),
            Store::Kv(s) => s.get(h).map(|b| b.len()),
        }
    }

    /// No in-process cache exists on the KV path, so this is a no-op there.
    fn clear_cache(&self) {
        if let Store::Blob(s) = self {
            s.clear_cache();
        }
    }
}

struct Measured {
    samples: Vec<Duration>,
    records: u64,
    wall: Duration,
    errors: u64,
}

impl Measured {
    fn sequential(samples: Vec<Duration>, records_per_sample: u64) -> Measured {
        let wall = samples.iter().sum();
        Measured {
            records: samples.len() as u64 * records_per_sample,
            samples,
            wall,
            errors: 0,
        }
    }
}

fn timed<T>(f: impl FnOnce() -> Result<T, StorageError>) -> Result<Duration, StorageError> {
    let t = Instant::now();
    f()?;
    Ok(t.elapsed())
}

struct Runner<'a> {
    spec: &'a WorkloadSpec,
    store: Arc<Store>,
    next_id: std::sync::atomic::AtomicU64,
    /// Hashes written by the sequential write scenario, per size class.
    written: std::collections::HashMap<usize, Vec<BlobHash>>,
    prepopulated: Option<Arc<Vec<BlobHash>>>,
}

impl Runner<'_> {
    fn fresh_id(&self) -> u64 {
        self.next_id.fetch_add(1, std::sync::atomic::Ordering::Relaxed)
    }

    fn ensure_written(&mut self, size: usize) -> Result<Vec<BlobHash>, StorageError> {
        if let Some(h) = self.written.get(&size) {
            return Ok(h.clone());
        }
        let p = Payloads::new(size, self.spec.seed ^ size as u64);
        let items: Vec<Vec<u8>> = (0..self.spec.samples).map(|_| p.make(self.fresh_id())).collect();
        let refs: Vec<&[u8]> = items.iter().map(Vec::as_slice).collect();
        let hashes = self.store.put_many(&refs)?;
        self.written.insert(size, hashes.clone());
        Ok(hashes)
    }

    fn ensure_prepopulated(&mut self) -> Result<Arc<Vec<BlobHash>>, StorageError> {
        if let Some(p) = &self.prepopulated {
            return Ok(p.clone());
        }
        let p = Payloads::new(self.spec.small_size(), self.spec.seed ^ 0xfeed);
        let mut all = Vec::with_capacity(self.spec.prepopulation);
        let mut left = self.spec.prepopulation;
        while left > 0 {
            let n = left.min(self.spec.batch_size);
            let items: Vec<Vec<u8>> = (0..n).map(|_| p.make(self.fresh_id())).collect();
            let refs: Vec<&[u8]> = items.iter().map(Vec::as_slice).collect();
            all.extend(self.store.put_many(&refs)?);
            left -= n;
        }
        let all = Arc::new(all);
        self.prepopulated = Some(all.clone());
        Ok(all)
    }

    fn run(&mut self, scenario: Scenario, size: usize) -> Result<Measured, StorageError> {
        let spec = self.spec;
        match scenario {
            Scenario::SequentialWrite => {
                let p = Payloads::new(size, spec.seed ^ 0x77 ^ size as u64);
                let mut samples = Vec::with_capacity(spec.samples);
                for _ in 0..spec.samples {
                    let b = p.make(self.fresh_id());
                    samples.push(timed(|| self.store.put(&b))?);
                }
                Ok(Measured::sequential(samples, 1))
            }
            Scenario::ColdRead => {
                let hashes = self.ensure_written(size)?;
                let mut samples = Vec::with_capacity(hashes.len());
                for h in &hashes {
                    self.store.clear_cache();
                    samples.push(timed(|| self.store.get(h))?);
                }
                Ok(Measured::sequential(samples, 1))
            }
            Scenario::HotRead => {
                let hashes = self.ensure_written(size)?;
                let mut samples = Vec::with_capacity(hashes.len());
                for h in &hashes {
                    // cold read admits to warm, the second read promotes to hot
                    self.store.get(h)?;
                    self.store.get(h)?;
                    samples.push(timed(|| self.store.get(h))?);
                }
                Ok(Measured::sequential(samples, 1))
            }
            Scenario::BatchWrite | Scenario::BatchRead => {
                let p = Payloads::new(size, spec.seed ^ 0xba7c);
                let rounds = (spec.samples / 10).max(3);
                let mut writes = Vec::with_capacity(rounds);
                let mut reads = Vec::with_capacity(rounds);
                for _ in 0..rounds {
                    let items: Vec<Vec<u8>> = (0..spec.batch_size).map(|_| p.make(self.fresh_id())).collect();
                    let refs: Vec<&[u8]> = items.iter().map(Vec::as_slice).collect();
                    let t = Instant::now();
                    let hashes = self.store.put_many(&refs)?;
                    writes.push(t.elapsed());
                    let t = Instant::now();
                    for h in &hashes {
                        self.store.get(h)?;
                    }
                    reads.push(t.elapsed());
                }
                let samples = if scenario == Scenario::BatchWrite {
                    writes
                } else {
                    reads
                };
                Ok(Measured::sequential(samples, spec.batch_size as u64))
            }
            Scenario::ConcurrentRead => {
                let keys_all = self.ensure_prepopulated()?;
                run_threads(spec.read_threads, |t| {
                    let keys = sample_keys(spec, spec.ops_per_thread, spec.seed.wrapping_add(t as u64));
                    let store = self.store.clone();
                    let all = keys_all.clone();
                    move || {
                        keys.iter()
                            .map(|&k| timed(|| store.get(&all[k as usize])))
                            .collect::<Vec<_>>()
                    }
                })
            }
            Scenario::ConcurrentWrite => {
                let p = Arc::new(Payloads::new(size, spec.seed ^ 0xc0c0));
                let base = self.next_id.fetch_add(
                    (spec.write_threads * spec.ops_per_thread) as u64,
                    std::sync::atomic::Ordering::Relaxed,
                );
                run_threads(spec.write_threads, |t| {
                    let store = self.store.clone();
                    let p = p.clone();
                    let first = base + (t * spec.ops_per_thread) as u64;
                    let ops = spec.ops_per_thread as u64;
                    move || {
                        (first..first + ops)
                            .map(|id| {
                                let b = p.make(id);
                                timed(|| store.put(&b))
                            })
                            .collect::<Vec<_>>()
                    }
                })
            }
        }
    }
}

/// Spawns `threads` workers; each returns its own latency list, merged
/// after the join.
fn run_threads<F, W>(threads: usize, mut make: F) -> Result<Measured, StorageError>
where
    F: FnMut(usize) -> W,
    W: FnOnce() -> Vec<Result<Duration, StorageError>> + Send + 'static,
{
    let start = Instant::now();
    let handles: Vec<_> = (0..threads).map(|t| std::thread::spawn(make(t))).collect();
    let mut samples = Vec::new();
    let mut errors = 0;
    for h in handles {
        match h.join() {
            Ok(results) => {
                for r in results {
                    match r {
                        Ok(d) => samples.push(d),
                        Err(_) => errors += 1,
                    }
                }
            }
            Err(_) => errors += 1,
        }
    }
    Ok(Measured {
        records: samples.len() as u64,
        samples,
        wall: start.elapsed(),
        errors,
    })
}

/// Runs the selected scenarios on each engine, in a fresh store under
/// `dir`. A failing scenario yields a row carrying its error and the rest
/// continue.
pub fn run_benchmarks(
    dir: &Path,
    scenarios: &[Scenario],
    engines: &[Engine],
    spec: &WorkloadSpec,
) -> Result<BenchReport, String> {
    spec.validate()?;
    let env = EnvInfo::capture();
    let start = Instant::now();
    let mut rows = Vec::new();
    for &engine in engines {
        let path = dir.join(engine.name());
        let store = match engine {
            Engine::Blob => BlobStore::open(
                &path,
                BlobStoreConfig {
                    sync_writes: spec.sync_writes,
                    cache: CacheConfig::default(),
                    ..BlobStoreConfig::default()
                },
            )
            .map(Store::Blob),
            Engine::Kv => std::fs::create_dir_all(&path)
                .map_err(StorageError::from)
                .and_then(|_| KvStore::open(&path.join("kv.redb"), spec.sync_writes))
                .map(Store::Kv),
        }
        .map_err(|e| format!("opening {} store: {e}", engine.name()))?;
        let mut runner = Runner {
            spec,
            store: Arc::new(store),
            next_id: std::sync::atomic::AtomicU64::new(0),
            written: Default::default(),
            prepopulated: None,
        };
        for &scenario in scenarios {
            let sizes: Vec<usize> = if scenario.per_size() {
                spec.size_classes.clone()
            } else {
                vec![spec.small_size()]
            };
            for size in sizes {
                log::info!("bench {engine:?} {scenario} {size}");
                let row = match runner.run(scenario, size) {
                    Ok(mut m) => {
                        let (median_us, p95_us) = percentiles(&mut m.samples);
                        let secs = m.wall.as_secs_f64();
                        BenchRow {
                            scenario,
                            engine,
                            size_bytes: size,
                            samples: m.samples.len(),
                            median_us,
                            p95_us,
                            throughput: if secs > 0.0 { m.records as f64 / secs } else { 0.0 },
                            errors: m.errors,
                            error: None,
                        }
                    }
                    Err(e) => BenchRow {
                        scenario,
                        engine,
                        size_bytes: size,
                        samples: 0,
                        median_us: 0.0,
                        p95_us: 0.0,
                        throughput: 0.0,
                        errors: 1,
                        error: Some(e.to_string()),
                    },
                };
                rows.push(row);
            }
        }
    }
    Ok(BenchReport {
        env,
        spec: spec.clone(),
        rows,
        wall_secs: start.elapsed().as_secs_f64(),
    })
}
