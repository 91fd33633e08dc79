use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, SkewNormal};
use serde::{Deserialize, Serialize};

/// Skew-normal key popularity: location, scale, shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkewParams {
    pub location: f64,
    pub scale: f64,
    pub shape: f64,
}

impl Default for SkewParams {
    fn default() -> Self {
        SkewParams {
            location: -1.0,
            scale: 10.0,
            shape: 30.0,
        }
    }
}

/// Shape of a benchmark run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSpec {
    pub read_threads: usize,
    pub write_threads: usize,
    pub skew: SkewParams,
    /// Object sizes in bytes.
    pub size_classes: Vec<usize>,
    /// Items written before the concurrent scenarios.
    pub prepopulation: usize,
    pub batch_size: usize,
    /// Timed samples per sequential scenario and size class.
    pub samples: usize,
    /// Operations per thread in concurrent scenarios.
    pub ops_per_thread: usize,
    pub seed: u64,
    /// fsync after every append.
    pub sync_writes: bool,
}

pub const KIB: usize = 1024;

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            read_threads: 64,
            write_threads: 16,
            skew: SkewParams::default(),
            size_classes: vec![64 * KIB, 256 * KIB, 1024 * KIB],
            prepopulation: 10_000,
            batch_size: 100,
            samples: 100,
            ops_per_thread: 100,
            seed: 0x5eed,
            sync_writes: false,
        }
    }
}

impl WorkloadSpec {
    /// A small configuration for tests and smoke runs.
    pub fn quick() -> Self {
        WorkloadSpec {
            prepopulation: 500,
            samples: 25,
            ops_per_thread: 20,
            ..WorkloadSpec::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.read_threads == 0 || self.write_threads == 0 {
            return Err("thread counts must be at least 1".into());
        }
        if self.size_classes.is_empty() || self.size_classes.contains(&0) {
            return Err("size classes must be non-empty and positive".into());
        }
        if self.prepopulation == 0 || self.batch_size == 0 || self.samples == 0 || self.ops_per_thread == 0 {
            return Err("prepopulation, batch size, samples and ops per thread must be positive".into());
        }
        if !(self.skew.scale.is_finite() && self.skew.scale > 0.0)
            || !self.skew.location.is_finite()
            || !self.skew.shape.is_finite()
        {
            return Err("skew scale must be positive and parameters finite".into());
        }
        Ok(())
    }

    /// Smallest size class, used for the concurrent scenarios.
    pub fn small_size(&self) -> usize {
        self.size_classes.iter().copied().min().unwrap_or(64 * KIB)
    }
}

/// Maps a skew-normal sample onto `[0, n)`: distance above the location in
/// units of four scales, times `n`, clamped.
pub fn map_sample(x: f64, skew: &SkewParams, n: u64) -> u64 {
    if n == 0 {
        return 0;
    }
    let u = (x - skew.location) / (4.0 * skew.scale);
    let k = (u * n as f64).floor();
    if k.is_nan() || k < 0.0 {
        0
    } else {
        (k as u64).min(n - 1)
    }
}

/// `count` keys in `[0, spec.prepopulation)`, deterministic in `seed`.
pub fn sample_keys(spec: &WorkloadSpec, count: usize, seed: u64) -> Vec<u64> {
    sample_keys_in(&spec.skew, spec.prepopulation as u64, count, seed)
}

pub fn sample_keys_in(skew: &SkewParams, n: u64, count: usize, seed: u64) -> Vec<u64> {
    let dist = SkewNormal::new(skew.location, skew.scale, skew.shape).expect("validated skew parameters");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| map_sample(dist.sample(&mut rng), skew, n)).collect()
}
