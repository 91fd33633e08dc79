use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{OpLatencyTable, Width};

/// Operation classes tracked by backend instrumentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Encrypt,
    TrivialEncrypt,
    Decrypt,
    Eq,
    Lt,
    Le,
    And,
    Or,
    Add,
    Max,
    Min,
    /// If-then-else with two non-trivial branches.
    Cmux,
    /// If-then-else where at least one branch is a trivial encryption.
    CmuxTrivial,
}

impl OpKind {
    pub const ALL: [OpKind; 13] = [
        OpKind::Encrypt,
        OpKind::TrivialEncrypt,
        OpKind::Decrypt,
        OpKind::Eq,
        OpKind::Lt,
        OpKind::Le,
        OpKind::And,
        OpKind::Or,
        OpKind::Add,
        OpKind::Max,
        OpKind::Min,
        OpKind::Cmux,
        OpKind::CmuxTrivial,
    ];

    pub(crate) fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Encrypt => "encrypt",
            OpKind::TrivialEncrypt => "trivial_encrypt",
            OpKind::Decrypt => "decrypt",
            OpKind::Eq => "eq",
            OpKind::Lt => "lt",
            OpKind::Le => "le",
            OpKind::And => "and",
            OpKind::Or => "or",
            OpKind::Add => "add",
            OpKind::Max => "max",
            OpKind::Min => "min",
            OpKind::Cmux => "cmux",
            OpKind::CmuxTrivial => "cmux_trivial",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Comparison-class operators (one per comparison node per row).
    pub fn is_comparison(self) -> bool {
        matches!(self, OpKind::Eq | OpKind::Lt | OpKind::Le)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

const KINDS: usize = OpKind::ALL.len();
const WIDTHS: usize = Width::ALL.len();

/// Snapshot of backend operation counters.
///
/// `simulated_latency_ms` is the dot product of the counters with the
/// latency table that was active when the snapshot was taken.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendStats {
    counts: [[u64; WIDTHS]; KINDS],
    pub simulated_latency_ms: f64,
}

impl BackendStats {
    pub fn zero() -> Self {
        BackendStats {
            counts: [[0; WIDTHS]; KINDS],
            simulated_latency_ms: 0.0,
        }
    }

    pub fn count(&self, kind: OpKind, width: Width) -> u64 {
        self.counts[kind.index()][width.index()]
    }

    /// Sum over all widths.
    pub fn total(&self, kind: OpKind) -> u64 {
        self.counts[kind.index()].iter().sum()
    }

    /// Both mux classes at one width.
    pub fn cmux(&self, width: Width) -> u64 {
        self.count(OpKind::Cmux, width) + self.count(OpKind::CmuxTrivial, width)
    }

    pub fn cmux_total(&self) -> u64 {
        self.total(OpKind::Cmux) + self.total(OpKind::CmuxTrivial)
    }

    /// eq + lt + le over all widths.
    pub fn comparisons(&self) -> u64 {
        self.total(OpKind::Eq) + self.total(OpKind::Lt) + self.total(OpKind::Le)
    }

    /// Non-zero counters, sorted.
    pub fn nonzero(&self) -> BTreeMap<(OpKind, Width), u64> {
        let mut out = BTreeMap::new();
        for kind in OpKind::ALL {
            for width in Width::ALL {
                let c = self.count(kind, width);
                if c > 0 {
                    out.insert((kind, width), c);
                }
            }
        }
        out
    }

    /// Builds a snapshot from explicit counters, priced with `table`.
    pub fn from_counts(counts: impl IntoIterator<Item = ((OpKind, Width), u64)>, table: &OpLatencyTable) -> Self {
        let mut out = BackendStats::zero();
        for ((kind, width), c) in counts {
            out.counts[kind.index()][width.index()] += c;
        }
        out.simulated_latency_ms = out.price(table);
        out
    }

    /// Counter-wise difference `self - earlier`, priced with `table`.
    pub fn since(&self, earlier: &BackendStats, table: &OpLatencyTable) -> BackendStats {
        let mut counts = [[0; WIDTHS]; KINDS];
        for (k, row) in counts.iter_mut().enumerate() {
            for (w, c) in row.iter_mut().enumerate() {
                *c = self.counts[k][w].saturating_sub(earlier.counts[k][w]);
            }
        }
        let mut out = BackendStats {
            counts,
            simulated_latency_ms: 0.0,
        };
        out.simulated_latency_ms = out.price(table);
        out
    }

    /// Prices the counters with a latency table. Iteration order is fixed so
    /// the float result is reproducible.
    pub fn price(&self, table: &OpLatencyTable) -> f64 {
        let mut total = 0.0;
        for kind in OpKind::ALL {
            for width in Width::ALL {
                let c = self.count(kind, width);
                if c > 0 {
                    total += c as f64 * table.latency_ms(kind, width);
                }
            }
        }
        total
    }

    #[cfg(test)]
    pub(crate) fn with_count(mut self, kind: OpKind, width: Width, count: u64) -> Self {
        self.counts[kind.index()][width.index()] = count;
        self
    }
}

impl Serialize for BackendStats {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let nz = self.nonzero();
        let mut map = s.serialize_map(Some(nz.len() + 1))?;
        for ((kind, width), c) in nz {
            map.serialize_entry(&format!("{kind}/{width}"), &c)?;
        }
        map.serialize_entry("simulated_latency_ms", &self.simulated_latency_ms)?;
        map.end()
    }
}

/// Lock-free counters shared by backend implementations.
pub struct StatsRecorder {
    counts: [[AtomicU64; WIDTHS]; KINDS],
    table: parking_lot::RwLock<OpLatencyTable>,
}

impl fmt::Debug for StatsRecorder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StatsRecorder").finish_non_exhaustive()
    }
}

impl StatsRecorder {
    pub fn new(table: OpLatencyTable) -> Self {
        StatsRecorder {
            counts: std::array::from_fn(|_| std::array::from_fn(|_| AtomicU64::new(0))),
            table: parking_lot::RwLock::new(table),
        }
    }

    pub fn record(&self, kind: OpKind, width: Width) {
        self.counts[kind.index()][width.index()].fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> BackendStats {
        let mut counts = [[0; WIDTHS]; KINDS];
        for (k, row) in counts.iter_mut().enumerate() {
            for (w, c) in row.iter_mut().enumerate() {
                *c = self.counts[k][w].load(Ordering::Relaxed);
            }
        }
        let mut stats = BackendStats {
            counts,
            simulated_latency_ms: 0.0,
        };
        stats.simulated_latency_ms = stats.price(&self.table.read());
        stats
    }

    pub fn reset(&self) {
        for row in &self.counts {
            for c in row {
                c.store(0, Ordering::Relaxed);
            }
        }
    }

    pub fn latency_table(&self) -> OpLatencyTable {
        self.table.read().clone()
    }

    pub fn set_latency_table(&self, table: OpLatencyTable) {
        *self.table.write() = table;
    }
}
