use std::collections::BTreeMap;
use std::path::Path;

use super::{OpKind, Width};

#[derive(Debug, thiserror::Error)]
pub enum LatencyTableError {
    #[error("reading latency table: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing latency table: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown latency entry {0:?} (expected `<op>/<width>`)")]
    UnknownEntry(String),
    #[error("latency for {0} must be positive and finite, got {1}")]
    NonPositive(String, f64),
}

/// Median latency per (operation, width), in milliseconds.
///
/// Defaults are TFHE-rs medians for `u8`/`u32`. Entries with no direct
/// measurement use a stand-in; see [`OpLatencyTable::default`].
#[derive(Debug, Clone, PartialEq)]
pub struct OpLatencyTable {
    ms: BTreeMap<(OpKind, Width), f64>,
}

/// Measured medians, in milliseconds.
const MEASURED: &[(OpKind, Width, f64)] = &[
    (OpKind::Encrypt, Width::W8, 0.37656),
    (OpKind::Encrypt, Width::W32, 1.4771),
    (OpKind::TrivialEncrypt, Width::W8, 0.00058588),
    (OpKind::TrivialEncrypt, Width::W32, 0.00244),
    (OpKind::Decrypt, Width::W8, 0.0021153),
    (OpKind::Decrypt, Width::W32, 0.0084904),
    (OpKind::Add, Width::W8, 32.725),
    (OpKind::Add, Width::W32, 79.594),
    (OpKind::And, Width::W8, 11.30),
    (OpKind::And, Width::W32, 23.92),
    (OpKind::Eq, Width::W8, 17.62),
    (OpKind::Eq, Width::W32, 41.91),
    (OpKind::CmuxTrivial, Width::W8, 22.37),
    (OpKind::CmuxTrivial, Width::W32, 48.91),
    (OpKind::Cmux, Width::W32, 90.07),
];

impl Default for OpLatencyTable {
    /// Measured entries as listed in `MEASURED`; everything else derived:
    ///
    /// * boolean (width 1) entries reuse the `u8` entry of the same kind;
    /// * `or` costs the same as `and`; `lt`/`le` cost the same as `eq`;
    /// * `cmux` on `u8` with two full branches reuses the trivial-branch cost;
    /// * `max`/`min` cost one `eq` plus one full `cmux` at the same width.
    fn default() -> Self {
        let mut ms: BTreeMap<(OpKind, Width), f64> = MEASURED.iter().map(|&(k, w, v)| ((k, w), v)).collect();
        let get = |ms: &BTreeMap<_, f64>, k, w| ms[&(k, w)];

        ms.insert((OpKind::Cmux, Width::W8), get(&ms, OpKind::CmuxTrivial, Width::W8));
        for w in [Width::W8, Width::W32] {
            ms.insert((OpKind::Or, w), get(&ms, OpKind::And, w));
            ms.insert((OpKind::Lt, w), get(&ms, OpKind::Eq, w));
            ms.insert((OpKind::Le, w), get(&ms, OpKind::Eq, w));
            let sel = get(&ms, OpKind::Eq, w) + get(&ms, OpKind::Cmux, w);
            ms.insert((OpKind::Max, w), sel);
            ms.insert((OpKind::Min, w), sel);
        }
        for kind in OpKind::ALL {
            let v = get(&ms, kind, Width::W8);
            ms.insert((kind, Width::W1), v);
        }
        OpLatencyTable { ms }
    }
}

impl OpLatencyTable {
    pub fn latency_ms(&self, kind: OpKind, width: Width) -> f64 {
        self.ms[&(kind, width)]
    }

    pub fn set(&mut self, kind: OpKind, width: Width, ms: f64) -> Result<(), LatencyTableError> {
        if !(ms.is_finite() && ms > 0.0) {
            return Err(LatencyTableError::NonPositive(format!("{kind}/{width}"), ms));
        }
        self.ms.insert((kind, width), ms);
        Ok(())
    }

    pub fn entries(&self) -> impl Iterator<Item = (OpKind, Width, f64)> + '_ {
        self.ms.iter().map(|(&(k, w), &v)| (k, w, v))
    }

    /// Parses `{"eq/u32": 41.91, ...}`. Listed entries override the
    /// defaults; unlisted ones keep them.
    pub fn from_json(text: &str) -> Result<Self, LatencyTableError> {
        let raw: BTreeMap<String, f64> = serde_json::from_str(text)?;
        let mut table = OpLatencyTable::default();
        for (key, v) in raw {
            let (op, width) = key
                .split_once('/')
                .and_then(|(o, w)| Some((OpKind::from_name(o)?, Width::from_name(w)?)))
                .ok_or_else(|| LatencyTableError::UnknownEntry(key.clone()))?;
            table.set(op, width, v)?;
        }
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LatencyTableError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        let map: BTreeMap<String, f64> = self.entries().map(|(k, w, v)| (format!("{k}/{w}"), v)).collect();
        serde_json::to_string_pretty(&map).expect("string keys")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_cover_every_entry() {
        let t = OpLatencyTable::default();
        for k in OpKind::ALL {
            for w in Width::ALL {
                assert!(t.latency_ms(k, w) > 0.0, "{k}/{w}");
            }
        }
        assert_eq!(t.latency_ms(OpKind::Eq, Width::W32), 41.91);
        assert_eq!(t.latency_ms(OpKind::Or, Width::W1), 11.30);
    }

    #[test]
    fn json_overrides_and_rejects() {
        let t = OpLatencyTable::from_json(r#"{"eq/u32": 10.0}"#).unwrap();
        assert_eq!(t.latency_ms(OpKind::Eq, Width::W32), 10.0);
        assert_eq!(t.latency_ms(OpKind::Eq, Width::W8), 17.62);
        assert!(matches!(
            OpLatencyTable::from_json(r#"{"eq/u64": 1.0}"#),
            Err(LatencyTableError::UnknownEntry(_))
        ));
        assert!(matches!(
            OpLatencyTable::from_json(r#"{"eq/u8": 0.0}"#),
            Err(LatencyTableError::NonPositive(..))
        ));
        let round = OpLatencyTable::from_json(&t.to_json()).unwrap();
        assert_eq!(round, t);
    }
}
