//! Homomorphic evaluation layer.
//!
//! Everything above this module handles [`Ciphertext`] values as opaque
//! blobs. A backend implements the four classic algorithms (key generation,
//! encryption, decryption, evaluation) through [`FheBackend`]; the query
//! engine talks to it via an [`Evaluator`], which binds a backend to an
//! evaluation key and exposes the operators the engine needs.
//!
//! The default backend is [`SimBackend`], an instrumented cleartext
//! simulation: it counts every operation by kind and width and reports the
//! latency those operations would have cost on a real TFHE deployment,
//! using an [`OpLatencyTable`].

mod latency;
mod sim;
mod stats;
mod wire;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use latency::{LatencyTableError, OpLatencyTable};
pub use sim::{SimBackend, SimConfig};
pub use stats::{BackendStats, OpKind, StatsRecorder};

/// Security parameters accepted by the bundled backends.
pub const SUPPORTED_SECURITY_PARAMS: &[u32] = &[128];

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("unsupported security parameter {0}")]
    UnsupportedSecurityParam(u32),
    #[error("value {value} does not fit in {width}")]
    OutOfRange { value: u64, width: Width },
    #[error("operand width mismatch: {left} vs {right}")]
    WidthMismatch { left: Width, right: Width },
    #[error("expected a boolean operand, got {0}")]
    NonBoolean(Width),
    #[error("{op} expects {expected} operands, got {got}")]
    Arity { op: HeOp, expected: usize, got: usize },
    #[error("ciphertext was produced under a different key")]
    KeyMismatch,
    #[error("ciphertext belongs to backend {found:?}, expected {expected:?}")]
    BackendMismatch { expected: BackendId, found: BackendId },
    #[error("corrupted ciphertext: {0}")]
    Corrupted(&'static str),
    #[error("malformed key material: {0}")]
    MalformedKey(&'static str),
    #[error("invalid ciphertext encoding: {0}")]
    Format(String),
}

/// Bit width of an encrypted scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Width {
    #[serde(rename = "bool")]
    W1,
    #[serde(rename = "u8")]
    W8,
    #[serde(rename = "u32")]
    W32,
}

impl Width {
    pub const ALL: [Width; 3] = [Width::W1, Width::W8, Width::W32];

    pub fn bits(self) -> u8 {
        match self {
            Width::W1 => 1,
            Width::W8 => 8,
            Width::W32 => 32,
        }
    }

    pub fn from_bits(bits: u8) -> Option<Width> {
        match bits {
            1 => Some(Width::W1),
            8 => Some(Width::W8),
            32 => Some(Width::W32),
            _ => None,
        }
    }

    /// Largest representable value.
    pub fn max_value(self) -> u32 {
        match self {
            Width::W1 => 1,
            Width::W8 => u8::MAX as u32,
            Width::W32 => u32::MAX,
        }
    }

    pub(crate) fn index(self) -> usize {
        match self {
            Width::W1 => 0,
            Width::W8 => 1,
            Width::W32 => 2,
        }
    }

    /// Short name used in latency tables and schemas (`bool`, `u8`, `u32`).
    pub fn name(self) -> &'static str {
        match self {
            Width::W1 => "bool",
            Width::W8 => "u8",
            Width::W32 => "u32",
        }
    }

    pub fn from_name(name: &str) -> Option<Width> {
        match name {
            "bool" | "u1" => Some(Width::W1),
            "u8" => Some(Width::W8),
            "u32" => Some(Width::W32),
            _ => None,
        }
    }
}

impl fmt::Display for Width {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A plaintext unsigned scalar tagged with its width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PlainScalar {
    value: u32,
    width: Width,
}

impl PlainScalar {
    pub fn new(value: u64, width: Width) -> Result<Self, CryptoError> {
        if value > width.max_value() as u64 {
            return Err(CryptoError::OutOfRange { value, width });
        }
        Ok(PlainScalar {
            value: value as u32,
            width,
        })
    }

    pub fn u32(value: u32) -> Self {
        PlainScalar {
            value,
            width: Width::W32,
        }
    }

    pub fn u8(value: u8) -> Self {
        PlainScalar {
            value: value as u32,
            width: Width::W8,
        }
    }

    pub fn bool(value: bool) -> Self {
        PlainScalar {
            value: value as u32,
            width: Width::W1,
        }
    }

    pub fn value(&self) -> u32 {
        self.value
    }

    pub fn width(&self) -> Width {
        self.width
    }
}

/// Identifies which backend produced a ciphertext or key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackendId(pub u8);

impl BackendId {
    pub const SIM: BackendId = BackendId(1);
    pub const TFHE: BackendId = BackendId(2);
}

/// An encrypted scalar. The payload is only interpreted by the backend that
/// produced it.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Ciphertext {
    backend: BackendId,
    width: Width,
    trivial: bool,
    payload: Vec<u8>,
}

impl Ciphertext {
    pub(crate) fn from_parts(backend: BackendId, width: Width, trivial: bool, payload: Vec<u8>) -> Self {
        Ciphertext {
            backend,
            width,
            trivial,
            payload,
        }
    }

    pub(crate) fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn backend(&self) -> BackendId {
        self.backend
    }

    pub fn width(&self) -> Width {
        self.width
    }

    /// True for noiseless encodings of a public constant.
    pub fn is_trivial(&self) -> bool {
        self.trivial
    }

    pub fn payload_len(&self) -> usize {
        self.payload.len()
    }
}

impl fmt::Debug for Ciphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Ciphertext")
            .field("backend", &self.backend.0)
            .field("width", &self.width)
            .field("trivial", &self.trivial)
            .field("payload_len", &self.payload.len())
            .finish()
    }
}

/// An encrypted boolean (a [`Ciphertext`] of width 1).
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct CipherBool(Ciphertext);

impl CipherBool {
    pub fn as_ciphertext(&self) -> &Ciphertext {
        &self.0
    }

    pub fn into_ciphertext(self) -> Ciphertext {
        self.0
    }
}

impl TryFrom<Ciphertext> for CipherBool {
    type Error = CryptoError;

    fn try_from(ct: Ciphertext) -> Result<Self, Self::Error> {
        if ct.width != Width::W1 {
            return Err(CryptoError::NonBoolean(ct.width));
        }
        Ok(CipherBool(ct))
    }
}

impl From<CipherBool> for Ciphertext {
    fn from(b: CipherBool) -> Ciphertext {
        b.0
    }
}

/// Output of key generation. Fields are backend-specific byte blobs.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyMaterial {
    pub backend: BackendId,
    pub security_param: u32,
    #[serde(with = "b64")]
    pub public_key: Vec<u8>,
    #[serde(with = "b64")]
    pub secret_key: Vec<u8>,
    #[serde(with = "b64")]
    pub evaluation_key: Vec<u8>,
}

impl KeyMaterial {
    pub fn evaluation_key(&self) -> EvaluationKey {
        EvaluationKey {
            backend: self.backend,
            bytes: Arc::from(self.evaluation_key.as_slice()),
        }
    }
}

impl fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyMaterial")
            .field("backend", &self.backend.0)
            .field("security_param", &self.security_param)
            .finish_non_exhaustive()
    }
}

/// The server-side half of a key: enough to evaluate, never to decrypt
/// (for real backends).
#[derive(Clone, PartialEq, Eq)]
pub struct EvaluationKey {
    pub backend: BackendId,
    bytes: Arc<[u8]>,
}

impl EvaluationKey {
    pub fn new(backend: BackendId, bytes: Vec<u8>) -> Self {
        EvaluationKey {
            backend,
            bytes: Arc::from(bytes),
        }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }
}

impl fmt::Debug for EvaluationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EvaluationKey")
            .field("backend", &self.backend.0)
            .field("len", &self.bytes.len())
            .finish()
    }
}

/// Homomorphic operators understood by [`FheBackend::eval`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeOp {
    Eq,
    Lt,
    Le,
    And,
    Or,
    Add,
    Max,
    Min,
    /// `cmux(cond, then, else)`
    Cmux,
}

impl fmt::Display for HeOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            HeOp::Eq => "eq",
            HeOp::Lt => "lt",
            HeOp::Le => "le",
            HeOp::And => "and",
            HeOp::Or => "or",
            HeOp::Add => "add",
            HeOp::Max => "max",
            HeOp::Min => "min",
            HeOp::Cmux => "cmux",
        };
        f.write_str(s)
    }
}

impl HeOp {
    pub fn arity(self) -> usize {
        match self {
            HeOp::Cmux => 3,
            _ => 2,
        }
    }

    /// Validates operands and reports the result width plus the
    /// (kind, width) the invocation is charged to in stats.
    pub fn check(self, operands: &[&Ciphertext]) -> Result<OpCharge, CryptoError> {
        if operands.len() != self.arity() {
            return Err(CryptoError::Arity {
                op: self,
                expected: self.arity(),
                got: operands.len(),
            });
        }
        let same = |a: &Ciphertext, b: &Ciphertext| {
            if a.width == b.width {
                Ok(a.width)
            } else {
                Err(CryptoError::WidthMismatch {
                    left: a.width,
                    right: b.width,
                })
            }
        };
        let charge = |result, kind, width| OpCharge { result, kind, width };
        match self {
            HeOp::Eq | HeOp::Lt | HeOp::Le => {
                let w = same(operands[0], operands[1])?;
                let kind = match self {
                    HeOp::Eq => OpKind::Eq,
                    HeOp::Lt => OpKind::Lt,
                    _ => OpKind::Le,
                };
                Ok(charge(Width::W1, kind, w))
            }
            HeOp::And | HeOp::Or => {
                for ct in operands {
                    if ct.width != Width::W1 {
                        return Err(CryptoError::NonBoolean(ct.width));
                    }
                }
                let kind = if self == HeOp::And { OpKind::And } else { OpKind::Or };
                Ok(charge(Width::W1, kind, Width::W1))
            }
            HeOp::Add | HeOp::Max | HeOp::Min => {
                let w = same(operands[0], operands[1])?;
                let kind = match self {
                    HeOp::Add => OpKind::Add,
                    HeOp::Max => OpKind::Max,
                    _ => OpKind::Min,
                };
                Ok(charge(w, kind, w))
            }
            HeOp::Cmux => {
                if operands[0].width != Width::W1 {
                    return Err(CryptoError::NonBoolean(operands[0].width));
                }
                let w = same(operands[1], operands[2])?;
                // A mux against a trivial branch is the cheaper op class.
                let kind = if operands[1].trivial || operands[2].trivial {
                    OpKind::CmuxTrivial
                } else {
                    OpKind::Cmux
                };
                Ok(charge(w, kind, w))
            }
        }
    }
}

/// Result width of an operator plus the stats bucket it is charged to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpCharge {
    pub result: Width,
    pub kind: OpKind,
    pub width: Width,
}

/// The (KeyGen, Encrypt, Decrypt, Eval) interface every backend provides.
///
/// Implementations must be safe to evaluate from many threads at once.
pub trait FheBackend: Send + Sync {
    fn backend_id(&self) -> BackendId;

    fn keygen(&self, security_param: u32) -> Result<KeyMaterial, CryptoError>;

    /// Encrypts under the key's public (or secret) component.
    fn encrypt(&self, key: &KeyMaterial, m: PlainScalar) -> Result<Ciphertext, CryptoError>;

    /// Noiseless encoding of a public constant; needs no key.
    fn trivial_encrypt(&self, m: PlainScalar) -> Result<Ciphertext, CryptoError>;

    fn decrypt(&self, key: &KeyMaterial, c: &Ciphertext) -> Result<PlainScalar, CryptoError>;

    fn eval(&self, evk: &EvaluationKey, op: HeOp, operands: &[&Ciphertext]) -> Result<Ciphertext, CryptoError>;

    fn stats(&self) -> BackendStats;

    fn reset_stats(&self);
}

/// A backend bound to an evaluation key: the server's view of the crypto layer.
#[derive(Clone)]
pub struct Evaluator {
    backend: Arc<dyn FheBackend>,
    evk: EvaluationKey,
}

impl fmt::Debug for Evaluator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Evaluator").field("evk", &self.evk).finish()
    }
}

impl Evaluator {
    pub fn new(backend: Arc<dyn FheBackend>, evk: EvaluationKey) -> Self {
        Evaluator { backend, evk }
    }

    pub fn backend(&self) -> &Arc<dyn FheBackend> {
        &self.backend
    }

    fn bool_op(&self, op: HeOp, a: &Ciphertext, b: &Ciphertext) -> Result<CipherBool, CryptoError> {
        self.backend.eval(&self.evk, op, &[a, b])?.try_into()
    }

    pub fn he_eq(&self, a: &Ciphertext, b: &Ciphertext) -> Result<CipherBool, CryptoError> {
        self.bool_op(HeOp::Eq, a, b)
    }

    pub fn he_lt(&self, a: &Ciphertext, b: &Ciphertext) -> Result<CipherBool, CryptoError> {
        self.bool_op(HeOp::Lt, a, b)
    }

    pub fn he_le(&self, a: &Ciphertext, b: &Ciphertext) -> Result<CipherBool, CryptoError> {
        self.bool_op(HeOp::Le, a, b)
    }

    pub fn he_and(&self, a: &CipherBool, b: &CipherBool) -> Result<CipherBool, CryptoError> {
        self.bool_op(HeOp::And, &a.0, &b.0)
    }

    pub fn he_or(&self, a: &CipherBool, b: &CipherBool) -> Result<CipherBool, CryptoError> {
        self.bool_op(HeOp::Or, &a.0, &b.0)
    }

    pub fn he_add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, CryptoError> {
        self.backend.eval(&self.evk, HeOp::Add, &[a, b])
    }

    pub fn he_max(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, CryptoError> {
        self.backend.eval(&self.evk, HeOp::Max, &[a, b])
    }

    pub fn he_min(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, CryptoError> {
        self.backend.eval(&self.evk, HeOp::Min, &[a, b])
    }

    pub fn he_cmux(
        &self,
        cond: &CipherBool,
        then_ct: &Ciphertext,
        else_ct: &Ciphertext,
    ) -> Result<Ciphertext, CryptoError> {
        self.backend.eval(&self.evk, HeOp::Cmux, &[&cond.0, then_ct, else_ct])
    }

    pub fn trivial_encrypt(&self, m: PlainScalar) -> Result<Ciphertext, CryptoError> {
        self.backend.trivial_encrypt(m)
    }

    pub fn trivial_bool(&self, b: bool) -> Result<CipherBool, CryptoError> {
        self.backend.trivial_encrypt(PlainScalar::bool(b))?.try_into()
    }

    pub fn stats(&self) -> BackendStats {
        self.backend.stats()
    }
}

pub(crate) mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        STANDARD.decode(s.as_bytes()).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_scalar_range() {
        assert!(PlainScalar::new(255, Width::W8).is_ok());
        assert_eq!(
            PlainScalar::new(256, Width::W8),
            Err(CryptoError::OutOfRange {
                value: 256,
                width: Width::W8
            })
        );
        assert!(PlainScalar::new(1 << 32, Width::W32).is_err());
        assert!(PlainScalar::new(2, Width::W1).is_err());
    }

    #[test]
    fn cmux_class_depends_on_branch_triviality() {
        let c = Ciphertext::from_parts(BackendId::SIM, Width::W1, false, vec![]);
        let full = Ciphertext::from_parts(BackendId::SIM, Width::W32, false, vec![]);
        let triv = Ciphertext::from_parts(BackendId::SIM, Width::W32, true, vec![]);
        assert_eq!(HeOp::Cmux.check(&[&c, &full, &full]).unwrap().kind, OpKind::Cmux);
        assert_eq!(HeOp::Cmux.check(&[&c, &full, &triv]).unwrap().kind, OpKind::CmuxTrivial);
        assert!(matches!(
            HeOp::Cmux.check(&[&full, &full, &full]),
            Err(CryptoError::NonBoolean(Width::W32))
        ));
    }
}
