//! Instrumented cleartext-simulation backend.
//!
//! Ciphertexts carry the plaintext masked with a key-derived keystream and
//! authenticated with a truncated MAC, so payload bytes never show the raw
//! integer and a wrong key or a flipped bit is detected on decryption. The
//! evaluation key embeds the masking key: this backend gives a faithful
//! operation trace, not secrecy against the server.

use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;
use rand::{RngCore, SeedableRng};
use rand_chacha::{ChaCha20Rng, ChaCha8Rng};
use sha2::{Digest, Sha256};

use super::{
    BackendId, BackendStats, Ciphertext, CryptoError, EvaluationKey, FheBackend, HeOp, KeyMaterial, OpKind,
    OpLatencyTable, PlainScalar, StatsRecorder, Width, SUPPORTED_SECURITY_PARAMS,
};

const KEY_ID_LEN: usize = 8;
const NONCE_LEN: usize = 12;
const TAG_LEN: usize = 8;
const BODY_LEN: usize = KEY_ID_LEN + NONCE_LEN + 4 + TAG_LEN;

#[derive(Debug, Clone, Default)]
pub struct SimConfig {
    /// Fixes key generation and nonce derivation. `None` seeds from the OS.
    pub seed: Option<u64>,
    /// Extra filler bytes appended to every payload, to emulate large
    /// ciphertexts in storage tests.
    pub payload_padding: usize,
    pub latency: OpLatencyTable,
}

pub struct SimBackend {
    seed: [u8; 32],
    keygen_rng: Mutex<ChaCha20Rng>,
    nonce_counter: AtomicU64,
    padding: usize,
    stats: StatsRecorder,
}

impl std::fmt::Debug for SimBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimBackend")
            .field("padding", &self.padding)
            .finish_non_exhaustive()
    }
}

impl Default for SimBackend {
    fn default() -> Self {
        SimBackend::new(SimConfig::default())
    }
}

/// Per-key masking material.
struct KeyView {
    id: [u8; KEY_ID_LEN],
    mask: [u8; 32],
}

impl KeyView {
    fn trivial() -> KeyView {
        KeyView {
            id: [0; KEY_ID_LEN],
            mask: Sha256::digest(b"fhesql/sim/trivial").into(),
        }
    }

    fn from_secret(sk: &[u8]) -> Result<KeyView, CryptoError> {
        if sk.len() != 32 {
            return Err(CryptoError::MalformedKey("secret key must be 32 bytes"));
        }
        let mask: [u8; 32] = Sha256::new()
            .chain_update(b"fhesql/sim/mask")
            .chain_update(sk)
            .finalize()
            .into();
        let digest = Sha256::new().chain_update(b"fhesql/sim/id").chain_update(sk).finalize();
        let mut id = [0; KEY_ID_LEN];
        id.copy_from_slice(&digest[..KEY_ID_LEN]);
        // an all-zero id is reserved for trivial ciphertexts
        if id == [0; KEY_ID_LEN] {
            id[0] = 1;
        }
        Ok(KeyView { id, mask })
    }

    /// Parses the `key_id || mask` layout shared by public and evaluation keys.
    fn from_public(bytes: &[u8]) -> Result<KeyView, CryptoError> {
        if bytes.len() != KEY_ID_LEN + 32 {
            return Err(CryptoError::MalformedKey("public/evaluation key must be 40 bytes"));
        }
        let mut id = [0; KEY_ID_LEN];
        id.copy_from_slice(&bytes[..KEY_ID_LEN]);
        let mut mask = [0; 32];
        mask.copy_from_slice(&bytes[KEY_ID_LEN..]);
        Ok(KeyView { id, mask })
    }

    fn to_public(&self) -> Vec<u8> {
        let mut out = self.id.to_vec();
        out.extend_from_slice(&self.mask);
        out
    }

    fn keystream(&self, nonce: &[u8]) -> [u8; 32] {
        Sha256::new()
            .chain_update(b"fhesql/sim/ks")
            .chain_update(self.mask)
            .chain_update(nonce)
            .finalize()
            .into()
    }

    fn tag(&self, nonce: &[u8], masked: &[u8], width: Width, trivial: bool) -> [u8; TAG_LEN] {
        let d = Sha256::new()
            .chain_update(b"fhesql/sim/tag")
            .chain_update(self.mask)
            .chain_update(self.id)
            .chain_update(nonce)
            .chain_update(masked)
            .chain_update([width.bits(), trivial as u8])
            .finalize();
        let mut t = [0; TAG_LEN];
        t.copy_from_slice(&d[..TAG_LEN]);
        t
    }
}

impl SimBackend {
    pub fn new(config: SimConfig) -> SimBackend {
        let seed_u64 = config.seed.unwrap_or_else(|| rand::rng().next_u64());
        let seed: [u8; 32] = Sha256::new()
            .chain_update(b"fhesql/sim/seed")
            .chain_update(seed_u64.to_be_bytes())
            .finalize()
            .into();
        SimBackend {
            seed,
            keygen_rng: Mutex::new(ChaCha20Rng::from_seed(seed)),
            nonce_counter: AtomicU64::new(0),
            padding: config.payload_padding,
            stats: StatsRecorder::new(config.latency),
        }
    }

    pub fn with_seed(seed: u64) -> SimBackend {
        SimBackend::new(SimConfig {
            seed: Some(seed),
            ..SimConfig::default()
        })
    }

    pub fn latency_table(&self) -> OpLatencyTable {
        self.stats.latency_table()
    }

    pub fn set_latency_table(&self, table: OpLatencyTable) {
        self.stats.set_latency_table(table);
    }

    fn fresh_nonce(&self) -> [u8; NONCE_LEN] {
        let n = self.nonce_counter.fetch_add(1, Ordering::Relaxed);
        let d = Sha256::new()
            .chain_update(b"fhesql/sim/nonce")
            .chain_update(self.seed)
            .chain_update(n.to_be_bytes())
            .finalize();
        let mut out = [0; NONCE_LEN];
        out.copy_from_slice(&d[..NONCE_LEN]);
        out
    }

    /// Evaluation results take their nonce from the inputs, so the output
    /// bytes do not depend on the order parallel evaluations run in.
    fn eval_nonce(&self, op: HeOp, operands: &[&Ciphertext]) -> [u8; NONCE_LEN] {
        let mut h = Sha256::new()
            .chain_update(b"fhesql/sim/eval")
            .chain_update(self.seed)
            .chain_update(op.to_string().as_bytes());
        for c in operands {
            h.update((c.payload().len() as u32).to_be_bytes());
            h.update(c.payload());
        }
        let mut out = [0; NONCE_LEN];
        out.copy_from_slice(&h.finalize()[..NONCE_LEN]);
        out
    }

    fn seal(&self, key: &KeyView, m: PlainScalar, trivial: bool) -> Ciphertext {
        let nonce = if trivial { [0; NONCE_LEN] } else { self.fresh_nonce() };
        self.seal_with(key, m, trivial, nonce)
    }

    fn seal_with(&self, key: &KeyView, m: PlainScalar, trivial: bool, nonce: [u8; NONCE_LEN]) -> Ciphertext {
        let ks = key.keystream(&nonce);
        let mut masked = m.value().to_be_bytes();
        for (b, k) in masked.iter_mut().zip(ks.iter()) {
            *b ^= k;
        }
        let tag = key.tag(&nonce, &masked, m.width(), trivial);
        let mut payload = Vec::with_capacity(BODY_LEN + self.padding);
        payload.extend_from_slice(&key.id);
        payload.extend_from_slice(&nonce);
        payload.extend_from_slice(&masked);
        payload.extend_from_slice(&tag);
        if self.padding > 0 {
            let start = payload.len();
            payload.resize(start + self.padding, 0);
            ChaCha8Rng::from_seed(ks).fill_bytes(&mut payload[start..]);
        }
        Ciphertext::from_parts(BackendId::SIM, m.width(), trivial, payload)
    }

    /// Recovers the plaintext. `key` is ignored for trivial ciphertexts.
    fn open(&self, key: Option<&KeyView>, ct: &Ciphertext) -> Result<PlainScalar, CryptoError> {
        if ct.backend() != BackendId::SIM {
            return Err(CryptoError::BackendMismatch {
                expected: BackendId::SIM,
                found: ct.backend(),
            });
        }
        let p = ct.payload();
        if p.len() < BODY_LEN {
            return Err(CryptoError::Corrupted("payload too short"));
        }
        let (id, rest) = p.split_at(KEY_ID_LEN);
        let (nonce, rest) = rest.split_at(NONCE_LEN);
        let (masked, rest) = rest.split_at(4);
        let tag = &rest[..TAG_LEN];

        let trivial_key;
        let key = if ct.is_trivial() {
            if id != [0; KEY_ID_LEN] {
                return Err(CryptoError::Corrupted("trivial ciphertext with key id"));
            }
            trivial_key = KeyView::trivial();
            &trivial_key
        } else {
            match key {
                Some(k) if k.id == id => k,
                Some(_) => return Err(CryptoError::KeyMismatch),
                None => return Err(CryptoError::KeyMismatch),
            }
        };
        if key.tag(nonce, masked, ct.width(), ct.is_trivial()) != tag {
            return Err(CryptoError::Corrupted("authentication tag mismatch"));
        }
        let ks = key.keystream(nonce);
        let mut value = [0u8; 4];
        for i in 0..4 {
            value[i] = masked[i] ^ ks[i];
        }
        PlainScalar::new(u32::from_be_bytes(value) as u64, ct.width())
            .map_err(|_| CryptoError::Corrupted("plaintext exceeds width"))
    }
}

fn apply(op: HeOp, width: Width, args: &[u32]) -> u32 {
    let modulus_mask = width.max_value() as u64;
    match op {
        HeOp::Eq => (args[0] == args[1]) as u32,
        HeOp::Lt => (args[0] < args[1]) as u32,
        HeOp::Le => (args[0] <= args[1]) as u32,
        HeOp::And => args[0] & args[1],
        HeOp::Or => args[0] | args[1],
        HeOp::Add => ((args[0] as u64 + args[1] as u64) & modulus_mask) as u32,
        HeOp::Max => args[0].max(args[1]),
        HeOp::Min => args[0].min(args[1]),
        HeOp::Cmux => {
            if args[0] == 1 {
                args[1]
            } else {
                args[2]
            }
        }
    }
}

impl FheBackend for SimBackend {
    fn backend_id(&self) -> BackendId {
        BackendId::SIM
    }

    fn keygen(&self, security_param: u32) -> Result<KeyMaterial, CryptoError> {
        if !SUPPORTED_SECURITY_PARAMS.contains(&security_param) {
            return Err(CryptoError::UnsupportedSecurityParam(security_param));
        }
        let mut sk = vec![0u8; 32];
        self.keygen_rng.lock().fill_bytes(&mut sk);
        let view = KeyView::from_secret(&sk)?;
        let public = view.to_public();
        Ok(KeyMaterial {
            backend: BackendId::SIM,
            security_param,
            public_key: public.clone(),
            secret_key: sk,
            evaluation_key: public,
        })
    }

    fn encrypt(&self, key: &KeyMaterial, m: PlainScalar) -> Result<Ciphertext, CryptoError> {
        let view = if !key.public_key.is_empty() {
            KeyView::from_public(&key.public_key)?
        } else {
            KeyView::from_secret(&key.secret_key)?
        };
        self.stats.record(OpKind::Encrypt, m.width());
        Ok(self.seal(&view, m, false))
    }

    fn trivial_encrypt(&self, m: PlainScalar) -> Result<Ciphertext, CryptoError> {
        self.stats.record(OpKind::TrivialEncrypt, m.width());
        Ok(self.seal(&KeyView::trivial(), m, true))
    }

    fn decrypt(&self, key: &KeyMaterial, c: &Ciphertext) -> Result<PlainScalar, CryptoError> {
        let view = KeyView::from_secret(&key.secret_key)?;
        let m = self.open(Some(&view), c)?;
        self.stats.record(OpKind::Decrypt, c.width());
        Ok(m)
    }

    fn eval(&self, evk: &EvaluationKey, op: HeOp, operands: &[&Ciphertext]) -> Result<Ciphertext, CryptoError> {
        if evk.backend != BackendId::SIM {
            return Err(CryptoError::BackendMismatch {
                expected: BackendId::SIM,
                found: evk.backend,
            });
        }
        let charge = op.check(operands)?;
        let view = KeyView::from_public(evk.as_bytes())?;
        let mut args = [0u32; 3];
        for (slot, ct) in args.iter_mut().zip(operands) {
            *slot = self.open(Some(&view), ct)?.value();
        }
        let value = apply(op, charge.width, &args[..operands.len()]);
        let m = PlainScalar::new(value as u64, charge.result).expect("operator result fits its width");
        self.stats.record(charge.kind, charge.width);
        let all_trivial = operands.iter().all(|c| c.is_trivial());
        Ok(if all_trivial {
            self.seal(&KeyView::trivial(), m, true)
        } else {
            self.seal_with(&view, m, false, self.eval_nonce(op, operands))
        })
    }

    fn stats(&self) -> BackendStats {
        self.stats.snapshot()
    }

    fn reset_stats(&self) {
        self.stats.reset();
    }
}
