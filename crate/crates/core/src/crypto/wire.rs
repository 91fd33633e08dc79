//! `FHEC` ciphertext encoding.
//!
//! ```text
//! magic "FHEC" | version u8 (=1) | backend u8 | width u8 (1|8|32) | trivial u8 (0|1)
//!   | payload_len u32 BE | payload
//! ```

use base64::engine::general_purpose::STANDARD;
use base64::Engine;

use super::{BackendId, Ciphertext, CryptoError, Width};

pub const MAGIC: &[u8; 4] = b"FHEC";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 12;

impl Ciphertext {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.backend.0);
        out.push(self.width.bits());
        out.push(self.trivial as u8);
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Ciphertext, CryptoError> {
        let fmt = |m: &str| CryptoError::Format(m.to_string());
        if bytes.len() < HEADER_LEN {
            return Err(fmt("truncated header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(fmt("bad magic"));
        }
        if bytes[4] != VERSION {
            return Err(CryptoError::Format(format!("unsupported version {}", bytes[4])));
        }
        let backend = BackendId(bytes[5]);
        let width = Width::from_bits(bytes[6]).ok_or_else(|| CryptoError::Format(format!("bad width {}", bytes[6])))?;
        let trivial = match bytes[7] {
            0 => false,
            1 => true,
            b => return Err(CryptoError::Format(format!("bad trivial flag {b}"))),
        };
        let len = u32::from_be_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != len {
            return Err(CryptoError::Format(format!(
                "payload length {} does not match header {len}",
                payload.len()
            )));
        }
        Ok(Ciphertext::from_parts(backend, width, trivial, payload.to_vec()))
    }

    pub fn to_base64(&self) -> String {
        STANDARD.encode(self.to_bytes())
    }

    pub fn from_base64(text: &str) -> Result<Ciphertext, CryptoError> {
        let bytes = STANDARD
            .decode(text.as_bytes())
            .map_err(|e| CryptoError::Format(format!("base64: {e}")))?;
        Ciphertext::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let ct = Ciphertext::from_parts(BackendId(7), Width::W32, true, vec![0xAA, 0xBB]);
        assert_eq!(
            ct.to_bytes(),
            vec![b'F', b'H', b'E', b'C', 1, 7, 32, 1, 0, 0, 0, 2, 0xAA, 0xBB]
        );
    }

    #[test]
    fn rejects_bad_encodings() {
        let good = Ciphertext::from_parts(BackendId::SIM, Width::W8, false, vec![1, 2, 3]).to_bytes();
        assert!(Ciphertext::from_bytes(&good[..good.len() - 1]).is_err());
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(Ciphertext::from_bytes(&bad).is_err());
        let mut bad = good.clone();
        bad[6] = 16;
        assert!(Ciphertext::from_bytes(&bad).is_err());
        let mut bad = good;
        bad[7] = 2;
        assert!(Ciphertext::from_bytes(&bad).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(backend in any::<u8>(), w in 0usize..3, trivial in any::<bool>(),
                     payload in proptest::collection::vec(any::<u8>(), 0..256)) {
            let ct = Ciphertext::from_parts(BackendId(backend), Width::ALL[w], trivial, payload);
            prop_assert_eq!(Ciphertext::from_bytes(&ct.to_bytes()).unwrap(), ct.clone());
            prop_assert_eq!(Ciphertext::from_base64(&ct.to_base64()).unwrap(), ct);
        }
    }
}
