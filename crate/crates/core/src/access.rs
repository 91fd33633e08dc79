//! Signed delegation tokens.
//!
//! A root token is signed by the data owner. A holder with the `DELEGATE`
//! right can mint a child token for someone else, signed with the holder's
//! own key; the child embeds its parent. Verification walks the chain from
//! the root and requires permissions and expiries to shrink along it.
//!
//! Wire form (all integers big-endian):
//!
//! ```text
//! "FTOK" | ver u8 | body_len u32 | body | signature [64] | parent_len u32 | parent
//! body = lp(owner_id) lp(user_id) perms u8 expires_at u64 nonce [16] lp(parent_digest)
//! ```
//!
//! where `lp(x)` is a u32 length followed by the bytes and `parent_digest`
//! is the SHA-256 of the parent's wire form (empty for a root token).

use std::collections::HashMap;
use std::fmt;
use std::time::{SystemTime, UNIX_EPOCH};

use base64::Engine as _;
pub use ed25519_dalek::VerifyingKey;
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier};
use parking_lot::Mutex;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const MAGIC: &[u8; 4] = b"FTOK";
const VERSION: u8 = 1;
/// Guard against absurd chains in hostile input.
const MAX_CHAIN: usize = 16;

bitflags::bitflags! {
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
    pub struct Permissions: u8 {
        const READ = 1;
        const WRITE = 2;
        const DELETE = 4;
        const DELEGATE = 8;
    }
}

impl Permissions {
    /// Parses a comma list such as `read,delegate`.
    pub fn parse(s: &str) -> Result<Permissions, String> {
        let mut p = Permissions::empty();
        for part in s.split(',').map(str::trim).filter(|x| !x.is_empty()) {
            p |= match part.to_ascii_lowercase().as_str() {
                "read" => Permissions::READ,
                "write" => Permissions::WRITE,
                "delete" => Permissions::DELETE,
                "delegate" => Permissions::DELEGATE,
                other => return Err(format!("unknown permission {other:?}")),
            };
        }
        Ok(p)
    }

    pub fn names(self) -> Vec<&'static str> {
        self.iter_names()
            .map(|(n, _)| match n {
                "READ" => "read",
                "WRITE" => "write",
                "DELETE" => "delete",
                _ => "delegate",
            })
            .collect()
    }
}

impl Serialize for Permissions {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.names().serialize(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AuthError {
    #[error("permission set is empty")]
    EmptyPermissions,
    #[error("expiry {expires_at} is not after now ({now})")]
    PastExpiry { expires_at: u64, now: u64 },
    #[error("malformed token: {0}")]
    Malformed(&'static str),
    #[error("signature does not verify")]
    BadSignature,
    #[error("token expired at {0}")]
    Expired(u64),
    #[error("nonce already used")]
    Replayed,
    #[error("no verification key for {0:?}")]
    UnknownPrincipal(String),
    #[error("parent token does not grant delegation")]
    MissingDelegate,
    #[error("delegated token widens permissions or expiry")]
    Escalation,
    #[error("delegation chain is inconsistent: {0}")]
    BrokenChain(&'static str),
    #[error("token lacks the {0} permission")]
    Forbidden(&'static str),
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// A principal's signing keypair.
#[derive(Clone)]
pub struct OwnerKeypair {
    pub owner_id: String,
    signing_key: SigningKey,
}

impl fmt::Debug for OwnerKeypair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OwnerKeypair")
            .field("owner_id", &self.owner_id)
            .finish_non_exhaustive()
    }
}

#[derive(Serialize, Deserialize)]
struct KeypairFile {
    owner_id: String,
    secret: String,
}

impl OwnerKeypair {
    pub fn generate(owner_id: impl Into<String>) -> OwnerKeypair {
        let mut seed = [0u8; 32];
        rand::rng().fill_bytes(&mut seed);
        Self::from_seed(owner_id, seed)
    }

    pub fn from_seed(owner_id: impl Into<String>, seed: [u8; 32]) -> OwnerKeypair {
        OwnerKeypair {
            owner_id: owner_id.into(),
            signing_key: SigningKey::from_bytes(&seed),
        }
    }

    pub fn verification_key(&self) -> VerifyingKey {
        self.signing_key.verifying_key()
    }

    /// JSON with the secret seed in base64.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&KeypairFile {
            owner_id: self.owner_id.clone(),
            secret: base64::engine::general_purpose::STANDARD.encode(self.signing_key.to_bytes()),
        })
        .expect("keypair serializes")
    }

    pub fn from_json(s: &str) -> Result<OwnerKeypair, String> {
        let f: KeypairFile = serde_json::from_str(s).map_err(|e| e.to_string())?;
        let raw = base64::engine::general_purpose::STANDARD
            .decode(f.secret)
            .map_err(|e| e.to_string())?;
        let seed: [u8; 32] = raw.try_into().map_err(|_| "signing key must be 32 bytes".to_string())?;
        Ok(Self::from_seed(f.owner_id, seed))
    }
}

pub fn verification_key_to_base64(k: &VerifyingKey) -> String {
    base64::engine::general_purpose::STANDARD.encode(k.as_bytes())
}

pub fn verification_key_from_base64(s: &str) -> Result<VerifyingKey, String> {
    let raw = base64::engine::general_purpose::STANDARD
        .decode(s.trim())
        .map_err(|e| e.to_string())?;
    let arr: [u8; 32] = raw
        .try_into()
        .map_err(|_| "verification key must be 32 bytes".to_string())?;
    VerifyingKey::from_bytes(&arr).map_err(|e| e.to_string())
}

/// Maps a principal to the key its signatures verify under.
pub trait VerificationKeys: Send + Sync {
    fn key_for(&self, principal: &str) -> Option<VerifyingKey>;
}

impl VerificationKeys for HashMap<String, VerifyingKey> {
    fn key_for(&self, principal: &str) -> Option<VerifyingKey> {
        self.get(principal).copied()
    }
}

impl VerificationKeys for (String, VerifyingKey) {
    fn key_for(&self, principal: &str) -> Option<VerifyingKey> {
        (self.0 == principal).then_some(self.1)
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct DelegationToken {
    pub owner_id: String,
    pub user_id: String,
    pub permissions: Permissions,
    pub expires_at: u64,
    pub nonce: [u8; 16],
    pub signature: [u8; 64],
    pub parent: Option<Box<DelegationToken>>,
}

impl fmt::Debug for DelegationToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DelegationToken")
            .field("owner_id", &self.owner_id)
            .field("user_id", &self.user_id)
            .field("permissions", &self.permissions)
            .field("expires_at", &self.expires_at)
            .field("depth", &self.depth())
            .finish_non_exhaustive()
    }
}

fn put_lp(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_be_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], AuthError> {
        if self.buf.len() < n {
            return Err(AuthError::Malformed("truncated"));
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }

    fn u32(&mut self) -> Result<u32, AuthError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn lp(&mut self) -> Result<&'a [u8], AuthError> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn string(&mut self) -> Result<String, AuthError> {
        String::from_utf8(self.lp()?.to_vec()).map_err(|_| AuthError::Malformed("identifier is not UTF-8"))
    }
}

impl DelegationToken {
    /// The signed portion.
    pub fn canonical_body(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_lp(&mut out, self.owner_id.as_bytes());
        put_lp(&mut out, self.user_id.as_bytes());
        out.push(self.permissions.bits());
        out.extend_from_slice(&self.expires_at.to_be_bytes());
        out.extend_from_slice(&self.nonce);
        let digest = self.parent.as_ref().map(|p| Sha256::digest(p.to_bytes()).to_vec());
        put_lp(&mut out, digest.as_deref().unwrap_or(&[]));
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let body = self.canonical_body();
        let mut out = Vec::with_capacity(body.len() + 80);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        put_lp(&mut out, &body);
        out.extend_from_slice(&self.signature);
        let parent = self.parent.as_ref().map(|p| p.to_bytes());
        put_lp(&mut out, parent.as_deref().unwrap_or(&[]));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<DelegationToken, AuthError> {
        Self::decode(bytes, 0)
    }

    fn decode(bytes: &[u8], depth: usize) -> Result<DelegationToken, AuthError> {
        if depth >= MAX_CHAIN {
            return Err(AuthError::Malformed("delegation chain too long"));
        }
        let mut r = Reader { buf: bytes };
        if r.take(4)? != MAGIC {
            return Err(AuthError::Malformed("bad magic"));
        }
        if r.take(1)?[0] != VERSION {
            return Err(AuthError::Malformed("unsupported version"));
        }
        let body = r.lp()?;
        let signature: [u8; 64] = r.take(64)?.try_into().unwrap();
        let parent_bytes = r.lp()?;
        if !r.buf.is_empty() {
            return Err(AuthError::Malformed("trailing bytes"));
        }
        let mut b = Reader { buf: body };
        let owner_id = b.string()?;
        let user_id = b.string()?;
        let permissions =
            Permissions::from_bits(b.take(1)?[0]).ok_or(AuthError::Malformed("unknown permission bits"))?;
        let expires_at = u64::from_be_bytes(b.take(8)?.try_into().unwrap());
        let nonce: [u8; 16] = b.take(16)?.try_into().unwrap();
        let digest = b.lp()?;
        if !b.buf.is_empty() {
            return Err(AuthError::Malformed("trailing body bytes"));
        }
        let parent = if parent_bytes.is_empty() {
            if !digest.is_empty() {
                return Err(AuthError::Malformed("parent digest without parent"));
            }
            None
        } else {
            if digest != Sha256::digest(parent_bytes).as_slice() {
                return Err(AuthError::BrokenChain("parent digest mismatch"));
            }
            Some(Box::new(Self::decode(parent_bytes, depth + 1)?))
        };
        Ok(DelegationToken {
            owner_id,
            user_id,
            permissions,
            expires_at,
            nonce,
            signature,
            parent,
        })
    }

    pub fn to_base64(&self) -> String {
        base64::engine::general_purpose::STANDARD.encode(self.to_bytes())
    }

    pub fn from_base64(s: &str) -> Result<DelegationToken, AuthError> {
        let raw = base64::engine::general_purpose::STANDARD
            .decode(s.trim())
            .map_err(|_| AuthError::Malformed("not base64"))?;
        Self::from_bytes(&raw)
    }

    pub fn has_permission(&self, p: Permissions) -> bool {
        self.permissions.contains(p)
    }

    /// Number of links above this token.
    pub fn depth(&self) -> usize {
        self.parent.as_ref().map_or(0, |p| 1 + p.depth())
    }

    /// The principal whose key signs this token.
    pub fn signer(&self) -> &str {
        match &self.parent {
            Some(p) => &p.user_id,
            None => &self.owner_id,
        }
    }

    /// Links from the root down to `self`.
    pub fn chain(&self) -> Vec<&DelegationToken> {
        let mut v = match &self.parent {
            Some(p) => p.chain(),
            None => Vec::new(),
        };
        v.push(self);
        v
    }

    fn sign(mut self, key: &SigningKey) -> DelegationToken {
        self.signature = key.sign(&self.canonical_body()).to_bytes();
        self
    }
}

fn fresh_nonce() -> [u8; 16] {
    let mut n = [0u8; 16];
    rand::rng().fill_bytes(&mut n);
    n
}

fn check_new(permissions: Permissions, expires_at: u64, now: u64) -> Result<(), AuthError> {
    if permissions.is_empty() {
        return Err(AuthError::EmptyPermissions);
    }
    if expires_at <= now {
        return Err(AuthError::PastExpiry { expires_at, now });
    }
    Ok(())
}

pub fn create_token(
    keypair: &OwnerKeypair,
    user_id: &str,
    permissions: Permissions,
    expires_at: u64,
) -> Result<DelegationToken, AuthError> {
    create_token_at(keypair, user_id, permissions, expires_at, unix_now())
}

pub fn create_token_at(
    keypair: &OwnerKeypair,
    user_id: &str,
    permissions: Permissions,
    expires_at: u64,
    now: u64,
) -> Result<DelegationToken, AuthError> {
    check_new(permissions, expires_at, now)?;
    Ok(DelegationToken {
        owner_id: keypair.owner_id.clone(),
        user_id: user_id.to_string(),
        permissions,
        expires_at,
        nonce: fresh_nonce(),
        signature: [0; 64],
        parent: None,
    }
    .sign(&keypair.signing_key))
}

/// Mints a child of `parent` for `user_id`, signed by the parent's holder.
pub fn delegate(
    parent: &DelegationToken,
    delegate_keypair: &OwnerKeypair,
    user_id: &str,
    permissions: Permissions,
    expires_at: u64,
) -> Result<DelegationToken, AuthError> {
    delegate_at(parent, delegate_keypair, user_id, permissions, expires_at, unix_now())
}

pub fn delegate_at(
    parent: &DelegationToken,
    delegate_keypair: &OwnerKeypair,
    user_id: &str,
    permissions: Permissions,
    expires_at: u64,
    now: u64,
) -> Result<DelegationToken, AuthError> {
    if !parent.has_permission(Permissions::DELEGATE) {
        return Err(AuthError::MissingDelegate);
    }
    if !parent.permissions.contains(permissions) || expires_at > parent.expires_at {
        return Err(AuthError::Escalation);
    }
    if delegate_keypair.owner_id != parent.user_id {
        return Err(AuthError::BrokenChain(
            "delegating key does not belong to the parent's holder",
        ));
    }
    check_new(permissions, expires_at, now)?;
    Ok(DelegationToken {
        owner_id: parent.owner_id.clone(),
        user_id: user_id.to_string(),
        permissions,
        expires_at,
        nonce: fresh_nonce(),
        signature: [0; 64],
        parent: Some(Box::new(parent.clone())),
    }
    .sign(&delegate_keypair.signing_key))
}

/// Nonces seen so far, each retained until its token expires.
#[derive(Debug, Default)]
pub struct NonceCache {
    seen: Mutex<HashMap<[u8; 16], u64>>,
}

impl NonceCache {
    pub fn new() -> NonceCache {
        NonceCache::default()
    }

    /// Atomically records `nonce`; false if it was already present.
    pub fn check_and_insert(&self, nonce: [u8; 16], expires_at: u64, now: u64) -> bool {
        let mut seen = self.seen.lock();
        if seen.len() >= 4096 && seen.len().is_power_of_two() {
            seen.retain(|_, exp| *exp > now);
        }
        match seen.get(&nonce) {
            Some(exp) if *exp > now => false,
            _ => {
                seen.insert(nonce, expires_at);
                true
            }
        }
    }

    pub fn len(&self) -> usize {
        self.seen.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Checks signatures, expiry, attenuation and the nonce, in that order.
/// Returns the permissions of the leaf token.
pub fn verify_token(
    token: &DelegationToken,
    keys: &dyn VerificationKeys,
    now: u64,
    nonces: &NonceCache,
) -> Result<Permissions, AuthError> {
    let chain = token.chain();
    if chain.len() > MAX_CHAIN {
        return Err(AuthError::Malformed("delegation chain too long"));
    }
    for link in &chain {
        let signer = link.signer();
        let key = keys
            .key_for(signer)
            .ok_or_else(|| AuthError::UnknownPrincipal(signer.to_string()))?;
        key.verify(&link.canonical_body(), &Signature::from_bytes(&link.signature))
            .map_err(|_| AuthError::BadSignature)?;
    }
    for link in &chain {
        if now >= link.expires_at {
            return Err(AuthError::Expired(link.expires_at));
        }
    }
    for pair in chain.windows(2) {
        let (p, c) = (pair[0], pair[1]);
        if c.owner_id != p.owner_id {
            return Err(AuthError::BrokenChain("owner changes along the chain"));
        }
        if !p.has_permission(Permissions::DELEGATE) {
            return Err(AuthError::MissingDelegate);
        }
        if !p.permissions.contains(c.permissions) || c.expires_at > p.expires_at {
            return Err(AuthError::Escalation);
        }
    }
    if token.permissions.is_empty() {
        return Err(AuthError::EmptyPermissions);
    }
    if !nonces.check_and_insert(token.nonce, token.expires_at, now) {
        return Err(AuthError::Replayed);
    }
    Ok(token.permissions)
}

#[cfg(test)]
mod tests {
    use super::*;

    const NOW: u64 = 1_000_000;

    fn owner() -> OwnerKeypair {
        OwnerKeypair::from_seed("owner", [1; 32])
    }

    fn keys() -> HashMap<String, VerifyingKey> {
        let mut m = HashMap::new();
        m.insert("owner".to_string(), owner().verification_key());
        m.insert(
            "bob".to_string(),
            OwnerKeypair::from_seed("bob", [2; 32]).verification_key(),
        );
        m
    }

    #[test]
    fn create_verify_replay() {
        let t = create_token_at(&owner(), "bob", Permissions::READ, NOW + 60, NOW).unwrap();
        assert!(t.has_permission(Permissions::READ));
        assert!(!t.has_permission(Permissions::WRITE));
        let cache = NonceCache::new();
        assert_eq!(verify_token(&t, &keys(), NOW, &cache), Ok(Permissions::READ));
        assert_eq!(verify_token(&t, &keys(), NOW, &cache), Err(AuthError::Replayed));
        assert_eq!(
            verify_token(&t, &keys(), NOW + 60, &NonceCache::new()),
            Err(AuthError::Expired(NOW + 60))
        );
        // a replay after the token expired is still rejected, as expired
        assert_eq!(
            verify_token(&t, &keys(), NOW + 61, &cache),
            Err(AuthError::Expired(NOW + 60))
        );
    }

    #[test]
    fn creation_errors() {
        assert_eq!(
            create_token_at(&owner(), "bob", Permissions::empty(), NOW + 1, NOW),
            Err(AuthError::EmptyPermissions)
        );
        assert!(matches!(
            create_token_at(&owner(), "bob", Permissions::READ, NOW, NOW),
            Err(AuthError::PastExpiry { .. })
        ));
    }

    #[test]
    fn wire_roundtrip_and_signature_flip() {
        let t = create_token_at(&owner(), "bob", Permissions::READ | Permissions::WRITE, NOW + 5, NOW).unwrap();
        let back = DelegationToken::from_base64(&t.to_base64()).unwrap();
        assert_eq!(back, t);
        let mut bad = t.clone();
        bad.signature[0] ^= 1;
        assert_eq!(
            verify_token(&bad, &keys(), NOW, &NonceCache::new()),
            Err(AuthError::BadSignature)
        );
        let mut bad = t.clone();
        bad.permissions |= Permissions::DELETE;
        assert_eq!(
            verify_token(&bad, &keys(), NOW, &NonceCache::new()),
            Err(AuthError::BadSignature)
        );
    }

    #[test]
    fn delegation_chain() {
        let bob = OwnerKeypair::from_seed("bob", [2; 32]);
        let parent = create_token_at(
            &owner(),
            "bob",
            Permissions::READ | Permissions::DELEGATE,
            NOW + 100,
            NOW,
        )
        .unwrap();
        let child = delegate_at(&parent, &bob, "carol", Permissions::READ, NOW + 50, NOW).unwrap();
        assert_eq!(child.depth(), 1);
        assert_eq!(child.signer(), "bob");
        let child = DelegationToken::from_bytes(&child.to_bytes()).unwrap();
        assert_eq!(
            verify_token(&child, &keys(), NOW, &NonceCache::new()),
            Ok(Permissions::READ)
        );
        assert_eq!(
            delegate_at(&parent, &bob, "carol", Permissions::WRITE, NOW + 50, NOW),
            Err(AuthError::Escalation)
        );
        assert_eq!(
            delegate_at(&parent, &bob, "carol", Permissions::READ, NOW + 101, NOW),
            Err(AuthError::Escalation)
        );
        let read_only = create_token_at(&owner(), "bob", Permissions::READ, NOW + 100, NOW).unwrap();
        assert_eq!(
            delegate_at(&read_only, &bob, "carol", Permissions::READ, NOW + 50, NOW),
            Err(AuthError::MissingDelegate)
        );
        // a forged link signed by the wrong holder
        let mallory = OwnerKeypair::from_seed("bob", [9; 32]);
        let forged = delegate_at(&parent, &mallory, "carol", Permissions::READ, NOW + 50, NOW).unwrap();
        assert_eq!(
            verify_token(&forged, &keys(), NOW, &NonceCache::new()),
            Err(AuthError::BadSignature)
        );
    }

    #[test]
    fn permissions_parse() {
        assert_eq!(
            Permissions::parse("read, Delegate").unwrap(),
            Permissions::READ | Permissions::DELEGATE
        );
        assert!(Permissions::parse("admin").is_err());
        assert_eq!(Permissions::all().names(), vec!["read", "write", "delete", "delegate"]);
    }

    #[test]
    fn keypair_file_roundtrip() {
        let k = owner();
        let back = OwnerKeypair::from_json(&k.to_json()).unwrap();
        assert_eq!(back.verification_key(), k.verification_key());
        let vk = verification_key_from_base64(&verification_key_to_base64(&k.verification_key())).unwrap();
        assert_eq!(vk, k.verification_key());
    }
}
