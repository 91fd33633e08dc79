//! Key directory layout.
//!
//! ```text
//! <dir>/fhe.key        FHE key material (secret)
//! <dir>/signing.json   ed25519 signing key (secret)
//! <dir>/owner.json     public registration for the server
//! <dir>/principal.json public verification key, for delegates
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fhesql::access::{verification_key_from_base64, verification_key_to_base64, OwnerKeypair, VerifyingKey};
use fhesql::crypto::KeyMaterial;
use fhesql::engine::OwnerRecord;
use serde::{Deserialize, Serialize};

pub const FHE_KEY: &str = "fhe.key";
pub const SIGNING: &str = "signing.json";
pub const OWNER: &str = "owner.json";
pub const PRINCIPAL: &str = "principal.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct PrincipalFile {
    pub id: String,
    pub verification_key: String,
}

impl PrincipalFile {
    pub fn of(kp: &OwnerKeypair) -> PrincipalFile {
        PrincipalFile {
            id: kp.owner_id.clone(),
            verification_key: verification_key_to_base64(&kp.verification_key()),
        }
    }

    pub fn load(path: &Path) -> Result<(String, VerifyingKey)> {
        let text = read(path)?;
        let p: PrincipalFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let k = verification_key_from_base64(&p.verification_key).map_err(anyhow::Error::msg)?;
        Ok((p.id, k))
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Writes `files` into `dir`, refusing to replace any existing one unless
/// `force` is set.
pub fn write_all(dir: &Path, files: &[(&str, String)], force: bool) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let paths: Vec<PathBuf> = files.iter().map(|(n, _)| dir.join(n)).collect();
    if !force {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            bail!("{} already exists; pass --force to overwrite", p.display());
        }
    }
    for (p, (_, body)) in paths.iter().zip(files) {
        std::fs::write(p, body).with_context(|| format!("writing {}", p.display()))?;
        restrict(p)?;
    }
    Ok(paths)
}

#[cfg(unix)]
fn restrict(p: &Path) -> Result<()> {
    use std::os::unix::fs::PermissionsExt;
    let public = p.file_name().is_some_and(|n| n == OWNER || n == PRINCIPAL);
    let mode = if public { 0o644 } else { 0o600 };
    std::fs::set_permissions(p, std::fs::Permissions::from_mode(mode)).with_context(|| format!("chmod {}", p.display()))
}

#[cfg(not(unix))]
fn restrict(_: &Path) -> Result<()> {
    Ok(())
}

pub fn load_fhe_key(dir: &Path) -> Result<KeyMaterial> {
    let p = dir.join(FHE_KEY);
    serde_json::from_str(&read(&p)?).with_context(|| format!("parsing {}", p.display()))
}

pub fn load_signing(dir: &Path) -> Result<OwnerKeypair> {
    let p = dir.join(SIGNING);
    OwnerKeypair::from_json(&read(&p)?).map_err(|e| anyhow::anyhow!("parsing {}: {e}", p.display()))
}

pub fn load_owner(path: &Path) -> Result<OwnerRecord> {
    OwnerRecord::from_json(&read(path)?).map_err(|e| anyhow::anyhow!("parsing {}: {e}", path.display()))
}

/// `*.json` files of a directory, sorted; empty when it does not exist.
pub fn json_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    out.sort();
    Ok(out)
}
