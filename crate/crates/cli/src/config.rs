//! Server configuration: JSON file, then environment, then flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Sim,
    Fhe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

/// Every field has a default; a config file may set any subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub listen: String,
    pub data_dir: PathBuf,
    pub backend: BackendKind,
    pub cache_hot_bytes: u64,
    pub cache_warm_bytes: u64,
    pub latency_table: Option<PathBuf>,
    pub return_mask: bool,
    pub max_frame_bytes: usize,
    pub segment_bytes: u64,
    pub sync_writes: bool,
    pub transcript_capacity: usize,
    /// Owner registration files, in addition to `<data_dir>/owners/*.json`.
    pub owners: Vec<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            listen: "127.0.0.1:7878".into(),
            data_dir: PathBuf::from("fhesql-data"),
            backend: BackendKind::Sim,
            cache_hot_bytes: 64 << 20,
            cache_warm_bytes: 256 << 20,
            latency_table: None,
            return_mask: true,
            max_frame_bytes: 64 << 20,
            segment_bytes: 64 << 20,
            sync_writes: true,
            transcript_capacity: 1024,
            owners: Vec::new(),
        }
    }
}

#[derive(Debug, Args)]
pub struct ServerArgs {
    /// JSON config file; flags and environment override it.
    #[arg(long, env = "FHESQL_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, env = "FHESQL_LISTEN")]
    pub listen: Option<String>,
    #[arg(long, env = "FHESQL_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    #[arg(long, value_enum, env = "FHESQL_BACKEND")]
    pub backend: Option<BackendKind>,
    /// Hot cache tier capacity in bytes.
    #[arg(long, env = "FHESQL_CACHE_HOT")]
    pub cache_hot: Option<u64>,
    /// Warm cache tier capacity in bytes.
    #[arg(long, env = "FHESQL_CACHE_WARM")]
    pub cache_warm: Option<u64>,
    /// JSON map of `"<op>/<width>"` to milliseconds.
    #[arg(long, env = "FHESQL_LATENCY_TABLE")]
    pub latency_table: Option<PathBuf>,
    /// Send the encrypted selection mask with query results.
    #[arg(long, value_enum, env = "FHESQL_RETURN_MASK")]
    pub return_mask: Option<OnOff>,
    #[arg(long, env = "FHESQL_MAX_FRAME")]
    pub max_frame: Option<usize>,
    /// Owner registration file (repeatable).
    #[arg(long = "owner")]
    pub owners: Vec<PathBuf>,
}

impl ServerArgs {
    pub fn resolve(&self) -> Result<ServerConfig> {
        let mut cfg = match &self.config {
            Some(p) => load(p)?,
            None => ServerConfig::default(),
        };
        if let Some(v) = &self.listen {
            cfg.listen = v.clone();
        }
        if let Some(v) = &self.data_dir {
            cfg.data_dir = v.clone();
        }
        if let Some(v) = self.backend {
            cfg.backend = v;
        }
        if let Some(v) = self.cache_hot {
            cfg.cache_hot_bytes = v;
        }
        if let Some(v) = self.cache_warm {
            cfg.cache_warm_bytes = v;
        }
        if let Some(v) = &self.latency_table {
            cfg.latency_table = Some(v.clone());
        }
        if let Some(v) = self.return_mask {
            cfg.return_mask = v == OnOff::On;
        }
        if let Some(v) = self.max_frame {
            cfg.max_frame_bytes = v;
        }
        cfg.owners.extend(self.owners.iter().cloned());
        if cfg.max_frame_bytes == 0 {
            bail!("max frame size must be positive");
        }
        Ok(cfg)
    }
}

pub fn load(path: &Path) -> Result<ServerConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
