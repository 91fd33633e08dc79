//! Hybrid persistence: content-addressed blob segments plus an ordered
//! metadata store that maps table cells to blob hashes.

mod blob;
mod cache;
mod hybrid;
mod meta;
mod segment;

use std::fmt;
use std::io;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use blob::{BlobStore, BlobStoreConfig, SegmentInfo};
pub use cache::{CacheConfig, CacheStats, CacheTier};
pub use hybrid::{HybridStore, IntegrityReport, StoreConfig};
pub use meta::{MetaStore, MetadataEntry, TableCatalog};

/// SHA-256 of a blob's bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlobHash(pub [u8; 32]);

impl BlobHash {
    pub fn of(bytes: &[u8]) -> BlobHash {
        BlobHash(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<BlobHash> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).ok()?;
        Some(BlobHash(out))
    }
}

impl fmt::Debug for BlobHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BlobHash({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for BlobHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for BlobHash {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for BlobHash {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        BlobHash::from_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 64 hex digits"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StorageError {
    #[error("blob {0} not found")]
    NotFound(BlobHash),
    #[error("checksum mismatch reading blob {0}")]
    Checksum(BlobHash),
    #[error("empty blobs cannot be stored")]
    EmptyBlob,
    #[error("storage full: limit {limit} bytes")]
    Full { limit: u64 },
    #[error("corrupt storage: {0}")]
    Corrupt(String),
    #[error("unknown table {0:?}")]
    UnknownTable(String),
    #[error("table {0:?} already exists")]
    TableExists(String),
    #[error("no cell {table}/{row_id}/{column}")]
    UnknownCell { table: String, row_id: u64, column: String },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("metadata store: {0}")]
    Metadata(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

macro_rules! from_redb {
    ($($t:ty),*) => {$(
        impl From<$t> for StorageError {
            fn from(e: $t) -> Self {
                StorageError::Metadata(e.to_string())
            }
        }
    )*};
}

from_redb!(
    redb::Error,
    redb::DatabaseError,
    redb::TransactionError,
    redb::TableError,
    redb::StorageError,
    redb::CommitError
);
