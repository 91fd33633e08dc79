use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::blob::{BlobStore, BlobStoreConfig};
use super::meta::{MetaStore, MetadataEntry, TableCatalog};
use super::{BlobHash, StorageError};
use crate::crypto::Ciphertext;
use crate::schema::{EncryptedRow, TableSchema};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoreConfig {
    pub blob: BlobStoreConfig,
}

/// Outcome of a consistency check (or of the repair done at open).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IntegrityReport {
    pub entries: usize,
    /// Cells whose key or value hash did not resolve.
    pub dangling: Vec<(String, u64, String)>,
    /// Blobs no cell refers to.
    pub orphan_blobs: usize,
    /// Tables whose catalog row count disagrees with the metadata.
    pub row_count_mismatches: Vec<String>,
    /// Rows removed at open because some cell did not resolve.
    pub dropped_rows: Vec<(String, u64)>,
}

impl IntegrityReport {
    pub fn is_clean(&self) -> bool {
        self.dangling.is_empty() && self.orphan_blobs == 0 && self.row_count_mismatches.is_empty()
    }
}

/// Metadata store and blob segments behind one interface.
///
/// Writes put ciphertext bytes into the blob store (synced) before the
/// metadata transaction commits, so a crash in between leaves unreferenced
/// blobs but never a cell pointing at missing bytes. Orphans are collected
/// on the next open.
pub struct HybridStore {
    dir: PathBuf,
    blobs: BlobStore,
    meta: MetaStore,
    /// Number of cell references per blob; content addressing lets cells share.
    refs: Mutex<HashMap<BlobHash, u64>>,
    writer: Mutex<()>,
    recovery: IntegrityReport,
}

impl std::fmt::Debug for HybridStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HybridStore")
            .field("dir", &self.dir)
            .finish_non_exhaustive()
    }
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl HybridStore {
    pub fn open(dir: impl AsRef<Path>, cfg: StoreConfig) -> Result<HybridStore, StorageError> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        let blobs = BlobStore::open(dir.join("blobs"), cfg.blob)?;
        let meta = MetaStore::open(dir.join("meta.redb"))?;

        let mut report = IntegrityReport::default();
        let entries = meta.all_entries()?;
        for e in &entries {
            report.entries += 1;
            if !(blobs.contains(&e.key_hash) && blobs.contains(&e.value_hash)) {
                report.dangling.push((e.table.clone(), e.row_id, e.column.clone()));
            }
        }
        // a row with any unresolved cell is dropped whole
        let broken: HashSet<(String, u64)> = report.dangling.iter().map(|(t, r, _)| (t.clone(), *r)).collect();
        let mut refs: HashMap<BlobHash, u64> = HashMap::new();
        let mut doomed = Vec::new();
        for e in entries {
            if broken.contains(&(e.table.clone(), e.row_id)) {
                doomed.push((e.table, e.row_id, e.column));
            } else {
                *refs.entry(e.key_hash).or_default() += 1;
                *refs.entry(e.value_hash).or_default() += 1;
            }
        }
        if !doomed.is_empty() {
            meta.delete_entries(&doomed)?;
        }
        report.dropped_rows = broken.into_iter().collect();
        report.dropped_rows.sort();
        for h in blobs.live_hashes() {
            if !refs.contains_key(&h) {
                report.orphan_blobs += 1;
                blobs.delete_blob(&h)?;
            }
        }
        Ok(HybridStore {
            dir,
            blobs,
            meta,
            refs: Mutex::new(refs),
            writer: Mutex::new(()),
            recovery: report,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// What `open` had to repair.
    pub fn recovery_report(&self) -> &IntegrityReport {
        &self.recovery
    }

    pub fn blobs(&self) -> &BlobStore {
        &self.blobs
    }

    pub fn meta(&self) -> &MetaStore {
        &self.meta
    }

    pub fn create_table(&self, schema: TableSchema) -> Result<TableCatalog, StorageError> {
        if schema.columns.is_empty() {
            return Err(StorageError::SchemaMismatch("a table needs at least one column".into()));
        }
        self.meta.create_table(schema)
    }

    pub fn catalog(&self, table: &str) -> Result<TableCatalog, StorageError> {
        self.meta.catalog(table)
    }

    pub fn tables(&self) -> Result<Vec<TableCatalog>, StorageError> {
        self.meta.catalogs()
    }

    pub fn insert_row(&self, table: &str, cells: Vec<Ciphertext>, owner_id: &str) -> Result<u64, StorageError> {
        Ok(self.insert_rows(table, vec![cells], owner_id)?[0])
    }

    /// Appends rows with fresh row ids. All blobs are written and synced in
    /// one batch, then all metadata in one transaction.
    pub fn insert_rows(
        &self,
        table: &str,
        rows: Vec<Vec<Ciphertext>>,
        owner_id: &str,
    ) -> Result<Vec<u64>, StorageError> {
        let _w = self.writer.lock();
        let cat = self.meta.catalog(table)?;
        let mut payloads = Vec::new();
        for (i, cells) in rows.iter().enumerate() {
            EncryptedRow {
                row_id: cat.next_row_id + i as u64,
                cells: cells.clone(),
            }
            .check(&cat.schema)
            .map_err(StorageError::SchemaMismatch)?;
            payloads.extend(cells.iter().map(Ciphertext::to_bytes));
        }
        let slices: Vec<&[u8]> = payloads.iter().map(Vec::as_slice).collect();
        let hashes = self.blobs.put_blobs(&slices)?;

        let ts = now_secs();
        let ncols = cat.schema.columns.len();
        let mut entries = Vec::with_capacity(hashes.len());
        let mut ids = Vec::with_capacity(rows.len());
        for (i, row_hashes) in hashes.chunks(ncols).enumerate() {
            let row_id = cat.next_row_id + i as u64;
            ids.push(row_id);
            for (col, h) in cat.schema.columns.iter().zip(row_hashes) {
                entries.push(MetadataEntry {
                    key_hash: row_hashes[0],
                    value_hash: *h,
                    table: table.to_string(),
                    column: col.name.clone(),
                    row_id,
                    owner_id: owner_id.to_string(),
                    timestamp: ts,
                });
            }
        }
        let mut refs = self.refs.lock();
        if let Err(e) = self.meta.put_entries(&entries) {
            // blobs nobody references yet; drop them so they do not linger
            for h in &hashes {
                if !refs.contains_key(h) && self.blobs.contains(h) {
                    let _ = self.blobs.delete_blob(h);
                }
            }
            return Err(e);
        }
        for e in &entries {
            *refs.entry(e.key_hash).or_default() += 1;
            *refs.entry(e.value_hash).or_default() += 1;
        }
        Ok(ids)
    }

    pub fn delete_row(&self, table: &str, row_id: u64) -> Result<(), StorageError> {
        let _w = self.writer.lock();
        let removed = self.meta.delete_row(table, row_id)?;
        let mut refs = self.refs.lock();
        for e in removed {
            for h in [e.key_hash, e.value_hash] {
                let n = refs.get_mut(&h).expect("referenced blob has a count");
                *n -= 1;
                if *n == 0 {
                    refs.remove(&h);
                    self.blobs.delete_blob(&h)?;
                }
            }
        }
        Ok(())
    }

    pub fn scan_table(&self, table: &str) -> Result<Vec<Vec<MetadataEntry>>, StorageError> {
        self.meta.scan_table(table)
    }

    /// Loads and decodes one row group, in catalog column order.
    pub fn fetch_row(&self, cat: &TableCatalog, group: &[MetadataEntry]) -> Result<EncryptedRow, StorageError> {
        let row_id = group
            .first()
            .map(|e| e.row_id)
            .ok_or_else(|| StorageError::Corrupt("empty row group".into()))?;
        let mut cells = Vec::with_capacity(cat.schema.columns.len());
        for col in &cat.schema.columns {
            let e = group
                .iter()
                .find(|e| e.column == col.name)
                .ok_or_else(|| StorageError::Corrupt(format!("row {row_id} lacks column {}", col.name)))?;
            let bytes = self.blobs.get_blob(&e.value_hash).map_err(|err| match err {
                StorageError::NotFound(h) => StorageError::Corrupt(format!(
                    "cell {}/{row_id}/{} points at missing blob {h}",
                    e.table, e.column
                )),
                other => other,
            })?;
            let ct = Ciphertext::from_bytes(&bytes)
                .map_err(|err| StorageError::Corrupt(format!("cell {}/{row_id}/{}: {err}", e.table, e.column)))?;
            cells.push(ct);
        }
        let row = EncryptedRow { row_id, cells };
        row.check(&cat.schema).map_err(StorageError::Corrupt)?;
        Ok(row)
    }

    /// Full scan: catalog plus every row in row-id order.
    pub fn load_table(&self, table: &str) -> Result<(TableCatalog, Vec<EncryptedRow>), StorageError> {
        let cat = self.meta.catalog(table)?;
        let rows = self
            .meta
            .scan_table(table)?
            .iter()
            .map(|g| self.fetch_row(&cat, g))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((cat, rows))
    }

    pub fn compact(&self) -> Result<u64, StorageError> {
        self.blobs.compact()
    }

    /// Cross-checks metadata, blobs and catalogs without repairing anything.
    pub fn check_integrity(&self) -> Result<IntegrityReport, StorageError> {
        let mut report = IntegrityReport::default();
        let mut referenced = std::collections::HashSet::new();
        for e in self.meta.all_entries()? {
            report.entries += 1;
            referenced.insert(e.key_hash);
            referenced.insert(e.value_hash);
            if !self.blobs.contains(&e.key_hash) || !self.blobs.contains(&e.value_hash) {
                report.dangling.push((e.table.clone(), e.row_id, e.column.clone()));
            }
        }
        report.orphan_blobs = self
            .blobs
            .live_hashes()
            .iter()
            .filter(|h| !referenced.contains(*h))
            .count();
        for cat in self.meta.catalogs()? {
            let rows = self.meta.scan_table(&cat.schema.name)?.len() as u64;
            if rows != cat.row_count {
                report.row_count_mismatches.push(cat.schema.name.clone());
            }
        }
        Ok(report)
    }
}
