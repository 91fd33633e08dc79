//! Ordered metadata store: cell → (key hash, value hash) records and table
//! catalogs, kept in redb.
//!
//! Cell keys are `t/<table>/<row_id, 20 digits>/<column>` so a prefix range
//! yields a table in row order.

use std::collections::BTreeMap;
use std::path::Path;

use redb::{Database, ReadableTable, TableDefinition};
use serde::{Deserialize, Serialize};

use super::{BlobHash, StorageError};
use crate::schema::TableSchema;

const CELLS: TableDefinition<&str, &[u8]> = TableDefinition::new("cells");
const CATALOG: TableDefinition<&str, &[u8]> = TableDefinition::new("catalog");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataEntry {
    pub key_hash: BlobHash,
    pub value_hash: BlobHash,
    pub table: String,
    pub column: String,
    pub row_id: u64,
    pub owner_id: String,
    pub timestamp: u64,
}

impl MetadataEntry {
    pub fn storage_key(&self) -> String {
        cell_key(&self.table, self.row_id, &self.column)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableCatalog {
    pub schema: TableSchema,
    pub row_count: u64,
    /// Smallest row id never handed out.
    pub next_row_id: u64,
}

pub(crate) fn cell_key(table: &str, row_id: u64, column: &str) -> String {
    format!("t/{table}/{row_id:020}/{column}")
}

fn table_prefix(table: &str) -> (String, String) {
    // '0' follows '/' in ASCII, so this bounds exactly the table's keys
    (format!("t/{table}/"), format!("t/{table}0"))
}

fn row_prefix(table: &str, row_id: u64) -> (String, String) {
    (format!("t/{table}/{row_id:020}/"), format!("t/{table}/{row_id:020}0"))
}

fn decode<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<T, StorageError> {
    serde_json::from_slice(bytes).map_err(|e| StorageError::Corrupt(format!("metadata record: {e}")))
}

fn encode<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("metadata types serialize")
}

pub struct MetaStore {
    db: Database,
}

impl std::fmt::Debug for MetaStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MetaStore").finish_non_exhaustive()
    }
}

impl MetaStore {
    pub fn open(path: impl AsRef<Path>) -> Result<MetaStore, StorageError> {
        let db = Database::create(path.as_ref())?;
        let w = db.begin_write()?;
        w.open_table(CELLS)?;
        w.open_table(CATALOG)?;
        w.commit()?;
        Ok(MetaStore { db })
    }

    pub fn create_table(&self, schema: TableSchema) -> Result<TableCatalog, StorageError> {
        let w = self.db.begin_write()?;
        let cat = {
            let mut t = w.open_table(CATALOG)?;
            if t.get(schema.name.as_str())?.is_some() {
                return Err(StorageError::TableExists(schema.name));
            }
            let cat = TableCatalog {
                schema,
                row_count: 0,
                next_row_id: 0,
            };
            t.insert(cat.schema.name.as_str(), encode(&cat).as_slice())?;
            cat
        };
        w.commit()?;
        Ok(cat)
    }

    pub fn catalog(&self, table: &str) -> Result<TableCatalog, StorageError> {
        let r = self.db.begin_read()?;
        let t = r.open_table(CATALOG)?;
        let v = t
            .get(table)?
            .ok_or_else(|| StorageError::UnknownTable(table.to_string()))?;
        decode(v.value())
    }

    pub fn catalogs(&self) -> Result<Vec<TableCatalog>, StorageError> {
        let r = self.db.begin_read()?;
        let t = r.open_table(CATALOG)?;
        let mut out = Vec::new();
        for item in t.iter()? {
            let (_, v) = item?;
            out.push(decode(v.value())?);
        }
        Ok(out)
    }

    /// Writes `entries` and the affected catalogs in one transaction. Tables
    /// must already exist.
    pub fn put_entries(&self, entries: &[MetadataEntry]) -> Result<(), StorageError> {
        let w = self.db.begin_write()?;
        {
            let mut cells = w.open_table(CELLS)?;
            let mut cats = w.open_table(CATALOG)?;
            let mut touched: BTreeMap<String, TableCatalog> = BTreeMap::new();
            for e in entries {
                if !touched.contains_key(&e.table) {
                    let cat = cats
                        .get(e.table.as_str())?
                        .ok_or_else(|| StorageError::UnknownTable(e.table.clone()))?;
                    touched.insert(e.table.clone(), decode(cat.value())?);
                }
                let cat = touched.get_mut(&e.table).unwrap();
                if cat.schema.column(&e.column).is_none() {
                    return Err(StorageError::SchemaMismatch(format!(
                        "table {} has no column {}",
                        e.table, e.column
                    )));
                }
                let (lo, hi) = row_prefix(&e.table, e.row_id);
                if cells.range(lo.as_str()..hi.as_str())?.next().is_none() {
                    cat.row_count += 1;
                }
                cat.next_row_id = cat.next_row_id.max(e.row_id + 1);
                cells.insert(e.storage_key().as_str(), encode(e).as_slice())?;
            }
            for (name, cat) in touched {
                cats.insert(name.as_str(), encode(&cat).as_slice())?;
            }
        }
        w.commit()?;
        Ok(())
    }

    pub fn metadata_put(&self, entry: &MetadataEntry) -> Result<(), StorageError> {
        self.put_entries(std::slice::from_ref(entry))
    }

    pub fn metadata_get(&self, table: &str, row_id: u64, column: &str) -> Result<MetadataEntry, StorageError> {
        let r = self.db.begin_read()?;
        let t = r.open_table(CELLS)?;
        match t.get(cell_key(table, row_id, column).as_str())? {
            Some(v) => decode(v.value()),
            None => {
                self.catalog(table)?;
                Err(StorageError::UnknownCell {
                    table: table.to_string(),
                    row_id,
                    column: column.to_string(),
                })
            }
        }
    }

    /// Every live row of `table` in row-id order, one group per row.
    pub fn scan_table(&self, table: &str) -> Result<Vec<Vec<MetadataEntry>>, StorageError> {
        self.catalog(table)?;
        let r = self.db.begin_read()?;
        let t = r.open_table(CELLS)?;
        let (lo, hi) = table_prefix(table);
        let mut groups: Vec<Vec<MetadataEntry>> = Vec::new();
        for item in t.range(lo.as_str()..hi.as_str())? {
            let (_, v) = item?;
            let e: MetadataEntry = decode(v.value())?;
            match groups.last_mut() {
                Some(g) if g[0].row_id == e.row_id => g.push(e),
                _ => groups.push(vec![e]),
            }
        }
        Ok(groups)
    }

    /// Removes the given cells and recounts the affected tables.
    pub fn delete_entries(&self, keys: &[(String, u64, String)]) -> Result<Vec<MetadataEntry>, StorageError> {
        let w = self.db.begin_write()?;
        let mut removed = Vec::new();
        {
            let mut cells = w.open_table(CELLS)?;
            let mut cats = w.open_table(CATALOG)?;
            let mut tables = BTreeMap::new();
            for (table, row_id, column) in keys {
                if let Some(v) = cells.remove(cell_key(table, *row_id, column).as_str())? {
                    removed.push(decode::<MetadataEntry>(v.value())?);
                    tables.insert(table.clone(), ());
                }
            }
            for table in tables.keys() {
                let Some(raw) = cats.get(table.as_str())?.map(|v| v.value().to_vec()) else {
                    continue;
                };
                let mut cat: TableCatalog = decode(&raw)?;
                let (lo, hi) = table_prefix(table);
                let mut rows = 0;
                let mut last = None;
                for item in cells.range(lo.as_str()..hi.as_str())? {
                    let (_, v) = item?;
                    let e: MetadataEntry = decode(v.value())?;
                    if last != Some(e.row_id) {
                        rows += 1;
                        last = Some(e.row_id);
                    }
                }
                cat.row_count = rows;
                cats.insert(table.as_str(), encode(&cat).as_slice())?;
            }
        }
        w.commit()?;
        Ok(removed)
    }

    /// Removes every cell of one row. Returns the removed entries.
    pub fn delete_row(&self, table: &str, row_id: u64) -> Result<Vec<MetadataEntry>, StorageError> {
        let cat = self.catalog(table)?;
        let keys: Vec<_> = cat
            .schema
            .column_names()
            .map(|c| (table.to_string(), row_id, c.to_string()))
            .collect();
        let removed = self.delete_entries(&keys)?;
        if removed.is_empty() {
            return Err(StorageError::UnknownCell {
                table: table.to_string(),
                row_id,
                column: "*".into(),
            });
        }
        Ok(removed)
    }

    /// All cells of all tables.
    pub fn all_entries(&self) -> Result<Vec<MetadataEntry>, StorageError> {
        let r = self.db.begin_read()?;
        let t = r.open_table(CELLS)?;
        let mut out = Vec::new();
        for item in t.iter()? {
            let (_, v) = item?;
            out.push(decode(v.value())?);
        }
        Ok(out)
    }
}
