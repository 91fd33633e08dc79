//! Table schemas shared by the compiler, the store and the engine.

use serde::{Deserialize, Serialize};

use crate::crypto::{Ciphertext, Width};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnDef {
    pub name: String,
    pub width: Width,
}

impl ColumnDef {
    pub fn new(name: impl Into<String>, width: Width) -> Self {
        ColumnDef {
            name: name.into(),
            width,
        }
    }
}

/// Ordered column list of one table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSchema {
    pub name: String,
    pub columns: Vec<ColumnDef>,
}

impl TableSchema {
    pub fn new(name: impl Into<String>, columns: Vec<ColumnDef>) -> Self {
        TableSchema {
            name: name.into(),
            columns,
        }
    }

    pub fn column(&self, name: &str) -> Option<(usize, &ColumnDef)> {
        self.columns.iter().enumerate().find(|(_, c)| c.name == name)
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name.as_str())
    }

    /// Parses `name:width,name:width`, e.g. `age:u32,salary:u32`.
    pub fn parse_columns(spec: &str) -> Result<Vec<ColumnDef>, String> {
        spec.split(',')
            .map(|part| {
                let (name, width) = part
                    .trim()
                    .split_once(':')
                    .ok_or_else(|| format!("column {part:?} must be written name:width"))?;
                let width = Width::from_name(width.trim()).ok_or_else(|| format!("unknown width {width:?}"))?;
                if !is_identifier(name.trim()) {
                    return Err(format!("invalid column name {name:?}"));
                }
                Ok(ColumnDef::new(name.trim(), width))
            })
            .collect()
    }
}

/// One stored row: ciphertexts in catalog column order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedRow {
    pub row_id: u64,
    pub cells: Vec<Ciphertext>,
}

impl EncryptedRow {
    /// Checks length and per-column widths against `schema`.
    pub fn check(&self, schema: &TableSchema) -> Result<(), String> {
        if self.cells.len() != schema.columns.len() {
            return Err(format!(
                "row has {} cells, table {} has {} columns",
                self.cells.len(),
                schema.name,
                schema.columns.len()
            ));
        }
        for (c, def) in self.cells.iter().zip(&schema.columns) {
            if c.width() != def.width {
                return Err(format!(
                    "column {} is {} but cell is {}",
                    def.name,
                    def.width,
                    c.width()
                ));
            }
        }
        Ok(())
    }
}

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}
