//! Server-side oblivious execution.
//!
//! Every query touches every row of its table: one tree evaluation per row
//! produces an encrypted mask bit, and every selected cell is passed through
//! a multiplexer against an encrypted zero. Operation counts therefore
//! depend only on the row count, the tree shape and the number of selected
//! columns.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ed25519_dalek::VerifyingKey;
use parking_lot::{Mutex, RwLock};
use rayon::prelude::*;
use serde::Serialize;

use crate::access::{unix_now, verify_token, AuthError, DelegationToken, NonceCache, Permissions, VerificationKeys};
use crate::crypto::{
    BackendStats, CipherBool, Ciphertext, CryptoError, EvaluationKey, Evaluator, FheBackend, PlainScalar, Width,
};
use crate::schema::{EncryptedRow, TableSchema};
use crate::sql::{
    ast_to_json_value, deserialize_ast, CompareOp, ExprNode, HomomorphicExpressionTree, Literal, LogicalOp,
    RedactedAst, SqlAst, SqlError,
};
use crate::storage::{HybridStore, StorageError, TableCatalog};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("authorization failed: {0}")]
    Auth(#[from] AuthError),
    #[error(transparent)]
    Sql(#[from] SqlError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("unknown table {0:?}")]
    UnknownTable(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("identifier {0:?} does not resolve against the row")]
    UnresolvedIdentifier(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("no evaluation key registered for owner {0:?}")]
    UnknownOwner(String),
}

/// Result of evaluating a subtree: a predicate or a scalar operand.
#[derive(Debug, Clone)]
pub enum EvalValue {
    Bool(CipherBool),
    Scalar(Ciphertext),
}

impl EvalValue {
    fn into_scalar(self) -> Ciphertext {
        match self {
            EvalValue::Bool(b) => b.into_ciphertext(),
            EvalValue::Scalar(c) => c,
        }
    }

    fn into_bool(self) -> Result<CipherBool, CryptoError> {
        match self {
            EvalValue::Bool(b) => Ok(b),
            EvalValue::Scalar(c) => CipherBool::try_from(c),
        }
    }
}

/// Recursive evaluation of one tree against one row, left subtree first.
pub fn evaluate_homomorphic_tree(
    ev: &Evaluator,
    node: &ExprNode,
    schema: &TableSchema,
    row: &EncryptedRow,
) -> Result<EvalValue, EngineError> {
    match node {
        ExprNode::Identifier(name) => {
            let (i, _) = schema
                .column(name)
                .ok_or_else(|| EngineError::UnresolvedIdentifier(name.clone()))?;
            let cell = row
                .cells
                .get(i)
                .ok_or_else(|| EngineError::UnresolvedIdentifier(name.clone()))?;
            Ok(EvalValue::Scalar(cell.clone()))
        }
        ExprNode::EncryptedLiteral(Literal::Value(c)) => Ok(EvalValue::Scalar(c.clone())),
        ExprNode::EncryptedLiteral(Literal::Redacted) | ExprNode::Number(_) => Err(SqlError::PlaintextLiteral.into()),
        ExprNode::Comparison { op, left, right } => {
            let l = evaluate_homomorphic_tree(ev, left, schema, row)?.into_scalar();
            let r = evaluate_homomorphic_tree(ev, right, schema, row)?.into_scalar();
            let b = match op {
                CompareOp::Eq => ev.he_eq(&l, &r)?,
                CompareOp::Lt => ev.he_lt(&l, &r)?,
                CompareOp::Le => ev.he_le(&l, &r)?,
                CompareOp::Gt => ev.he_lt(&r, &l)?,
                CompareOp::Ge => ev.he_le(&r, &l)?,
            };
            Ok(EvalValue::Bool(b))
        }
        ExprNode::Binary { op, left, right } => {
            let l = evaluate_homomorphic_tree(ev, left, schema, row)?.into_bool()?;
            let r = evaluate_homomorphic_tree(ev, right, schema, row)?.into_bool()?;
            let b = match op {
                LogicalOp::And => ev.he_and(&l, &r)?,
                LogicalOp::Or => ev.he_or(&l, &r)?,
            };
            Ok(EvalValue::Bool(b))
        }
    }
}

/// One encrypted selection bit per row, in row order.
#[derive(Debug, Clone)]
pub struct BooleanMask(pub Vec<CipherBool>);

impl BooleanMask {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Evaluates the tree once per row (in parallel). An empty tree selects
/// every row with a trivial encryption of true.
pub fn build_mask(
    ev: &Evaluator,
    het: &HomomorphicExpressionTree,
    schema: &TableSchema,
    rows: &[EncryptedRow],
) -> Result<BooleanMask, EngineError> {
    let bits = match het.root() {
        None => rows
            .iter()
            .map(|_| ev.trivial_bool(true).map_err(EngineError::from))
            .collect::<Result<Vec<_>, _>>()?,
        Some(root) => rows
            .par_iter()
            .map(|row| {
                evaluate_homomorphic_tree(ev, root, schema, row)?
                    .into_bool()
                    .map_err(EngineError::from)
            })
            .collect::<Result<Vec<_>, _>>()?,
    };
    Ok(BooleanMask(bits))
}

#[derive(Debug, Clone)]
pub struct EncryptedResult {
    pub columns: Vec<String>,
    /// `rows[i][c]`: selected column `c` of row `i`, or an encryption of zero.
    pub rows: Vec<Vec<Ciphertext>>,
    pub mask: Option<Vec<CipherBool>>,
    pub row_count: u64,
}

/// `out[i][c] = cmux(mask[i], rows[i][c], enc(0))`.
pub fn apply_mask(
    ev: &Evaluator,
    rows: &[EncryptedRow],
    mask: &BooleanMask,
    selected: &[usize],
) -> Result<Vec<Vec<Ciphertext>>, EngineError> {
    if rows.len() != mask.len() {
        return Err(EngineError::LengthMismatch(format!(
            "{} rows but {} mask bits",
            rows.len(),
            mask.len()
        )));
    }
    let mut zeros: HashMap<Width, Ciphertext> = HashMap::new();
    for row in rows {
        for &c in selected {
            let w = row
                .cells
                .get(c)
                .ok_or_else(|| EngineError::LengthMismatch(format!("row {} has no column {c}", row.row_id)))?
                .width();
            if let std::collections::hash_map::Entry::Vacant(e) = zeros.entry(w) {
                e.insert(ev.trivial_encrypt(PlainScalar::new(0, w)?)?);
            }
        }
    }
    rows.par_iter()
        .zip(mask.0.par_iter())
        .map(|(row, bit)| {
            selected
                .iter()
                .map(|&c| {
                    let cell = &row.cells[c];
                    Ok(ev.he_cmux(bit, cell, &zeros[&cell.width()])?)
                })
                .collect::<Result<Vec<_>, EngineError>>()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PirMode {
    /// One (key, value) pair per row, zero except at the match.
    Sparse,
    /// Homomorphic sum of the sparse vector; correct only when keys are unique.
    Aggregate,
}

/// Equality lookup over a two-column (key, value) table: exactly `n` `he_eq`
/// and `2n` `he_cmux`, plus `2(n - 1)` `he_add` in aggregate mode.
pub fn pir_lookup(
    ev: &Evaluator,
    enc_key: &Ciphertext,
    rows: &[EncryptedRow],
    mode: PirMode,
    return_mask: bool,
) -> Result<EncryptedResult, EngineError> {
    if rows.iter().any(|r| r.cells.len() < 2) {
        return Err(EngineError::SchemaMismatch(
            "lookup table needs key and value columns".into(),
        ));
    }
    let bits = rows
        .par_iter()
        .map(|row| Ok(ev.he_eq(&row.cells[0], enc_key)?))
        .collect::<Result<Vec<_>, EngineError>>()?;
    let mask = BooleanMask(bits);
    let sparse = apply_mask(ev, rows, &mask, &[0, 1])?;
    let columns = vec!["key".to_string(), "value".to_string()];
    match mode {
        PirMode::Sparse => Ok(EncryptedResult {
            columns,
            row_count: sparse.len() as u64,
            rows: sparse,
            mask: return_mask.then_some(mask.0),
        }),
        PirMode::Aggregate => {
            let mut it = sparse.into_iter();
            let folded = match it.next() {
                None => Vec::new(),
                Some(first) => vec![it.try_fold(first, |acc, row| {
                    acc.iter()
                        .zip(&row)
                        .map(|(a, b)| ev.he_add(a, b))
                        .collect::<Result<Vec<_>, _>>()
                })?],
            };
            Ok(EncryptedResult {
                columns,
                row_count: folded.len() as u64,
                rows: folded,
                mask: None,
            })
        }
    }
}

/// What the server reveals about one query: its redacted shape, the
/// token presented and the size of the scanned table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeakageTranscript {
    pub redacted_ast: RedactedAst,
    pub token: DelegationToken,
    pub row_count: u64,
}

impl LeakageTranscript {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "redacted_ast": ast_to_json_value(self.redacted_ast.as_ast()),
            "token": self.token.to_base64(),
            "row_count": self.row_count,
        })
    }

    /// Canonical bytes; equal transcripts give equal bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(&self.to_json()).expect("transcript serializes")
    }
}

/// Builds the transcript for a processed query.
pub fn audit_transcript(query: &SqlAst, token: &DelegationToken, row_count: u64) -> LeakageTranscript {
    LeakageTranscript {
        redacted_ast: query.redact(),
        token: token.clone(),
        row_count,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// Include the encrypted mask in query results.
    pub return_mask: bool,
    /// Transcripts kept for audit retrieval.
    pub transcript_capacity: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            return_mask: true,
            transcript_capacity: 1024,
        }
    }
}

/// Public material a data owner registers with the server.
#[derive(Debug, Clone)]
pub struct OwnerRecord {
    pub owner_id: String,
    pub verification_key: VerifyingKey,
    pub evaluation_key: EvaluationKey,
}

#[derive(Serialize, serde::Deserialize)]
struct OwnerRecordJson {
    owner_id: String,
    verification_key: String,
    backend: u8,
    evaluation_key: String,
}

impl OwnerRecord {
    /// Public registration file: everything the server needs, nothing secret.
    pub fn to_json(&self) -> String {
        use base64::Engine as _;
        serde_json::to_string_pretty(&OwnerRecordJson {
            owner_id: self.owner_id.clone(),
            verification_key: crate::access::verification_key_to_base64(&self.verification_key),
            backend: self.evaluation_key.backend.0,
            evaluation_key: base64::engine::general_purpose::STANDARD.encode(self.evaluation_key.as_bytes()),
        })
        .expect("owner record serializes")
    }

    pub fn from_json(s: &str) -> Result<OwnerRecord, String> {
        use base64::Engine as _;
        let j: OwnerRecordJson = serde_json::from_str(s).map_err(|e| e.to_string())?;
        let evk = base64::engine::general_purpose::STANDARD
            .decode(&j.evaluation_key)
            .map_err(|e| format!("evaluation_key: {e}"))?;
        Ok(OwnerRecord {
            verification_key: crate::access::verification_key_from_base64(&j.verification_key)?,
            owner_id: j.owner_id,
            evaluation_key: EvaluationKey::new(crate::crypto::BackendId(j.backend), evk),
        })
    }
}

#[derive(Default)]
struct Registry {
    verification: HashMap<String, VerifyingKey>,
    evaluation: HashMap<String, EvaluationKey>,
}

impl VerificationKeys for RwLock<Registry> {
    fn key_for(&self, principal: &str) -> Option<VerifyingKey> {
        self.read().verification.get(principal).copied()
    }
}

/// The query server: authorization, scan, evaluation and transcripts.
pub struct Server {
    store: Arc<HybridStore>,
    backend: Arc<dyn FheBackend>,
    registry: RwLock<Registry>,
    nonces: NonceCache,
    config: EngineConfig,
    transcripts: Mutex<VecDeque<(u64, LeakageTranscript)>>,
    next_transcript: AtomicU64,
    audit_log: Mutex<Vec<String>>,
}

impl std::fmt::Debug for Server {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Server")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

/// Successful query outcome.
#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub result: EncryptedResult,
    pub transcript_id: u64,
}

impl Server {
    pub fn new(store: Arc<HybridStore>, backend: Arc<dyn FheBackend>, config: EngineConfig) -> Server {
        Server {
            store,
            backend,
            registry: RwLock::new(Registry::default()),
            nonces: NonceCache::new(),
            config,
            transcripts: Mutex::new(VecDeque::new()),
            next_transcript: AtomicU64::new(1),
            audit_log: Mutex::new(Vec::new()),
        }
    }

    pub fn register_owner(&self, owner: OwnerRecord) {
        let mut r = self.registry.write();
        r.verification.insert(owner.owner_id.clone(), owner.verification_key);
        r.evaluation.insert(owner.owner_id, owner.evaluation_key);
    }

    /// Makes `principal`'s signatures on delegated tokens verifiable.
    pub fn register_principal(&self, principal: &str, key: VerifyingKey) {
        self.registry.write().verification.insert(principal.to_string(), key);
    }

    pub fn store(&self) -> &Arc<HybridStore> {
        &self.store
    }

    pub fn backend(&self) -> &Arc<dyn FheBackend> {
        &self.backend
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn stats(&self) -> BackendStats {
        self.backend.stats()
    }

    fn log(&self, line: String) {
        log::info!("{line}");
        self.audit_log.lock().push(line);
    }

    /// Lines the server has logged (request kinds, table names, sizes).
    pub fn audit_log(&self) -> Vec<String> {
        self.audit_log.lock().clone()
    }

    /// Verifies a token and checks it grants `need`.
    pub fn authorize(&self, token: &DelegationToken, need: Permissions) -> Result<Evaluator, EngineError> {
        let perms = verify_token(token, &self.registry, unix_now(), &self.nonces)?;
        if !perms.contains(need) {
            return Err(AuthError::Forbidden(need.names().first().copied().unwrap_or("?")).into());
        }
        let evk = self
            .registry
            .read()
            .evaluation
            .get(&token.owner_id)
            .cloned()
            .ok_or_else(|| EngineError::UnknownOwner(token.owner_id.clone()))?;
        Ok(Evaluator::new(self.backend.clone(), evk))
    }

    fn catalog(&self, table: &str) -> Result<TableCatalog, EngineError> {
        match self.store.catalog(table) {
            Ok(c) => Ok(c),
            Err(StorageError::UnknownTable(t)) => Err(EngineError::UnknownTable(t)),
            Err(e) => Err(e.into()),
        }
    }

    /// Runs a serialized encrypted query.
    pub fn process_query(&self, query: &[u8], token: &DelegationToken) -> Result<QueryOutcome, EngineError> {
        let ev = self.authorize(token, Permissions::READ)?;
        let ast = deserialize_ast(query)?;
        self.process_ast(&ev, &ast, token)
    }

    /// Like [`process_query`](Self::process_query) for an already decoded,
    /// already authorized query.
    pub fn process_ast(
        &self,
        ev: &Evaluator,
        ast: &SqlAst,
        token: &DelegationToken,
    ) -> Result<QueryOutcome, EngineError> {
        let het = HomomorphicExpressionTree::from_expr(ast.where_clause.clone())?;
        let cat = self.catalog(&ast.from)?;
        let schema = &cat.schema;
        let selected: Vec<usize> = if ast.selects_all() {
            (0..schema.columns.len()).collect()
        } else {
            ast.columns
                .iter()
                .map(|c| {
                    schema
                        .column(c)
                        .map(|(i, _)| i)
                        .ok_or_else(|| EngineError::SchemaMismatch(format!("no column {c:?} in {}", schema.name)))
                })
                .collect::<Result<_, _>>()?
        };
        if let Some(root) = het.root() {
            check_tree(root, schema)?;
        }
        let (_, rows) = self.store.load_table(&ast.from)?;
        let mask = build_mask(ev, &het, schema, &rows)?;
        let masked = apply_mask(ev, &rows, &mask, &selected)?;
        let row_count = rows.len() as u64;
        let id = self.record_transcript(audit_transcript(ast, token, row_count));
        self.log(format!(
            "query table={} rows={row_count} nodes={} columns={} transcript={id}",
            ast.from,
            het.node_count(),
            selected.len()
        ));
        Ok(QueryOutcome {
            result: EncryptedResult {
                columns: selected.iter().map(|&i| schema.columns[i].name.clone()).collect(),
                rows: masked,
                mask: self.config.return_mask.then_some(mask.0),
                row_count,
            },
            transcript_id: id,
        })
    }

    /// Key-value lookup against a (key, value) table.
    pub fn process_pir(
        &self,
        table: &str,
        enc_key: &Ciphertext,
        mode: PirMode,
        token: &DelegationToken,
    ) -> Result<QueryOutcome, EngineError> {
        let ev = self.authorize(token, Permissions::READ)?;
        let cat = self.catalog(table)?;
        if cat.schema.columns.len() != 2 {
            return Err(EngineError::SchemaMismatch(format!(
                "lookup needs a (key, value) table; {table} has {} columns",
                cat.schema.columns.len()
            )));
        }
        if enc_key.width() != cat.schema.columns[0].width {
            return Err(EngineError::SchemaMismatch(format!(
                "key is {} but column {} is {}",
                enc_key.width(),
                cat.schema.columns[0].name,
                cat.schema.columns[0].width
            )));
        }
        let (_, rows) = self.store.load_table(table)?;
        let mut result = pir_lookup(&ev, enc_key, &rows, mode, self.config.return_mask)?;
        result.columns = cat.schema.column_names().map(str::to_string).collect();
        let shape = SqlAst {
            columns: vec!["*".into()],
            from: table.to_string(),
            where_clause: Some(ExprNode::comparison(
                CompareOp::Eq,
                ExprNode::ident(cat.schema.columns[0].name.clone()),
                ExprNode::EncryptedLiteral(Literal::Redacted),
            )),
        };
        let id = self.record_transcript(audit_transcript(&shape, token, rows.len() as u64));
        self.log(format!(
            "lookup table={table} rows={} mode={mode:?} transcript={id}",
            rows.len()
        ));
        Ok(QueryOutcome {
            result,
            transcript_id: id,
        })
    }

    /// Stores client-encrypted rows. Needs the Write permission.
    pub fn insert_rows(
        &self,
        table: &str,
        rows: Vec<Vec<Ciphertext>>,
        token: &DelegationToken,
    ) -> Result<Vec<u64>, EngineError> {
        self.authorize(token, Permissions::WRITE)?;
        self.catalog(table)?;
        let n = rows.len();
        let ids = self.store.insert_rows(table, rows, &token.owner_id)?;
        self.log(format!("insert table={table} rows={n}"));
        Ok(ids)
    }

    pub fn create_table(&self, schema: TableSchema, token: &DelegationToken) -> Result<(), EngineError> {
        self.authorize(token, Permissions::WRITE)?;
        let name = schema.name.clone();
        self.store.create_table(schema)?;
        self.log(format!("create table={name}"));
        Ok(())
    }

    pub fn delete_row(&self, table: &str, row_id: u64, token: &DelegationToken) -> Result<(), EngineError> {
        self.authorize(token, Permissions::DELETE)?;
        self.catalog(table)?;
        self.store.delete_row(table, row_id)?;
        self.log(format!("delete table={table} row={row_id}"));
        Ok(())
    }

    fn record_transcript(&self, t: LeakageTranscript) -> u64 {
        let id = self.next_transcript.fetch_add(1, Ordering::Relaxed);
        let mut q = self.transcripts.lock();
        q.push_back((id, t));
        while q.len() > self.config.transcript_capacity.max(1) {
            q.pop_front();
        }
        id
    }

    pub fn transcript(&self, id: u64) -> Option<LeakageTranscript> {
        self.transcripts
            .lock()
            .iter()
            .find(|(i, _)| *i == id)
            .map(|(_, t)| t.clone())
    }

    pub fn last_transcript(&self) -> Option<LeakageTranscript> {
        self.transcripts.lock().back().map(|(_, t)| t.clone())
    }
}

/// Rejects trees that reference unknown columns or compare mismatched widths.
fn check_tree(node: &ExprNode, schema: &TableSchema) -> Result<(), EngineError> {
    fn width(n: &ExprNode, schema: &TableSchema) -> Result<Width, EngineError> {
        match n {
            ExprNode::Identifier(name) => schema
                .column(name)
                .map(|(_, c)| c.width)
                .ok_or_else(|| EngineError::SchemaMismatch(format!("no column {name:?} in {}", schema.name))),
            ExprNode::EncryptedLiteral(Literal::Value(c)) => Ok(c.width()),
            _ => Err(SqlError::PlaintextLiteral.into()),
        }
    }
    match node {
        ExprNode::Binary { left, right, .. } => {
            check_tree(left, schema)?;
            check_tree(right, schema)
        }
        ExprNode::Comparison { left, right, .. } => {
            let (l, r) = (width(left, schema)?, width(right, schema)?);
            if l != r {
                return Err(EngineError::SchemaMismatch(format!("comparison of {l} with {r}")));
            }
            Ok(())
        }
        _ => Err(SqlError::Malformed("bare operand at predicate position".into()).into()),
    }
}
