//! Client SDK: encrypts queries, ships them to a server and decrypts what
//! comes back. The key material never leaves this side.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde_json::{json, Value};

use crate::access::{create_token, delegate, unix_now, AuthError, DelegationToken, OwnerKeypair, Permissions};
use crate::crypto::{Ciphertext, CryptoError, FheBackend, KeyMaterial, PlainScalar};
use crate::engine::{EncryptedResult, PirMode, Server};
use crate::net::{decode_result, handle_frame, Request, RequestKind, Response, Status, TcpClient};
use crate::schema::TableSchema;
use crate::sql::{compile_to_het, parse_sql, serialize_ast, SqlAst, SqlError};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error(transparent)]
    Sql(#[from] SqlError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Auth(#[from] AuthError),
    #[error("transport: {0}")]
    Transport(String),
    #[error("server error ({kind}): {message}")]
    Server { kind: String, message: String },
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("decryption failed for {what}: {source}")]
    Decrypt {
        what: String,
        #[source]
        source: CryptoError,
    },
    #[error("row {row} has {got} values, table {table} has {want} columns")]
    Arity {
        table: String,
        row: usize,
        got: usize,
        want: usize,
    },
}

impl ClientError {
    /// The server's error kind, if this is a server-side rejection.
    pub fn server_kind(&self) -> Option<&str> {
        match self {
            ClientError::Server { kind, .. } => Some(kind),
            _ => None,
        }
    }
}

/// Moves one request to a server and brings back its response.
pub trait Transport: Send + Sync {
    fn send(&self, req: &Request) -> Result<Response, ClientError>;
}

/// In-process transport. Requests still pass through the byte encoding so
/// behaviour matches the TCP path.
#[derive(Clone)]
pub struct LocalTransport {
    server: Arc<Server>,
}

impl LocalTransport {
    pub fn new(server: Arc<Server>) -> LocalTransport {
        LocalTransport { server }
    }
}

impl Transport for LocalTransport {
    fn send(&self, req: &Request) -> Result<Response, ClientError> {
        let resp = handle_frame(&self.server, &req.to_bytes());
        Response::from_bytes(&resp.to_bytes()).map_err(ClientError::Protocol)
    }
}

/// One persistent TCP connection; requests are serialized on it.
pub struct TcpTransport {
    conn: Mutex<TcpClient>,
}

impl TcpTransport {
    pub fn connect(addr: &str, timeout: Duration) -> Result<TcpTransport, ClientError> {
        let c = TcpClient::connect(addr, timeout).map_err(|e| ClientError::Transport(format!("{addr}: {e}")))?;
        Ok(TcpTransport { conn: Mutex::new(c) })
    }
}

impl Transport for TcpTransport {
    fn send(&self, req: &Request) -> Result<Response, ClientError> {
        let bytes = self
            .conn
            .lock()
            .round_trip(&req.to_bytes())
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Response::from_bytes(&bytes).map_err(ClientError::Protocol)
    }
}

/// Mints a fresh token per request. Tokens are single use, so a long-lived
/// client needs signing rights, either as the owner or as a delegate whose
/// token carries `DELEGATE`.
pub enum Credentials {
    Owner {
        keypair: OwnerKeypair,
        permissions: Permissions,
        ttl: Duration,
    },
    Delegate {
        parent: DelegationToken,
        keypair: OwnerKeypair,
        permissions: Permissions,
        ttl: Duration,
    },
}

impl Credentials {
    pub fn owner(keypair: OwnerKeypair, permissions: Permissions) -> Credentials {
        Credentials::Owner {
            keypair,
            permissions,
            ttl: Duration::from_secs(300),
        }
    }

    pub fn mint(&self) -> Result<DelegationToken, AuthError> {
        match self {
            Credentials::Owner {
                keypair,
                permissions,
                ttl,
            } => create_token(
                keypair,
                &keypair.owner_id,
                *permissions,
                unix_now() + ttl.as_secs().max(1),
            ),
            Credentials::Delegate {
                parent,
                keypair,
                permissions,
                ttl,
            } => {
                let exp = (unix_now() + ttl.as_secs().max(1)).min(parent.expires_at);
                delegate(parent, keypair, &keypair.owner_id, *permissions, exp)
            }
        }
    }
}

/// An encrypted query ready for the wire.
#[derive(Debug, Clone)]
pub struct EncryptedQuery {
    pub ast: SqlAst,
    pub bytes: Vec<u8>,
}

/// Parses `sql`, encrypts every literal at its column's width and
/// serializes the result.
pub fn encrypt_query(
    sql: &str,
    backend: &dyn FheBackend,
    key: &KeyMaterial,
    schema: &TableSchema,
) -> Result<EncryptedQuery, SqlError> {
    let plain = parse_sql(sql)?;
    let het = compile_to_het(&plain, backend, key, schema)?;
    let ast = het.to_query(plain.columns.clone(), &plain.from);
    let bytes = serialize_ast(&ast);
    Ok(EncryptedQuery { ast, bytes })
}

/// How decrypted rows are filtered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FilterMode {
    /// Use the mask when the server sent one, otherwise drop all-zero rows.
    #[default]
    Auto,
    /// Keep exactly the rows whose mask bit is set; fails without a mask.
    Mask,
    /// Drop rows whose selected cells are all zero. A matching row whose
    /// values are all zero is lost this way.
    NonZero,
}

/// Decrypted query output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlainResultSet {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<PlainScalar>>,
}

impl PlainResultSet {
    pub fn values(&self) -> Vec<Vec<u32>> {
        self.rows
            .iter()
            .map(|r| r.iter().map(PlainScalar::value).collect())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Filters decrypted rows. `mask`, when given, must match `rows` in length.
pub fn filter_rows(
    columns: Vec<String>,
    rows: Vec<Vec<PlainScalar>>,
    mask: Option<&[bool]>,
    mode: FilterMode,
) -> Result<PlainResultSet, ClientError> {
    if let Some(m) = mask {
        if m.len() != rows.len() {
            return Err(ClientError::Protocol(format!(
                "mask has {} bits for {} rows",
                m.len(),
                rows.len()
            )));
        }
    }
    let use_mask = match (mode, mask) {
        (FilterMode::Mask, None) => return Err(ClientError::Protocol("server sent no mask".into())),
        (FilterMode::Mask | FilterMode::Auto, Some(m)) => Some(m),
        (FilterMode::NonZero, _) | (FilterMode::Auto, None) => None,
    };
    let rows = match use_mask {
        Some(m) => rows.into_iter().zip(m).filter(|(_, &b)| b).map(|(r, _)| r).collect(),
        None => rows.into_iter().filter(|r| r.iter().any(|c| c.value() != 0)).collect(),
    };
    Ok(PlainResultSet { columns, rows })
}

/// Outcome of a decrypted query.
#[derive(Debug, Clone)]
pub struct QueryResult {
    pub result: PlainResultSet,
    /// Rows the server scanned.
    pub row_count: u64,
    pub transcript_id: Option<u64>,
}

/// A client bound to one key and one transport.
pub struct Client {
    transport: Box<dyn Transport>,
    backend: Arc<dyn FheBackend>,
    key: KeyMaterial,
    filter: FilterMode,
    decryptions: AtomicU64,
}

impl Client {
    pub fn new(transport: impl Transport + 'static, backend: Arc<dyn FheBackend>, key: KeyMaterial) -> Client {
        Client {
            transport: Box::new(transport),
            backend,
            key,
            filter: FilterMode::Auto,
            decryptions: AtomicU64::new(0),
        }
    }

    pub fn with_filter(mut self, mode: FilterMode) -> Client {
        self.filter = mode;
        self
    }

    pub fn key(&self) -> &KeyMaterial {
        &self.key
    }

    /// Ciphertexts decrypted since creation.
    pub fn decryptions(&self) -> u64 {
        self.decryptions.load(Ordering::Relaxed)
    }

    fn call(&self, req: Request) -> Result<Response, ClientError> {
        let resp = self.transport.send(&req)?;
        match resp.status {
            Status::Ok => Ok(resp),
            Status::Error => {
                let e = resp.error.unwrap_or_else(|| crate::net::ErrorInfo {
                    kind: "unknown".into(),
                    message: "error response without details".into(),
                });
                Err(ClientError::Server {
                    kind: e.kind,
                    message: e.message,
                })
            }
        }
    }

    fn admin(&self, token: Option<&DelegationToken>, body: Value) -> Result<Response, ClientError> {
        self.call(Request::new(RequestKind::Admin, token, body, vec![]))
    }

    pub fn health(&self) -> Result<(), ClientError> {
        self.admin(None, json!({"op": "health"})).map(drop)
    }

    pub fn describe(&self, table: &str) -> Result<TableSchema, ClientError> {
        let r = self.admin(None, json!({"op": "describe", "table": table}))?;
        serde_json::from_value(r.body).map_err(|e| ClientError::Protocol(e.to_string()))
    }

    pub fn create_table(&self, schema: &TableSchema, token: &DelegationToken) -> Result<(), ClientError> {
        self.admin(Some(token), json!({"op": "create_table", "schema": schema}))
            .map(drop)
    }

    pub fn delete_row(&self, table: &str, row_id: u64, token: &DelegationToken) -> Result<(), ClientError> {
        self.admin(
            Some(token),
            json!({"op": "delete_row", "table": table, "row_id": row_id}),
        )
        .map(drop)
    }

    pub fn compact(&self, token: &DelegationToken) -> Result<u64, ClientError> {
        let r = self.admin(Some(token), json!({"op": "compact"}))?;
        Ok(r.body["reclaimed_bytes"].as_u64().unwrap_or(0))
    }

    pub fn transcript(&self, id: u64) -> Result<Value, ClientError> {
        Ok(self.admin(None, json!({"op": "transcript", "id": id}))?.body)
    }

    pub fn server_stats(&self) -> Result<Value, ClientError> {
        Ok(self.admin(None, json!({"op": "stats"}))?.body)
    }

    /// Encrypts and stores plaintext rows; values must fit their columns.
    pub fn insert(&self, table: &str, rows: &[Vec<u64>], token: &DelegationToken) -> Result<Vec<u64>, ClientError> {
        let schema = self.describe(table)?;
        let mut attachments = Vec::new();
        let mut idx = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            if row.len() != schema.columns.len() {
                return Err(ClientError::Arity {
                    table: table.to_string(),
                    row: i,
                    got: row.len(),
                    want: schema.columns.len(),
                });
            }
            let mut r = Vec::with_capacity(row.len());
            for (v, col) in row.iter().zip(&schema.columns) {
                let m = PlainScalar::new(*v, col.width)?;
                attachments.push(self.backend.encrypt(&self.key, m)?);
                r.push(attachments.len() - 1);
            }
            idx.push(r);
        }
        let resp = self.call(Request::new(
            RequestKind::Insert,
            Some(token),
            json!({"table": table, "rows": idx}),
            attachments,
        ))?;
        serde_json::from_value(resp.body["row_ids"].clone()).map_err(|e| ClientError::Protocol(e.to_string()))
    }

    /// Sends an already encrypted query and returns the raw encrypted result.
    pub fn execute(
        &self,
        query: &EncryptedQuery,
        token: &DelegationToken,
    ) -> Result<(EncryptedResult, Option<u64>), ClientError> {
        let q: Value = serde_json::from_slice(&query.bytes).map_err(|e| ClientError::Protocol(e.to_string()))?;
        let resp = self.call(Request::new(
            RequestKind::Query,
            Some(token),
            json!({ "query": q }),
            vec![],
        ))?;
        let tid = resp.transcript_id;
        Ok((decode_result(&resp).map_err(ClientError::Protocol)?, tid))
    }

    /// Encrypts `sql`, runs it and decrypts the answer.
    pub fn query(&self, sql: &str, token: &DelegationToken) -> Result<QueryResult, ClientError> {
        let plain = parse_sql(sql)?;
        let schema = self.describe(&plain.from)?;
        let q = encrypt_query(sql, self.backend.as_ref(), &self.key, &schema)?;
        let (enc, tid) = self.execute(&q, token)?;
        Ok(QueryResult {
            row_count: enc.row_count,
            result: self.decrypt_result(enc)?,
            transcript_id: tid,
        })
    }

    fn decrypt_one(&self, c: &Ciphertext, what: impl FnOnce() -> String) -> Result<PlainScalar, ClientError> {
        self.decryptions.fetch_add(1, Ordering::Relaxed);
        self.backend
            .decrypt(&self.key, c)
            .map_err(|source| ClientError::Decrypt { what: what(), source })
    }

    fn decrypt_cells(&self, enc: &EncryptedResult) -> Result<Vec<Vec<PlainScalar>>, ClientError> {
        let mut rows = Vec::with_capacity(enc.rows.len());
        for (i, row) in enc.rows.iter().enumerate() {
            let mut out = Vec::with_capacity(row.len());
            for (c, ct) in row.iter().enumerate() {
                out.push(self.decrypt_one(ct, || format!("row {i} column {c}"))?);
            }
            rows.push(out);
        }
        Ok(rows)
    }

    /// Decrypts every cell and mask bit, then filters. Any failure aborts
    /// the whole result.
    pub fn decrypt_result(&self, enc: EncryptedResult) -> Result<PlainResultSet, ClientError> {
        let rows = self.decrypt_cells(&enc)?;
        let mask = match &enc.mask {
            Some(m) => Some(
                m.iter()
                    .enumerate()
                    .map(|(i, b)| Ok(self.decrypt_one(b.as_ciphertext(), || format!("mask bit {i}"))?.value() != 0))
                    .collect::<Result<Vec<bool>, ClientError>>()?,
            ),
            None => None,
        };
        filter_rows(enc.columns, rows, mask.as_deref(), self.filter)
    }

    /// Private lookup of `key` in a two-column table. Returns every
    /// recovered (key, value) pair: normally zero or one.
    pub fn lookup(
        &self,
        table: &str,
        key: u64,
        mode: PirMode,
        token: &DelegationToken,
    ) -> Result<Vec<(u32, u32)>, ClientError> {
        let schema = self.describe(table)?;
        let kcol = schema
            .columns
            .first()
            .ok_or_else(|| ClientError::Protocol(format!("table {table} has no columns")))?;
        let enc = self.backend.encrypt(&self.key, PlainScalar::new(key, kcol.width)?)?;
        let resp = self.call(Request::new(
            RequestKind::PirLookup,
            Some(token),
            json!({"table": table, "key": 0, "mode": mode}),
            vec![enc],
        ))?;
        let enc = decode_result(&resp).map_err(ClientError::Protocol)?;
        if mode == PirMode::Aggregate {
            let rows = self.decrypt_cells(&enc)?;
            // a miss folds to (0, 0), which a hit on key 0 with value 0 also produces
            return Ok(rows
                .iter()
                .map(|r| (r[0].value(), r[1].value()))
                .filter(|&(k, v)| k as u64 == key && (key != 0 || v != 0))
                .collect());
        }
        let set = self.decrypt_result(enc)?;
        Ok(set.rows.iter().map(|r| (r[0].value(), r[1].value())).collect())
    }
}
