//! Wire protocol between client and server.
//!
//! Each message is a JSON document inside a frame: a 4-byte big-endian
//! length followed by that many bytes. Ciphertexts travel as base64 FHEC
//! strings in `attachments` and are referenced from `body` by index.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::access::{AuthError, DelegationToken};
use crate::crypto::{CipherBool, Ciphertext};
use crate::engine::{EncryptedResult, EngineError, PirMode, QueryOutcome, Server};
use crate::schema::TableSchema;
use crate::sql::{deserialize_ast, SqlError};
use crate::storage::StorageError;

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_MAX_FRAME: usize = 64 << 20;

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("frame of {len} bytes exceeds limit {max}")]
    TooLarge { len: usize, max: usize },
    #[error("connection closed")]
    Closed,
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_frame(w: &mut impl Write, payload: &[u8], max: usize) -> Result<(), FrameError> {
    if payload.len() > max || payload.len() > u32::MAX as usize {
        return Err(FrameError::TooLarge {
            len: payload.len(),
            max,
        });
    }
    w.write_all(&(payload.len() as u32).to_be_bytes())?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

pub fn read_frame(r: &mut impl Read, max: usize) -> Result<Vec<u8>, FrameError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Err(FrameError::Closed),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > max {
        return Err(FrameError::TooLarge { len, max });
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

mod fhec_list {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::crypto::Ciphertext;

    pub fn serialize<S: Serializer>(v: &[Ciphertext], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(Ciphertext::to_base64).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Ciphertext>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|s| Ciphertext::from_base64(s).map_err(serde::de::Error::custom))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Query,
    PirLookup,
    Insert,
    Admin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub version: u32,
    pub kind: RequestKind,
    /// Base64 delegation token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
    pub body: Value,
    #[serde(default, with = "fhec_list")]
    pub attachments: Vec<Ciphertext>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorInfo {
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_count: Option<u64>,
    #[serde(default)]
    pub body: Value,
    #[serde(default, with = "fhec_list")]
    pub attachments: Vec<Ciphertext>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript_id: Option<u64>,
}

impl Request {
    pub fn new(
        kind: RequestKind,
        token: Option<&DelegationToken>,
        body: Value,
        attachments: Vec<Ciphertext>,
    ) -> Request {
        Request {
            version: PROTOCOL_VERSION,
            kind,
            token: token.map(DelegationToken::to_base64),
            body,
            attachments,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("request serializes")
    }

    pub fn from_bytes(b: &[u8]) -> Result<Request, String> {
        let r: Request = serde_json::from_slice(b).map_err(|e| e.to_string())?;
        check_indices(&r.body, r.attachments.len())?;
        Ok(r)
    }
}

impl Response {
    pub fn ok(body: Value) -> Response {
        Response {
            status: Status::Ok,
            error: None,
            row_count: None,
            body,
            attachments: Vec::new(),
            transcript_id: None,
        }
    }

    pub fn error(kind: &str, message: impl Into<String>) -> Response {
        Response {
            status: Status::Error,
            error: Some(ErrorInfo {
                kind: kind.to_string(),
                message: message.into(),
            }),
            row_count: None,
            body: Value::Null,
            attachments: Vec::new(),
            transcript_id: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("response serializes")
    }

    pub fn from_bytes(b: &[u8]) -> Result<Response, String> {
        let r: Response = serde_json::from_slice(b).map_err(|e| e.to_string())?;
        check_indices(&r.body, r.attachments.len())?;
        Ok(r)
    }
}

/// Attachment references live under these body keys.
const INDEX_KEYS: &[&str] = &["rows", "mask", "key"];

fn check_indices(body: &Value, n: usize) -> Result<(), String> {
    fn walk(v: &Value, n: usize) -> Result<(), String> {
        match v {
            Value::Number(x) => match x.as_u64() {
                Some(i) if (i as usize) < n => Ok(()),
                _ => Err(format!("attachment index {x} out of range ({n} attachments)")),
            },
            Value::Array(items) => items.iter().try_for_each(|i| walk(i, n)),
            Value::Null => Ok(()),
            _ => Err("attachment references must be integers".into()),
        }
    }
    if let Value::Object(map) = body {
        for k in INDEX_KEYS {
            if let Some(v) = map.get(*k) {
                walk(v, n)?;
            }
        }
    }
    Ok(())
}

/// Packs an encrypted result as (body, attachments).
pub fn encode_result(r: &EncryptedResult) -> (Value, Vec<Ciphertext>) {
    let mut att = Vec::new();
    let mut push = |c: &Ciphertext| {
        att.push(c.clone());
        att.len() - 1
    };
    let rows: Vec<Vec<usize>> = r.rows.iter().map(|row| row.iter().map(&mut push).collect()).collect();
    let mask: Option<Vec<usize>> = r
        .mask
        .as_ref()
        .map(|m| m.iter().map(|b| push(b.as_ciphertext())).collect());
    (json!({"columns": r.columns, "rows": rows, "mask": mask}), att)
}

pub fn decode_result(resp: &Response) -> Result<EncryptedResult, String> {
    #[derive(Deserialize)]
    struct Body {
        columns: Vec<String>,
        rows: Vec<Vec<usize>>,
        mask: Option<Vec<usize>>,
    }
    let b: Body = serde_json::from_value(resp.body.clone()).map_err(|e| e.to_string())?;
    let get = |i: usize| {
        resp.attachments
            .get(i)
            .cloned()
            .ok_or_else(|| format!("missing attachment {i}"))
    };
    let rows = b
        .rows
        .iter()
        .map(|r| r.iter().map(|&i| get(i)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()?;
    let mask = b
        .mask
        .map(|m| {
            m.iter()
                .map(|&i| get(i).and_then(|c| CipherBool::try_from(c).map_err(|e| e.to_string())))
                .collect::<Result<Vec<_>, _>>()
        })
        .transpose()?;
    let row_count = resp.row_count.unwrap_or(rows.len() as u64);
    if rows.len() as u64 != row_count || mask.as_ref().is_some_and(|m| m.len() != rows.len()) {
        return Err("result lengths disagree".into());
    }
    Ok(EncryptedResult {
        columns: b.columns,
        rows,
        mask,
        row_count,
    })
}

fn error_kind(e: &EngineError) -> &'static str {
    match e {
        EngineError::Auth(a) => match a {
            AuthError::BadSignature => "bad_signature",
            AuthError::Expired(_) => "expired",
            AuthError::Replayed => "replayed",
            AuthError::Forbidden(_) => "forbidden",
            AuthError::Malformed(_) => "malformed_token",
            _ => "unauthorized",
        },
        EngineError::Sql(SqlError::Version(_)) => "version",
        EngineError::Sql(_) => "sql",
        EngineError::UnknownTable(_) | EngineError::Storage(StorageError::UnknownTable(_)) => "unknown_table",
        EngineError::SchemaMismatch(_) | EngineError::Storage(StorageError::SchemaMismatch(_)) => "schema",
        EngineError::Storage(_) => "storage",
        EngineError::Crypto(_) => "crypto",
        EngineError::UnresolvedIdentifier(_) | EngineError::LengthMismatch(_) => "schema",
        EngineError::UnknownOwner(_) => "unauthorized",
    }
}

fn from_engine(e: EngineError) -> Response {
    Response::error(error_kind(&e), e.to_string())
}

fn outcome_response(o: QueryOutcome) -> Response {
    let (body, attachments) = encode_result(&o.result);
    Response {
        status: Status::Ok,
        error: None,
        row_count: Some(o.result.row_count),
        body,
        attachments,
        transcript_id: Some(o.transcript_id),
    }
}

fn token_of(req: &Request) -> Result<DelegationToken, Response> {
    let t = req
        .token
        .as_deref()
        .ok_or_else(|| Response::error("unauthorized", "request carries no token"))?;
    DelegationToken::from_base64(t).map_err(|e| Response::error("malformed_token", e.to_string()))
}

fn body_str<'a>(req: &'a Request, key: &str) -> Result<&'a str, Response> {
    req.body
        .get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| Response::error("malformed", format!("body.{key} must be a string")))
}

/// Dispatches one request against `server`.
pub fn handle_request(server: &Server, req: Request) -> Response {
    if req.version != PROTOCOL_VERSION {
        return Response::error("version", format!("unsupported protocol version {}", req.version));
    }
    match dispatch(server, &req) {
        Ok(r) | Err(r) => r,
    }
}

fn dispatch(server: &Server, req: &Request) -> Result<Response, Response> {
    match req.kind {
        RequestKind::Query => {
            let token = token_of(req)?;
            let q = req
                .body
                .get("query")
                .ok_or_else(|| Response::error("malformed", "body.query missing"))?;
            let bytes = serde_json::to_vec(q).expect("value serializes");
            // authorize before touching the query so a bad token costs nothing
            let ev = server
                .authorize(&token, crate::access::Permissions::READ)
                .map_err(from_engine)?;
            let ast = deserialize_ast(&bytes).map_err(|e| from_engine(e.into()))?;
            server
                .process_ast(&ev, &ast, &token)
                .map(outcome_response)
                .map_err(from_engine)
        }
        RequestKind::PirLookup => {
            let token = token_of(req)?;
            let table = body_str(req, "table")?;
            let idx = req
                .body
                .get("key")
                .and_then(Value::as_u64)
                .ok_or_else(|| Response::error("malformed", "body.key must be an attachment index"))?;
            let key = &req.attachments[idx as usize];
            let mode = match req.body.get("mode").and_then(Value::as_str).unwrap_or("sparse") {
                "sparse" => PirMode::Sparse,
                "aggregate" => PirMode::Aggregate,
                other => return Err(Response::error("malformed", format!("unknown mode {other:?}"))),
            };
            server
                .process_pir(table, key, mode, &token)
                .map(outcome_response)
                .map_err(from_engine)
        }
        RequestKind::Insert => {
            let token = token_of(req)?;
            let table = body_str(req, "table")?;
            let idx: Vec<Vec<usize>> = serde_json::from_value(req.body.get("rows").cloned().unwrap_or(Value::Null))
                .map_err(|e| Response::error("malformed", format!("body.rows: {e}")))?;
            let rows = idx
                .iter()
                .map(|r| r.iter().map(|&i| req.attachments[i].clone()).collect())
                .collect();
            let ids = server.insert_rows(table, rows, &token).map_err(from_engine)?;
            let mut r = Response::ok(json!({ "row_ids": ids }));
            r.row_count = Some(ids.len() as u64);
            Ok(r)
        }
        RequestKind::Admin => admin(server, req),
    }
}

fn admin(server: &Server, req: &Request) -> Result<Response, Response> {
    let op = body_str(req, "op")?;
    let storage = |e: StorageError| from_engine(e.into());
    match op {
        "health" => Ok(Response::ok(json!({"status": "healthy"}))),
        "tables" => {
            let cats = server.store().tables().map_err(storage)?;
            Ok(Response::ok(json!(cats
                .iter()
                .map(|c| json!({"name": c.schema.name, "row_count": c.row_count}))
                .collect::<Vec<_>>())))
        }
        "describe" => {
            let table = body_str(req, "table")?;
            let cat = server.store().catalog(table).map_err(storage)?;
            let mut r = Response::ok(serde_json::to_value(&cat.schema).expect("schema serializes"));
            r.row_count = Some(cat.row_count);
            Ok(r)
        }
        "create_table" => {
            let token = token_of(req)?;
            let schema: TableSchema = serde_json::from_value(req.body.get("schema").cloned().unwrap_or(Value::Null))
                .map_err(|e| Response::error("malformed", format!("body.schema: {e}")))?;
            server.create_table(schema, &token).map_err(from_engine)?;
            Ok(Response::ok(Value::Null))
        }
        "delete_row" => {
            let token = token_of(req)?;
            let table = body_str(req, "table")?;
            let row = req
                .body
                .get("row_id")
                .and_then(Value::as_u64)
                .ok_or_else(|| Response::error("malformed", "body.row_id must be an integer"))?;
            server.delete_row(table, row, &token).map_err(from_engine)?;
            Ok(Response::ok(Value::Null))
        }
        "compact" => {
            let token = token_of(req)?;
            server
                .authorize(&token, crate::access::Permissions::DELETE)
                .map_err(from_engine)?;
            let reclaimed = server.store().compact().map_err(storage)?;
            Ok(Response::ok(json!({ "reclaimed_bytes": reclaimed })))
        }
        "transcript" => {
            let id = req
                .body
                .get("id")
                .and_then(Value::as_u64)
                .ok_or_else(|| Response::error("malformed", "body.id must be an integer"))?;
            let t = server
                .transcript(id)
                .ok_or_else(|| Response::error("not_found", format!("no transcript {id}")))?;
            Ok(Response::ok(t.to_json()))
        }
        "stats" => Ok(Response::ok(json!({
            "backend": server.stats(),
            "cache": server.store().blobs().cache_stats(),
        }))),
        other => Err(Response::error("malformed", format!("unknown admin op {other:?}"))),
    }
}

/// Parses a frame payload and dispatches it; malformed input yields an
/// error response rather than a dropped connection.
pub fn handle_frame(server: &Server, payload: &[u8]) -> Response {
    match Request::from_bytes(payload) {
        Ok(req) => handle_request(server, req),
        Err(e) => Response::error("malformed", e),
    }
}

/// A running TCP listener.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_inner();
    }

    fn stop_inner(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the accept loop
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    /// Blocks until the accept loop exits.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.stop_inner();
        }
    }
}

/// Binds `addr` and serves each connection on its own thread; requests on
/// one connection are handled in order.
pub fn serve(addr: impl ToSocketAddrs, server: Arc<Server>, max_frame: usize) -> io::Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop2 = stop.clone();
    let thread = std::thread::Builder::new()
        .name("fhesql-accept".into())
        .spawn(move || {
            for conn in listener.incoming() {
                if stop2.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let server = server.clone();
                let _ = std::thread::Builder::new()
                    .name("fhesql-conn".into())
                    .spawn(move || connection(stream, &server, max_frame));
            }
        })?;
    Ok(ServerHandle {
        addr: local,
        stop,
        thread: Some(thread),
    })
}

fn connection(mut stream: TcpStream, server: &Server, max_frame: usize) {
    let _ = stream.set_nodelay(true);
    loop {
        let payload = match read_frame(&mut stream, max_frame) {
            Ok(p) => p,
            Err(FrameError::TooLarge { len, max }) => {
                // cannot resynchronize; report and hang up
                let r = Response::error("frame_too_large", format!("frame of {len} bytes exceeds {max}"));
                let _ = write_frame(&mut stream, &r.to_bytes(), usize::MAX);
                return;
            }
            Err(_) => return,
        };
        let resp = handle_frame(server, &payload);
        if write_frame(&mut stream, &resp.to_bytes(), usize::MAX).is_err() {
            return;
        }
    }
}

/// Client side of the framing over one persistent connection.
pub struct TcpClient {
    stream: TcpStream,
    max_frame: usize,
}

impl TcpClient {
    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> io::Result<TcpClient> {
        let addr = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "no address"))?;
        let stream = TcpStream::connect_timeout(&addr, timeout)?;
        stream.set_nodelay(true)?;
        Ok(TcpClient {
            stream,
            max_frame: DEFAULT_MAX_FRAME,
        })
    }

    pub fn round_trip(&mut self, payload: &[u8]) -> Result<Vec<u8>, FrameError> {
        write_frame(&mut self.stream, payload, self.max_frame)?;
        read_frame(&mut self.stream, self.max_frame)
    }
}
