mod common;

use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Duration;

use base64::Engine as _;
use common::{contains, Fixture};
use fhesql::access::Permissions;
use fhesql::client::{Client, ClientError, LocalTransport, Transport};
use fhesql::crypto::{FheBackend, PlainScalar, SimBackend, Width};
use fhesql::engine::PirMode;
use fhesql::net::{
    read_frame, serve, write_frame, Request, RequestKind, Response, Status, TcpClient, DEFAULT_MAX_FRAME,
};
use proptest::prelude::*;
use serde_json::{json, Value};

fn json_value() -> impl Strategy<Value = Value> {
    let leaf = prop_oneof![
        Just(Value::Null),
        any::<bool>().prop_map(Value::from),
        any::<i64>().prop_map(Value::from),
        "[a-z0-9 _]{0,12}".prop_map(Value::from),
    ];
    leaf.prop_recursive(3, 24, 4, |inner| {
        prop_oneof![
            proptest::collection::vec(inner.clone(), 0..4).prop_map(Value::Array),
            proptest::collection::btree_map("[a-z]{1,6}", inner, 0..4)
                .prop_map(|m| Value::Object(m.into_iter().collect())),
        ]
    })
}

fn attachments() -> impl Strategy<Value = Vec<fhesql::crypto::Ciphertext>> {
    proptest::collection::vec(any::<u32>(), 0..4).prop_map(|vals| {
        let b = SimBackend::with_seed(3);
        let k = b.keygen(128).unwrap();
        vals.iter()
            .map(|&v| b.encrypt(&k, PlainScalar::new(v as u64, Width::W32).unwrap()).unwrap())
            .collect()
    })
}

fn kind() -> impl Strategy<Value = RequestKind> {
    prop_oneof![
        Just(RequestKind::Query),
        Just(RequestKind::PirLookup),
        Just(RequestKind::Insert),
        Just(RequestKind::Admin),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn requests_survive_the_wire(k in kind(), token in proptest::option::of("[A-Za-z0-9+/]{4,40}"), body in json_value(), att in attachments()) {
        let mut req = Request::new(k, None, body, att);
        req.token = token;
        let mut buf = Vec::new();
        write_frame(&mut buf, &req.to_bytes(), DEFAULT_MAX_FRAME).unwrap();
        let back = Request::from_bytes(&read_frame(&mut buf.as_slice(), DEFAULT_MAX_FRAME).unwrap()).unwrap();
        prop_assert_eq!(back, req);
    }

    #[test]
    fn responses_survive_the_wire(ok in any::<bool>(), body in json_value(), att in attachments(), rc in proptest::option::of(any::<u64>()), tid in proptest::option::of(1u64..1000)) {
        let mut resp = if ok { Response::ok(body) } else { Response::error("sql", "bad") };
        if ok {
            resp.attachments = att;
            resp.row_count = rc;
            resp.transcript_id = tid;
        }
        let mut buf = Vec::new();
        write_frame(&mut buf, &resp.to_bytes(), DEFAULT_MAX_FRAME).unwrap();
        let back = Response::from_bytes(&read_frame(&mut buf.as_slice(), DEFAULT_MAX_FRAME).unwrap()).unwrap();
        prop_assert_eq!(back, resp);
    }
}

fn raw(stream: &mut TcpStream, payload: &[u8]) -> Response {
    write_frame(stream, payload, usize::MAX).unwrap();
    Response::from_bytes(&read_frame(stream, DEFAULT_MAX_FRAME).unwrap()).unwrap()
}

#[test]
fn tcp_connection_survives_garbage_but_not_oversized_frames() {
    let f = Fixture::new(true);
    f.load("t", 1, &[vec![1]]);
    let h = serve("127.0.0.1:0", f.server.clone(), 1 << 16).unwrap();
    let mut s = TcpStream::connect(h.local_addr()).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(10))).unwrap();

    for junk in [&b"{"[..], b"null", b"\xff\xfe", b"{\"version\":1}", b""] {
        let r = raw(&mut s, junk);
        assert_eq!(r.status, Status::Error);
        assert_eq!(r.error.unwrap().kind, "malformed");
    }
    let mut req = Request::new(RequestKind::Admin, None, json!({"op": "health"}), vec![]);
    req.version = 99;
    assert_eq!(raw(&mut s, &req.to_bytes()).error.unwrap().kind, "version");
    let health = Request::new(RequestKind::Admin, None, json!({"op": "health"}), vec![]);
    assert_eq!(raw(&mut s, &health.to_bytes()).status, Status::Ok);

    // only the length prefix goes out; the server must answer without the body
    s.write_all(&(1u32 << 20).to_be_bytes()).unwrap();
    let r = Response::from_bytes(&read_frame(&mut s, DEFAULT_MAX_FRAME).unwrap()).unwrap();
    assert_eq!(r.error.unwrap().kind, "frame_too_large");
    let mut rest = Vec::new();
    assert_eq!(s.read_to_end(&mut rest).unwrap_or(0), 0);

    // the listener itself keeps serving
    let mut c = TcpClient::connect(h.local_addr(), Duration::from_secs(5)).unwrap();
    let r = Response::from_bytes(&c.round_trip(&health.to_bytes()).unwrap()).unwrap();
    assert_eq!(r.status, Status::Ok);
    h.shutdown();
}

/// Collects every log record so the test can inspect what the server wrote.
struct Capture(Mutex<Vec<String>>);

impl log::Log for Capture {
    fn enabled(&self, _: &log::Metadata) -> bool {
        true
    }
    fn log(&self, r: &log::Record) {
        self.0.lock().unwrap().push(r.args().to_string());
    }
    fn flush(&self) {}
}

fn captured() -> &'static Capture {
    static C: OnceLock<&'static Capture> = OnceLock::new();
    C.get_or_init(|| {
        let c: &'static Capture = Box::leak(Box::new(Capture(Mutex::new(Vec::new()))));
        log::set_logger(c).unwrap();
        log::set_max_level(log::LevelFilter::Trace);
        c
    })
}

/// Plaintexts that must never reach the server in the clear.
const SECRETS: [u32; 6] = [104_729, 271_828, 314_159, 577_215, 161_803, 141_421];

#[derive(Clone)]
struct Recording {
    inner: LocalTransport,
    sent: Arc<Mutex<Vec<Vec<u8>>>>,
}

impl Transport for Recording {
    fn send(&self, req: &Request) -> Result<Response, ClientError> {
        self.sent.lock().unwrap().push(req.to_bytes());
        self.inner.send(req)
    }
}

#[test]
fn nothing_secret_leaves_the_client_or_reaches_the_logs() {
    let cap = captured();
    let f = Fixture::new(true);
    let sent = Arc::new(Mutex::new(Vec::new()));
    let client = Client::new(
        Recording {
            inner: LocalTransport::new(f.server.clone()),
            sent: sent.clone(),
        },
        f.client_backend.clone(),
        f.key.clone(),
    );
    let schema = common::u32_schema("ledger", 2);
    client.create_table(&schema, &f.all()).unwrap();
    let rows: Vec<Vec<u64>> = SECRETS.chunks(2).map(|c| vec![c[0] as u64, c[1] as u64]).collect();
    client.insert("ledger", &rows, &f.all()).unwrap();
    let q = format!("SELECT * FROM ledger WHERE c0 > {} OR c1 = {}", SECRETS[4], SECRETS[5]);
    let res = client.query(&q, &f.token(Permissions::READ)).unwrap();
    assert!(!res.result.is_empty());
    let hit = client
        .lookup(
            "ledger",
            SECRETS[2] as u64,
            PirMode::Sparse,
            &f.token(Permissions::READ),
        )
        .unwrap();
    assert_eq!(hit, vec![(SECRETS[2], SECRETS[3])]);
    client
        .lookup(
            "ledger",
            SECRETS[0] as u64,
            PirMode::Aggregate,
            &f.token(Permissions::READ),
        )
        .unwrap();
    assert!(!f.server.audit_log().is_empty());

    let sk = &f.key.secret_key;
    let sk_b64 = base64::engine::general_purpose::STANDARD.encode(sk);
    let sk_hex = hex::encode(sk);
    for req in sent.lock().unwrap().iter() {
        assert!(!contains(req, sk));
        let text = String::from_utf8_lossy(req);
        assert!(!text.contains(&sk_b64) && !text.contains(&sk_hex));
        for v in SECRETS {
            assert!(!text.contains(&v.to_string()), "plaintext {v} in request {text}");
        }
    }

    let mut texts: Vec<String> = f.server.audit_log();
    texts.extend(cap.0.lock().unwrap().iter().cloned());
    let mut id = 1;
    while let Some(t) = f.server.transcript(id) {
        texts.push(String::from_utf8(t.to_bytes()).unwrap());
        id += 1;
    }
    assert!(id > 3, "expected transcripts for the query and both lookups");
    for t in &texts {
        for v in SECRETS {
            assert!(!t.contains(&v.to_string()), "plaintext {v} in {t}");
        }
        assert!(!t.contains("FHEC") && !t.contains("RkhFQ"), "ciphertext in {t}");
        assert!(!t.contains(&sk_b64) && !t.contains(&sk_hex));
        for word in t.split(|c: char| !(c.is_ascii_alphanumeric() || c == '+' || c == '/' || c == '=')) {
            // the token is the one long base64 value allowed in a transcript
            if word.len() > 64 && !t.contains("\"token\"") {
                panic!("opaque payload {word} in {t}");
            }
        }
    }
}
