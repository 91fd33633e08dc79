mod common;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};

use common::{instance, Fixture, OWNER};
use fhesql::access::Permissions;
use fhesql::bench::{estimate_pir, estimate_query, verify_cost_model, Side};
use fhesql::client::{encrypt_query, FilterMode};
use fhesql::crypto::{FheBackend, OpKind, OpLatencyTable, SimBackend, Width};
use fhesql::engine::{EngineConfig, OwnerRecord, PirMode, Server};
use fhesql::net::encode_result;
use fhesql::sql::parse_sql;
use proptest::prelude::*;

fn shared() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| Fixture::new(true))
}

fn fresh_table() -> String {
    static N: AtomicUsize = AtomicUsize::new(0);
    format!("t{}", N.fetch_add(1, Ordering::Relaxed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matches_plaintext_reference_with_exact_cost((ncols, rows, q) in instance(64)) {
        let f = shared();
        let name = fresh_table();
        let schema = f.load(&name, ncols, &rows);
        let sql = q.sql(&name);
        let table = OpLatencyTable::default();
        let client = f.client();
        let token = f.token(Permissions::READ);
        let (s0, c0) = (f.server.stats(), f.client_backend.stats());
        let out = client.query(&sql, &token).unwrap();
        let server_ops = f.server.stats().since(&s0, &table);
        let client_ops = f.client_backend.stats().since(&c0, &table);

        let mut got = out.result.values();
        got.sort();
        prop_assert_eq!(got, q.answer(ncols, &rows), "{}", sql);
        prop_assert_eq!(out.row_count, rows.len() as u64);

        let est = estimate_query(&parse_sql(&sql).unwrap(), &schema, rows.len() as u64, true, &table).unwrap();
        let s = verify_cost_model(&server_ops, &est, &[Side::Server], &table);
        prop_assert!(s.is_exact(), "server {}: {}", sql, s);
        let c = verify_cost_model(&client_ops, &est, &[Side::Client], &table);
        prop_assert!(c.is_exact(), "client {}: {}", sql, c);
    }

    #[test]
    fn nonzero_mode_only_loses_all_zero_rows((ncols, rows, q) in instance(24)) {
        let f = shared();
        let name = fresh_table();
        f.load(&name, ncols, &rows);
        let sql = q.sql(&name);
        let mut got = f.client().with_filter(FilterMode::NonZero).query(&sql, &f.token(Permissions::READ)).unwrap().result.values();
        got.sort();
        let want: Vec<Vec<u32>> = q.answer(ncols, &rows).into_iter().filter(|r| r.iter().any(|&v| v != 0)).collect();
        prop_assert_eq!(got, want);
    }
}

/// Server counters for one query, keyed by (op, width), and their price.
fn run_counts(f: &Fixture, sql: &str) -> (BTreeMap<(OpKind, Width), u64>, u64, usize) {
    let table = OpLatencyTable::default();
    let before = f.server.stats();
    let out = f.client().query(sql, &f.token(Permissions::READ)).unwrap();
    let d = f.server.stats().since(&before, &table);
    (d.nonzero(), d.simulated_latency_ms.to_bits(), out.result.len())
}

#[test]
fn counters_do_not_depend_on_selectivity() {
    let f = Fixture::new(true);
    let n = 20u32;
    let rows: Vec<Vec<u32>> = (0..n).map(|i| vec![i, 1000 + i, i % 3]).collect();
    f.load("t", 3, &rows);
    let mut seen = Vec::new();
    for (bound, expect) in [(0, 0), (10, 10), (20, 20)] {
        let sql = format!("SELECT c1, c2 FROM t WHERE c0 < {bound} AND c1 >= 0 OR c2 = 99");
        let (counts, price, matched) = run_counts(&f, &sql);
        assert_eq!(matched, expect);
        seen.push((counts, price));
    }
    assert_eq!(seen[0], seen[1]);
    assert_eq!(seen[1], seen[2]);

    // a different table of the same size gives the same counters too
    let other: Vec<Vec<u32>> = (0..n).map(|i| vec![u32::MAX - i, 7, 99]).collect();
    f.load("u", 3, &other);
    let (counts, price, _) = run_counts(&f, "SELECT c1, c2 FROM u WHERE c0 < 5 AND c1 >= 0 OR c2 = 99");
    assert_eq!((counts, price), seen[0]);
}

#[test]
fn one_comparison_per_row_per_node() {
    let f = Fixture::new(true);
    let rows: Vec<Vec<u32>> = (0..13).map(|i| vec![i, 2 * i]).collect();
    f.load("t", 2, &rows);
    for (sql, nodes) in [
        ("SELECT * FROM t WHERE c0 = 3", 1),
        ("SELECT * FROM t WHERE c0 > 3 AND c1 <= 10", 2),
        ("SELECT c0 FROM t WHERE (c0 = 1 OR c0 = 2) AND (c1 < c0 OR c1 >= 4)", 4),
    ] {
        let (counts, _, _) = run_counts(&f, sql);
        let cmp: u64 = counts
            .iter()
            .filter(|((k, _), _)| k.is_comparison())
            .map(|(_, c)| c)
            .sum();
        assert_eq!(cmp, nodes * 13, "{sql}");
    }
}

#[test]
fn result_length_is_table_size() {
    let f = Fixture::new(true);
    let rows: Vec<Vec<u32>> = (0..9).map(|i| vec![i]).collect();
    let schema = f.load("t", 1, &rows);
    let client = f.client();
    for sql in [
        "SELECT * FROM t WHERE c0 = 100",
        "SELECT * FROM t WHERE c0 < 5",
        "SELECT * FROM t",
    ] {
        let q = encrypt_query(sql, f.client_backend.as_ref(), &f.key, &schema).unwrap();
        let (enc, _) = client.execute(&q, &f.token(Permissions::READ)).unwrap();
        assert_eq!(enc.row_count, 9);
        assert_eq!(enc.rows.len(), 9);
        assert_eq!(enc.mask.as_ref().map(Vec::len), Some(9));
    }
}

#[test]
fn transcripts_equal_up_to_literals() {
    let f = Fixture::new(true);
    let rows: Vec<Vec<u32>> = (0..6).map(|i| vec![i * 10, i]).collect();
    let schema = f.load("t", 2, &rows);
    // a token is single use, so the same token goes to two servers over one store
    let twin = Server::new(
        f.server.store().clone(),
        Arc::new(SimBackend::with_seed(99)),
        EngineConfig::default(),
    );
    twin.register_owner(OwnerRecord {
        owner_id: OWNER.into(),
        verification_key: f.owner.verification_key(),
        evaluation_key: f.key.evaluation_key(),
    });
    let token = f.token(Permissions::READ);
    let b = f.client_backend.as_ref();
    let qa = encrypt_query("SELECT c1 FROM t WHERE c0 > 31337 AND c1 = 4", b, &f.key, &schema).unwrap();
    let qb = encrypt_query("SELECT c1 FROM t WHERE c0 > 2 AND c1 = 77777", b, &f.key, &schema).unwrap();
    let a = f.server.process_query(&qa.bytes, &token).unwrap();
    let bq = twin.process_query(&qb.bytes, &token).unwrap();
    let ta = f.server.transcript(a.transcript_id).unwrap();
    let tb = twin.transcript(bq.transcript_id).unwrap();
    assert_eq!(ta.to_bytes(), tb.to_bytes());
    assert_eq!(ta.row_count, 6);
    assert_eq!(ta.token, token);

    let bytes = ta.to_bytes();
    let text = String::from_utf8(bytes.clone()).unwrap();
    assert!(!common::contains(&bytes, b"FHEC"));
    assert!(!text.contains("31337") && !text.contains("77777"));
    for q in [&qa, &qb] {
        let lits = encrypted_literals(&serde_json::from_slice(&q.bytes).unwrap());
        assert_eq!(lits.len(), 2);
        assert!(lits.iter().all(|l| !text.contains(l.as_str())));
    }
    let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, ["redacted_ast", "row_count", "token"]);

    // different shape: different transcript
    let qc = encrypt_query("SELECT c1 FROM t WHERE c0 < 2 AND c1 = 4", b, &f.key, &schema).unwrap();
    let c = f.server.process_query(&qc.bytes, &f.token(Permissions::READ)).unwrap();
    assert_ne!(
        f.server.transcript(c.transcript_id).unwrap().redacted_ast,
        ta.redacted_ast
    );
}

fn encrypted_literals(v: &serde_json::Value) -> Vec<String> {
    match v {
        serde_json::Value::Object(m) if m.get("type").and_then(|t| t.as_str()) == Some("EncryptedLiteral") => {
            vec![m["value"].as_str().unwrap().to_string()]
        }
        serde_json::Value::Object(m) => m.values().flat_map(encrypted_literals).collect(),
        serde_json::Value::Array(a) => a.iter().flat_map(encrypted_literals).collect(),
        _ => vec![],
    }
}

#[test]
fn pir_lookup_modes_and_costs() {
    let f = Fixture::new(true);
    let kv: Vec<Vec<u32>> = vec![vec![1, 10], vec![2, 20], vec![3, 30], vec![4, 40], vec![5, 50]];
    f.load("kv", 2, &kv);
    let client = f.client();
    let table = OpLatencyTable::default();
    for (mode, aggregate) in [(PirMode::Sparse, false), (PirMode::Aggregate, true)] {
        let (s0, c0) = (f.server.stats(), f.client_backend.stats());
        let got = client.lookup("kv", 3, mode, &f.token(Permissions::READ)).unwrap();
        assert_eq!(got, vec![(3, 30)]);
        let sd = f.server.stats().since(&s0, &table);
        let cd = f.client_backend.stats().since(&c0, &table);
        assert_eq!(sd.total(OpKind::Eq), 5);
        assert_eq!(sd.cmux_total(), 10);
        let est = estimate_pir(5, aggregate, !aggregate, &table);
        assert!(verify_cost_model(&sd, &est, &[Side::Server], &table).is_exact());
        let c = verify_cost_model(&cd, &est, &[Side::Client], &table);
        assert!(c.is_exact(), "{c}");
        // one encryption and 2n value decryptions, plus n mask bits in sparse mode
        assert_eq!(cd.total(OpKind::Encrypt), 1);
        assert_eq!(cd.count(OpKind::Decrypt, Width::W32), if aggregate { 2 } else { 10 });
    }
    assert!(client
        .lookup("kv", 9, PirMode::Sparse, &f.token(Permissions::READ))
        .unwrap()
        .is_empty());
    assert!(client
        .lookup("kv", 9, PirMode::Aggregate, &f.token(Permissions::READ))
        .unwrap()
        .is_empty());
}

#[test]
fn zero_valued_match_kept_only_with_mask() {
    let f = Fixture::new(true);
    f.load("t", 2, &[vec![0, 0], vec![5, 1]]);
    let sql = "SELECT * FROM t WHERE c0 < 3";
    let tok = || f.token(Permissions::READ);
    assert_eq!(f.client().query(sql, &tok()).unwrap().result.values(), vec![vec![0, 0]]);
    assert!(f
        .client()
        .with_filter(FilterMode::NonZero)
        .query(sql, &tok())
        .unwrap()
        .result
        .is_empty());

    let plain = Fixture::new(false);
    plain.load("t", 2, &[vec![0, 0], vec![5, 1]]);
    let out = plain.client().query(sql, &plain.token(Permissions::READ)).unwrap();
    assert!(out.result.is_empty());
    assert!(plain
        .client()
        .with_filter(FilterMode::Mask)
        .query(sql, &plain.token(Permissions::READ))
        .is_err());
}

#[test]
fn execution_is_deterministic() {
    let run = || {
        let f = Fixture::new(true);
        let rows: Vec<Vec<u32>> = (0..16).map(|i| vec![i, i * i]).collect();
        let schema = f.load("t", 2, &rows);
        let q = encrypt_query(
            "SELECT c1 FROM t WHERE c0 >= 4 AND c1 < 100",
            f.client_backend.as_ref(),
            &f.key,
            &schema,
        )
        .unwrap();
        let (enc, _) = f.client().execute(&q, &f.token(Permissions::READ)).unwrap();
        let (body, atts) = encode_result(&enc);
        (body, atts.iter().map(|c| c.to_bytes()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn rejected_queries_cost_nothing() {
    let f = Fixture::new(true);
    let schema = f.load("t", 1, &[vec![1], vec![2]]);
    let q = encrypt_query(
        "SELECT * FROM t WHERE c0 = 1",
        f.client_backend.as_ref(),
        &f.key,
        &schema,
    )
    .unwrap();
    let before = f.server.stats();
    assert!(f.server.process_query(&q.bytes, &f.token(Permissions::WRITE)).is_err());
    let t = f.token(Permissions::READ);
    f.server.process_query(&q.bytes, &t).unwrap();
    let mid = f.server.stats();
    assert!(f.server.process_query(&q.bytes, &t).is_err());
    assert!(f
        .server
        .process_query(b"{\"type\":\"Select\"", &f.token(Permissions::READ))
        .is_err());
    assert_eq!(f.server.stats(), mid);
    assert_ne!(before, mid);
}
