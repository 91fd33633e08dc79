mod common;

use common::{pred, u32_schema, Operand, Pred};
use fhesql::crypto::{FheBackend, SimBackend};
use fhesql::sql::{
    ast_from_json_value, ast_to_json_value, compile_to_het, deserialize_ast, parse_sql, serialize_ast, CompareOp,
    ExprNode, LogicalOp, SqlAst,
};
use proptest::prelude::*;

const NAMES: [&str; 4] = ["age", "salary", "c_2", "Zip9"];

fn expected(p: &Pred) -> ExprNode {
    let o = |o: &Operand| match o {
        Operand::Col(i) => ExprNode::ident(NAMES[*i]),
        Operand::Lit(v) => ExprNode::number(*v as u64),
    };
    match p {
        Pred::Cmp(op, a, b) => {
            let op = match format!("{op:?}").as_str() {
                "Eq" => CompareOp::Eq,
                "Lt" => CompareOp::Lt,
                "Le" => CompareOp::Le,
                "Gt" => CompareOp::Gt,
                _ => CompareOp::Ge,
            };
            ExprNode::comparison(op, o(a), o(b))
        }
        Pred::And(a, b) => ExprNode::binary(LogicalOp::And, expected(a), expected(b)),
        Pred::Or(a, b) => ExprNode::binary(LogicalOp::Or, expected(a), expected(b)),
    }
}

/// Renders with as few parentheses as precedence allows, plus random extra
/// ones, random keyword case and random spacing. `style` drives the choices.
fn render(p: &Pred, style: &mut impl Iterator<Item = u8>) -> String {
    fn nx(s: &mut impl Iterator<Item = u8>) -> u8 {
        s.next().unwrap_or(0)
    }
    let kw = |w: &str, s: u8| match s % 3 {
        0 => w.to_uppercase(),
        1 => w.to_lowercase(),
        _ => w
            .chars()
            .enumerate()
            .map(|(i, c)| {
                if i % 2 == 0 {
                    c.to_ascii_uppercase()
                } else {
                    c.to_ascii_lowercase()
                }
            })
            .collect(),
    };
    let sp = |s: u8| [" ", "  ", "\n", "\t "][s as usize % 4];
    let o = |o: &Operand| match o {
        Operand::Col(i) => NAMES[*i].to_string(),
        Operand::Lit(v) => v.to_string(),
    };
    let s = match p {
        Pred::Cmp(op, a, b) => {
            let sym = match format!("{op:?}").as_str() {
                "Eq" => "=",
                "Lt" => "<",
                "Le" => "<=",
                "Gt" => ">",
                _ => ">=",
            };
            let gap = if nx(style).is_multiple_of(2) { "" } else { " " };
            format!("{}{gap}{sym}{gap}{}", o(a), o(b))
        }
        Pred::And(a, b) | Pred::Or(a, b) => {
            let is_and = matches!(p, Pred::And(..));
            let wrap_l = is_and && matches!(**a, Pred::Or(..));
            let wrap_r = if is_and {
                !matches!(**b, Pred::Cmp(..))
            } else {
                matches!(**b, Pred::Or(..))
            };
            let (l, r) = (render(a, style), render(b, style));
            let l = if wrap_l { format!("({l})") } else { l };
            let r = if wrap_r { format!("({r})") } else { r };
            let (s1, s2, k) = (nx(style), nx(style), nx(style));
            format!("{l}{}{}{}{r}", sp(s1), kw(if is_and { "and" } else { "or" }, k), sp(s2))
        }
    };
    if nx(style).is_multiple_of(5) {
        format!("( {s} )")
    } else {
        s
    }
}

fn cols() -> impl Strategy<Value = Vec<usize>> {
    proptest::collection::vec(0usize..4, 0..=3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(600))]

    #[test]
    fn generated_corpus_parses_and_roundtrips(
        p in proptest::option::weighted(0.9, pred(4)),
        sel in cols(),
        style in proptest::collection::vec(any::<u8>(), 64),
        semi in any::<bool>(),
    ) {
        let mut st = style.iter().copied().cycle();
        let columns = if sel.is_empty() { "*".to_string() } else { sel.iter().map(|&i| NAMES[i]).collect::<Vec<_>>().join(", ") };
        let mut sql = format!("{} {columns} {} accounts", if st.next().unwrap() % 2 == 0 { "SELECT" } else { "select" }, if st.next().unwrap() % 2 == 0 { "FROM" } else { "From" });
        if let Some(p) = &p {
            sql.push_str(&format!(" WHERE {}", render(p, &mut st)));
        }
        if semi { sql.push(';'); }

        let ast = parse_sql(&sql).map_err(|e| TestCaseError::fail(format!("{sql}: {e}")))?;
        let want = SqlAst {
            columns: if sel.is_empty() { vec!["*".into()] } else { sel.iter().map(|&i| NAMES[i].to_string()).collect() },
            from: "accounts".into(),
            where_clause: p.as_ref().map(expected),
        };
        prop_assert_eq!(&ast, &want, "{}", sql);
        prop_assert_eq!(deserialize_ast(&serialize_ast(&ast)).unwrap(), ast.clone());
        prop_assert_eq!(ast_from_json_value(ast_to_json_value(&ast)).unwrap(), ast.clone());
        prop_assert_eq!(parse_sql(&ast.to_sql()).unwrap(), ast);
    }

    #[test]
    fn normalization_preserves_meaning(p in pred(4), rows in proptest::collection::vec(proptest::collection::vec(common::cell(), 4), 1..20)) {
        let tree = expected(&p);
        let norm = tree.normalized();
        let mut ops = Vec::new();
        norm.visit(&mut |n| if let ExprNode::Comparison { op, .. } = n { ops.push(*op) });
        prop_assert!(ops.iter().all(|op| matches!(op, CompareOp::Eq | CompareOp::Lt | CompareOp::Le)));
        for row in rows {
            let lookup = |name: &str| NAMES.iter().position(|&n| n == name).map(|i| row[i] as u64);
            prop_assert_eq!(norm.eval_plain(&lookup), Some(p.eval(&row)));
            prop_assert_eq!(tree.eval_plain(&lookup), Some(p.eval(&row)));
        }
    }
}

fn big_literal() -> impl Strategy<Value = u32> {
    100_000u32..u32::MAX
}

fn hidden_pred() -> impl Strategy<Value = (Pred, Vec<u32>)> {
    (pred(4), proptest::collection::vec(big_literal(), 16)).prop_map(|(p, lits)| {
        let mut it = lits.clone().into_iter().cycle();
        fn swap(p: &Pred, it: &mut impl Iterator<Item = u32>) -> Pred {
            let o = |o: &Operand, it: &mut dyn Iterator<Item = u32>| match o {
                Operand::Lit(_) => Operand::Lit(it.next().unwrap()),
                c => c.clone(),
            };
            match p {
                Pred::Cmp(op, a, b) => {
                    let a = o(a, it);
                    Pred::Cmp(*op, a, o(b, it))
                }
                Pred::And(a, b) => Pred::And(Box::new(swap(a, it)), Box::new(swap(b, it))),
                Pred::Or(a, b) => Pred::Or(Box::new(swap(a, it)), Box::new(swap(b, it))),
            }
        }
        let p = swap(&p, &mut it);
        let used = p.literals();
        (p, used)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(150))]

    #[test]
    fn encrypted_queries_hide_literals_and_keep_shape((p, lits) in hidden_pred()) {
        let b = SimBackend::with_seed(5);
        let key = b.keygen(128).unwrap();
        let schema = u32_schema("t", 4);
        let sql = format!("SELECT * FROM t WHERE {}", p.sql());
        let plain = parse_sql(&sql).unwrap();
        let het = compile_to_het(&plain, &b, &key, &schema).unwrap();
        let enc = het.to_query(plain.columns.clone(), &plain.from);
        let bytes = serialize_ast(&enc);

        let src = plain.where_clause.as_ref().unwrap().normalized();
        let root = het.root().unwrap();
        prop_assert_eq!(root.node_count(), src.node_count());
        prop_assert_eq!(root.operators(), src.operators());
        let text = String::from_utf8(bytes.clone()).unwrap();
        prop_assert!(!text.contains("\"Number\""));
        let mut payloads = Vec::new();
        root.visit(&mut |n| if let ExprNode::EncryptedLiteral(l) = n { payloads.push(l.value().unwrap().to_bytes()) });
        prop_assert_eq!(payloads.len(), lits.len());
        for v in &lits {
            prop_assert!(!text.contains(&v.to_string()), "literal {} in {}", v, text);
            for ct in &payloads {
                prop_assert!(!common::contains(ct, &v.to_be_bytes()));
                prop_assert!(!common::contains(ct, &v.to_le_bytes()));
            }
        }
    }
}

#[test]
fn rejections_are_loud() {
    for bad in [
        "SELECT * FROM a JOIN b",
        "SELECT COUNT(*) FROM t",
        "SELECT * FROM t ORDER BY a",
        "INSERT INTO t VALUES (1)",
        "SELECT * FROM t WHERE a > 'x'",
        "SELECT * FROM t WHERE",
        "SELECT * FROM t WHERE a >",
        "SELECT * FROM t WHERE (a > 1",
        "SELECT FROM t",
        "",
    ] {
        assert!(parse_sql(bad).is_err(), "{bad:?} parsed");
    }
    let b = SimBackend::with_seed(1);
    let key = b.keygen(128).unwrap();
    let schema = u32_schema("t", 2);
    for bad in [
        "SELECT * FROM t WHERE c9 = 1",
        "SELECT c7 FROM t",
        "SELECT * FROM u",
        "SELECT * FROM t WHERE 1 = 2",
        "SELECT * FROM t WHERE c0 = 4294967296",
        "SELECT * FROM t WHERE c0",
    ] {
        let ast = parse_sql(bad);
        assert!(
            ast.is_err() || compile_to_het(&ast.unwrap(), &b, &key, &schema).is_err(),
            "{bad:?} compiled"
        );
    }
}

#[test]
fn truncated_wire_query_is_an_error() {
    let ast = parse_sql("SELECT * FROM t WHERE a = 1").unwrap();
    let bytes = serialize_ast(&ast);
    for cut in [0, 1, bytes.len() / 2, bytes.len() - 1] {
        assert!(deserialize_ast(&bytes[..cut]).is_err());
    }
}
