//! Shared fixtures and a plaintext reference evaluator.
#![allow(dead_code)]

use std::sync::Arc;

use fhesql::access::{create_token, unix_now, DelegationToken, OwnerKeypair, Permissions};
use fhesql::client::{Client, LocalTransport};
use fhesql::crypto::{FheBackend, KeyMaterial, SimBackend};
use fhesql::engine::{EngineConfig, OwnerRecord, Server};
use fhesql::schema::{ColumnDef, TableSchema};
use fhesql::storage::{BlobStoreConfig, HybridStore, StoreConfig};
use proptest::prelude::*;

pub const OWNER: &str = "alice";

pub fn store_config() -> StoreConfig {
    StoreConfig {
        blob: BlobStoreConfig {
            sync_writes: false,
            ..BlobStoreConfig::default()
        },
    }
}

/// A server over a temporary store, plus the owner's client-side keys.
/// Client and server use separate backend instances so their counters
/// can be read independently.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub server: Arc<Server>,
    pub client_backend: Arc<SimBackend>,
    pub key: KeyMaterial,
    pub owner: OwnerKeypair,
}

impl Fixture {
    pub fn new(return_mask: bool) -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(HybridStore::open(dir.path(), store_config()).unwrap());
        Fixture::on_store(dir, store, return_mask)
    }

    pub fn on_store(dir: tempfile::TempDir, store: Arc<HybridStore>, return_mask: bool) -> Fixture {
        let client_backend = Arc::new(SimBackend::with_seed(11));
        let key = client_backend.keygen(128).unwrap();
        let owner = OwnerKeypair::from_seed(OWNER, [7; 32]);
        let server = Arc::new(Server::new(
            store,
            Arc::new(SimBackend::with_seed(12)),
            EngineConfig {
                return_mask,
                ..EngineConfig::default()
            },
        ));
        server.register_owner(OwnerRecord {
            owner_id: OWNER.into(),
            verification_key: owner.verification_key(),
            evaluation_key: key.evaluation_key(),
        });
        Fixture {
            dir,
            server,
            client_backend,
            key,
            owner,
        }
    }

    pub fn client(&self) -> Client {
        Client::new(
            LocalTransport::new(self.server.clone()),
            self.client_backend.clone(),
            self.key.clone(),
        )
    }

    pub fn token(&self, perms: Permissions) -> DelegationToken {
        create_token(&self.owner, OWNER, perms, unix_now() + 600).unwrap()
    }

    pub fn all(&self) -> DelegationToken {
        self.token(Permissions::all())
    }

    /// Creates `name` with `cols` u32 columns `c0..` and loads `rows`.
    pub fn load(&self, name: &str, cols: usize, rows: &[Vec<u32>]) -> TableSchema {
        let schema = u32_schema(name, cols);
        let c = self.client();
        c.create_table(&schema, &self.all()).unwrap();
        if !rows.is_empty() {
            let rows: Vec<Vec<u64>> = rows.iter().map(|r| r.iter().map(|&v| v as u64).collect()).collect();
            c.insert(name, &rows, &self.all()).unwrap();
        }
        schema
    }
}

pub fn u32_schema(name: &str, cols: usize) -> TableSchema {
    TableSchema::new(
        name,
        (0..cols)
            .map(|i| ColumnDef::new(format!("c{i}"), fhesql::crypto::Width::W32))
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Eq,
    Lt,
    Le,
    Gt,
    Ge,
}

impl Op {
    fn sym(self) -> &'static str {
        match self {
            Op::Eq => "=",
            Op::Lt => "<",
            Op::Le => "<=",
            Op::Gt => ">",
            Op::Ge => ">=",
        }
    }

    fn holds(self, a: u32, b: u32) -> bool {
        match self {
            Op::Eq => a == b,
            Op::Lt => a < b,
            Op::Le => a <= b,
            Op::Gt => a > b,
            Op::Ge => a >= b,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Operand {
    Col(usize),
    Lit(u32),
}

/// A generated WHERE predicate. Every comparison has at least one column.
#[derive(Debug, Clone)]
pub enum Pred {
    Cmp(Op, Operand, Operand),
    And(Box<Pred>, Box<Pred>),
    Or(Box<Pred>, Box<Pred>),
}

impl Pred {
    pub fn eval(&self, row: &[u32]) -> bool {
        let v = |o: &Operand| match o {
            Operand::Col(i) => row[*i],
            Operand::Lit(x) => *x,
        };
        match self {
            Pred::Cmp(op, a, b) => op.holds(v(a), v(b)),
            Pred::And(a, b) => a.eval(row) && b.eval(row),
            Pred::Or(a, b) => a.eval(row) || b.eval(row),
        }
    }

    pub fn sql(&self) -> String {
        let o = |o: &Operand| match o {
            Operand::Col(i) => format!("c{i}"),
            Operand::Lit(x) => x.to_string(),
        };
        match self {
            Pred::Cmp(op, a, b) => format!("{} {} {}", o(a), op.sym(), o(b)),
            Pred::And(a, b) => format!("({} AND {})", a.sql(), b.sql()),
            Pred::Or(a, b) => format!("({} OR {})", a.sql(), b.sql()),
        }
    }

    pub fn literals(&self) -> Vec<u32> {
        match self {
            Pred::Cmp(_, a, b) => [a, b]
                .into_iter()
                .filter_map(|o| match o {
                    Operand::Lit(x) => Some(*x),
                    Operand::Col(_) => None,
                })
                .collect(),
            Pred::And(a, b) | Pred::Or(a, b) => {
                let mut v = a.literals();
                v.extend(b.literals());
                v
            }
        }
    }
}

/// A generated query over a `u32_schema` table.
#[derive(Debug, Clone)]
pub struct GenQuery {
    /// `None` selects `*`.
    pub columns: Option<Vec<usize>>,
    pub pred: Option<Pred>,
}

impl GenQuery {
    pub fn sql(&self, table: &str) -> String {
        let cols = match &self.columns {
            None => "*".to_string(),
            Some(c) => c.iter().map(|i| format!("c{i}")).collect::<Vec<_>>().join(", "),
        };
        match &self.pred {
            None => format!("SELECT {cols} FROM {table}"),
            Some(p) => format!("SELECT {cols} FROM {table} WHERE {}", p.sql()),
        }
    }

    /// The reference answer, sorted.
    pub fn answer(&self, ncols: usize, rows: &[Vec<u32>]) -> Vec<Vec<u32>> {
        let sel: Vec<usize> = self.columns.clone().unwrap_or_else(|| (0..ncols).collect());
        let mut out: Vec<Vec<u32>> = rows
            .iter()
            .filter(|r| self.pred.as_ref().is_none_or(|p| p.eval(r)))
            .map(|r| sel.iter().map(|&i| r[i]).collect())
            .collect();
        out.sort();
        out
    }
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![Just(Op::Eq), Just(Op::Lt), Just(Op::Le), Just(Op::Gt), Just(Op::Ge)]
}

/// Literals mostly land inside the data range so selectivity varies.
pub fn literal() -> impl Strategy<Value = u32> {
    prop_oneof![8 => 0u32..64, 1 => any::<u32>(), 1 => Just(u32::MAX), 1 => Just(0u32)]
}

pub fn cell() -> impl Strategy<Value = u32> {
    prop_oneof![8 => 0u32..64, 1 => any::<u32>(), 1 => Just(0u32)]
}

fn comparison(ncols: usize) -> impl Strategy<Value = Pred> {
    let col = move || (0..ncols).prop_map(Operand::Col);
    let other = move || prop_oneof![2 => literal().prop_map(Operand::Lit), 1 => (0..ncols).prop_map(Operand::Col)];
    (op(), col(), other(), any::<bool>())
        .prop_map(|(op, c, o, swap)| if swap { Pred::Cmp(op, o, c) } else { Pred::Cmp(op, c, o) })
}

pub fn pred(ncols: usize) -> impl Strategy<Value = Pred> {
    comparison(ncols).prop_recursive(3, 8, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Pred::And(Box::new(a), Box::new(b))),
            (inner.clone(), inner).prop_map(|(a, b)| Pred::Or(Box::new(a), Box::new(b))),
        ]
    })
}

pub fn query(ncols: usize) -> impl Strategy<Value = GenQuery> {
    let cols = prop_oneof![
        1 => Just(None),
        2 => proptest::collection::vec(0..ncols, 1..=ncols).prop_map(Some),
    ];
    (cols, proptest::option::weighted(0.85, pred(ncols))).prop_map(|(columns, pred)| GenQuery { columns, pred })
}

/// A table with 1-4 columns, up to `max_rows` rows, and a query over it.
pub fn instance(max_rows: usize) -> impl Strategy<Value = (usize, Vec<Vec<u32>>, GenQuery)> {
    (1usize..=4).prop_flat_map(move |ncols| {
        (
            Just(ncols),
            proptest::collection::vec(proptest::collection::vec(cell(), ncols), 0..=max_rows),
            query(ncols),
        )
    })
}

/// True when `needle` occurs in `hay`.
pub fn contains(hay: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}
