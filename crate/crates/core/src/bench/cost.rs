//! Closed-form cost of a query from its shape, and the check that a run
//! performed exactly the predicted operations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use crate::crypto::{BackendStats, OpKind, OpLatencyTable, Width};
use crate::schema::TableSchema;
use crate::sql::{CompareOp, ExprNode, LogicalOp, SqlAst, SqlError};

/// Client-side cost of a key-value lookup over `n` entries: one key
/// encryption and two decryptions per returned pair.
pub fn estimate_client_time(n: u64, table: &OpLatencyTable) -> f64 {
    table.latency_ms(OpKind::Encrypt, Width::W32) + (2 * n) as f64 * table.latency_ms(OpKind::Decrypt, Width::W32)
}

/// Server-side cost of a key-value lookup over `n` entries: one equality
/// and two muxes against a trivial zero per entry.
pub fn estimate_server_time(n: u64, table: &OpLatencyTable) -> f64 {
    n as f64 * table.latency_ms(OpKind::Eq, Width::W32)
        + (2 * n) as f64 * table.latency_ms(OpKind::CmuxTrivial, Width::W32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Client,
    Server,
}

/// One breakdown entry: `count` operations at `unit_ms` each.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostLine {
    pub side: Side,
    pub kind: OpKind,
    pub width: Width,
    pub count: u64,
    pub unit_ms: f64,
    pub total_ms: f64,
}

/// Predicted operation counts and their price.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostEstimate {
    pub client_ms: f64,
    pub server_ms: f64,
    pub breakdown: Vec<CostLine>,
}

impl CostEstimate {
    fn build(
        client: &BTreeMap<(OpKind, Width), u64>,
        server: &BTreeMap<(OpKind, Width), u64>,
        table: &OpLatencyTable,
    ) -> Self {
        let mut breakdown = Vec::new();
        let mut totals = [0.0f64; 2];
        for (side, counts) in [(Side::Client, client), (Side::Server, server)] {
            // same iteration order as BackendStats::price, so sums agree bit for bit
            for kind in OpKind::ALL {
                for width in Width::ALL {
                    let Some(&count) = counts.get(&(kind, width)).filter(|&&c| c > 0) else {
                        continue;
                    };
                    let unit_ms = table.latency_ms(kind, width);
                    let total_ms = count as f64 * unit_ms;
                    totals[side as usize] += total_ms;
                    breakdown.push(CostLine {
                        side,
                        kind,
                        width,
                        count,
                        unit_ms,
                        total_ms,
                    });
                }
            }
        }
        CostEstimate {
            client_ms: totals[0],
            server_ms: totals[1],
            breakdown,
        }
    }

    pub fn total_ms(&self) -> f64 {
        self.client_ms + self.server_ms
    }

    /// Predicted counters for one side.
    pub fn counts(&self, side: Side) -> BTreeMap<(OpKind, Width), u64> {
        let mut out = BTreeMap::new();
        for l in self.breakdown.iter().filter(|l| l.side == side) {
            *out.entry((l.kind, l.width)).or_insert(0) += l.count;
        }
        out
    }

    pub fn count(&self, side: Side, kind: OpKind, width: Width) -> u64 {
        self.counts(side).get(&(kind, width)).copied().unwrap_or(0)
    }

    /// Counters of the given sides summed, as backend stats.
    pub fn as_stats(&self, sides: &[Side], table: &OpLatencyTable) -> BackendStats {
        let lines = self.breakdown.iter().filter(|l| sides.contains(&l.side));
        BackendStats::from_counts(lines.map(|l| ((l.kind, l.width), l.count)), table)
    }
}

/// Cost of a key-value lookup over `n` entries with `(u32, u32)` rows.
pub fn estimate_pir(n: u64, aggregate: bool, return_mask: bool, table: &OpLatencyTable) -> CostEstimate {
    let mut server = BTreeMap::new();
    let mut client = BTreeMap::new();
    client.insert((OpKind::Encrypt, Width::W32), 1);
    if n > 0 {
        server.insert((OpKind::Eq, Width::W32), n);
        server.insert((OpKind::CmuxTrivial, Width::W32), 2 * n);
        server.insert((OpKind::TrivialEncrypt, Width::W32), 1);
        if aggregate {
            server.insert((OpKind::Add, Width::W32), 2 * (n - 1));
            client.insert((OpKind::Decrypt, Width::W32), 2);
        } else {
            client.insert((OpKind::Decrypt, Width::W32), 2 * n);
            if return_mask {
                client.insert((OpKind::Decrypt, Width::W1), n);
            }
        }
    }
    CostEstimate::build(&client, &server, table)
}

fn operand_width(node: &ExprNode, schema: &TableSchema) -> Option<Width> {
    match node {
        ExprNode::Identifier(name) => schema.column(name).map(|(_, c)| c.width),
        _ => None,
    }
}

fn count_tree(
    node: &ExprNode,
    schema: &TableSchema,
    per_row: &mut BTreeMap<(OpKind, Width), u64>,
    literals: &mut BTreeMap<(OpKind, Width), u64>,
) -> Result<(), SqlError> {
    match node {
        ExprNode::Binary { op, left, right } => {
            let kind = match op {
                LogicalOp::And => OpKind::And,
                LogicalOp::Or => OpKind::Or,
            };
            *per_row.entry((kind, Width::W1)).or_insert(0) += 1;
            count_tree(left, schema, per_row, literals)?;
            count_tree(right, schema, per_row, literals)
        }
        ExprNode::Comparison { op, left, right } => {
            let width = operand_width(left, schema)
                .or_else(|| operand_width(right, schema))
                .ok_or(SqlError::UntypedComparison)?;
            let kind = match op {
                CompareOp::Eq => OpKind::Eq,
                CompareOp::Lt | CompareOp::Gt => OpKind::Lt,
                CompareOp::Le | CompareOp::Ge => OpKind::Le,
            };
            *per_row.entry((kind, width)).or_insert(0) += 1;
            for side in [left, right] {
                if !matches!(**side, ExprNode::Identifier(_)) {
                    *literals.entry((OpKind::Encrypt, width)).or_insert(0) += 1;
                }
            }
            Ok(())
        }
        ExprNode::Identifier(name) => Err(SqlError::UnknownColumn(name.clone())),
        _ => Err(SqlError::Malformed("operand where a predicate was expected".into())),
    }
}

/// Cost of running `ast` over `n` rows of `schema`, derived from the tree
/// shape alone. Literals may be plain or encrypted.
pub fn estimate_query(
    ast: &SqlAst,
    schema: &TableSchema,
    n: u64,
    return_mask: bool,
    table: &OpLatencyTable,
) -> Result<CostEstimate, SqlError> {
    let selected: Vec<Width> = if ast.selects_all() {
        schema.columns.iter().map(|c| c.width).collect()
    } else {
        ast.columns
            .iter()
            .map(|c| {
                schema
                    .column(c)
                    .map(|(_, d)| d.width)
                    .ok_or_else(|| SqlError::UnknownColumn(c.clone()))
            })
            .collect::<Result<_, _>>()?
    };
    let mut per_row = BTreeMap::new();
    let mut client = BTreeMap::new();
    match &ast.where_clause {
        Some(root) => count_tree(root, schema, &mut per_row, &mut client)?,
        None => {
            per_row.insert((OpKind::TrivialEncrypt, Width::W1), 1);
        }
    }
    let mut server: BTreeMap<(OpKind, Width), u64> = per_row.into_iter().map(|(k, c)| (k, c * n)).collect();
    if n > 0 {
        let widths: BTreeSet<Width> = selected.iter().copied().collect();
        for w in widths {
            *server.entry((OpKind::TrivialEncrypt, w)).or_insert(0) += 1;
        }
        for &w in &selected {
            *server.entry((OpKind::CmuxTrivial, w)).or_insert(0) += n;
            *client.entry((OpKind::Decrypt, w)).or_insert(0) += n;
        }
        if return_mask {
            *client.entry((OpKind::Decrypt, Width::W1)).or_insert(0) += n;
        }
    }
    Ok(CostEstimate::build(&client, &server, table))
}

/// A counter where the measurement disagrees with the prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CountMismatch {
    pub kind: OpKind,
    pub width: Width,
    pub predicted: u64,
    pub measured: u64,
}

impl fmt::Display for CountMismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}: predicted {}, measured {}",
            self.kind, self.width, self.predicted, self.measured
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub mismatches: Vec<CountMismatch>,
    pub predicted_ms: f64,
    pub measured_ms: f64,
}

impl CostReport {
    pub fn is_exact(&self) -> bool {
        self.mismatches.is_empty() && self.predicted_ms == self.measured_ms
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_exact() {
            return write!(f, "exact ({:.4} ms)", self.measured_ms);
        }
        let parts: Vec<String> = self.mismatches.iter().map(ToString::to_string).collect();
        write!(
            f,
            "predicted {:.4} ms, measured {:.4} ms; {}",
            self.predicted_ms,
            self.measured_ms,
            parts.join("; ")
        )
    }
}

/// Compares measured counters (a `since` delta around the run) with the
/// prediction for `sides`, priced with `table`.
pub fn verify_cost_model(
    measured: &BackendStats,
    estimate: &CostEstimate,
    sides: &[Side],
    table: &OpLatencyTable,
) -> CostReport {
    let predicted = estimate.as_stats(sides, table);
    let mut mismatches = Vec::new();
    for kind in OpKind::ALL {
        for width in Width::ALL {
            let (p, m) = (predicted.count(kind, width), measured.count(kind, width));
            if p != m {
                mismatches.push(CountMismatch {
                    kind,
                    width,
                    predicted: p,
                    measured: m,
                });
            }
        }
    }
    CostReport {
        mismatches,
        predicted_ms: predicted.simulated_latency_ms,
        measured_ms: measured.price(table),
    }
}
