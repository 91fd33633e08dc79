//! Canonical JSON form of [`SqlAst`].
//!
//! The tree uses the key names `type`, `columns`, `from`, `where`,
//! `operator`, `left`, `right`, `name` and `value`. Encrypted literals carry
//! their FHEC bytes as base64; redacted literals carry the string `"⊥"`.
//! [`serialize_ast`] wraps the tree in a versioned envelope for the wire.

use serde::{Deserialize, Serialize};

use super::ast::{CompareOp, ExprNode, Literal, LogicalOp, SqlAst, REDACTED};
use super::SqlError;
use crate::crypto::Ciphertext;

pub const WIRE_VERSION: u64 = 1;

#[derive(Serialize, Deserialize)]
#[serde(tag = "type")]
enum JsonStatement {
    SelectStatement {
        columns: Vec<String>,
        from: JsonTable,
        #[serde(rename = "where", default, skip_serializing_if = "Option::is_none")]
        where_clause: Option<JsonExpr>,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type")]
enum JsonTable {
    Table { name: String },
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum JsonValue {
    Int(u64),
    Text(String),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type")]
enum JsonExpr {
    BinaryExpression {
        operator: String,
        left: Box<JsonExpr>,
        right: Box<JsonExpr>,
    },
    ComparisonExpression {
        operator: String,
        left: Box<JsonExpr>,
        right: Box<JsonExpr>,
    },
    Identifier {
        name: String,
    },
    Number {
        value: JsonValue,
    },
    EncryptedLiteral {
        value: String,
    },
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    version: u64,
    query: JsonStatement,
}

fn expr_to_json(e: &ExprNode) -> JsonExpr {
    match e {
        ExprNode::Binary { op, left, right } => JsonExpr::BinaryExpression {
            operator: op.as_str().to_string(),
            left: Box::new(expr_to_json(left)),
            right: Box::new(expr_to_json(right)),
        },
        ExprNode::Comparison { op, left, right } => JsonExpr::ComparisonExpression {
            operator: op.as_str().to_string(),
            left: Box::new(expr_to_json(left)),
            right: Box::new(expr_to_json(right)),
        },
        ExprNode::Identifier(name) => JsonExpr::Identifier { name: name.clone() },
        ExprNode::Number(Literal::Value(v)) => JsonExpr::Number {
            value: JsonValue::Int(*v),
        },
        ExprNode::Number(Literal::Redacted) => JsonExpr::Number {
            value: JsonValue::Text(REDACTED.to_string()),
        },
        ExprNode::EncryptedLiteral(Literal::Value(c)) => JsonExpr::EncryptedLiteral { value: c.to_base64() },
        ExprNode::EncryptedLiteral(Literal::Redacted) => JsonExpr::EncryptedLiteral {
            value: REDACTED.to_string(),
        },
    }
}

fn expr_from_json(e: JsonExpr) -> Result<ExprNode, SqlError> {
    Ok(match e {
        JsonExpr::BinaryExpression { operator, left, right } => {
            let op = LogicalOp::from_symbol(&operator)
                .ok_or_else(|| SqlError::Json(format!("unknown logical operator {operator:?}")))?;
            ExprNode::binary(op, expr_from_json(*left)?, expr_from_json(*right)?)
        }
        JsonExpr::ComparisonExpression { operator, left, right } => {
            let op = CompareOp::from_symbol(&operator)
                .ok_or_else(|| SqlError::Json(format!("unknown comparison operator {operator:?}")))?;
            ExprNode::comparison(op, expr_from_json(*left)?, expr_from_json(*right)?)
        }
        JsonExpr::Identifier { name } => ExprNode::Identifier(name),
        JsonExpr::Number {
            value: JsonValue::Int(v),
        } => ExprNode::number(v),
        JsonExpr::Number {
            value: JsonValue::Text(t),
        } if t == REDACTED => ExprNode::Number(Literal::Redacted),
        JsonExpr::Number {
            value: JsonValue::Text(t),
        } => return Err(SqlError::Json(format!("Number value must be an integer, got {t:?}"))),
        JsonExpr::EncryptedLiteral { value } if value == REDACTED => ExprNode::EncryptedLiteral(Literal::Redacted),
        JsonExpr::EncryptedLiteral { value } => ExprNode::EncryptedLiteral(Literal::Value(
            Ciphertext::from_base64(&value).map_err(|e| SqlError::Json(format!("bad EncryptedLiteral: {e}")))?,
        )),
    })
}

fn to_statement(ast: &SqlAst) -> JsonStatement {
    JsonStatement::SelectStatement {
        columns: ast.columns.clone(),
        from: JsonTable::Table { name: ast.from.clone() },
        where_clause: ast.where_clause.as_ref().map(expr_to_json),
    }
}

fn from_statement(s: JsonStatement) -> Result<SqlAst, SqlError> {
    let JsonStatement::SelectStatement {
        columns,
        from: JsonTable::Table { name },
        where_clause,
    } = s;
    if columns.is_empty() {
        return Err(SqlError::Json("columns must not be empty".into()));
    }
    let where_clause = where_clause.map(expr_from_json).transpose()?;
    if let Some(w) = &where_clause {
        if !w.is_boolean() {
            return Err(SqlError::Malformed("where clause must be a boolean expression".into()));
        }
        w.validate().map_err(SqlError::Malformed)?;
    }
    Ok(SqlAst {
        columns,
        from: name,
        where_clause,
    })
}

/// The AST as a bare JSON tree (no envelope).
pub fn ast_to_json_value(ast: &SqlAst) -> serde_json::Value {
    serde_json::to_value(to_statement(ast)).expect("AST always serializes")
}

pub fn ast_from_json_value(v: serde_json::Value) -> Result<SqlAst, SqlError> {
    let s: JsonStatement = serde_json::from_value(v).map_err(|e| SqlError::Json(e.to_string()))?;
    from_statement(s)
}

/// Versioned wire encoding: `{"version":1,"query":<tree>}`.
pub fn serialize_ast(ast: &SqlAst) -> Vec<u8> {
    serde_json::to_vec(&Envelope {
        version: WIRE_VERSION,
        query: to_statement(ast),
    })
    .expect("AST always serializes")
}

pub fn deserialize_ast(bytes: &[u8]) -> Result<SqlAst, SqlError> {
    let raw: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| SqlError::Json(e.to_string()))?;
    let version = raw
        .get("version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| SqlError::Json("missing version".into()))?;
    if version != WIRE_VERSION {
        return Err(SqlError::Version(version));
    }
    let env: Envelope = serde_json::from_value(raw).map_err(|e| SqlError::Json(e.to_string()))?;
    from_statement(env.query)
}
