//! SQL subset: parsing, canonical JSON, redaction and compilation into a
//! homomorphic expression tree.

mod ast;
mod compile;
mod json;
mod parser;

pub use ast::{CompareOp, ExprNode, Literal, LogicalOp, RedactedAst, SqlAst, REDACTED};
pub use compile::{compile_to_het, HomomorphicExpressionTree};
pub use json::{ast_from_json_value, ast_to_json_value, deserialize_ast, serialize_ast, WIRE_VERSION};
pub use parser::parse_sql;

use crate::crypto::{CryptoError, Width};

#[derive(Debug, thiserror::Error)]
pub enum SqlError {
    #[error("syntax error at byte {pos}: {message}")]
    Syntax { pos: usize, message: String },
    #[error("unsupported construct at byte {pos}: {construct}")]
    Unsupported { pos: usize, construct: String },
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
    #[error("query targets table {query:?} but schema is for {schema:?}")]
    TableMismatch { query: String, schema: String },
    #[error("width mismatch in comparison: {left} vs {right}")]
    WidthMismatch { left: Width, right: Width },
    #[error("literal {value} does not fit column width {width}")]
    LiteralOutOfRange { value: u64, width: Width },
    #[error("cannot infer a width for a comparison between two literals")]
    UntypedComparison,
    #[error("plaintext literal in an encrypted query")]
    PlaintextLiteral,
    #[error("malformed tree: {0}")]
    Malformed(String),
    #[error("malformed query JSON: {0}")]
    Json(String),
    #[error("unsupported query wire version {0}")]
    Version(u64),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

impl SqlError {
    pub(crate) fn syntax(pos: usize, message: &str) -> Self {
        SqlError::Syntax {
            pos,
            message: message.to_string(),
        }
    }

    pub(crate) fn unsupported(pos: usize, construct: &str) -> Self {
        SqlError::Unsupported {
            pos,
            construct: construct.to_string(),
        }
    }
}
