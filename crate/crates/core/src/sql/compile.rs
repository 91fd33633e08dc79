use crate::crypto::{FheBackend, KeyMaterial, PlainScalar, Width};
use crate::schema::TableSchema;

use super::ast::{ExprNode, Literal, SqlAst};
use super::SqlError;

/// A WHERE tree whose literals are all ciphertexts. Operators stay in the
/// clear so the server knows which homomorphic function to apply.
///
/// `root == None` is the empty tree: every row is selected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HomomorphicExpressionTree {
    root: Option<ExprNode>,
}

impl HomomorphicExpressionTree {
    pub fn all_rows() -> Self {
        HomomorphicExpressionTree { root: None }
    }

    /// Accepts a tree received from a client. Rejects plaintext or redacted
    /// literals and malformed shapes.
    pub fn from_expr(root: Option<ExprNode>) -> Result<Self, SqlError> {
        if let Some(r) = &root {
            if !r.is_boolean() {
                return Err(SqlError::Malformed("root must be a boolean expression".into()));
            }
            r.validate().map_err(SqlError::Malformed)?;
            let mut bad = None;
            r.visit(&mut |n| match n {
                ExprNode::Number(_) => bad = Some(SqlError::PlaintextLiteral),
                ExprNode::EncryptedLiteral(Literal::Redacted) => {
                    bad = Some(SqlError::Malformed("redacted literal in executable tree".into()))
                }
                _ => {}
            });
            if let Some(e) = bad {
                return Err(e);
            }
        }
        Ok(HomomorphicExpressionTree { root })
    }

    pub fn root(&self) -> Option<&ExprNode> {
        self.root.as_ref()
    }

    pub fn into_root(self) -> Option<ExprNode> {
        self.root
    }

    pub fn is_all_rows(&self) -> bool {
        self.root.is_none()
    }

    pub fn node_count(&self) -> usize {
        self.root.as_ref().map_or(0, ExprNode::node_count)
    }

    /// The encrypted query as sent over the wire.
    pub fn to_query(&self, columns: Vec<String>, table: &str) -> SqlAst {
        SqlAst {
            columns,
            from: table.to_string(),
            where_clause: self.root.clone(),
        }
    }
}

/// Compiles the WHERE clause of `ast` against `schema`.
///
/// Each Number leaf is encrypted under `key` at the width of the column it is
/// compared against; `>`/`>=` are rewritten to `<`/`<=` with operands
/// swapped. Selected columns must exist as well.
pub fn compile_to_het(
    ast: &SqlAst,
    backend: &dyn FheBackend,
    key: &KeyMaterial,
    schema: &TableSchema,
) -> Result<HomomorphicExpressionTree, SqlError> {
    if ast.from != schema.name {
        return Err(SqlError::TableMismatch {
            query: ast.from.clone(),
            schema: schema.name.clone(),
        });
    }
    if !ast.selects_all() {
        for c in &ast.columns {
            if schema.column(c).is_none() {
                return Err(SqlError::UnknownColumn(c.clone()));
            }
        }
    }
    let Some(w) = &ast.where_clause else {
        return Ok(HomomorphicExpressionTree::all_rows());
    };
    if !w.is_boolean() {
        return Err(SqlError::Malformed("where clause must be a boolean expression".into()));
    }
    w.validate().map_err(SqlError::Malformed)?;
    let root = compile_node(&w.normalized(), backend, key, schema)?;
    Ok(HomomorphicExpressionTree { root: Some(root) })
}

fn compile_node(
    node: &ExprNode,
    backend: &dyn FheBackend,
    key: &KeyMaterial,
    schema: &TableSchema,
) -> Result<ExprNode, SqlError> {
    match node {
        ExprNode::Binary { op, left, right } => Ok(ExprNode::binary(
            *op,
            compile_node(left, backend, key, schema)?,
            compile_node(right, backend, key, schema)?,
        )),
        ExprNode::Comparison { op, left, right } => {
            let width = match (leaf_width(left, schema)?, leaf_width(right, schema)?) {
                (Some(l), Some(r)) if l != r => return Err(SqlError::WidthMismatch { left: l, right: r }),
                (Some(w), _) | (None, Some(w)) => w,
                (None, None) => return Err(SqlError::UntypedComparison),
            };
            Ok(ExprNode::comparison(
                *op,
                encrypt_leaf(left, width, backend, key)?,
                encrypt_leaf(right, width, backend, key)?,
            ))
        }
        _ => Err(SqlError::Malformed(
            "bare operand where a predicate was expected".into(),
        )),
    }
}

/// Width implied by a leaf; `None` for a plaintext number.
fn leaf_width(leaf: &ExprNode, schema: &TableSchema) -> Result<Option<Width>, SqlError> {
    match leaf {
        ExprNode::Identifier(n) => schema
            .column(n)
            .map(|(_, c)| Some(c.width))
            .ok_or_else(|| SqlError::UnknownColumn(n.clone())),
        ExprNode::EncryptedLiteral(Literal::Value(c)) => Ok(Some(c.width())),
        ExprNode::Number(Literal::Value(_)) => Ok(None),
        _ => Err(SqlError::Malformed("redacted literal cannot be compiled".into())),
    }
}

fn encrypt_leaf(
    leaf: &ExprNode,
    width: Width,
    backend: &dyn FheBackend,
    key: &KeyMaterial,
) -> Result<ExprNode, SqlError> {
    match leaf {
        ExprNode::Number(Literal::Value(v)) => {
            let m = PlainScalar::new(*v, width).map_err(|_| SqlError::LiteralOutOfRange { value: *v, width })?;
            Ok(ExprNode::EncryptedLiteral(Literal::Value(backend.encrypt(key, m)?)))
        }
        other => Ok(other.clone()),
    }
}
