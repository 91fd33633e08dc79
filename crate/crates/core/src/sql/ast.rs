use std::fmt;

use crate::crypto::Ciphertext;

/// Placeholder shown in place of every literal in a redacted AST.
pub const REDACTED: &str = "⊥";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LogicalOp {
    And,
    Or,
}

impl LogicalOp {
    pub fn as_str(self) -> &'static str {
        match self {
            LogicalOp::And => "AND",
            LogicalOp::Or => "OR",
        }
    }

    pub fn from_symbol(s: &str) -> Option<Self> {
        match s {
            "AND" => Some(LogicalOp::And),
            "OR" => Some(LogicalOp::Or),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CompareOp {
    Eq,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CompareOp {
    pub fn as_str(self) -> &'static str {
        match self {
            CompareOp::Eq => "=",
            CompareOp::Lt => "<",
            CompareOp::Le => "<=",
            CompareOp::Gt => ">",
            CompareOp::Ge => ">=",
        }
    }

    pub fn from_symbol(s: &str) -> Option<Self> {
        match s {
            "=" => Some(CompareOp::Eq),
            "<" => Some(CompareOp::Lt),
            "<=" => Some(CompareOp::Le),
            ">" => Some(CompareOp::Gt),
            ">=" => Some(CompareOp::Ge),
            _ => None,
        }
    }

    /// The operator obtained by swapping operands: `a > b` is `b < a`.
    pub fn flipped(self) -> Self {
        match self {
            CompareOp::Eq => CompareOp::Eq,
            CompareOp::Lt => CompareOp::Gt,
            CompareOp::Le => CompareOp::Ge,
            CompareOp::Gt => CompareOp::Lt,
            CompareOp::Ge => CompareOp::Le,
        }
    }

    pub fn eval(self, a: u64, b: u64) -> bool {
        match self {
            CompareOp::Eq => a == b,
            CompareOp::Lt => a < b,
            CompareOp::Le => a <= b,
            CompareOp::Gt => a > b,
            CompareOp::Ge => a >= b,
        }
    }
}

/// A literal slot that may have been redacted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Literal<T> {
    Value(T),
    Redacted,
}

impl<T> Literal<T> {
    pub fn value(&self) -> Option<&T> {
        match self {
            Literal::Value(v) => Some(v),
            Literal::Redacted => None,
        }
    }
}

/// One node of a WHERE expression.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExprNode {
    Binary {
        op: LogicalOp,
        left: Box<ExprNode>,
        right: Box<ExprNode>,
    },
    Comparison {
        op: CompareOp,
        left: Box<ExprNode>,
        right: Box<ExprNode>,
    },
    Identifier(String),
    Number(Literal<u64>),
    EncryptedLiteral(Literal<Ciphertext>),
}

impl ExprNode {
    pub fn binary(op: LogicalOp, left: ExprNode, right: ExprNode) -> Self {
        ExprNode::Binary {
            op,
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    pub fn comparison(op: CompareOp, left: ExprNode, right: ExprNode) -> Self {
        ExprNode::Comparison {
            op,
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    pub fn ident(name: impl Into<String>) -> Self {
        ExprNode::Identifier(name.into())
    }

    pub fn number(v: u64) -> Self {
        ExprNode::Number(Literal::Value(v))
    }

    pub fn is_leaf(&self) -> bool {
        matches!(
            self,
            ExprNode::Identifier(_) | ExprNode::Number(_) | ExprNode::EncryptedLiteral(_)
        )
    }

    pub fn is_boolean(&self) -> bool {
        matches!(self, ExprNode::Binary { .. } | ExprNode::Comparison { .. })
    }

    /// Checks the shape rules: logical nodes combine boolean nodes,
    /// comparisons combine leaves.
    pub fn validate(&self) -> Result<(), String> {
        match self {
            ExprNode::Binary { op, left, right } => {
                for child in [left, right] {
                    if !child.is_boolean() {
                        return Err(format!("{} operand must be a boolean expression", op.as_str()));
                    }
                    child.validate()?;
                }
                Ok(())
            }
            ExprNode::Comparison { op, left, right } => {
                if !left.is_leaf() || !right.is_leaf() {
                    return Err(format!("operands of {} must be identifiers or literals", op.as_str()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn node_count(&self) -> usize {
        match self {
            ExprNode::Binary { left, right, .. } | ExprNode::Comparison { left, right, .. } => {
                1 + left.node_count() + right.node_count()
            }
            _ => 1,
        }
    }

    /// Pre-order operator strings, ignoring leaves.
    pub fn operators(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        self.visit(&mut |n| match n {
            ExprNode::Binary { op, .. } => out.push(op.as_str()),
            ExprNode::Comparison { op, .. } => out.push(op.as_str()),
            _ => {}
        });
        out
    }

    pub fn comparison_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |node| {
            if matches!(node, ExprNode::Comparison { .. }) {
                n += 1
            }
        });
        n
    }

    pub fn logical_count(&self, which: LogicalOp) -> usize {
        let mut n = 0;
        self.visit(&mut |node| {
            if matches!(node, ExprNode::Binary { op, .. } if *op == which) {
                n += 1
            }
        });
        n
    }

    /// Pre-order traversal.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a ExprNode)) {
        f(self);
        if let ExprNode::Binary { left, right, .. } | ExprNode::Comparison { left, right, .. } = self {
            left.visit(f);
            right.visit(f);
        }
    }

    pub fn redacted(&self) -> ExprNode {
        match self {
            ExprNode::Binary { op, left, right } => ExprNode::binary(*op, left.redacted(), right.redacted()),
            ExprNode::Comparison { op, left, right } => ExprNode::comparison(*op, left.redacted(), right.redacted()),
            ExprNode::Identifier(n) => ExprNode::Identifier(n.clone()),
            ExprNode::Number(_) => ExprNode::Number(Literal::Redacted),
            ExprNode::EncryptedLiteral(_) => ExprNode::EncryptedLiteral(Literal::Redacted),
        }
    }

    /// Rewrites `>`/`>=` into `<`/`<=` by swapping operands.
    pub fn normalized(&self) -> ExprNode {
        match self {
            ExprNode::Binary { op, left, right } => ExprNode::binary(*op, left.normalized(), right.normalized()),
            ExprNode::Comparison { op, left, right } => match op {
                CompareOp::Gt | CompareOp::Ge => {
                    ExprNode::comparison(op.flipped(), (**right).clone(), (**left).clone())
                }
                _ => self.clone(),
            },
            leaf => leaf.clone(),
        }
    }

    /// Cleartext evaluation of a boolean node. `lookup` resolves identifiers;
    /// `None` when an identifier is unknown or a literal is not a plain number.
    pub fn eval_plain(&self, lookup: &impl Fn(&str) -> Option<u64>) -> Option<bool> {
        match self {
            ExprNode::Binary { op, left, right } => {
                let (l, r) = (left.eval_plain(lookup)?, right.eval_plain(lookup)?);
                Some(match op {
                    LogicalOp::And => l && r,
                    LogicalOp::Or => l || r,
                })
            }
            ExprNode::Comparison { op, left, right } => {
                Some(op.eval(left.eval_operand(lookup)?, right.eval_operand(lookup)?))
            }
            _ => None,
        }
    }

    fn eval_operand(&self, lookup: &impl Fn(&str) -> Option<u64>) -> Option<u64> {
        match self {
            ExprNode::Identifier(n) => lookup(n),
            ExprNode::Number(Literal::Value(v)) => Some(*v),
            _ => None,
        }
    }

    /// True if no node holds a literal value.
    pub fn is_redacted(&self) -> bool {
        let mut clean = true;
        self.visit(&mut |n| match n {
            ExprNode::Number(Literal::Value(_)) | ExprNode::EncryptedLiteral(Literal::Value(_)) => clean = false,
            _ => {}
        });
        clean
    }
}

impl fmt::Display for ExprNode {
    /// SQL-ish rendering with explicit parentheses.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExprNode::Binary { op, left, right } => write!(f, "({left} {} {right})", op.as_str()),
            ExprNode::Comparison { op, left, right } => write!(f, "{left} {} {right}", op.as_str()),
            ExprNode::Identifier(n) => f.write_str(n),
            ExprNode::Number(Literal::Value(v)) => write!(f, "{v}"),
            ExprNode::EncryptedLiteral(Literal::Value(_)) => f.write_str("enc(?)"),
            ExprNode::Number(Literal::Redacted) | ExprNode::EncryptedLiteral(Literal::Redacted) => {
                f.write_str(REDACTED)
            }
        }
    }
}

/// A parsed `SELECT <columns> FROM <table> [WHERE <expr>]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SqlAst {
    /// Column names, or the single entry `"*"`.
    pub columns: Vec<String>,
    pub from: String,
    pub where_clause: Option<ExprNode>,
}

impl SqlAst {
    pub fn selects_all(&self) -> bool {
        self.columns.len() == 1 && self.columns[0] == "*"
    }

    pub fn redact(&self) -> RedactedAst {
        RedactedAst(SqlAst {
            columns: self.columns.clone(),
            from: self.from.clone(),
            where_clause: self.where_clause.as_ref().map(ExprNode::redacted),
        })
    }

    /// Renders back to SQL text that parses to the same AST (when no
    /// literal is encrypted or redacted).
    pub fn to_sql(&self) -> String {
        let mut s = format!("SELECT {} FROM {}", self.columns.join(", "), self.from);
        if let Some(w) = &self.where_clause {
            s.push_str(" WHERE ");
            s.push_str(&w.to_string());
        }
        s
    }
}

/// An AST whose literal slots have all been replaced by [`REDACTED`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RedactedAst(SqlAst);

impl RedactedAst {
    pub fn as_ast(&self) -> &SqlAst {
        &self.0
    }

    pub fn into_ast(self) -> SqlAst {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ExprNode {
        ExprNode::binary(
            LogicalOp::And,
            ExprNode::comparison(CompareOp::Gt, ExprNode::ident("age"), ExprNode::number(18)),
            ExprNode::comparison(CompareOp::Lt, ExprNode::ident("salary"), ExprNode::number(1000)),
        )
    }

    #[test]
    fn normalization_swaps_operands() {
        let n = sample().normalized();
        assert_eq!(
            n,
            ExprNode::binary(
                LogicalOp::And,
                ExprNode::comparison(CompareOp::Lt, ExprNode::number(18), ExprNode::ident("age")),
                ExprNode::comparison(CompareOp::Lt, ExprNode::ident("salary"), ExprNode::number(1000)),
            )
        );
        assert_eq!(n.node_count(), sample().node_count());
    }

    #[test]
    fn redaction_is_idempotent() {
        let ast = SqlAst {
            columns: vec!["*".into()],
            from: "table".into(),
            where_clause: Some(sample()),
        };
        let once = ast.redact();
        assert!(once.as_ast().where_clause.as_ref().unwrap().is_redacted());
        assert_eq!(once.as_ast().redact(), once);
        let bare = SqlAst {
            where_clause: None,
            ..ast
        };
        assert_eq!(bare.redact().into_ast(), bare);
    }

    #[test]
    fn validate_shapes() {
        assert!(sample().validate().is_ok());
        let bad = ExprNode::binary(LogicalOp::Or, ExprNode::ident("a"), sample());
        assert!(bad.validate().is_err());
        let bad = ExprNode::comparison(CompareOp::Eq, sample(), ExprNode::number(1));
        assert!(bad.validate().is_err());
    }
}
