//! Tokenizer and recursive-descent parser for the supported SELECT subset.
//!
//! ```text
//! stmt    := SELECT cols FROM ident [WHERE or] [';']
//! cols    := '*' | ident (',' ident)*
//! or      := and (OR and)*
//! and     := primary (AND primary)*
//! primary := '(' or ')' | operand cmp operand
//! operand := ident | unsigned-integer
//! cmp     := '=' | '<' | '<=' | '>' | '>='
//! ```
//!
//! Keywords are case-insensitive; identifiers are case-sensitive.

use super::ast::{CompareOp, ExprNode, LogicalOp, SqlAst};
use super::SqlError;

/// Words that name SQL features outside the subset. Seeing one where the
/// grammar does not expect an identifier yields [`SqlError::Unsupported`].
const UNSUPPORTED: &[&str] = &[
    "JOIN", "INNER", "LEFT", "RIGHT", "OUTER", "CROSS", "ON", "GROUP", "ORDER", "BY", "HAVING", "LIMIT", "OFFSET",
    "UNION", "DISTINCT", "NOT", "LIKE", "IN", "BETWEEN", "IS", "NULL", "AS", "INSERT", "UPDATE", "DELETE", "CREATE",
    "DROP", "ALTER", "INTO", "VALUES", "SET", "EXISTS", "CASE",
];

const AGGREGATES: &[&str] = &["COUNT", "SUM", "AVG", "MIN", "MAX"];

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Word(String),
    Number(u64),
    Star,
    Comma,
    LParen,
    RParen,
    Semi,
    Cmp(CompareOp),
    Other(String),
    Eof,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    pos: usize,
}

fn tokenize(text: &str) -> Result<Vec<Token>, SqlError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let tok = if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            Tok::Word(text[start..i].to_string())
        } else if c.is_ascii_digit() {
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if i < bytes.len() && (bytes[i].is_ascii_alphabetic() || bytes[i] == b'_' || bytes[i] == b'.') {
                return Err(SqlError::syntax(i, "only unsigned integer literals are supported"));
            }
            let v = text[start..i]
                .parse::<u64>()
                .map_err(|_| SqlError::syntax(start, "integer literal too large"))?;
            Tok::Number(v)
        } else {
            i += 1;
            match c {
                b'*' => Tok::Star,
                b',' => Tok::Comma,
                b'(' => Tok::LParen,
                b')' => Tok::RParen,
                b';' => Tok::Semi,
                b'=' => Tok::Cmp(CompareOp::Eq),
                b'<' | b'>' | b'!' => {
                    let next = bytes.get(i).copied();
                    match (c, next) {
                        (b'<', Some(b'=')) => {
                            i += 1;
                            Tok::Cmp(CompareOp::Le)
                        }
                        (b'>', Some(b'=')) => {
                            i += 1;
                            Tok::Cmp(CompareOp::Ge)
                        }
                        (b'<', Some(b'>')) | (b'!', Some(b'=')) => {
                            return Err(SqlError::unsupported(start, "inequality operator"));
                        }
                        (b'<', _) => Tok::Cmp(CompareOp::Lt),
                        (b'>', _) => Tok::Cmp(CompareOp::Gt),
                        _ => Tok::Other("!".into()),
                    }
                }
                b'\'' | b'"' => return Err(SqlError::unsupported(start, "string literals")),
                _ => {
                    let ch = text[start..].chars().next().unwrap();
                    i = start + ch.len_utf8();
                    Tok::Other(ch.to_string())
                }
            }
        };
        out.push(Token { tok, pos: start });
    }
    out.push(Token {
        tok: Tok::Eof,
        pos: text.len(),
    });
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    at: usize,
}

fn is_kw(tok: &Tok, kw: &str) -> bool {
    matches!(tok, Tok::Word(w) if w.eq_ignore_ascii_case(kw))
}

fn is_reserved(w: &str) -> bool {
    ["SELECT", "FROM", "WHERE", "AND", "OR"]
        .iter()
        .any(|k| w.eq_ignore_ascii_case(k))
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.toks[self.at]
    }

    fn peek_at(&self, off: usize) -> &Tok {
        &self.toks[(self.at + off).min(self.toks.len() - 1)].tok
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.at].clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    /// Error for an unexpected token, upgraded to `Unsupported` when the
    /// token names a known out-of-subset feature.
    fn unexpected(&self, expected: &str) -> SqlError {
        let t = self.peek();
        match &t.tok {
            Tok::Word(w) if UNSUPPORTED.iter().any(|k| w.eq_ignore_ascii_case(k)) => {
                SqlError::unsupported(t.pos, &w.to_ascii_uppercase())
            }
            Tok::Eof => SqlError::syntax(t.pos, &format!("expected {expected}, found end of input")),
            other => SqlError::syntax(t.pos, &format!("expected {expected}, found {}", describe(other))),
        }
    }

    fn expect_kw(&mut self, kw: &str) -> Result<(), SqlError> {
        if is_kw(&self.peek().tok, kw) {
            self.bump();
            Ok(())
        } else {
            Err(self.unexpected(kw))
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, SqlError> {
        match &self.peek().tok {
            Tok::Word(w) if !is_reserved(w) => {
                let w = w.clone();
                // `DISTINCT a`, `NOT a = 1`: a feature word used as a prefix.
                let follows_name = matches!(
                    self.peek_at(1),
                    Tok::Comma | Tok::Cmp(_) | Tok::RParen | Tok::Semi | Tok::Eof
                ) || matches!(self.peek_at(1), Tok::Word(n) if is_reserved(n));
                if !follows_name && UNSUPPORTED.iter().any(|k| w.eq_ignore_ascii_case(k)) {
                    return Err(self.unexpected(what));
                }
                self.bump();
                Ok(w)
            }
            _ => Err(self.unexpected(what)),
        }
    }

    fn statement(&mut self) -> Result<SqlAst, SqlError> {
        self.expect_kw("SELECT")?;
        let columns = self.columns()?;
        self.expect_kw("FROM")?;
        let from = self.ident("table name")?;
        let where_clause = if is_kw(&self.peek().tok, "WHERE") {
            self.bump();
            Some(self.or_expr()?)
        } else {
            None
        };
        if self.peek().tok == Tok::Semi {
            self.bump();
        }
        if self.peek().tok != Tok::Eof {
            return Err(self.unexpected("end of statement"));
        }
        Ok(SqlAst {
            columns,
            from,
            where_clause,
        })
    }

    fn columns(&mut self) -> Result<Vec<String>, SqlError> {
        if self.peek().tok == Tok::Star {
            self.bump();
            return Ok(vec!["*".to_string()]);
        }
        let mut cols = Vec::new();
        loop {
            if let (Tok::Word(w), Tok::LParen) = (&self.peek().tok, self.peek_at(1)) {
                if AGGREGATES.iter().any(|a| w.eq_ignore_ascii_case(a)) {
                    return Err(SqlError::unsupported(
                        self.peek().pos,
                        &format!("aggregate function {}", w.to_ascii_uppercase()),
                    ));
                }
            }
            cols.push(self.ident("column name or *")?);
            if self.peek().tok == Tok::Comma {
                self.bump();
            } else {
                return Ok(cols);
            }
        }
    }

    fn or_expr(&mut self) -> Result<ExprNode, SqlError> {
        let mut left = self.and_expr()?;
        while is_kw(&self.peek().tok, "OR") {
            self.bump();
            let right = self.and_expr()?;
            left = ExprNode::binary(LogicalOp::Or, left, right);
        }
        Ok(left)
    }

    fn and_expr(&mut self) -> Result<ExprNode, SqlError> {
        let mut left = self.primary()?;
        while is_kw(&self.peek().tok, "AND") {
            self.bump();
            let right = self.primary()?;
            left = ExprNode::binary(LogicalOp::And, left, right);
        }
        Ok(left)
    }

    fn primary(&mut self) -> Result<ExprNode, SqlError> {
        if self.peek().tok == Tok::LParen {
            self.bump();
            let inner = self.or_expr()?;
            if self.peek().tok != Tok::RParen {
                return Err(self.unexpected("')'"));
            }
            self.bump();
            return Ok(inner);
        }
        let left = self.operand()?;
        let op = match self.peek().tok {
            Tok::Cmp(op) => op,
            _ => return Err(self.unexpected("comparison operator")),
        };
        self.bump();
        let right = self.operand()?;
        Ok(ExprNode::comparison(op, left, right))
    }

    fn operand(&mut self) -> Result<ExprNode, SqlError> {
        match self.peek().tok.clone() {
            Tok::Number(v) => {
                self.bump();
                Ok(ExprNode::number(v))
            }
            Tok::Word(_) => Ok(ExprNode::Identifier(self.ident("identifier or number")?)),
            _ => Err(self.unexpected("identifier or number")),
        }
    }
}

fn describe(tok: &Tok) -> String {
    match tok {
        Tok::Word(w) => format!("'{w}'"),
        Tok::Number(n) => format!("number {n}"),
        Tok::Star => "'*'".into(),
        Tok::Comma => "','".into(),
        Tok::LParen => "'('".into(),
        Tok::RParen => "')'".into(),
        Tok::Semi => "';'".into(),
        Tok::Cmp(op) => format!("'{}'", op.as_str()),
        Tok::Other(s) => format!("'{s}'"),
        Tok::Eof => "end of input".into(),
    }
}

/// Parses one statement of the supported subset.
pub fn parse_sql(text: &str) -> Result<SqlAst, SqlError> {
    let toks = tokenize(text)?;
    let first = &toks[0];
    if let Tok::Word(w) = &first.tok {
        if !w.eq_ignore_ascii_case("SELECT") && UNSUPPORTED.iter().any(|k| w.eq_ignore_ascii_case(k)) {
            return Err(SqlError::unsupported(
                first.pos,
                &format!("{} statements", w.to_ascii_uppercase()),
            ));
        }
    }
    Parser { toks, at: 0 }.statement()
}
