//! Closed expression language used by filter predicates, map fields,
//! batch close conditions, flush layouts and prompt placeholders.
//!
//! Grammar, lowest precedence first:
//!
//! ```text
//! expr    := or ('?' expr ':' expr)?
//! or      := and (('or' | '||') and)*
//! and     := eq (('and' | '&&') eq)*
//! eq      := cmp (('==' | '!=') cmp)*
//! cmp     := add (('<' | '<=' | '>' | '>=') add)*
//! add     := mul (('+' | '-') mul)*
//! mul     := unary (('*' | '/' | '%') unary)*
//! unary   := ('not' | '!' | '-') unary | postfix
//! postfix := primary ('.' ident | '[' expr ']')*
//! primary := number | string | 'true' | 'false' | 'item' | 'items'
//!          | 'buffer' '(' string ')' | builtin '(' args ')' | '[' args ']' | '(' expr ')'
//! ```

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{canonical_string, FieldValue, Fields, MediaKind, SchemaType, StreamItem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Builtin {
    Len,
    Sum,
    Min,
    Max,
    Avg,
    Contains,
    Lower,
    Upper,
    Join,
    Str,
    Num,
}

impl Builtin {
    fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "len" => Builtin::Len,
            "sum" => Builtin::Sum,
            "min" => Builtin::Min,
            "max" => Builtin::Max,
            "avg" => Builtin::Avg,
            "contains" => Builtin::Contains,
            "lower" => Builtin::Lower,
            "upper" => Builtin::Upper,
            "join" => Builtin::Join,
            "str" => Builtin::Str,
            "num" => Builtin::Num,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Builtin::Len => "len",
            Builtin::Sum => "sum",
            Builtin::Min => "min",
            Builtin::Max => "max",
            Builtin::Avg => "avg",
            Builtin::Contains => "contains",
            Builtin::Lower => "lower",
            Builtin::Upper => "upper",
            Builtin::Join => "join",
            Builtin::Str => "str",
            Builtin::Num => "num",
        }
    }

    fn arity(self) -> (usize, usize) {
        match self {
            Builtin::Min | Builtin::Max => (1, usize::MAX),
            Builtin::Contains => (2, 2),
            Builtin::Join => (1, 2),
            _ => (1, 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnOp {
    Not,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Rem,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    And,
    Or,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Rem => "%",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::And => "and",
            BinOp::Or => "or",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Ast {
    Number(f64),
    Text(String),
    Bool(bool),
    List(Vec<Node>),
    Item,
    Items,
    Buffer(String),
    Field(Box<Node>, String),
    Index(Box<Node>, Box<Node>),
    Unary(UnOp, Box<Node>),
    Binary(BinOp, Box<Node>, Box<Node>),
    Ternary(Box<Node>, Box<Node>, Box<Node>),
    Call(Builtin, Vec<Node>),
}

/// AST node with its byte span in the source text.
#[derive(Debug, Clone)]
pub struct Node {
    pub ast: Ast,
    pub span: (usize, usize),
}

// Spans are presentation only; structural equality ignores them.
impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.ast == other.ast
    }
}

/// A parsed expression together with its source text.
#[derive(Debug, Clone)]
pub struct Expr {
    source: String,
    root: Node,
}

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        self.root == other.root
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("syntax error at offset {offset}: {message}")]
pub struct SyntaxError {
    pub offset: usize,
    pub message: String,
}

impl Expr {
    pub fn parse(source: &str) -> Result<Expr, SyntaxError> {
        let tokens = lex(source)?;
        let mut p = Parser { tokens, pos: 0, src_len: source.len() };
        let root = p.expr()?;
        if let Some(t) = p.peek() {
            return Err(SyntaxError { offset: t.span.0, message: format!("unexpected {}", t.tok) });
        }
        Ok(Expr { source: source.to_string(), root })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    fn slice(&self, span: (usize, usize)) -> &str {
        self.source.get(span.0..span.1).unwrap_or(&self.source)
    }

    pub fn eval<'a>(&self, scope: &Scope<'a>) -> Result<Value<'a>, EvalError> {
        Evaluator { expr: self, scope }.eval(&self.root)
    }

    /// Evaluates to a storable field value.
    pub fn eval_field(&self, scope: &Scope<'_>) -> Result<FieldValue, EvalError> {
        let v = self.eval(scope)?;
        v.into_field().map_err(|m| EvalError::type_error(&self.source, m))
    }

    pub fn eval_bool(&self, scope: &Scope<'_>) -> Result<bool, EvalError> {
        match self.eval(scope)? {
            Value::Scalar(FieldValue::Bool(b)) => Ok(b),
            other => Err(EvalError::type_error(
                &self.source,
                format!("expected boolean, got {}", other.type_name()),
            )),
        }
    }

    /// Names of builtins used, for example selection.
    pub fn builtins(&self) -> Vec<Builtin> {
        let mut out = Vec::new();
        walk(&self.root, &mut |n| {
            if let Ast::Call(b, _) = &n.ast {
                out.push(*b);
            }
        });
        out.sort();
        out.dedup();
        out
    }

    pub fn buffer_refs(&self) -> Vec<String> {
        let mut out = Vec::new();
        walk(&self.root, &mut |n| {
            if let Ast::Buffer(b) = &n.ast {
                out.push(b.clone());
            }
        });
        out.sort();
        out.dedup();
        out
    }

    pub fn uses_items(&self) -> bool {
        let mut found = false;
        walk(&self.root, &mut |n| found |= matches!(n.ast, Ast::Items));
        found
    }
}

impl Serialize for Expr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.source)
    }
}

impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Expr::parse(&s).map_err(serde::de::Error::custom)
    }
}

pub fn walk(n: &Node, f: &mut dyn FnMut(&Node)) {
    f(n);
    match &n.ast {
        Ast::List(xs) | Ast::Call(_, xs) => xs.iter().for_each(|x| walk(x, f)),
        Ast::Field(b, _) | Ast::Unary(_, b) => walk(b, f),
        Ast::Index(a, b) | Ast::Binary(_, a, b) => {
            walk(a, f);
            walk(b, f);
        }
        Ast::Ternary(a, b, c) => {
            walk(a, f);
            walk(b, f);
            walk(c, f);
        }
        _ => {}
    }
}

// ---------------------------------------------------------------- lexing

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Str(String),
    Ident(String),
    Sym(&'static str),
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Num(n) => write!(f, "number {n}"),
            Tok::Str(s) => write!(f, "string {s:?}"),
            Tok::Ident(s) => write!(f, "identifier {s}"),
            Tok::Sym(s) => write!(f, "'{s}'"),
        }
    }
}

struct Token {
    tok: Tok,
    span: (usize, usize),
}

const SYMBOLS: [&str; 22] = [
    "==", "!=", "<=", ">=", "&&", "||", "(", ")", "[", "]", ",", ".", "?", ":", "+", "-", "*", "/", "%", "<", ">", "!",
];

fn lex(src: &str) -> Result<Vec<Token>, SyntaxError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_digit() {
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                // `items[0].x` : a dot followed by a letter ends the number
                if bytes[i] == b'.' && !(i + 1 < bytes.len() && bytes[i + 1].is_ascii_digit()) {
                    break;
                }
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    i = j;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text = &src[start..i];
            let n: f64 = text
                .parse()
                .map_err(|_| SyntaxError { offset: start, message: format!("bad number {text:?}") })?;
            out.push(Token { tok: Tok::Num(n), span: (start, i) });
        } else if c == b'"' || c == b'\'' {
            let quote = c as char;
            let mut s = String::new();
            let mut chars = src[i + 1..].char_indices();
            let mut closed = None;
            while let Some((k, ch)) = chars.next() {
                match ch {
                    '\\' => match chars.next() {
                        Some((_, 'n')) => s.push('\n'),
                        Some((_, 't')) => s.push('\t'),
                        Some((_, other)) => s.push(other),
                        None => break,
                    },
                    ch if ch == quote => {
                        closed = Some(i + 1 + k + 1);
                        break;
                    }
                    ch => s.push(ch),
                }
            }
            let end = closed.ok_or(SyntaxError { offset: start, message: "unterminated string".into() })?;
            out.push(Token { tok: Tok::Str(s), span: (start, end) });
            i = end;
        } else if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push(Token { tok: Tok::Ident(src[start..i].to_string()), span: (start, i) });
        } else {
            let sym = SYMBOLS
                .iter()
                .find(|s| src[i..].starts_with(**s))
                .ok_or_else(|| SyntaxError { offset: i, message: format!("unexpected character {:?}", src[i..].chars().next().unwrap_or(' ')) })?;
            i += sym.len();
            out.push(Token { tok: Tok::Sym(sym), span: (start, i) });
        }
    }
    Ok(out)
}

// --------------------------------------------------------------- parsing

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    src_len: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn at_sym(&self, s: &str) -> bool {
        matches!(self.peek(), Some(Token { tok: Tok::Sym(x), .. }) if *x == s)
    }

    fn at_word(&self, w: &str) -> bool {
        matches!(self.peek(), Some(Token { tok: Tok::Ident(x), .. }) if x == w)
    }

    fn offset(&self) -> usize {
        self.peek().map(|t| t.span.0).unwrap_or(self.src_len)
    }

    fn expect_sym(&mut self, s: &str) -> Result<usize, SyntaxError> {
        if self.at_sym(s) {
            let end = self.tokens[self.pos].span.1;
            self.pos += 1;
            Ok(end)
        } else {
            let found = self.peek().map(|t| t.tok.to_string()).unwrap_or_else(|| "end of input".into());
            Err(SyntaxError { offset: self.offset(), message: format!("expected '{s}', found {found}") })
        }
    }

    fn expr(&mut self) -> Result<Node, SyntaxError> {
        let cond = self.or()?;
        if self.at_sym("?") {
            self.pos += 1;
            let a = self.expr()?;
            self.expect_sym(":")?;
            let b = self.expr()?;
            let span = (cond.span.0, b.span.1);
            return Ok(Node { ast: Ast::Ternary(Box::new(cond), Box::new(a), Box::new(b)), span });
        }
        Ok(cond)
    }

    fn binary_level(
        &mut self,
        ops: &[(&str, BinOp)],
        next: fn(&mut Parser) -> Result<Node, SyntaxError>,
    ) -> Result<Node, SyntaxError> {
        let mut lhs = next(self)?;
        'outer: loop {
            for (s, op) in ops {
                let hit = if s.chars().all(|c| c.is_ascii_alphabetic()) { self.at_word(s) } else { self.at_sym(s) };
                if hit {
                    self.pos += 1;
                    let rhs = next(self)?;
                    let span = (lhs.span.0, rhs.span.1);
                    lhs = Node { ast: Ast::Binary(*op, Box::new(lhs), Box::new(rhs)), span };
                    continue 'outer;
                }
            }
            return Ok(lhs);
        }
    }

    fn or(&mut self) -> Result<Node, SyntaxError> {
        self.binary_level(&[("or", BinOp::Or), ("||", BinOp::Or)], Parser::and)
    }

    fn and(&mut self) -> Result<Node, SyntaxError> {
        self.binary_level(&[("and", BinOp::And), ("&&", BinOp::And)], Parser::eq)
    }

    fn eq(&mut self) -> Result<Node, SyntaxError> {
        self.binary_level(&[("==", BinOp::Eq), ("!=", BinOp::Ne)], Parser::cmp)
    }

    fn cmp(&mut self) -> Result<Node, SyntaxError> {
        self.binary_level(
            &[("<=", BinOp::Le), (">=", BinOp::Ge), ("<", BinOp::Lt), (">", BinOp::Gt)],
            Parser::add,
        )
    }

    fn add(&mut self) -> Result<Node, SyntaxError> {
        self.binary_level(&[("+", BinOp::Add), ("-", BinOp::Sub)], Parser::mul)
    }

    fn mul(&mut self) -> Result<Node, SyntaxError> {
        self.binary_level(&[("*", BinOp::Mul), ("/", BinOp::Div), ("%", BinOp::Rem)], Parser::unary)
    }

    fn unary(&mut self) -> Result<Node, SyntaxError> {
        let start = self.offset();
        let op = if self.at_word("not") || self.at_sym("!") {
            Some(UnOp::Not)
        } else if self.at_sym("-") {
            Some(UnOp::Neg)
        } else {
            None
        };
        match op {
            Some(op) => {
                self.pos += 1;
                let inner = self.unary()?;
                let span = (start, inner.span.1);
                Ok(Node { ast: Ast::Unary(op, Box::new(inner)), span })
            }
            None => self.postfix(),
        }
    }

    fn postfix(&mut self) -> Result<Node, SyntaxError> {
        let mut base = self.primary()?;
        loop {
            if self.at_sym(".") {
                self.pos += 1;
                match self.peek() {
                    Some(Token { tok: Tok::Ident(name), span }) => {
                        let (name, end) = (name.clone(), span.1);
                        self.pos += 1;
                        let span = (base.span.0, end);
                        base = Node { ast: Ast::Field(Box::new(base), name), span };
                    }
                    _ => return Err(SyntaxError { offset: self.offset(), message: "expected field name after '.'".into() }),
                }
            } else if self.at_sym("[") {
                self.pos += 1;
                let idx = self.expr()?;
                let end = self.expect_sym("]")?;
                let span = (base.span.0, end);
                base = Node { ast: Ast::Index(Box::new(base), Box::new(idx)), span };
            } else {
                return Ok(base);
            }
        }
    }

    fn args(&mut self, close: &str) -> Result<(Vec<Node>, usize), SyntaxError> {
        let mut args = Vec::new();
        if self.at_sym(close) {
            return Ok((args, self.expect_sym(close)?));
        }
        loop {
            args.push(self.expr()?);
            if self.at_sym(",") {
                self.pos += 1;
                continue;
            }
            return Ok((args, self.expect_sym(close)?));
        }
    }

    fn primary(&mut self) -> Result<Node, SyntaxError> {
        let Some(tok) = self.peek() else {
            return Err(SyntaxError { offset: self.src_len, message: "unexpected end of expression".into() });
        };
        let span = tok.span;
        let tok = tok.tok.clone();
        self.pos += 1;
        let node = |ast| Node { ast, span };
        match tok {
            Tok::Num(n) => Ok(node(Ast::Number(n))),
            Tok::Str(s) => Ok(node(Ast::Text(s))),
            Tok::Sym("(") => {
                let inner = self.expr()?;
                let end = self.expect_sym(")")?;
                Ok(Node { ast: inner.ast, span: (span.0, end) })
            }
            Tok::Sym("[") => {
                let (xs, end) = self.args("]")?;
                Ok(Node { ast: Ast::List(xs), span: (span.0, end) })
            }
            Tok::Ident(w) => match w.as_str() {
                "true" => Ok(node(Ast::Bool(true))),
                "false" => Ok(node(Ast::Bool(false))),
                "item" => Ok(node(Ast::Item)),
                "items" => Ok(node(Ast::Items)),
                "buffer" => {
                    self.expect_sym("(")?;
                    let name = match self.peek() {
                        Some(Token { tok: Tok::Str(s), .. }) => s.clone(),
                        _ => {
                            return Err(SyntaxError {
                                offset: self.offset(),
                                message: "buffer() takes a string literal name".into(),
                            })
                        }
                    };
                    self.pos += 1;
                    let end = self.expect_sym(")")?;
                    Ok(Node { ast: Ast::Buffer(name), span: (span.0, end) })
                }
                name => {
                    let b = Builtin::from_name(name).ok_or_else(|| SyntaxError {
                        offset: span.0,
                        message: format!("unknown name {name:?}; expressions may use item, items, buffer(..) and builtins"),
                    })?;
                    self.expect_sym("(")?;
                    let (args, end) = self.args(")")?;
                    let (lo, hi) = b.arity();
                    if args.len() < lo || args.len() > hi {
                        return Err(SyntaxError {
                            offset: span.0,
                            message: format!("{} takes {} argument(s), got {}", b.name(), if lo == hi { lo.to_string() } else { format!("{lo}+") }, args.len()),
                        });
                    }
                    Ok(Node { ast: Ast::Call(b, args), span: (span.0, end) })
                }
            },
            Tok::Sym(s) => Err(SyntaxError { offset: span.0, message: format!("unexpected '{s}'") }),
        }
    }
}

// ------------------------------------------------------------ evaluation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EvalCode {
    TypeError,
    UnknownField,
    DivByZero,
    IndexOutOfRange,
}

impl EvalCode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalCode::TypeError => "TYPE_ERROR",
            EvalCode::UnknownField => "UNKNOWN_FIELD",
            EvalCode::DivByZero => "DIV_BY_ZERO",
            EvalCode::IndexOutOfRange => "INDEX_OUT_OF_RANGE",
        }
    }
}

/// Evaluation failure with the offending sub-expression.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{}: {message} (in `{expr}`)", .code.as_str())]
pub struct EvalError {
    pub code: EvalCode,
    pub expr: String,
    pub message: String,
}

impl EvalError {
    fn new(code: EvalCode, expr: &str, message: impl Into<String>) -> Self {
        EvalError { code, expr: expr.to_string(), message: message.into() }
    }

    fn type_error(expr: &str, message: impl Into<String>) -> Self {
        Self::new(EvalCode::TypeError, expr, message)
    }
}

/// Names visible to an expression.
#[derive(Clone, Copy)]
pub struct Scope<'a> {
    /// Current item's fields (a batch's summary fields in batch scope).
    pub item: Option<&'a Fields>,
    /// Batch members; present only in batch scope.
    pub items: Option<&'a [StreamItem]>,
    pub buffers: Option<&'a BTreeMap<String, Vec<StreamItem>>>,
}

impl<'a> Scope<'a> {
    pub fn item(fields: &'a Fields) -> Self {
        Scope { item: Some(fields), items: None, buffers: None }
    }

    pub fn batch(fields: &'a Fields, items: &'a [StreamItem]) -> Self {
        Scope { item: Some(fields), items: Some(items), buffers: None }
    }

    pub fn with_buffers(mut self, buffers: &'a BTreeMap<String, Vec<StreamItem>>) -> Self {
        self.buffers = Some(buffers);
        self
    }
}

/// Runtime value of an expression. Lists never appear inside `Scalar`.
#[derive(Debug, Clone, PartialEq)]
pub enum Value<'a> {
    Scalar(FieldValue),
    List(Vec<Value<'a>>),
    Item(&'a Fields),
    Items(Vec<&'a Fields>),
}

impl<'a> Value<'a> {
    fn from_field(v: &FieldValue) -> Value<'a> {
        match v {
            FieldValue::List(xs) => Value::List(xs.iter().map(Value::from_field).collect()),
            other => Value::Scalar(other.clone()),
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Value::Scalar(v) => v.type_name(),
            Value::List(_) => "list",
            Value::Item(_) => "item",
            Value::Items(_) => "item list",
        }
    }

    pub fn into_field(self) -> Result<FieldValue, String> {
        match self {
            Value::Scalar(v) => Ok(v),
            Value::List(xs) => {
                let vs = xs.into_iter().map(Value::into_field).collect::<Result<Vec<_>, _>>()?;
                FieldValue::list(vs).map_err(|e| e.to_string())
            }
            other => Err(format!("{} cannot be stored in a field", other.type_name())),
        }
    }

    fn canonical(&self) -> Option<String> {
        match self {
            Value::Scalar(v) => Some(canonical_string(v)),
            Value::List(xs) => xs.iter().map(Value::canonical).collect::<Option<Vec<_>>>().map(|v| v.join(", ")),
            _ => None,
        }
    }
}

struct Evaluator<'e, 's, 'a> {
    expr: &'e Expr,
    scope: &'s Scope<'a>,
}

fn num(x: f64) -> Value<'static> {
    Value::Scalar(FieldValue::Number(x))
}

impl<'e, 's, 'a> Evaluator<'e, 's, 'a> {
    fn src(&self, n: &Node) -> &str {
        self.expr.slice(n.span)
    }

    fn err(&self, code: EvalCode, n: &Node, msg: impl Into<String>) -> EvalError {
        EvalError::new(code, self.src(n), msg)
    }

    fn number(&self, n: &Node) -> Result<f64, EvalError> {
        match self.eval(n)? {
            Value::Scalar(FieldValue::Number(x)) => Ok(x),
            v => Err(self.err(EvalCode::TypeError, n, format!("expected number, got {}", v.type_name()))),
        }
    }

    fn text(&self, n: &Node) -> Result<String, EvalError> {
        match self.eval(n)? {
            Value::Scalar(FieldValue::Text(s)) => Ok(s),
            v => Err(self.err(EvalCode::TypeError, n, format!("expected text, got {}", v.type_name()))),
        }
    }

    fn boolean(&self, n: &Node) -> Result<bool, EvalError> {
        match self.eval(n)? {
            Value::Scalar(FieldValue::Bool(b)) => Ok(b),
            v => Err(self.err(EvalCode::TypeError, n, format!("expected boolean, got {}", v.type_name()))),
        }
    }

    fn list(&self, n: &Node) -> Result<Vec<Value<'a>>, EvalError> {
        match self.eval(n)? {
            Value::List(xs) => Ok(xs),
            Value::Items(xs) => Ok(xs.into_iter().map(Value::Item).collect()),
            v => Err(self.err(EvalCode::TypeError, n, format!("expected list, got {}", v.type_name()))),
        }
    }

    fn numbers(&self, n: &Node) -> Result<Vec<f64>, EvalError> {
        self.list(n)?
            .into_iter()
            .map(|v| match v {
                Value::Scalar(FieldValue::Number(x)) => Ok(x),
                v => Err(self.err(EvalCode::TypeError, n, format!("expected list of numbers, found {}", v.type_name()))),
            })
            .collect()
    }

    fn finite(&self, n: &Node, x: f64) -> Result<Value<'a>, EvalError> {
        if x.is_finite() {
            Ok(num(x))
        } else {
            Err(self.err(EvalCode::TypeError, n, "arithmetic overflow"))
        }
    }

    fn field_of(&self, base: Value<'a>, name: &str, n: &Node) -> Result<Value<'a>, EvalError> {
        match base {
            Value::Item(f) => f
                .get(name)
                .map(Value::from_field)
                .ok_or_else(|| self.err(EvalCode::UnknownField, n, format!("item has no field {name:?}"))),
            Value::Items(list) => list
                .into_iter()
                .enumerate()
                .map(|(i, f)| {
                    f.get(name).map(Value::from_field).ok_or_else(|| {
                        self.err(EvalCode::UnknownField, n, format!("item {i} has no field {name:?}"))
                    })
                })
                .collect::<Result<Vec<_>, _>>()
                .map(Value::List),
            Value::List(xs) if xs.iter().all(|x| matches!(x, Value::Item(_))) => {
                let items = xs.into_iter().map(|x| if let Value::Item(f) = x { f } else { unreachable!() }).collect();
                self.field_of(Value::Items(items), name, n)
            }
            v => Err(self.err(EvalCode::TypeError, n, format!("cannot read field {name:?} of {}", v.type_name()))),
        }
    }

    fn eval(&self, n: &Node) -> Result<Value<'a>, EvalError> {
        match &n.ast {
            Ast::Number(x) => Ok(num(*x)),
            Ast::Text(s) => Ok(Value::Scalar(FieldValue::Text(s.clone()))),
            Ast::Bool(b) => Ok(Value::Scalar(FieldValue::Bool(*b))),
            Ast::List(xs) => Ok(Value::List(xs.iter().map(|x| self.eval(x)).collect::<Result<_, _>>()?)),
            Ast::Item => self
                .scope
                .item
                .map(Value::Item)
                .ok_or_else(|| self.err(EvalCode::UnknownField, n, "no current item in scope")),
            Ast::Items => self
                .scope
                .items
                .map(|xs| Value::Items(xs.iter().map(|i| &i.fields).collect()))
                .ok_or_else(|| self.err(EvalCode::TypeError, n, "`items` is only available in batch scope")),
            Ast::Buffer(name) => self
                .scope
                .buffers
                .and_then(|b| b.get(name))
                .map(|xs| Value::Items(xs.iter().map(|i| &i.fields).collect()))
                .ok_or_else(|| self.err(EvalCode::UnknownField, n, format!("unknown buffer {name:?}"))),
            Ast::Field(base, name) => {
                let b = self.eval(base)?;
                self.field_of(b, name, n)
            }
            Ast::Index(base, idx) => {
                let b = self.eval(base)?;
                let i = self.number(idx)?;
                if i.fract() != 0.0 {
                    return Err(self.err(EvalCode::TypeError, idx, "index must be an integer"));
                }
                let len = match &b {
                    Value::Items(xs) => xs.len(),
                    Value::List(xs) => xs.len(),
                    v => return Err(self.err(EvalCode::TypeError, n, format!("cannot index {}", v.type_name()))),
                };
                let pos = if i < 0.0 { len as f64 + i } else { i };
                if pos < 0.0 || pos >= len as f64 {
                    return Err(self.err(EvalCode::IndexOutOfRange, n, format!("index {i} out of range for length {len}")));
                }
                let pos = pos as usize;
                Ok(match b {
                    Value::Items(xs) => Value::Item(xs[pos]),
                    Value::List(mut xs) => xs.swap_remove(pos),
                    _ => unreachable!(),
                })
            }
            Ast::Unary(UnOp::Not, a) => Ok(Value::Scalar(FieldValue::Bool(!self.boolean(a)?))),
            Ast::Unary(UnOp::Neg, a) => Ok(num(-self.number(a)?)),
            Ast::Binary(op, a, b) => self.binary(*op, a, b, n),
            Ast::Ternary(c, a, b) => {
                if self.boolean(c)? {
                    self.eval(a)
                } else {
                    self.eval(b)
                }
            }
            Ast::Call(f, args) => self.call(*f, args, n),
        }
    }

    fn binary(&self, op: BinOp, a: &Node, b: &Node, n: &Node) -> Result<Value<'a>, EvalError> {
        let boolean = |x| Ok(Value::Scalar(FieldValue::Bool(x)));
        match op {
            BinOp::And => return boolean(self.boolean(a)? && self.boolean(b)?),
            BinOp::Or => return boolean(self.boolean(a)? || self.boolean(b)?),
            BinOp::Add | BinOp::Sub | BinOp::Mul | BinOp::Div | BinOp::Rem => {
                let (x, y) = (self.number(a)?, self.number(b)?);
                let r = match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    _ if y == 0.0 => return Err(self.err(EvalCode::DivByZero, n, "division by zero")),
                    BinOp::Div => x / y,
                    _ => x % y,
                };
                return self.finite(n, r);
            }
            _ => {}
        }
        let (x, y) = (self.eval(a)?, self.eval(b)?);
        if x.type_name() != y.type_name() || matches!(x, Value::Item(_) | Value::Items(_)) {
            return Err(self.err(
                EvalCode::TypeError,
                n,
                format!("cannot compare {} {} {}", x.type_name(), op.symbol(), y.type_name()),
            ));
        }
        match op {
            BinOp::Eq => boolean(x == y),
            BinOp::Ne => boolean(x != y),
            _ => {
                let ord = match (&x, &y) {
                    (Value::Scalar(FieldValue::Number(p)), Value::Scalar(FieldValue::Number(q))) => p.partial_cmp(q),
                    (Value::Scalar(FieldValue::Text(p)), Value::Scalar(FieldValue::Text(q))) => Some(p.cmp(q)),
                    _ => None,
                }
                .ok_or_else(|| self.err(EvalCode::TypeError, n, format!("{} values are not ordered", x.type_name())))?;
                use std::cmp::Ordering::*;
                boolean(match op {
                    BinOp::Lt => ord == Less,
                    BinOp::Le => ord != Greater,
                    BinOp::Gt => ord == Greater,
                    _ => ord != Less,
                })
            }
        }
    }

    fn call(&self, f: Builtin, args: &[Node], n: &Node) -> Result<Value<'a>, EvalError> {
        let text = |s: String| Ok(Value::Scalar(FieldValue::Text(s)));
        match f {
            Builtin::Len => match self.eval(&args[0])? {
                Value::Scalar(FieldValue::Text(s)) => Ok(num(s.chars().count() as f64)),
                Value::List(xs) => Ok(num(xs.len() as f64)),
                Value::Items(xs) => Ok(num(xs.len() as f64)),
                v => Err(self.err(EvalCode::TypeError, n, format!("len() of {}", v.type_name()))),
            },
            Builtin::Sum => {
                let s = self.numbers(&args[0])?.iter().sum();
                self.finite(n, s)
            }
            Builtin::Avg => {
                let xs = self.numbers(&args[0])?;
                if xs.is_empty() {
                    return Err(self.err(EvalCode::DivByZero, n, "avg() of an empty list"));
                }
                let s: f64 = xs.iter().sum();
                self.finite(n, s / xs.len() as f64)
            }
            Builtin::Min | Builtin::Max => {
                let xs = if args.len() == 1 {
                    self.numbers(&args[0])?
                } else {
                    args.iter().map(|a| self.number(a)).collect::<Result<Vec<_>, _>>()?
                };
                let pick = if f == Builtin::Min { f64::min } else { f64::max };
                xs.into_iter()
                    .reduce(pick)
                    .map(num)
                    .ok_or_else(|| self.err(EvalCode::TypeError, n, format!("{}() of an empty list", f.name())))
            }
            Builtin::Contains => {
                let hay = self.eval(&args[0])?;
                let needle = self.eval(&args[1])?;
                let found = match (&hay, &needle) {
                    (Value::Scalar(FieldValue::Text(h)), Value::Scalar(FieldValue::Text(s))) => h.contains(s.as_str()),
                    (Value::List(xs), _) => xs.contains(&needle),
                    _ => {
                        return Err(self.err(
                            EvalCode::TypeError,
                            n,
                            format!("contains({}, {})", hay.type_name(), needle.type_name()),
                        ))
                    }
                };
                Ok(Value::Scalar(FieldValue::Bool(found)))
            }
            Builtin::Lower => text(self.text(&args[0])?.to_lowercase()),
            Builtin::Upper => text(self.text(&args[0])?.to_uppercase()),
            Builtin::Join => {
                let sep = match args.get(1) {
                    Some(a) => self.text(a)?,
                    None => ", ".to_string(),
                };
                let parts = self
                    .list(&args[0])?
                    .iter()
                    .map(|v| v.canonical().ok_or_else(|| self.err(EvalCode::TypeError, n, "join() of item values")))
                    .collect::<Result<Vec<_>, _>>()?;
                text(parts.join(&sep))
            }
            Builtin::Str => {
                let v = self.eval(&args[0])?;
                let s = v
                    .canonical()
                    .ok_or_else(|| self.err(EvalCode::TypeError, n, format!("str() of {}", v.type_name())))?;
                text(s)
            }
            Builtin::Num => match self.eval(&args[0])? {
                Value::Scalar(FieldValue::Number(x)) => Ok(num(x)),
                Value::Scalar(FieldValue::Bool(b)) => Ok(num(if b { 1.0 } else { 0.0 })),
                Value::Scalar(FieldValue::Text(s)) => match s.trim().parse::<f64>() {
                    Ok(x) if x.is_finite() => Ok(num(x)),
                    _ => Err(self.err(EvalCode::TypeError, n, format!("cannot convert {s:?} to a number"))),
                },
                v => Err(self.err(EvalCode::TypeError, n, format!("num() of {}", v.type_name()))),
            },
        }
    }
}

// -------------------------------------------------------- static typing

/// Type known before execution; `Unknown` when not statically determined.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StaticType {
    Number,
    Text,
    Bool,
    Media(MediaKind),
    List,
    Item,
    Items,
    Unknown,
}

impl StaticType {
    pub fn from_schema(t: &SchemaType) -> Self {
        match t {
            SchemaType::Text => StaticType::Text,
            SchemaType::Number => StaticType::Number,
            SchemaType::Boolean => StaticType::Bool,
            SchemaType::Image => StaticType::Media(MediaKind::Image),
            SchemaType::Audio => StaticType::Media(MediaKind::Audio),
            SchemaType::List => StaticType::List,
            SchemaType::Unknown(_) => StaticType::Unknown,
        }
    }

    pub fn to_schema(&self) -> Option<SchemaType> {
        Some(match self {
            StaticType::Number => SchemaType::Number,
            StaticType::Text => SchemaType::Text,
            StaticType::Bool => SchemaType::Boolean,
            StaticType::Media(MediaKind::Image) => SchemaType::Image,
            StaticType::Media(MediaKind::Audio) => SchemaType::Audio,
            StaticType::List => SchemaType::List,
            _ => return None,
        })
    }
}

/// Statically known field sets. `None` means "unknown, accept anything".
pub type KnownFields = Option<BTreeMap<String, StaticType>>;

#[derive(Debug, Clone, Default)]
pub struct StaticScope {
    pub item: KnownFields,
    /// `Some` when in batch scope.
    pub members: Option<KnownFields>,
    pub buffers: BTreeMap<String, KnownFields>,
}

/// A problem found by [`Expr::check`].
#[derive(Debug, Clone, PartialEq)]
pub enum StaticIssue {
    UnknownField { field: String, expr: String },
    UnknownBuffer { name: String },
    BatchScope { expr: String },
}

impl Expr {
    /// Checks field references against the scope and infers the result type.
    pub fn check(&self, scope: &StaticScope, issues: &mut Vec<StaticIssue>) -> StaticType {
        self.infer(&self.root, scope, issues)
    }

    fn lookup(&self, known: &KnownFields, name: &str, n: &Node, issues: &mut Vec<StaticIssue>) -> StaticType {
        match known {
            None => StaticType::Unknown,
            Some(map) => match map.get(name) {
                Some(t) => t.clone(),
                None => {
                    issues.push(StaticIssue::UnknownField { field: name.to_string(), expr: self.slice(n.span).to_string() });
                    StaticType::Unknown
                }
            },
        }
    }

    /// Known field set of an item-list-valued node.
    fn members_of<'s>(&self, n: &Node, scope: &'s StaticScope) -> Option<&'s KnownFields> {
        match &n.ast {
            Ast::Items => scope.members.as_ref(),
            Ast::Buffer(b) => scope.buffers.get(b),
            _ => None,
        }
    }

    fn infer(&self, n: &Node, scope: &StaticScope, issues: &mut Vec<StaticIssue>) -> StaticType {
        match &n.ast {
            Ast::Number(_) => StaticType::Number,
            Ast::Text(_) => StaticType::Text,
            Ast::Bool(_) => StaticType::Bool,
            Ast::List(xs) => {
                xs.iter().for_each(|x| {
                    self.infer(x, scope, issues);
                });
                StaticType::List
            }
            Ast::Item => StaticType::Item,
            Ast::Items => {
                if scope.members.is_none() {
                    issues.push(StaticIssue::BatchScope { expr: self.slice(n.span).to_string() });
                }
                StaticType::Items
            }
            Ast::Buffer(b) => {
                if !scope.buffers.contains_key(b) {
                    issues.push(StaticIssue::UnknownBuffer { name: b.clone() });
                }
                StaticType::Items
            }
            Ast::Field(base, name) => match &base.ast {
                Ast::Item => self.lookup(&scope.item, name, n, issues),
                Ast::Items | Ast::Buffer(_) => {
                    self.infer(base, scope, issues);
                    if let Some(k) = self.members_of(base, scope) {
                        self.lookup(k, name, n, issues);
                    }
                    StaticType::List
                }
                Ast::Index(inner, idx) if matches!(inner.ast, Ast::Items | Ast::Buffer(_)) => {
                    self.infer(inner, scope, issues);
                    self.infer(idx, scope, issues);
                    match self.members_of(inner, scope) {
                        Some(k) => self.lookup(k, name, n, issues),
                        None => StaticType::Unknown,
                    }
                }
                _ => {
                    self.infer(base, scope, issues);
                    StaticType::Unknown
                }
            },
            Ast::Index(base, idx) => {
                let bt = self.infer(base, scope, issues);
                self.infer(idx, scope, issues);
                if bt == StaticType::Items {
                    StaticType::Item
                } else {
                    StaticType::Unknown
                }
            }
            Ast::Unary(UnOp::Not, a) => {
                self.infer(a, scope, issues);
                StaticType::Bool
            }
            Ast::Unary(UnOp::Neg, a) => {
                self.infer(a, scope, issues);
                StaticType::Number
            }
            Ast::Binary(op, a, b) => {
                self.infer(a, scope, issues);
                self.infer(b, scope, issues);
                match op {
                    BinOp::Add | BinOp::Sub | BinOp::Mul | BinOp::Div | BinOp::Rem => StaticType::Number,
                    _ => StaticType::Bool,
                }
            }
            Ast::Ternary(c, a, b) => {
                self.infer(c, scope, issues);
                let (ta, tb) = (self.infer(a, scope, issues), self.infer(b, scope, issues));
                if ta == tb {
                    ta
                } else {
                    StaticType::Unknown
                }
            }
            Ast::Call(f, args) => {
                args.iter().for_each(|a| {
                    self.infer(a, scope, issues);
                });
                match f {
                    Builtin::Len | Builtin::Sum | Builtin::Min | Builtin::Max | Builtin::Avg | Builtin::Num => {
                        StaticType::Number
                    }
                    Builtin::Contains => StaticType::Bool,
                    Builtin::Lower | Builtin::Upper | Builtin::Join | Builtin::Str => StaticType::Text,
                }
            }
        }
    }
}
