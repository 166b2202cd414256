//! Program documents: JSON parsing with positioned diagnostics, and printing.

use std::collections::HashSet;

use serde_json::{json, Map, Value as Json};

use super::expr::{Builtin, Expr};
use super::template::PromptTemplate;
use crate::model::ModelSignature;
use crate::types::{is_identifier, Code, Diagnostic, FieldValue};

pub const TOP_LEVEL_KEYS: [&str; 4] = ["program_id", "description", "buffers", "nodes"];

#[derive(Debug, Clone, PartialEq)]
pub struct BufferDecl {
    pub name: String,
    pub capacity: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BatchMode {
    ByCount(usize),
    ByTime(u64),
    /// Field-equality delimiter pattern.
    ByItem(Vec<(String, FieldValue)>),
    /// Close condition over the incoming `item` and the batch so far (`items`).
    ByExpr(Expr),
}

impl BatchMode {
    pub fn name(&self) -> &'static str {
        match self {
            BatchMode::ByCount(_) => "by_count",
            BatchMode::ByTime(_) => "by_time",
            BatchMode::ByItem(_) => "by_item",
            BatchMode::ByExpr(_) => "by_expr",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FlushTrigger {
    OnInput,
    When(Expr),
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Filter { predicate: Expr },
    Map { fields: Vec<(String, Expr)>, select: Option<Vec<String>> },
    ModelMap { signature: ModelSignature, template: PromptTemplate, output_field: String },
    Batch { mode: BatchMode },
    BufferAppend { buffer: String },
    BufferFlush { buffer: String, trigger: FlushTrigger, fields: Vec<(String, Expr)> },
}

impl NodeKind {
    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::Filter { .. } => "filter",
            NodeKind::Map { .. } => "map",
            NodeKind::ModelMap { .. } => "model_map",
            NodeKind::Batch { .. } => "batch",
            NodeKind::BufferAppend { .. } => "buffer_append",
            NodeKind::BufferFlush { .. } => "buffer_flush",
        }
    }
}

pub const NODE_KINDS: [&str; 6] = ["filter", "map", "model_map", "batch", "buffer_append", "buffer_flush"];

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub node_id: String,
    pub input: String,
    pub output: Option<String>,
    pub log: Option<PromptTemplate>,
    pub kind: NodeKind,
}

impl Node {
    pub fn expressions(&self) -> Vec<&Expr> {
        let mut out: Vec<&Expr> = match &self.kind {
            NodeKind::Filter { predicate } => vec![predicate],
            NodeKind::Map { fields, .. } => fields.iter().map(|(_, e)| e).collect(),
            NodeKind::ModelMap { template, .. } => template.placeholders().collect(),
            NodeKind::Batch { mode: BatchMode::ByExpr(e) } => vec![e],
            NodeKind::Batch { .. } | NodeKind::BufferAppend { .. } => vec![],
            NodeKind::BufferFlush { trigger, fields, .. } => {
                let mut v: Vec<&Expr> = fields.iter().map(|(_, e)| e).collect();
                if let FlushTrigger::When(e) = trigger {
                    v.push(e);
                }
                v
            }
        };
        if let Some(t) = &self.log {
            out.extend(t.placeholders());
        }
        out
    }

    /// Kind, batch mode and builtins used; drives reference-example selection.
    pub fn features(&self) -> Vec<String> {
        let mut f = vec![self.kind.name().to_string()];
        if let NodeKind::Batch { mode } = &self.kind {
            f.push(mode.name().to_string());
        }
        let mut builtins: Vec<Builtin> = self.expressions().iter().flat_map(|e| e.builtins()).collect();
        builtins.sort();
        builtins.dedup();
        f.extend(builtins.into_iter().map(|b| b.name().to_string()));
        f
    }

    /// Buffers touched by this node, through parameters or expressions.
    pub fn buffers_used(&self) -> Vec<String> {
        let mut out: Vec<String> = self.expressions().iter().flat_map(|e| e.buffer_refs()).collect();
        match &self.kind {
            NodeKind::BufferAppend { buffer } | NodeKind::BufferFlush { buffer, .. } => out.push(buffer.clone()),
            _ => {}
        }
        out.sort();
        out.dedup();
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub program_id: String,
    pub description: String,
    pub buffers: Vec<BufferDecl>,
    pub nodes: Vec<Node>,
}

impl Program {
    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.node_id == id)
    }

    /// Distinct stream ids written by nodes, in first-write order.
    pub fn output_streams(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for n in &self.nodes {
            if let Some(o) = &n.output {
                if !seen.contains(o) {
                    seen.push(o.clone());
                }
            }
        }
        seen
    }

    pub fn features(&self) -> Vec<String> {
        let mut f: Vec<String> = self.nodes.iter().flat_map(|n| n.features()).collect();
        f.sort();
        f.dedup();
        f
    }

    pub fn to_json(&self) -> Json {
        let buffers: Vec<Json> = self
            .buffers
            .iter()
            .map(|b| match b.capacity {
                Some(c) => json!({"name": b.name, "capacity": c}),
                None => json!({"name": b.name}),
            })
            .collect();
        let nodes: Vec<Json> = self.nodes.iter().map(node_json).collect();
        json!({
            "program_id": self.program_id,
            "description": self.description,
            "buffers": buffers,
            "nodes": nodes,
        })
    }

    /// Pretty-printed document that parses back to an equal program.
    pub fn to_document(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("program documents always serialize")
    }
}

fn expr_map(fields: &[(String, Expr)]) -> Json {
    let mut m = Map::new();
    for (k, e) in fields {
        m.insert(k.clone(), Json::String(e.source().to_string()));
    }
    Json::Object(m)
}

fn node_json(n: &Node) -> Json {
    let mut m = Map::new();
    m.insert("node_id".into(), json!(n.node_id));
    m.insert("kind".into(), json!(n.kind.name()));
    m.insert("input".into(), json!(n.input));
    if let Some(o) = &n.output {
        m.insert("output".into(), json!(o));
    }
    match &n.kind {
        NodeKind::Filter { predicate } => {
            m.insert("predicate".into(), json!(predicate.source()));
        }
        NodeKind::Map { fields, select } => {
            m.insert("fields".into(), expr_map(fields));
            if let Some(s) = select {
                m.insert("select".into(), json!(s));
            }
        }
        NodeKind::ModelMap { signature, template, output_field } => {
            m.insert("signature".into(), json!(signature.to_string()));
            m.insert("template".into(), json!(template.source()));
            m.insert("output_field".into(), json!(output_field));
        }
        NodeKind::Batch { mode } => {
            let v = match mode {
                BatchMode::ByCount(c) => json!(c),
                BatchMode::ByTime(t) => json!(t),
                BatchMode::ByItem(pat) => {
                    let mut p = Map::new();
                    for (k, v) in pat {
                        p.insert(k.clone(), plain_json(v));
                    }
                    Json::Object(p)
                }
                BatchMode::ByExpr(e) => json!(e.source()),
            };
            m.insert(mode.name().into(), v);
        }
        NodeKind::BufferAppend { buffer } => {
            m.insert("buffer".into(), json!(buffer));
        }
        NodeKind::BufferFlush { buffer, trigger, fields } => {
            m.insert("buffer".into(), json!(buffer));
            m.insert(
                "trigger".into(),
                match trigger {
                    FlushTrigger::OnInput => json!("on_input"),
                    FlushTrigger::When(e) => json!(e.source()),
                },
            );
            m.insert("fields".into(), expr_map(fields));
        }
    }
    if let Some(l) = &n.log {
        m.insert("log".into(), json!(l.source()));
    }
    Json::Object(m)
}

fn plain_json(v: &FieldValue) -> Json {
    match v {
        FieldValue::Text(s) => json!(s),
        FieldValue::Number(x) => json!(x),
        FieldValue::Bool(b) => json!(b),
        FieldValue::Media(m) => json!(m.locator),
        FieldValue::List(xs) => Json::Array(xs.iter().map(plain_json).collect()),
    }
}

fn plain_value(v: &Json) -> Option<FieldValue> {
    match v {
        Json::String(s) => Some(FieldValue::Text(s.clone())),
        Json::Number(n) => n.as_f64().and_then(|x| FieldValue::number(x).ok()),
        Json::Bool(b) => Some(FieldValue::Bool(*b)),
        _ => None,
    }
}

/// Byte offset → 1-based (line, column).
pub fn line_col(doc: &str, offset: usize) -> (usize, usize) {
    let before = &doc[..offset.min(doc.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map(|l| l.chars().count()).unwrap_or(0) + 1;
    (line, col)
}

/// Offsets of each element of the top-level `"nodes"` array.
fn node_offsets(doc: &str) -> Vec<usize> {
    let b = doc.as_bytes();
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut i = 0;
    let mut last_key: Option<(usize, usize)> = None;
    let mut in_nodes_at: Option<i32> = None;
    while i < b.len() {
        match b[i] {
            b'"' => {
                let start = i + 1;
                i += 1;
                while i < b.len() && b[i] != b'"' {
                    if b[i] == b'\\' {
                        i += 1;
                    }
                    i += 1;
                }
                last_key = Some((start, i.min(b.len())));
            }
            b'{' | b'[' => {
                depth += 1;
                if b[i] == b'[' && depth == 2 && in_nodes_at.is_none() {
                    if let Some((s, e)) = last_key {
                        if &doc[s..e] == "nodes" {
                            in_nodes_at = Some(depth);
                        }
                    }
                }
                if b[i] == b'{' && Some(depth - 1) == in_nodes_at {
                    out.push(i);
                }
            }
            b'}' | b']' => {
                if Some(depth) == in_nodes_at && b[i] == b']' {
                    in_nodes_at = None;
                }
                depth -= 1;
            }
            _ => {}
        }
        i += 1;
    }
    out
}

struct NodeCtx<'a> {
    obj: &'a Map<String, Json>,
    id: Option<String>,
    pos: Option<(usize, usize)>,
    diags: &'a mut Vec<Diagnostic>,
}

impl NodeCtx<'_> {
    fn diag(&mut self, code: Code, msg: impl Into<String>) {
        let mut d = Diagnostic::new(code, msg);
        d.node_id = self.id.clone();
        if let Some((l, c)) = self.pos {
            d = d.at(l, c);
        }
        self.diags.push(d);
    }

    fn str_key(&mut self, key: &str, required: bool) -> Option<String> {
        match self.obj.get(key) {
            Some(Json::String(s)) => Some(s.clone()),
            Some(_) => {
                self.diag(Code::ParseError, format!("key {key:?} must be a string"));
                None
            }
            None => {
                if required {
                    self.diag(Code::MissingParam, format!("missing key {key:?}"));
                }
                None
            }
        }
    }

    fn stream_key(&mut self, key: &str, required: bool) -> Option<String> {
        let s = self.str_key(key, required)?;
        if !is_identifier(&s) {
            self.diag(Code::BadId, format!("{key} {s:?} must match [a-z][a-z0-9_]*"));
        }
        Some(s)
    }

    fn expr_key(&mut self, key: &str) -> Option<Expr> {
        let s = self.str_key(key, true)?;
        self.expr(key, &s)
    }

    fn expr(&mut self, what: &str, s: &str) -> Option<Expr> {
        match Expr::parse(s) {
            Ok(e) => Some(e),
            Err(e) => {
                self.diag(Code::ExprSyntax, format!("{what}: {} at offset {} in `{s}`", e.message, e.offset));
                None
            }
        }
    }

    fn template(&mut self, what: &str, s: &str) -> Option<PromptTemplate> {
        match PromptTemplate::parse(s) {
            Ok(t) => Some(t),
            Err(e) => {
                self.diag(Code::TemplateSyntax, format!("{what}: {} at offset {}", e.message, e.offset));
                None
            }
        }
    }

    fn expr_fields(&mut self, key: &str) -> Option<Vec<(String, Expr)>> {
        match self.obj.get(key) {
            Some(Json::Object(m)) => {
                let mut out = Vec::new();
                let mut ok = true;
                for (k, v) in m {
                    if !is_identifier(k) {
                        self.diag(Code::BadFieldName, format!("field name {k:?} must match [a-z][a-z0-9_]*"));
                        ok = false;
                        continue;
                    }
                    match v.as_str() {
                        Some(src) => match self.expr(&format!("{key}.{k}"), src) {
                            Some(e) => out.push((k.clone(), e)),
                            None => ok = false,
                        },
                        None => {
                            self.diag(Code::ParseError, format!("{key}.{k} must be an expression string"));
                            ok = false;
                        }
                    }
                }
                ok.then_some(out)
            }
            Some(_) => {
                self.diag(Code::ParseError, format!("{key:?} must be an object of expressions"));
                None
            }
            None => {
                self.diag(Code::MissingParam, format!("missing key {key:?}"));
                None
            }
        }
    }
}

fn allowed_keys(kind: &str) -> &'static [&'static str] {
    match kind {
        "filter" => &["predicate"],
        "map" => &["fields", "select"],
        "model_map" => &["signature", "template", "output_field"],
        "batch" => &["by_count", "by_time", "by_item", "by_expr"],
        "buffer_append" => &["buffer"],
        "buffer_flush" => &["buffer", "trigger", "fields"],
        _ => &[],
    }
}

const COMMON_KEYS: [&str; 5] = ["node_id", "kind", "input", "output", "log"];

fn parse_node(obj: &Map<String, Json>, pos: Option<(usize, usize)>, diags: &mut Vec<Diagnostic>) -> Option<Node> {
    let id = obj.get("node_id").and_then(|v| v.as_str()).map(str::to_string);
    let mut cx = NodeCtx { obj, id: id.clone(), pos, diags };
    let node_id = cx.str_key("node_id", true);
    if let Some(n) = &node_id {
        if n.is_empty() {
            cx.diag(Code::BadId, "node_id must be non-empty");
        }
    }
    let kind = cx.str_key("kind", true)?;
    if !NODE_KINDS.contains(&kind.as_str()) {
        cx.diag(Code::UnknownKind, format!("unknown node kind {kind:?}; expected one of {}", NODE_KINDS.join(", ")));
        return None;
    }
    let before = cx.diags.len();
    for k in obj.keys() {
        if !COMMON_KEYS.contains(&k.as_str()) && !allowed_keys(&kind).contains(&k.as_str()) {
            cx.diag(Code::ParseError, format!("unexpected key {k:?} for {kind} node"));
        }
    }
    let input = cx.stream_key("input", true);
    let output = if kind == "buffer_append" {
        if obj.contains_key("output") {
            cx.diag(Code::ParseError, "buffer_append nodes have no output stream");
        }
        None
    } else {
        cx.stream_key("output", true)
    };
    let log = match cx.str_key("log", false) {
        Some(s) => cx.template("log", &s),
        None => None,
    };

    let kind = match kind.as_str() {
        "filter" => cx.expr_key("predicate").map(|predicate| NodeKind::Filter { predicate }),
        "map" => {
            let fields = cx.expr_fields("fields");
            let select = match obj.get("select") {
                None => Some(None),
                Some(Json::Array(xs)) if xs.iter().all(|x| x.as_str().is_some()) => {
                    Some(Some(xs.iter().map(|x| x.as_str().unwrap_or_default().to_string()).collect()))
                }
                Some(_) => {
                    cx.diag(Code::ParseError, "select must be a list of field names");
                    None
                }
            };
            match (fields, select) {
                (Some(fields), Some(select)) => Some(NodeKind::Map { fields, select }),
                _ => None,
            }
        }
        "model_map" => {
            let signature = cx.str_key("signature", true).and_then(|s| match s.parse::<ModelSignature>() {
                Ok(sig) => Some(sig),
                Err(e) => {
                    cx.diag(Code::BadSignature, e.to_string());
                    None
                }
            });
            let template = cx.str_key("template", true).and_then(|s| cx.template("template", &s));
            let output_field = cx.str_key("output_field", true);
            if let Some(f) = &output_field {
                if !is_identifier(f) {
                    cx.diag(Code::BadFieldName, format!("output_field {f:?} must match [a-z][a-z0-9_]*"));
                }
            }
            match (signature, template, output_field) {
                (Some(signature), Some(template), Some(output_field)) => {
                    Some(NodeKind::ModelMap { signature, template, output_field })
                }
                _ => None,
            }
        }
        "batch" => {
            let set: Vec<&str> =
                ["by_count", "by_time", "by_item", "by_expr"].into_iter().filter(|k| obj.contains_key(*k)).collect();
            match set.as_slice() {
                [] => {
                    cx.diag(Code::MissingBatchMode, "batch node needs one of by_count, by_time, by_item, by_expr");
                    None
                }
                [one] => {
                    let v = &obj[*one];
                    let positive = v.as_u64().filter(|n| *n > 0);
                    match *one {
                        "by_count" => match positive {
                            Some(n) => Some(BatchMode::ByCount(n as usize)),
                            None => {
                                cx.diag(Code::BadBatchParam, format!("by_count must be a positive integer, got {v}"));
                                None
                            }
                        },
                        "by_time" => match positive {
                            Some(n) => Some(BatchMode::ByTime(n)),
                            None => {
                                cx.diag(Code::BadBatchParam, format!("by_time must be a positive tick count, got {v}"));
                                None
                            }
                        },
                        "by_item" => match v.as_object() {
                            Some(m) if !m.is_empty() => {
                                let pat: Option<Vec<_>> =
                                    m.iter().map(|(k, v)| plain_value(v).map(|fv| (k.clone(), fv))).collect();
                                match pat {
                                    Some(p) => Some(BatchMode::ByItem(p)),
                                    None => {
                                        cx.diag(Code::BadBatchParam, "by_item values must be strings, numbers or booleans");
                                        None
                                    }
                                }
                            }
                            _ => {
                                cx.diag(Code::BadBatchParam, "by_item must be a non-empty object of field values");
                                None
                            }
                        },
                        _ => match v.as_str() {
                            Some(s) => cx.expr("by_expr", s).map(BatchMode::ByExpr),
                            None => {
                                cx.diag(Code::BadBatchParam, "by_expr must be an expression string");
                                None
                            }
                        },
                    }
                    .map(|mode| NodeKind::Batch { mode })
                }
                many => {
                    cx.diag(Code::MultipleBatchModes, format!("batch node sets {}; exactly one is allowed", many.join(" and ")));
                    None
                }
            }
        }
        "buffer_append" => cx.str_key("buffer", true).map(|buffer| NodeKind::BufferAppend { buffer }),
        _ => {
            let buffer = cx.str_key("buffer", true);
            let trigger = match obj.get("trigger") {
                None => Some(FlushTrigger::OnInput),
                Some(Json::String(s)) if s == "on_input" => Some(FlushTrigger::OnInput),
                Some(Json::String(s)) => {
                    let s = s.clone();
                    cx.expr("trigger", &s).map(FlushTrigger::When)
                }
                Some(_) => {
                    cx.diag(Code::ParseError, "trigger must be \"on_input\" or an expression string");
                    None
                }
            };
            let fields = cx.expr_fields("fields");
            match (buffer, trigger, fields) {
                (Some(buffer), Some(trigger), Some(fields)) => Some(NodeKind::BufferFlush { buffer, trigger, fields }),
                _ => None,
            }
        }
    };
    if cx.diags.len() > before {
        return None;
    }
    Some(Node { node_id: node_id?, input: input?, output, log, kind: kind? })
}

/// Parses a program document. All syntactic problems are reported at once.
pub fn parse_program(document: &str) -> Result<Program, Vec<Diagnostic>> {
    let root: Json = serde_json::from_str(document).map_err(|e| {
        vec![Diagnostic::new(Code::ParseError, format!("malformed JSON: {e}")).at(e.line(), e.column())]
    })?;
    let Json::Object(top) = root else {
        return Err(vec![Diagnostic::new(Code::ParseError, "program document must be a JSON object").at(1, 1)]);
    };
    let mut diags = Vec::new();
    for k in top.keys() {
        if !TOP_LEVEL_KEYS.contains(&k.as_str()) {
            diags.push(Diagnostic::new(Code::ParseError, format!("unexpected top-level key {k:?}")));
        }
    }
    for k in TOP_LEVEL_KEYS {
        if !top.contains_key(k) {
            diags.push(Diagnostic::new(Code::ParseError, format!("missing top-level key {k:?}")));
        }
    }
    let program_id = top.get("program_id").and_then(Json::as_str).unwrap_or_default().to_string();
    if top.contains_key("program_id") && !is_identifier(&program_id) {
        diags.push(Diagnostic::new(Code::BadId, format!("program_id {program_id:?} must match [a-z][a-z0-9_]*")));
    }
    let description = match top.get("description") {
        Some(Json::String(s)) => s.clone(),
        Some(_) => {
            diags.push(Diagnostic::new(Code::ParseError, "description must be a string"));
            String::new()
        }
        None => String::new(),
    };

    let mut buffers = Vec::new();
    match top.get("buffers") {
        Some(Json::Array(xs)) => {
            let mut seen = HashSet::new();
            for b in xs {
                let name = b.get("name").and_then(Json::as_str);
                let cap = b.get("capacity");
                match (name, cap) {
                    (Some(n), None) | (Some(n), Some(Json::Null)) => buffers.push(BufferDecl { name: n.to_string(), capacity: None }),
                    (Some(n), Some(c)) => match c.as_u64().filter(|c| *c > 0) {
                        Some(c) => buffers.push(BufferDecl { name: n.to_string(), capacity: Some(c as usize) }),
                        None => diags.push(Diagnostic::new(Code::ParseError, format!("buffer {n}: capacity must be a positive integer"))),
                    },
                    _ => diags.push(Diagnostic::new(Code::ParseError, "buffer declarations need a string \"name\"")),
                }
                if let Some(n) = name {
                    if !is_identifier(n) {
                        diags.push(Diagnostic::new(Code::BadId, format!("buffer name {n:?} must match [a-z][a-z0-9_]*")));
                    }
                    if !seen.insert(n.to_string()) {
                        diags.push(Diagnostic::new(Code::ParseError, format!("buffer {n} declared twice")));
                    }
                }
            }
        }
        Some(_) => diags.push(Diagnostic::new(Code::ParseError, "buffers must be a list")),
        None => {}
    }

    let mut nodes = Vec::new();
    match top.get("nodes") {
        Some(Json::Array(xs)) => {
            let offsets = node_offsets(document);
            let mut seen = HashSet::new();
            for (i, n) in xs.iter().enumerate() {
                let pos = offsets.get(i).map(|o| line_col(document, *o));
                let Json::Object(obj) = n else {
                    let mut d = Diagnostic::new(Code::ParseError, format!("node {i} must be an object"));
                    if let Some((l, c)) = pos {
                        d = d.at(l, c);
                    }
                    diags.push(d);
                    continue;
                };
                if let Some(id) = obj.get("node_id").and_then(Json::as_str) {
                    if !seen.insert(id.to_string()) {
                        let mut d = Diagnostic::new(Code::DuplicateNodeId, format!("node id {id:?} used more than once"))
                            .at_node(id);
                        if let Some((l, c)) = pos {
                            d = d.at(l, c);
                        }
                        diags.push(d);
                    }
                }
                if let Some(node) = parse_node(obj, pos, &mut diags) {
                    nodes.push(node);
                }
            }
        }
        Some(_) => diags.push(Diagnostic::new(Code::ParseError, "nodes must be a list")),
        None => {}
    }
    if diags.is_empty() {
        Ok(Program { program_id, description, buffers, nodes })
    } else {
        Err(diags)
    }
}
