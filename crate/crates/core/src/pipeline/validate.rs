//! Static checks over a parsed program: stream availability, acyclicity,
//! field references and model signatures.

use std::collections::BTreeMap;

use indexmap::IndexMap;

use super::expr::{Expr, KnownFields, StaticIssue, StaticScope, StaticType};
use super::program::{BatchMode, FlushTrigger, Node, NodeKind, Program};
use crate::model::Modality;
use crate::types::{Code, Diagnostic, StreamDescription};

/// Statically known shape of a stream's records.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StreamShape {
    pub fields: KnownFields,
    /// `Some` for batch streams: the member item fields.
    pub members: Option<KnownFields>,
}

impl StreamShape {
    pub fn unknown() -> Self {
        StreamShape { fields: None, members: None }
    }

    pub fn from_description(d: &StreamDescription) -> Self {
        let fields = d
            .fields_schema
            .iter()
            .map(|(k, fs)| (k.clone(), StaticType::from_schema(&fs.field_type)))
            .collect();
        StreamShape { fields: Some(fields), members: None }
    }
}

fn merge_known(a: &KnownFields, b: &KnownFields) -> Result<KnownFields, String> {
    match (a, b) {
        (Some(a), Some(b)) => {
            let mut out = a.clone();
            for (k, t) in b {
                match out.get(k) {
                    Some(StaticType::Unknown) | None => {
                        out.insert(k.clone(), t.clone());
                    }
                    Some(prev) if *t != StaticType::Unknown && prev != t => {
                        return Err(format!("field {k} is {prev:?} in one writer and {t:?} in another"));
                    }
                    _ => {}
                }
            }
            Ok(Some(out))
        }
        _ => Ok(None),
    }
}

/// Combines the shapes of two writers of the same stream.
pub fn merge_shapes(a: &StreamShape, b: &StreamShape) -> Result<StreamShape, String> {
    let fields = merge_known(&a.fields, &b.fields)?;
    let members = match (&a.members, &b.members) {
        (None, None) => None,
        (Some(x), Some(y)) => Some(merge_known(x, y)?),
        _ => return Err("one writer emits batches and another emits plain items".into()),
    };
    Ok(StreamShape { fields, members })
}

/// Node-level dependency edges: stream flow plus buffer writer → reader.
pub fn node_edges(p: &Program) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for (i, a) in p.nodes.iter().enumerate() {
        for (j, b) in p.nodes.iter().enumerate() {
            let flows = a.output.as_deref() == Some(b.input.as_str());
            let buffered = match &a.kind {
                NodeKind::BufferAppend { buffer } => {
                    !matches!(&b.kind, NodeKind::BufferAppend { buffer: bb } if bb == buffer)
                        && b.buffers_used().contains(buffer)
                }
                _ => false,
            };
            if flows || buffered {
                edges.push((i, j));
            }
        }
    }
    edges
}

/// Topological node order (Kahn, ties by declaration order). On a cycle,
/// returns the indices of nodes lying on one.
pub fn node_order(p: &Program) -> Result<Vec<usize>, Vec<usize>> {
    let n = p.nodes.len();
    let edges = node_edges(p);
    let mut indeg = vec![0usize; n];
    let mut succ = vec![Vec::new(); n];
    for &(a, b) in &edges {
        indeg[b] += 1;
        succ[a].push(b);
    }
    let mut done = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while let Some(i) = (0..n).find(|&i| !done[i] && indeg[i] == 0) {
        done[i] = true;
        order.push(i);
        for &s in &succ[i] {
            indeg[s] -= 1;
        }
    }
    if order.len() == n {
        return Ok(order);
    }
    let on_cycle: Vec<usize> = (0..n).filter(|&i| !done[i] && reaches(&succ, i, i)).collect();
    Err(on_cycle)
}

fn reaches(succ: &[Vec<usize>], from: usize, to: usize) -> bool {
    let mut seen = vec![false; succ.len()];
    let mut stack: Vec<usize> = succ[from].clone();
    while let Some(x) = stack.pop() {
        if x == to {
            return true;
        }
        if !std::mem::replace(&mut seen[x], true) {
            stack.extend(&succ[x]);
        }
    }
    false
}

/// Result of analyzing one program against known input shapes.
#[derive(Debug, Clone, Default)]
pub struct Analysis {
    /// Shapes of streams written by the program.
    pub outputs: IndexMap<String, StreamShape>,
    pub diagnostics: Vec<Diagnostic>,
}

fn issue_diag(node: &Node, issue: StaticIssue) -> Diagnostic {
    let d = match issue {
        StaticIssue::UnknownField { field, expr } => {
            Diagnostic::new(Code::UnknownField, format!("`{expr}` references unknown field {field:?}"))
        }
        StaticIssue::UnknownBuffer { name } => {
            Diagnostic::new(Code::UnknownBuffer, format!("buffer {name:?} is not declared"))
        }
        StaticIssue::BatchScope { expr } => {
            Diagnostic::new(Code::BatchScope, format!("`{expr}` needs batch scope but the input is not batched"))
        }
    };
    d.at_node(&node.node_id)
}

fn field_type(t: StaticType) -> StaticType {
    match t {
        StaticType::Item | StaticType::Items => StaticType::Unknown,
        t => t,
    }
}

struct Checker<'a> {
    node: &'a Node,
    diags: &'a mut Vec<Diagnostic>,
}

impl Checker<'_> {
    fn expr(&mut self, e: &Expr, scope: &StaticScope) -> StaticType {
        let mut issues = Vec::new();
        let t = e.check(scope, &mut issues);
        for i in issues {
            let d = issue_diag(self.node, i);
            if !self.diags.contains(&d) {
                self.diags.push(d);
            }
        }
        t
    }

    fn predicate(&mut self, what: &str, e: &Expr, scope: &StaticScope) {
        let t = self.expr(e, scope);
        if !matches!(t, StaticType::Bool | StaticType::Unknown) {
            self.diags.push(
                Diagnostic::new(Code::NonBooleanPredicate, format!("{what} `{e}` is {t:?}, expected a boolean"))
                    .at_node(&self.node.node_id),
            );
        }
    }
}

/// Infers output shapes and collects diagnostics. `known` holds the shapes
/// of streams available from outside the program.
pub fn analyze(p: &Program, known: &IndexMap<String, StreamShape>) -> Analysis {
    let mut diags = Vec::new();
    let declared: BTreeMap<&str, ()> = p.buffers.iter().map(|b| (b.name.as_str(), ())).collect();
    let written: Vec<String> = p.output_streams();

    for n in &p.nodes {
        if !known.contains_key(&n.input) && !written.contains(&n.input) {
            diags.push(
                Diagnostic::new(Code::UnknownStream, format!("input stream {:?} is neither a source nor produced by a node", n.input))
                    .at_node(&n.node_id),
            );
        }
        if let NodeKind::BufferAppend { buffer } | NodeKind::BufferFlush { buffer, .. } = &n.kind {
            if !declared.contains_key(buffer.as_str()) {
                diags.push(Diagnostic::new(Code::UnknownBuffer, format!("buffer {buffer:?} is not declared")).at_node(&n.node_id));
            }
        }
    }

    let order = match node_order(p) {
        Ok(o) => o,
        Err(cycle) => {
            let names: Vec<&str> = cycle.iter().map(|&i| p.nodes[i].node_id.as_str()).collect();
            let first = names.first().copied().unwrap_or_default();
            diags.push(
                Diagnostic::new(Code::Cycle, format!("nodes {} form a cycle", names.join(" -> "))).at_node(first),
            );
            return Analysis { outputs: IndexMap::new(), diagnostics: diags };
        }
    };

    let mut outputs: IndexMap<String, StreamShape> = IndexMap::new();
    let mut buffers: BTreeMap<String, KnownFields> = BTreeMap::new();
    let mut buffer_seen: BTreeMap<String, bool> = BTreeMap::new();
    for b in &p.buffers {
        buffers.insert(b.name.clone(), Some(BTreeMap::new()));
        buffer_seen.insert(b.name.clone(), false);
    }

    for &i in &order {
        let node = &p.nodes[i];
        let input = outputs
            .get(&node.input)
            .or_else(|| known.get(&node.input))
            .cloned()
            .unwrap_or_else(StreamShape::unknown);
        let scope = StaticScope { item: input.fields.clone(), members: input.members.clone(), buffers: buffers.clone() };
        let mut cx = Checker { node, diags: &mut diags };
        if let Some(t) = &node.log {
            for e in t.placeholders() {
                cx.expr(e, &scope);
            }
        }
        let out: Option<StreamShape> = match &node.kind {
            NodeKind::Filter { predicate } => {
                cx.predicate("predicate", predicate, &scope);
                Some(input.clone())
            }
            NodeKind::Map { fields, select } => {
                let mut kf = input.fields.clone();
                let mut computed = BTreeMap::new();
                for (name, e) in fields {
                    computed.insert(name.clone(), field_type(cx.expr(e, &scope)));
                }
                if let Some(map) = kf.as_mut() {
                    map.extend(computed.clone());
                }
                if let Some(sel) = select {
                    for s in sel {
                        let present = computed.contains_key(s) || kf.as_ref().is_none_or(|m| m.contains_key(s));
                        if !present {
                            cx.diags.push(
                                Diagnostic::new(Code::UnknownField, format!("select names unknown field {s:?}"))
                                    .at_node(&node.node_id),
                            );
                        }
                    }
                    kf = kf.map(|m| m.into_iter().filter(|(k, _)| sel.contains(k)).collect());
                }
                Some(StreamShape { fields: kf, members: input.members.clone() })
            }
            NodeKind::ModelMap { signature, template, output_field } => {
                for e in template.placeholders() {
                    if let StaticType::Media(kind) = cx.expr(e, &scope) {
                        if !signature.accepts(Modality::from(kind)) {
                            cx.diags.push(
                                Diagnostic::new(
                                    Code::UnsupportedSignature,
                                    format!("template places {kind} data `{e}` but the signature is {signature}"),
                                )
                                .at_node(&node.node_id),
                            );
                        }
                    }
                }
                let mut kf = input.fields.clone();
                if let Some(m) = kf.as_mut() {
                    m.insert(output_field.clone(), StaticType::Text);
                }
                Some(StreamShape { fields: kf, members: input.members.clone() })
            }
            NodeKind::Batch { mode } => {
                if let BatchMode::ByExpr(e) = mode {
                    let s = StaticScope { item: input.fields.clone(), members: Some(input.fields.clone()), buffers: buffers.clone() };
                    cx.predicate("by_expr", e, &s);
                }
                if let BatchMode::ByItem(pat) = mode {
                    if let Some(m) = &input.fields {
                        for (k, _) in pat {
                            if !m.contains_key(k) {
                                cx.diags.push(
                                    Diagnostic::new(Code::UnknownField, format!("by_item pattern names unknown field {k:?}"))
                                        .at_node(&node.node_id),
                                );
                            }
                        }
                    }
                }
                Some(StreamShape { fields: Some(BTreeMap::new()), members: Some(input.fields.clone()) })
            }
            NodeKind::BufferAppend { buffer } => {
                let member = input.members.clone().unwrap_or(input.fields.clone());
                if let Some(prev) = buffers.get(buffer).cloned() {
                    let first = !buffer_seen.insert(buffer.clone(), true).unwrap_or(false);
                    let merged = if first { Ok(member) } else { merge_known(&prev, &member) };
                    match merged {
                        Ok(m) => {
                            buffers.insert(buffer.clone(), m);
                        }
                        Err(e) => cx.diags.push(
                            Diagnostic::new(Code::SchemaConflict, format!("buffer {buffer}: {e}")).at_node(&node.node_id),
                        ),
                    }
                }
                None
            }
            NodeKind::BufferFlush { buffer, trigger, fields } => {
                let contents = buffers.get(buffer).cloned().unwrap_or(None);
                let s = StaticScope { item: input.fields.clone(), members: Some(contents), buffers: buffers.clone() };
                if let FlushTrigger::When(e) = trigger {
                    cx.predicate("trigger", e, &s);
                }
                let mut layout = BTreeMap::new();
                for (name, e) in fields {
                    layout.insert(name.clone(), field_type(cx.expr(e, &s)));
                }
                Some(StreamShape { fields: Some(layout), members: None })
            }
        };
        if let (Some(o), Some(shape)) = (&node.output, out) {
            let merged = match outputs.get(o) {
                None => Ok(shape),
                Some(prev) => merge_shapes(prev, &shape),
            };
            match merged {
                Ok(s) => {
                    outputs.insert(o.clone(), s);
                }
                Err(e) => {
                    diags.push(Diagnostic::new(Code::SchemaConflict, format!("stream {o}: {e}")).at_node(&node.node_id));
                }
            }
        }
    }
    Analysis { outputs, diagnostics: diags }
}

pub fn source_shapes(available: &[StreamDescription]) -> IndexMap<String, StreamShape> {
    available.iter().map(|d| (d.stream_id.clone(), StreamShape::from_description(d))).collect()
}

/// Diagnostics for `p` given the available source streams; empty when valid.
pub fn validate_program(p: &Program, available: &[StreamDescription]) -> Vec<Diagnostic> {
    analyze(p, &source_shapes(available)).diagnostics
}
