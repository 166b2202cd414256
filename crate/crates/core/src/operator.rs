//! Per-node execution state machines. The sandbox and the runtime both drive
//! programs through these, so the two agree on every node's semantics.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::model::{ModelError, ModelHandle};
use crate::pipeline::expr::{Expr, Scope};
use crate::pipeline::program::{BatchMode, FlushTrigger, Node, NodeKind, Program};
use crate::types::{BatchedItem, Buffer, Fields, Record, StreamItem};

pub type BufferSet = BTreeMap<String, Buffer>;

pub fn make_buffers(p: &Program) -> BufferSet {
    p.buffers.iter().map(|b| (b.name.clone(), Buffer::new(b.name.clone(), b.capacity))).collect()
}

/// 64-bit content digest (hex) of a canonical serialization.
pub fn digest(bytes: &[u8]) -> String {
    let h = Sha256::digest(bytes);
    h[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn digest_records(records: &[Record]) -> String {
    let joined: Vec<String> = records.iter().map(Record::to_json).collect();
    digest(joined.join("\n").as_bytes())
}

/// A node failure with enough context to attribute it.
#[derive(Debug, Clone, PartialEq)]
pub struct OpFailure {
    /// Operation that failed, e.g. `filter.predicate` or `model_map.query`.
    pub op: String,
    pub code: String,
    pub message: String,
}

impl OpFailure {
    fn eval(op: &str, e: crate::pipeline::expr::EvalError) -> Self {
        OpFailure { op: op.to_string(), code: e.code.as_str().to_string(), message: format!("{} in `{}`", e.message, e.expr) }
    }

    fn model(e: ModelError) -> Self {
        OpFailure { op: "model_map.query".into(), code: e.code().to_string(), message: e.to_string() }
    }
}

/// Outcome of one node invocation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Step {
    pub action: &'static str,
    pub emitted: Vec<Record>,
    pub logs: Vec<String>,
    pub model_calls: u32,
}

impl Step {
    fn new(action: &'static str) -> Self {
        Step { action, ..Default::default() }
    }
}

#[derive(Debug, Default)]
struct Pending {
    items: Vec<StreamItem>,
    window_start: Option<u64>,
}

impl Pending {
    fn take(&mut self, window: Option<u64>) -> Option<Record> {
        if self.items.is_empty() {
            return None;
        }
        let items = std::mem::take(&mut self.items);
        let first = items[0].tick;
        let last = items[items.len() - 1].tick;
        let win = match window {
            Some(t) => {
                let s = self.window_start.unwrap_or(first);
                (s, s + t - 1)
            }
            None => (first, last),
        };
        Some(Record::Batch(BatchedItem::new(items, win)))
    }
}

/// A node plus its mutable state.
pub struct Operator {
    node: Node,
    handle: Option<ModelHandle>,
    pending: Pending,
    reads_buffers: Vec<String>,
    invocations: u64,
}

fn member_of(rec: &Record) -> StreamItem {
    match rec {
        Record::Item(it) => it.clone(),
        Record::Batch(b) => StreamItem { tick: b.tick, fields: b.fields.clone() },
    }
}

fn scope_of<'a>(rec: &'a Record, snapshot: Option<&'a BTreeMap<String, Vec<StreamItem>>>) -> Scope<'a> {
    let s = match rec {
        Record::Item(it) => Scope::item(&it.fields),
        Record::Batch(b) => Scope::batch(&b.fields, &b.items),
    };
    match snapshot {
        Some(b) => s.with_buffers(b),
        None => s,
    }
}

fn eval_fields(op: &str, fields: &[(String, Expr)], scope: &Scope<'_>) -> Result<Vec<(String, crate::types::FieldValue)>, OpFailure> {
    fields
        .iter()
        .map(|(k, e)| e.eval_field(scope).map(|v| (k.clone(), v)).map_err(|err| OpFailure::eval(op, err)))
        .collect()
}

impl Operator {
    pub fn new(node: Node, handle: Option<ModelHandle>) -> Self {
        let mut reads: Vec<String> = node.expressions().iter().flat_map(|e| e.buffer_refs()).collect();
        reads.sort();
        reads.dedup();
        Operator { node, handle, pending: Pending::default(), reads_buffers: reads, invocations: 0 }
    }

    pub fn node(&self) -> &Node {
        &self.node
    }

    /// Number of records processed so far.
    pub fn invocations(&self) -> u64 {
        self.invocations
    }

    fn snapshot(&self, buffers: &BufferSet) -> Option<BTreeMap<String, Vec<StreamItem>>> {
        if self.reads_buffers.is_empty() {
            return None;
        }
        Some(
            self.reads_buffers
                .iter()
                .map(|n| (n.clone(), buffers.get(n).map(Buffer::get_all).unwrap_or_default()))
                .collect(),
        )
    }

    /// Processes one record arriving on the node's input stream.
    pub fn process(&mut self, rec: &Record, buffers: &mut BufferSet) -> Result<Step, OpFailure> {
        self.invocations += 1;
        let snap = self.snapshot(buffers);
        let scope = scope_of(rec, snap.as_ref());
        let mut logs = Vec::new();
        if let Some(t) = &self.node.log {
            logs.push(t.render_text(&scope).map_err(|e| OpFailure::eval("log", e))?);
        }
        let mut step = match &self.node.kind {
            NodeKind::Filter { predicate } => {
                if predicate.eval_bool(&scope).map_err(|e| OpFailure::eval("filter.predicate", e))? {
                    Step { action: "pass", emitted: vec![rec.clone()], ..Default::default() }
                } else {
                    Step::new("drop")
                }
            }
            NodeKind::Map { fields, select } => {
                let values = eval_fields("map.fields", fields, &scope)?;
                let mut out = rec.clone();
                let f = out.fields_mut();
                for (k, v) in values {
                    f.insert(k, v);
                }
                if let Some(sel) = select {
                    let mut kept = Fields::new();
                    for s in sel {
                        if let Some(v) = f.get(s) {
                            kept.insert(s.clone(), v.clone());
                        }
                    }
                    *f = kept;
                }
                Step { action: "map", emitted: vec![out], ..Default::default() }
            }
            NodeKind::ModelMap { template, output_field, .. } => {
                let prompt = template.render(&scope).map_err(|e| OpFailure::eval("model_map.template", e))?;
                let handle = self.handle.as_ref().ok_or_else(|| OpFailure {
                    op: "model_map.query".into(),
                    code: "UNSUPPORTED_SIGNATURE".into(),
                    message: "no model handle bound".into(),
                })?;
                let text = handle.query(&prompt).map_err(OpFailure::model)?;
                let mut out = rec.clone();
                out.fields_mut().insert(output_field.clone(), crate::types::FieldValue::Text(text));
                Step { action: "query", emitted: vec![out], model_calls: 1, ..Default::default() }
            }
            NodeKind::Batch { mode } => {
                let item = member_of(rec);
                let pending = &mut self.pending;
                let emitted = match mode {
                    BatchMode::ByCount(n) => {
                        pending.items.push(item);
                        if pending.items.len() >= *n {
                            pending.take(None)
                        } else {
                            None
                        }
                    }
                    BatchMode::ByTime(t) => {
                        let start = *pending.window_start.get_or_insert(item.tick);
                        let mut out = None;
                        if item.tick >= start.saturating_add(*t) {
                            out = pending.take(Some(*t));
                            pending.window_start = Some(item.tick);
                        }
                        pending.items.push(item);
                        out
                    }
                    BatchMode::ByItem(pat) => {
                        let hit = pat.iter().all(|(k, v)| item.fields.get(k) == Some(v));
                        if hit {
                            pending.take(None)
                        } else {
                            pending.items.push(item);
                            None
                        }
                    }
                    BatchMode::ByExpr(e) => {
                        let close = if pending.items.is_empty() {
                            false
                        } else {
                            let s = Scope::batch(&item.fields, &pending.items);
                            let s = match &snap {
                                Some(b) => s.with_buffers(b),
                                None => s,
                            };
                            e.eval_bool(&s).map_err(|err| OpFailure::eval("batch.by_expr", err))?
                        };
                        let out = if close { pending.take(None) } else { None };
                        pending.items.push(item);
                        out
                    }
                };
                match emitted {
                    Some(r) => Step { action: "emit_batch", emitted: vec![r], ..Default::default() },
                    None => Step::new("hold"),
                }
            }
            NodeKind::BufferAppend { buffer } => {
                let b = buffers.get_mut(buffer).ok_or_else(|| OpFailure {
                    op: "buffer_append".into(),
                    code: "UNKNOWN_BUFFER".into(),
                    message: format!("buffer {buffer} does not exist"),
                })?;
                match rec {
                    Record::Item(it) => {
                        b.append(it.clone());
                    }
                    Record::Batch(bt) => {
                        for it in &bt.items {
                            b.append(it.clone());
                        }
                    }
                }
                Step::new("append")
            }
            NodeKind::BufferFlush { buffer, trigger, fields } => {
                let contents = buffers.get(buffer).map(Buffer::get_all).unwrap_or_default();
                let fire = match trigger {
                    FlushTrigger::OnInput => true,
                    FlushTrigger::When(e) => {
                        let s = Scope::batch(rec.fields(), &contents);
                        let s = match &snap {
                            Some(b) => s.with_buffers(b),
                            None => s,
                        };
                        e.eval_bool(&s).map_err(|err| OpFailure::eval("buffer_flush.trigger", err))?
                    }
                };
                if !fire || contents.is_empty() {
                    Step::new("hold")
                } else {
                    let s = Scope::batch(rec.fields(), &contents);
                    let s = match &snap {
                        Some(b) => s.with_buffers(b),
                        None => s,
                    };
                    let values = eval_fields("buffer_flush.fields", fields, &s)?;
                    if let Some(b) = buffers.get_mut(buffer) {
                        b.pop_all();
                    }
                    let mut out = StreamItem::new(rec.tick());
                    out.fields.extend(values);
                    Step { action: "flush", emitted: vec![Record::Item(out)], ..Default::default() }
                }
            }
        };
        step.logs = logs;
        Ok(step)
    }

    /// Emits any partial batch held at stop.
    pub fn flush(&mut self) -> Step {
        let window = match &self.node.kind {
            NodeKind::Batch { mode: BatchMode::ByTime(t) } => Some(*t),
            NodeKind::Batch { .. } => None,
            _ => return Step::new("flush_none"),
        };
        match self.pending.take(window) {
            Some(r) => Step { action: "flush_batch", emitted: vec![r], ..Default::default() },
            None => Step::new("flush_none"),
        }
    }

    /// Number of members held in a partial batch.
    pub fn pending_len(&self) -> usize {
        self.pending.items.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::program::parse_program;
    use crate::types::FieldValue;

    fn batch_op(mode: &str) -> Operator {
        let doc = format!(
            r#"{{"program_id":"p","description":"","buffers":[],"nodes":[{{"node_id":"b","kind":"batch","input":"s","output":"t",{mode}}}]}}"#
        );
        let p = parse_program(&doc).unwrap();
        Operator::new(p.nodes[0].clone(), None)
    }

    fn run(op: &mut Operator, items: Vec<StreamItem>) -> Vec<Vec<u64>> {
        let mut bufs = BufferSet::new();
        let mut out = Vec::new();
        for it in items {
            out.extend(op.process(&Record::Item(it), &mut bufs).unwrap().emitted);
        }
        out.extend(op.flush().emitted);
        out.iter()
            .map(|r| match r {
                Record::Batch(b) => b.items.iter().map(|i| i.tick).collect(),
                _ => panic!("expected a batch"),
            })
            .collect()
    }

    fn ticks(ts: &[u64]) -> Vec<StreamItem> {
        ts.iter().map(|&t| StreamItem::new(t).with("v", FieldValue::Number(t as f64))).collect()
    }

    #[test]
    fn by_count_flushes_tail() {
        let mut op = batch_op(r#""by_count":2"#);
        assert_eq!(run(&mut op, ticks(&[0, 1, 2, 3, 4])), vec![vec![0, 1], vec![2, 3], vec![4]]);
    }

    #[test]
    fn by_time_tumbling_windows() {
        let mut op = batch_op(r#""by_time":3"#);
        let mut bufs = BufferSet::new();
        let mut out = Vec::new();
        for it in ticks(&[0, 1, 2, 3, 4, 7]) {
            out.extend(op.process(&Record::Item(it), &mut bufs).unwrap().emitted);
        }
        out.extend(op.flush().emitted);
        let windows: Vec<(u64, u64)> = out
            .iter()
            .map(|r| match r {
                Record::Batch(b) => b.window,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(windows, vec![(0, 2), (3, 5), (7, 9)]);
        assert_eq!(out[1].tick(), 4);
    }

    #[test]
    fn by_item_excludes_delimiter() {
        let mut op = batch_op(r#""by_item":{"msg":"bye"}"#);
        let msgs = ["hi", "yo", "bye", "bye", "ok"];
        let items: Vec<StreamItem> =
            msgs.iter().enumerate().map(|(i, m)| StreamItem::new(i as u64).with("msg", FieldValue::text(*m))).collect();
        assert_eq!(run(&mut op, items), vec![vec![0, 1], vec![4]]);
    }

    #[test]
    fn by_expr_closes_before_incoming() {
        let mut op = batch_op(r#""by_expr":"item.v - items[-1].v > 1""#);
        assert_eq!(run(&mut op, ticks(&[0, 1, 2, 5, 6, 9])), vec![vec![0, 1, 2], vec![5, 6], vec![9]]);
    }

    #[test]
    fn flush_trigger_and_errors() {
        let p = parse_program(
            r#"{"program_id":"p","description":"","buffers":[{"name":"hr"}],"nodes":[
                {"node_id":"a","kind":"buffer_append","input":"heart","buffer":"hr"},
                {"node_id":"f","kind":"buffer_flush","input":"gps","output":"o","buffer":"hr","fields":{"avg":"avg(items.bpm)","n":"len(items)"}},
                {"node_id":"d","kind":"map","input":"heart","output":"x","fields":{"r":"1 / item.bpm"},"log":"bpm {item.bpm}"}]}"#,
        )
        .unwrap();
        let mut bufs = make_buffers(&p);
        let mut a = Operator::new(p.nodes[0].clone(), None);
        let mut f = Operator::new(p.nodes[1].clone(), None);
        let gps = Record::Item(StreamItem::new(5).with("place", FieldValue::text("park")));
        assert!(f.process(&gps, &mut bufs).unwrap().emitted.is_empty());
        for b in [60.0, 80.0] {
            a.process(&Record::Item(StreamItem::new(1).with("bpm", FieldValue::Number(b))), &mut bufs).unwrap();
        }
        let out = f.process(&gps, &mut bufs).unwrap().emitted;
        assert_eq!(out[0].fields()["avg"], FieldValue::Number(70.0));
        assert_eq!(out[0].tick(), 5);
        assert!(bufs["hr"].is_empty());

        let mut d = Operator::new(p.nodes[2].clone(), None);
        let step = d.process(&Record::Item(StreamItem::new(0).with("bpm", FieldValue::Number(50.0))), &mut bufs).unwrap();
        assert_eq!(step.logs, vec!["bpm 50"]);
        let err = d.process(&Record::Item(StreamItem::new(1).with("bpm", FieldValue::Number(0.0))), &mut bufs).unwrap_err();
        assert_eq!(err.code, "DIV_BY_ZERO");
        assert_eq!(err.op, "map.fields");
        assert_eq!(d.invocations(), 2);
    }

    #[test]
    fn digests_are_stable() {
        let r = Record::Item(StreamItem::new(3).with("a", FieldValue::text("x")));
        assert_eq!(digest_records(std::slice::from_ref(&r)), digest_records(&[r]));
        assert_eq!(digest(b"").len(), 16);
    }
}
