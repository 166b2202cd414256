//! Deterministic single-lane simulation of one program against an Env.

use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::model::{ModelRegistry, ScriptedRules};
use crate::operator::{digest_records, make_buffers, BufferSet, OpFailure, Operator, Step};
use crate::pipeline::program::{parse_program, NodeKind, Program};
use crate::pipeline::validate::{node_order, validate_program};
use crate::types::{
    validate_description, Diagnostic, FieldValue, Fields, Record, SchemaType, StreamDescription, StreamItem,
};

pub const REPORT_VERSION: u32 = 1;

/// An Env item; the tick may be omitted and is then `index * tick_step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvItem {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tick: Option<u64>,
    pub fields: Fields,
}

impl From<StreamItem> for EnvItem {
    fn from(i: StreamItem) -> Self {
        EnvItem { tick: Some(i.tick), fields: i.fields }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvStream {
    pub stream: StreamDescription,
    #[serde(default)]
    pub items: Vec<EnvItem>,
}

fn default_tick_step() -> u64 {
    1
}

/// Simulated inputs plus the expected output contracts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Env {
    pub input_streams: Vec<EnvStream>,
    #[serde(default)]
    pub expected_outputs: Vec<StreamDescription>,
    #[serde(default = "default_tick_step")]
    pub tick_step: u64,
    /// Scripted model responses for programs that query models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_rules: Option<ScriptedRules>,
}

impl Env {
    pub fn new(input_streams: Vec<EnvStream>) -> Self {
        Env { input_streams, expected_outputs: Vec::new(), tick_step: 1, model_rules: None }
    }

    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn descriptions(&self) -> Vec<StreamDescription> {
        self.input_streams.iter().map(|s| s.stream.clone()).collect()
    }

    /// Items of one input stream with ticks filled in.
    pub fn items(&self, stream_index: usize) -> Vec<StreamItem> {
        self.input_streams[stream_index]
            .items
            .iter()
            .enumerate()
            .map(|(i, it)| StreamItem { tick: it.tick.unwrap_or(i as u64 * self.tick_step), fields: it.fields.clone() })
            .collect()
    }

    /// All input items in global injection order: (tick, declared stream order, index).
    pub fn merged(&self) -> Vec<(usize, StreamItem)> {
        let mut all: Vec<(u64, usize, usize, StreamItem)> = Vec::new();
        for s in 0..self.input_streams.len() {
            for (i, it) in self.items(s).into_iter().enumerate() {
                all.push((it.tick, s, i, it));
            }
        }
        all.sort_by_key(|(t, s, i, _)| (*t, *s, *i));
        all.into_iter().map(|(_, s, _, it)| (s, it)).collect()
    }

    /// Registry made from `model_rules`, if present.
    pub fn scripted_registry(&self) -> Option<ModelRegistry> {
        self.model_rules.as_ref().and_then(|r| ModelRegistry::scripted(r).ok())
    }

    fn check(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.tick_step == 0 {
            out.push("tick_step must be positive".to_string());
        }
        let mut seen = HashSet::new();
        for s in &self.input_streams {
            if !seen.insert(s.stream.stream_id.clone()) {
                out.push(format!("input stream {} declared twice", s.stream.stream_id));
            }
            for d in validate_description(&s.stream) {
                out.push(d.to_string());
            }
        }
        for (k, s) in self.input_streams.iter().enumerate() {
            let items = self.items(k);
            if items.windows(2).any(|w| w[1].tick < w[0].tick) {
                out.push(format!("input stream {} has decreasing ticks", s.stream.stream_id));
            }
        }
        let mut seen = HashSet::new();
        for e in &self.expected_outputs {
            if !seen.insert(e.stream_id.clone()) {
                out.push(format!("expected output {} listed twice", e.stream_id));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Initialization,
    Starting,
    Running,
    Stopping,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Initialization => "initialization",
            Stage::Starting => "starting",
            Stage::Running => "running",
            Stage::Stopping => "stopping",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageError {
    pub code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_id: Option<String>,
    pub op: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_index: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<Diagnostic>,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code)?;
        if let Some(n) = &self.node_id {
            write!(f, " at node {n}")?;
        }
        write!(f, " ({})", self.op)?;
        if let Some(i) = self.item_index {
            write!(f, " on item {i}")?;
        }
        write!(f, ": {}", self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum StageResult {
    Ok,
    Error(StageError),
    Skipped,
}

impl StageResult {
    pub fn is_ok(&self) -> bool {
        matches!(self, StageResult::Ok)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stages {
    pub initialization: StageResult,
    pub starting: StageResult,
    pub running: StageResult,
    pub stopping: StageResult,
}

impl Stages {
    fn skipped() -> Self {
        Stages {
            initialization: StageResult::Skipped,
            starting: StageResult::Skipped,
            running: StageResult::Skipped,
            stopping: StageResult::Skipped,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Stage, &StageResult)> {
        [
            (Stage::Initialization, &self.initialization),
            (Stage::Starting, &self.starting),
            (Stage::Running, &self.running),
            (Stage::Stopping, &self.stopping),
        ]
        .into_iter()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub tick: u64,
    pub node_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorRecord {
    pub tick: u64,
    pub node_id: String,
    pub action: String,
    pub input_digest: String,
    pub output_digest: String,
    pub model_calls: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MismatchKind {
    MissingStream,
    MissingField,
    TypeMismatch,
    /// An input item lacks a field its stream declares.
    InputMissingField,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaMismatch {
    pub kind: MismatchKind,
    pub stream_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actual: Option<String>,
}

impl fmt::Display for SchemaMismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            MismatchKind::MissingStream => "MISSING_STREAM",
            MismatchKind::MissingField => "MISSING_FIELD",
            MismatchKind::TypeMismatch => "TYPE_MISMATCH",
            MismatchKind::InputMissingField => "INPUT_MISSING_FIELD",
        };
        write!(f, "{kind} stream {}", self.stream_id)?;
        if let Some(i) = self.item_index {
            write!(f, " item {i}")?;
        }
        if let Some(fd) = &self.field {
            write!(f, " field {fd}")?;
        }
        if let (Some(e), Some(a)) = (&self.expected, &self.actual) {
            write!(f, " (expected {e}, got {a})")?;
        }
        Ok(())
    }
}

/// Complete record of one sandbox run. Field order is the serialized order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxReport {
    pub version: u32,
    pub program_id: String,
    pub deterministic: bool,
    pub stages: Stages,
    pub injections: u64,
    pub logs: Vec<LogLine>,
    pub behavior: Vec<BehaviorRecord>,
    pub outputs: IndexMap<String, Vec<Record>>,
    pub schema_mismatches: Vec<SchemaMismatch>,
}

impl SandboxReport {
    /// All four stages completed without error.
    pub fn executable(&self) -> bool {
        self.stages.iter().all(|(_, r)| r.is_ok())
    }

    pub fn first_error(&self) -> Option<(Stage, &StageError)> {
        self.stages.iter().find_map(|(s, r)| match r {
            StageResult::Error(e) => Some((s, e)),
            _ => None,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct SandboxOptions {
    /// Safety cap on the number of injected input items.
    pub max_injections: u64,
    /// Permit non-scripted backends; the report is then marked non-deterministic.
    pub allow_nondeterministic: bool,
}

impl Default for SandboxOptions {
    fn default() -> Self {
        SandboxOptions { max_injections: 1_000_000, allow_nondeterministic: false }
    }
}

fn diag_error(code: &str, op: &str, diags: Vec<Diagnostic>) -> StageError {
    let first = diags.first().cloned();
    StageError {
        code: first.as_ref().map(|d| d.code.as_str().to_string()).unwrap_or_else(|| code.to_string()),
        node_id: first.and_then(|d| d.node_id),
        op: op.to_string(),
        message: diags.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "),
        item_index: None,
        diagnostics: diags,
    }
}

struct Sim {
    ops: Vec<Operator>,
    buffers: BufferSet,
    /// stream id → subscribing node indices in declaration order.
    subscribers: IndexMap<String, Vec<usize>>,
    report: SandboxReport,
}

impl Sim {
    fn record_step(&mut self, i: usize, tick: u64, input: &[Record], step: &Step) {
        let node_id = self.ops[i].node().node_id.clone();
        for text in &step.logs {
            self.report.logs.push(LogLine { tick, node_id: node_id.clone(), text: text.clone() });
        }
        self.report.behavior.push(BehaviorRecord {
            tick,
            node_id,
            action: step.action.to_string(),
            input_digest: digest_records(input),
            output_digest: digest_records(&step.emitted),
            model_calls: step.model_calls,
        });
    }

    fn publish(&mut self, i: usize, emitted: Vec<Record>, queue: &mut VecDeque<(String, Record)>) {
        if let Some(out) = self.ops[i].node().output.clone() {
            for r in emitted {
                self.report.outputs.entry(out.clone()).or_default().push(r.clone());
                queue.push_back((out.clone(), r));
            }
        }
    }

    fn failure(&self, i: usize, f: OpFailure) -> StageError {
        let op = &self.ops[i];
        StageError {
            code: f.code,
            node_id: Some(op.node().node_id.clone()),
            op: f.op,
            message: f.message,
            item_index: Some(op.invocations().saturating_sub(1)),
            diagnostics: Vec::new(),
        }
    }

    /// Runs the queue to exhaustion, breadth first.
    #[allow(clippy::result_large_err)]
    fn propagate(&mut self, tick: u64, mut queue: VecDeque<(String, Record)>) -> Result<(), StageError> {
        while let Some((stream, rec)) = queue.pop_front() {
            let subs = self.subscribers.get(&stream).cloned().unwrap_or_default();
            for i in subs {
                let step = match self.ops[i].process(&rec, &mut self.buffers) {
                    Ok(s) => s,
                    Err(f) => return Err(self.failure(i, f)),
                };
                self.record_step(i, tick, std::slice::from_ref(&rec), &step);
                self.publish(i, step.emitted, &mut queue);
            }
        }
        Ok(())
    }
}

/// Parses a document and runs it; parse failures become initialization errors.
pub fn run_sandbox_document(doc: &str, env: &Env, registry: &ModelRegistry, opts: &SandboxOptions) -> SandboxReport {
    match parse_program(doc) {
        Ok(p) => run_sandbox(&p, env, registry, opts),
        Err(diags) => {
            let mut stages = Stages::skipped();
            stages.initialization = StageResult::Error(diag_error("PARSE_ERROR", "parse_program", diags));
            SandboxReport {
                version: REPORT_VERSION,
                program_id: String::new(),
                deterministic: true,
                stages,
                injections: 0,
                logs: Vec::new(),
                behavior: Vec::new(),
                outputs: IndexMap::new(),
                schema_mismatches: Vec::new(),
            }
        }
    }
}

/// Runs `p` through initialization, starting, running and stopping. Never
/// panics on bad programs; failures land in the stage results.
pub fn run_sandbox(p: &Program, env: &Env, registry: &ModelRegistry, opts: &SandboxOptions) -> SandboxReport {
    let mut report = SandboxReport {
        version: REPORT_VERSION,
        program_id: p.program_id.clone(),
        deterministic: true,
        stages: Stages::skipped(),
        injections: 0,
        logs: Vec::new(),
        behavior: Vec::new(),
        outputs: IndexMap::new(),
        schema_mismatches: Vec::new(),
    };

    // initialization
    let env_problems = env.check();
    if !env_problems.is_empty() {
        report.stages.initialization = StageResult::Error(StageError {
            code: "BAD_ENV".into(),
            node_id: None,
            op: "env".into(),
            message: env_problems.join("; "),
            item_index: None,
            diagnostics: Vec::new(),
        });
        return report;
    }
    let diags = validate_program(p, &env.descriptions());
    if !diags.is_empty() {
        report.stages.initialization = StageResult::Error(diag_error("INVALID_PROGRAM", "validate_program", diags));
        return report;
    }
    report.stages.initialization = StageResult::Ok;

    // starting
    let mut ops = Vec::with_capacity(p.nodes.len());
    for n in &p.nodes {
        let handle = match &n.kind {
            NodeKind::ModelMap { signature, .. } => match registry.get_fm(signature) {
                Ok(h) => {
                    if !h.is_deterministic() {
                        if !opts.allow_nondeterministic {
                            report.stages.starting = StageResult::Error(StageError {
                                code: "NONDETERMINISTIC_BACKEND".into(),
                                node_id: Some(n.node_id.clone()),
                                op: "get_fm".into(),
                                message: format!(
                                    "backend {} is not deterministic; enable non-deterministic sandboxing to use it",
                                    h.backend_id()
                                ),
                                item_index: None,
                                diagnostics: Vec::new(),
                            });
                            return report;
                        }
                        report.deterministic = false;
                    }
                    Some(h)
                }
                Err(e) => {
                    report.stages.starting = StageResult::Error(StageError {
                        code: e.code().to_string(),
                        node_id: Some(n.node_id.clone()),
                        op: "get_fm".into(),
                        message: e.to_string(),
                        item_index: None,
                        diagnostics: Vec::new(),
                    });
                    return report;
                }
            },
            _ => None,
        };
        ops.push(Operator::new(n.clone(), handle));
    }
    let mut subscribers: IndexMap<String, Vec<usize>> = IndexMap::new();
    for (i, n) in p.nodes.iter().enumerate() {
        subscribers.entry(n.input.clone()).or_default().push(i);
    }
    for s in p.output_streams() {
        report.outputs.insert(s, Vec::new());
    }
    report.stages.starting = StageResult::Ok;
    let mut sim = Sim { ops, buffers: make_buffers(p), subscribers, report };

    // running
    let descs = env.descriptions();
    let merged = env.merged();
    let mut last_tick = 0;
    let mut running = StageResult::Ok;
    for (k, (s, item)) in merged.into_iter().enumerate() {
        if k as u64 >= opts.max_injections {
            running = StageResult::Error(StageError {
                code: "MAX_INJECTIONS".into(),
                node_id: None,
                op: "inject".into(),
                message: format!("input exceeds the cap of {} injections", opts.max_injections),
                item_index: Some(k as u64),
                diagnostics: Vec::new(),
            });
            break;
        }
        last_tick = item.tick;
        sim.report.injections += 1;
        let mut q = VecDeque::new();
        q.push_back((descs[s].stream_id.clone(), Record::Item(item)));
        if let Err(e) = sim.propagate(last_tick, q) {
            running = StageResult::Error(e);
            break;
        }
    }
    let failed = !running.is_ok();
    sim.report.stages.running = running;

    // stopping
    if !failed {
        let order = node_order(p).unwrap_or_else(|_| (0..p.nodes.len()).collect());
        let mut stopping = StageResult::Ok;
        for i in order {
            let step = sim.ops[i].flush();
            if step.emitted.is_empty() {
                continue;
            }
            sim.record_step(i, last_tick, &[], &step);
            let mut q = VecDeque::new();
            sim.publish(i, step.emitted, &mut q);
            if let Err(e) = sim.propagate(last_tick, q) {
                stopping = StageResult::Error(e);
                break;
            }
        }
        sim.report.stages.stopping = stopping;
    }

    let mut report = sim.report;
    let mut mismatches = input_mismatches(env);
    mismatches.extend(diff_outputs(&report, &env.expected_outputs));
    report.schema_mismatches = mismatches;
    report
}

fn input_mismatches(env: &Env) -> Vec<SchemaMismatch> {
    let mut out = Vec::new();
    for (k, s) in env.input_streams.iter().enumerate() {
        for (i, it) in env.items(k).iter().enumerate() {
            for name in s.stream.fields_schema.keys() {
                if !it.fields.contains_key(name) {
                    out.push(SchemaMismatch {
                        kind: MismatchKind::InputMissingField,
                        stream_id: s.stream.stream_id.clone(),
                        item_index: Some(i),
                        field: Some(name.clone()),
                        expected: None,
                        actual: None,
                    });
                }
            }
        }
    }
    out
}

fn type_matches(t: &SchemaType, v: &FieldValue) -> bool {
    match t {
        SchemaType::Unknown(_) => true,
        t => *t == v.schema_type(),
    }
}

/// Compares produced outputs with the expected stream contracts.
pub fn diff_outputs(report: &SandboxReport, expected: &[StreamDescription]) -> Vec<SchemaMismatch> {
    let mut out = Vec::new();
    for e in expected {
        let Some(records) = report.outputs.get(&e.stream_id) else {
            out.push(SchemaMismatch {
                kind: MismatchKind::MissingStream,
                stream_id: e.stream_id.clone(),
                item_index: None,
                field: None,
                expected: None,
                actual: None,
            });
            continue;
        };
        for (i, r) in records.iter().enumerate() {
            let fields = r.comparable_fields();
            for (name, fs) in &e.fields_schema {
                match fields.get(name) {
                    None => out.push(SchemaMismatch {
                        kind: MismatchKind::MissingField,
                        stream_id: e.stream_id.clone(),
                        item_index: Some(i),
                        field: Some(name.clone()),
                        expected: None,
                        actual: None,
                    }),
                    Some(v) if !type_matches(&fs.field_type, v) => out.push(SchemaMismatch {
                        kind: MismatchKind::TypeMismatch,
                        stream_id: e.stream_id.clone(),
                        item_index: Some(i),
                        field: Some(name.clone()),
                        expected: Some(fs.field_type.as_str().to_string()),
                        actual: Some(v.type_name().to_string()),
                    }),
                    Some(_) => {}
                }
            }
        }
    }
    out
}
