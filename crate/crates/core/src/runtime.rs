//! Concurrent dataflow runtime over a global stream flow graph.
//!
//! Every stream owns a mailbox. A stream with subscribers is an execution
//! lane: at most one worker drains it at a time, so each subscriber sees the
//! stream's items in enqueue order, while different lanes run in parallel.

use std::collections::{BTreeSet, VecDeque};
use std::io::Write;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Instant;

use crossbeam_channel::{unbounded, Receiver, Sender};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::model::{ModelError, ModelRegistry};
use crate::operator::{make_buffers, BufferSet, Operator};
use crate::pipeline::program::{NodeKind, Program};
use crate::pipeline::validate::{analyze, merge_shapes, node_edges, source_shapes, StreamShape};
use crate::types::{Code, Diagnostic, Fields, Record, StreamDescription, StreamItem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRef {
    pub program: usize,
    pub node: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SfgEdge {
    pub from: String,
    pub to: String,
    pub program_id: String,
    pub node_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamInfo {
    pub shape: StreamShape,
    pub source: bool,
    pub writers: Vec<NodeRef>,
    pub readers: Vec<NodeRef>,
}

/// Merged graph of all registered programs. Streams with the same id are
/// one stream.
#[derive(Debug, Clone)]
pub struct StreamFlowGraph {
    pub programs: Vec<Program>,
    pub streams: IndexMap<String, StreamInfo>,
    pub edges: Vec<SfgEdge>,
    /// Global node order: upstream before downstream, ties by registration.
    pub order: Vec<NodeRef>,
}

impl StreamFlowGraph {
    pub fn node(&self, r: NodeRef) -> &crate::pipeline::program::Node {
        &self.programs[r.program].nodes[r.node]
    }

    pub fn node_refs(&self) -> Vec<NodeRef> {
        self.programs
            .iter()
            .enumerate()
            .flat_map(|(p, prog)| (0..prog.nodes.len()).map(move |n| NodeRef { program: p, node: n }))
            .collect()
    }
}

fn global_edges(programs: &[Program], refs: &[NodeRef]) -> Vec<(usize, usize)> {
    let index = |r: NodeRef| refs.iter().position(|x| *x == r).unwrap_or(0);
    let mut edges = Vec::new();
    for (a, ra) in refs.iter().enumerate() {
        let na = &programs[ra.program].nodes[ra.node];
        for (b, rb) in refs.iter().enumerate() {
            let nb = &programs[rb.program].nodes[rb.node];
            if na.output.as_deref() == Some(nb.input.as_str()) {
                edges.push((a, b));
            }
        }
    }
    for (p, prog) in programs.iter().enumerate() {
        for (i, j) in node_edges(prog) {
            let (a, b) = (index(NodeRef { program: p, node: i }), index(NodeRef { program: p, node: j }));
            if !edges.contains(&(a, b)) {
                edges.push((a, b));
            }
        }
    }
    edges
}

/// Merges programs into one graph, reusing shared streams.
pub fn build_sfg(programs: &[Program], sources: &[StreamDescription]) -> Result<StreamFlowGraph, Vec<Diagnostic>> {
    let mut diags = Vec::new();
    let src = source_shapes(sources);

    // Shapes of streams written elsewhere start unknown and are refined once.
    let mut produced: Vec<IndexMap<String, StreamShape>> = programs
        .iter()
        .map(|p| p.output_streams().into_iter().map(|s| (s, StreamShape::unknown())).collect())
        .collect();
    for pass in 0..2 {
        let mut next = Vec::with_capacity(programs.len());
        for (k, p) in programs.iter().enumerate() {
            let mut known = src.clone();
            for (j, outs) in produced.iter().enumerate() {
                if j != k {
                    for (s, shape) in outs {
                        known.entry(s.clone()).or_insert_with(|| shape.clone());
                    }
                }
            }
            let a = analyze(p, &known);
            if pass == 1 {
                for mut d in a.diagnostics.clone() {
                    d.message = format!("program {}: {}", p.program_id, d.message);
                    diags.push(d);
                }
            }
            next.push(a.outputs);
        }
        produced = next;
    }
    if !diags.is_empty() {
        return Err(diags);
    }

    let mut streams: IndexMap<String, StreamInfo> = IndexMap::new();
    for d in sources {
        streams.insert(
            d.stream_id.clone(),
            StreamInfo { shape: StreamShape::from_description(d), source: true, writers: vec![], readers: vec![] },
        );
    }
    for (k, outs) in produced.iter().enumerate() {
        for (s, shape) in outs {
            match streams.get_mut(s) {
                None => {
                    streams.insert(
                        s.clone(),
                        StreamInfo { shape: shape.clone(), source: false, writers: vec![], readers: vec![] },
                    );
                }
                Some(info) => match merge_shapes(&info.shape, shape) {
                    Ok(m) => info.shape = m,
                    Err(e) => diags.push(Diagnostic::new(
                        Code::SchemaConflict,
                        format!("stream {s} written by program {}: {e}", programs[k].program_id),
                    )),
                },
            }
        }
    }

    let mut edges = Vec::new();
    for (p, prog) in programs.iter().enumerate() {
        for (n, node) in prog.nodes.iter().enumerate() {
            let r = NodeRef { program: p, node: n };
            if let Some(info) = streams.get_mut(&node.input) {
                info.readers.push(r);
            }
            if let Some(o) = &node.output {
                if let Some(info) = streams.get_mut(o) {
                    info.writers.push(r);
                }
                edges.push(SfgEdge {
                    from: node.input.clone(),
                    to: o.clone(),
                    program_id: prog.program_id.clone(),
                    node_id: node.node_id.clone(),
                });
            }
        }
    }

    let refs: Vec<NodeRef> = programs
        .iter()
        .enumerate()
        .flat_map(|(p, prog)| (0..prog.nodes.len()).map(move |n| NodeRef { program: p, node: n }))
        .collect();
    let gedges = global_edges(programs, &refs);
    let mut indeg = vec![0usize; refs.len()];
    for &(_, b) in &gedges {
        indeg[b] += 1;
    }
    let mut done = vec![false; refs.len()];
    let mut order = Vec::new();
    while let Some(i) = (0..refs.len()).find(|&i| !done[i] && indeg[i] == 0) {
        done[i] = true;
        order.push(refs[i]);
        for &(a, b) in &gedges {
            if a == i {
                indeg[b] -= 1;
            }
        }
    }
    if order.len() < refs.len() {
        let stuck: Vec<String> = (0..refs.len())
            .filter(|&i| !done[i])
            .map(|i| format!("{}/{}", programs[refs[i].program].program_id, programs[refs[i].program].nodes[refs[i].node].node_id))
            .collect();
        diags.push(Diagnostic::new(Code::Cycle, format!("cross-program cycle through {}", stuck.join(", "))));
    }
    if !diags.is_empty() {
        return Err(diags);
    }
    Ok(StreamFlowGraph { programs: programs.to_vec(), streams, edges, order })
}

/// Intra-injection races that can make runtime output order differ from the
/// sandbox: two lanes fed by the same source that write one stream, or that
/// append to and read the same buffer.
pub fn race_hazards(g: &StreamFlowGraph) -> Vec<String> {
    let mut hazards = BTreeSet::new();
    for (src, _) in g.streams.iter().filter(|(_, i)| i.source) {
        let mut reach: BTreeSet<String> = BTreeSet::new();
        let mut stack = vec![src.clone()];
        while let Some(s) = stack.pop() {
            if !reach.insert(s.clone()) {
                continue;
            }
            for e in g.edges.iter().filter(|e| e.from == s) {
                stack.push(e.to.clone());
            }
            for prog in &g.programs {
                for a in &prog.nodes {
                    if a.input != s {
                        continue;
                    }
                    if let NodeKind::BufferAppend { buffer } = &a.kind {
                        for b in prog.nodes.iter().filter(|b| b.buffers_used().contains(buffer)) {
                            if let Some(o) = &b.output {
                                stack.push(o.clone());
                            }
                        }
                    }
                }
            }
        }
        for (s, info) in &g.streams {
            let lanes: BTreeSet<&str> = info
                .writers
                .iter()
                .map(|w| g.node(*w).input.as_str())
                .filter(|l| reach.contains(*l))
                .collect();
            if lanes.len() > 1 {
                hazards.insert(format!("stream {s} is written from lanes {} fed by {src}", lanes.into_iter().collect::<Vec<_>>().join(", ")));
            }
        }
        for prog in &g.programs {
            for buf in &prog.buffers {
                let lanes: BTreeSet<&str> = prog
                    .nodes
                    .iter()
                    .filter(|n| n.buffers_used().contains(&buf.name) && reach.contains(&n.input))
                    .map(|n| n.input.as_str())
                    .collect();
                if lanes.len() > 1 {
                    hazards.insert(format!("buffer {}/{} is shared by lanes {} fed by {src}", prog.program_id, buf.name, lanes.into_iter().collect::<Vec<_>>().join(", ")));
                }
            }
        }
    }
    hazards.into_iter().collect()
}

// ------------------------------------------------------------- runtime

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RuntimeError {
    #[error("ALREADY_RUNNING: runtime was already started")]
    AlreadyRunning,
    #[error("NOT_RUNNING: runtime is not running")]
    NotRunning,
    #[error("UNKNOWN_STREAM: {0}")]
    UnknownStream(String),
    #[error("QUEUE_FULL: mailbox of {0} is full")]
    QueueFull(String),
    #[error("graph rejected: {}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))]
    Build(Vec<Diagnostic>),
    #[error("{0}")]
    Model(ModelError),
}

impl RuntimeError {
    pub fn code(&self) -> &'static str {
        match self {
            RuntimeError::AlreadyRunning => "ALREADY_RUNNING",
            RuntimeError::NotRunning => "NOT_RUNNING",
            RuntimeError::UnknownStream(_) => "UNKNOWN_STREAM",
            RuntimeError::QueueFull(_) => "QUEUE_FULL",
            RuntimeError::Build(d) => d.first().map(|d| d.code.as_str()).unwrap_or("INVALID_GRAPH"),
            RuntimeError::Model(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueuePolicy {
    #[default]
    Block,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    /// Tick advances by one per injection batch.
    #[default]
    Logical,
    /// Tick is set by the caller through [`Runtime::advance_to`].
    External,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RuntimeConfig {
    pub workers: usize,
    pub mailbox_capacity: usize,
    pub policy: QueuePolicy,
    pub clock: ClockMode,
    /// Items a worker drains from one lane before yielding it.
    pub quantum: usize,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        let cpus = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(4);
        RuntimeConfig { workers: cpus.clamp(2, 8), mailbox_capacity: 4096, policy: QueuePolicy::Block, clock: ClockMode::Logical, quantum: 64 }
    }
}

#[derive(Default)]
struct StreamCounters {
    enqueued: AtomicU64,
    delivered: AtomicU64,
}

#[derive(Default)]
struct NodeCounters {
    invocations: AtomicU64,
    errors: AtomicU64,
    latency_ns: AtomicU64,
    max_latency_ns: AtomicU64,
    model_calls: AtomicU64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamMetrics {
    pub enqueued: u64,
    pub delivered: u64,
    pub in_mailbox: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub invocations: u64,
    pub errors: u64,
    pub total_latency_us: f64,
    pub max_latency_us: f64,
    pub model_calls: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub streams: IndexMap<String, StreamMetrics>,
    pub nodes: IndexMap<String, NodeMetrics>,
    pub items_in: u64,
    pub items_delivered: u64,
    pub items_in_mailboxes: u64,
    pub model_calls: u64,
    pub errors: u64,
}

impl MetricsSnapshot {
    /// Every enqueued item was either delivered or is still waiting.
    pub fn conserved(&self) -> bool {
        self.items_in == self.items_delivered + self.items_in_mailboxes
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics always serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeErrorEvent {
    pub tick: u64,
    pub program_id: String,
    pub node_id: String,
    pub op: String,
    pub code: String,
    pub message: String,
}

struct Lane {
    id: String,
    subscribers: Vec<usize>,
    queue: Mutex<VecDeque<Record>>,
    space: Condvar,
    scheduled: AtomicBool,
    retained: Mutex<Vec<Record>>,
    counters: StreamCounters,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Idle,
    Running,
    Stopping,
    Stopped,
}

struct Inner {
    graph: StreamFlowGraph,
    cfg: RuntimeConfig,
    lanes: Vec<Lane>,
    lane_index: IndexMap<String, usize>,
    ops: Vec<Mutex<Operator>>,
    op_refs: Vec<NodeRef>,
    op_output: Vec<Option<usize>>,
    node_counters: Vec<NodeCounters>,
    buffers: Vec<Mutex<BufferSet>>,
    phase: Mutex<Phase>,
    in_flight: Mutex<usize>,
    idle: Condvar,
    tick: AtomicU64,
    ready: Sender<usize>,
    errors: Mutex<Vec<NodeErrorEvent>>,
    sink: Option<Mutex<Box<dyn Write + Send>>>,
    shutdown: AtomicUsize,
}

impl Inner {
    fn event(&self, v: serde_json::Value) {
        if let Some(s) = &self.sink {
            if let Ok(mut w) = s.lock() {
                let _ = writeln!(w, "{v}");
            }
        }
    }

    fn begin_work(&self, n: usize) {
        *self.in_flight.lock().expect("in_flight lock") += n;
    }

    fn end_work(&self) {
        let mut g = self.in_flight.lock().expect("in_flight lock");
        *g -= 1;
        if *g == 0 {
            self.idle.notify_all();
        }
    }

    fn wait_idle(&self) {
        let mut g = self.in_flight.lock().expect("in_flight lock");
        while *g > 0 {
            g = self.idle.wait(g).expect("in_flight lock");
        }
    }

    fn schedule(&self, lane: usize) {
        if !self.lanes[lane].scheduled.swap(true, Ordering::AcqRel) {
            let _ = self.ready.send(lane);
        }
    }

    /// Appends to a stream. Internal publishes never block.
    fn publish(&self, lane: usize, rec: Record) {
        let l = &self.lanes[lane];
        l.counters.enqueued.fetch_add(1, Ordering::Relaxed);
        l.retained.lock().expect("retained lock").push(rec.clone());
        if l.subscribers.is_empty() {
            return;
        }
        self.begin_work(1);
        l.queue.lock().expect("queue lock").push_back(rec);
        self.schedule(lane);
    }

    fn run_node(&self, op_index: usize, rec: &Record) {
        let r = self.op_refs[op_index];
        let started = Instant::now();
        let result = {
            let mut op = self.ops[op_index].lock().expect("operator lock");
            let mut bufs = self.buffers[r.program].lock().expect("buffer lock");
            op.process(rec, &mut bufs)
        };
        let elapsed = started.elapsed().as_nanos() as u64;
        let c = &self.node_counters[op_index];
        c.invocations.fetch_add(1, Ordering::Relaxed);
        c.latency_ns.fetch_add(elapsed, Ordering::Relaxed);
        c.max_latency_ns.fetch_max(elapsed, Ordering::Relaxed);
        match result {
            Ok(step) => {
                c.model_calls.fetch_add(step.model_calls as u64, Ordering::Relaxed);
                let node = self.graph.node(r);
                for text in &step.logs {
                    self.event(json!({"event": "log", "tick": rec.tick(), "node_id": node.node_id, "text": text}));
                }
                if let Some(out) = self.op_output[op_index] {
                    for e in step.emitted {
                        self.publish(out, e);
                    }
                }
            }
            Err(f) => {
                c.errors.fetch_add(1, Ordering::Relaxed);
                let node = self.graph.node(r);
                let ev = NodeErrorEvent {
                    tick: rec.tick(),
                    program_id: self.graph.programs[r.program].program_id.clone(),
                    node_id: node.node_id.clone(),
                    op: f.op,
                    code: f.code,
                    message: f.message,
                };
                log::warn!("node {}/{} failed: {} {}", ev.program_id, ev.node_id, ev.code, ev.message);
                self.event(json!({"event": "node_error", "detail": ev}));
                self.errors.lock().expect("errors lock").push(ev);
            }
        }
    }

    fn drain(&self, lane: usize) {
        let l = &self.lanes[lane];
        for _ in 0..self.cfg.quantum.max(1) {
            let rec = {
                let mut q = l.queue.lock().expect("queue lock");
                let r = q.pop_front();
                l.space.notify_all();
                r
            };
            let Some(rec) = rec else { break };
            l.counters.delivered.fetch_add(1, Ordering::Relaxed);
            for &op in &l.subscribers {
                self.run_node(op, &rec);
            }
            self.end_work();
        }
        l.scheduled.store(false, Ordering::Release);
        if !l.queue.lock().expect("queue lock").is_empty() {
            self.schedule(lane);
        }
    }

    fn snapshot(&self) -> MetricsSnapshot {
        let mut streams = IndexMap::new();
        let (mut items_in, mut delivered, mut waiting) = (0, 0, 0);
        for l in &self.lanes {
            let enq = l.counters.enqueued.load(Ordering::Relaxed);
            let del = l.counters.delivered.load(Ordering::Relaxed);
            let wait = if l.subscribers.is_empty() { enq } else { l.queue.lock().expect("queue lock").len() as u64 };
            items_in += enq;
            delivered += del;
            waiting += wait;
            streams.insert(l.id.clone(), StreamMetrics { enqueued: enq, delivered: del, in_mailbox: wait });
        }
        let mut nodes = IndexMap::new();
        let (mut calls, mut errors) = (0, 0);
        for (i, r) in self.op_refs.iter().enumerate() {
            let c = &self.node_counters[i];
            let m = NodeMetrics {
                invocations: c.invocations.load(Ordering::Relaxed),
                errors: c.errors.load(Ordering::Relaxed),
                total_latency_us: c.latency_ns.load(Ordering::Relaxed) as f64 / 1000.0,
                max_latency_us: c.max_latency_ns.load(Ordering::Relaxed) as f64 / 1000.0,
                model_calls: c.model_calls.load(Ordering::Relaxed),
            };
            calls += m.model_calls;
            errors += m.errors;
            nodes.insert(format!("{}/{}", self.graph.programs[r.program].program_id, self.graph.node(*r).node_id), m);
        }
        MetricsSnapshot { streams, nodes, items_in, items_delivered: delivered, items_in_mailboxes: waiting, model_calls: calls, errors }
    }
}

fn worker(inner: Arc<Inner>, rx: Receiver<usize>) {
    while let Ok(lane) = rx.recv() {
        if lane == usize::MAX {
            break;
        }
        inner.drain(lane);
    }
}

/// A running (or startable) instance of a stream flow graph.
pub struct Runtime {
    inner: Arc<Inner>,
    rx: Receiver<usize>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

impl Runtime {
    pub fn new(graph: StreamFlowGraph, registry: &ModelRegistry, cfg: RuntimeConfig) -> Result<Self, RuntimeError> {
        Self::with_sink(graph, registry, cfg, None)
    }

    /// Like [`Runtime::new`], writing one JSON object per event to `sink`.
    pub fn with_sink(
        graph: StreamFlowGraph,
        registry: &ModelRegistry,
        cfg: RuntimeConfig,
        sink: Option<Box<dyn Write + Send>>,
    ) -> Result<Self, RuntimeError> {
        let op_refs = graph.node_refs();
        let mut ops = Vec::with_capacity(op_refs.len());
        for r in &op_refs {
            let node = graph.node(*r).clone();
            let handle = match &node.kind {
                NodeKind::ModelMap { signature, .. } => Some(registry.get_fm(signature).map_err(RuntimeError::Model)?),
                _ => None,
            };
            ops.push(Mutex::new(Operator::new(node, handle)));
        }
        let lane_index: IndexMap<String, usize> = graph.streams.keys().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        let lanes = graph
            .streams
            .keys()
            .map(|s| Lane {
                id: s.clone(),
                subscribers: op_refs.iter().enumerate().filter(|(_, r)| graph.node(**r).input == *s).map(|(i, _)| i).collect(),
                queue: Mutex::new(VecDeque::new()),
                space: Condvar::new(),
                scheduled: AtomicBool::new(false),
                retained: Mutex::new(Vec::new()),
                counters: StreamCounters::default(),
            })
            .collect();
        let op_output = op_refs.iter().map(|r| graph.node(*r).output.as_ref().and_then(|o| lane_index.get(o).copied())).collect();
        let buffers = graph.programs.iter().map(|p| Mutex::new(make_buffers(p))).collect();
        let node_counters = op_refs.iter().map(|_| NodeCounters::default()).collect();
        let (tx, rx) = unbounded();
        let inner = Inner {
            graph,
            cfg,
            lanes,
            lane_index,
            ops,
            op_refs,
            op_output,
            node_counters,
            buffers,
            phase: Mutex::new(Phase::Idle),
            in_flight: Mutex::new(0),
            idle: Condvar::new(),
            tick: AtomicU64::new(0),
            ready: tx,
            errors: Mutex::new(Vec::new()),
            sink: sink.map(Mutex::new),
            shutdown: AtomicUsize::new(0),
        };
        Ok(Runtime { inner: Arc::new(inner), rx, threads: Mutex::new(Vec::new()) })
    }

    pub fn graph(&self) -> &StreamFlowGraph {
        &self.inner.graph
    }

    pub fn start(&self) -> Result<(), RuntimeError> {
        let mut phase = self.inner.phase.lock().expect("phase lock");
        match *phase {
            Phase::Idle => {}
            Phase::Stopped => return Err(RuntimeError::NotRunning),
            _ => return Err(RuntimeError::AlreadyRunning),
        }
        let mut threads = self.threads.lock().expect("threads lock");
        for _ in 0..self.inner.cfg.workers.max(1) {
            let inner = self.inner.clone();
            let rx = self.rx.clone();
            threads.push(std::thread::spawn(move || worker(inner, rx)));
        }
        *phase = Phase::Running;
        self.inner.event(json!({"event": "start", "workers": threads.len(), "streams": self.inner.lanes.len()}));
        Ok(())
    }

    pub fn is_running(&self) -> bool {
        *self.inner.phase.lock().expect("phase lock") == Phase::Running
    }

    pub fn current_tick(&self) -> u64 {
        self.inner.tick.load(Ordering::Acquire)
    }

    /// Moves the external clock forward. Ticks never go backwards.
    pub fn advance_to(&self, tick: u64) {
        self.inner.tick.fetch_max(tick, Ordering::AcqRel);
    }

    fn enqueue_external(&self, lane: usize, rec: Record) -> Result<(), RuntimeError> {
        let l = &self.inner.lanes[lane];
        if l.subscribers.is_empty() {
            self.inner.publish(lane, rec);
            return Ok(());
        }
        let cap = self.inner.cfg.mailbox_capacity.max(1);
        {
            let mut q = l.queue.lock().expect("queue lock");
            while q.len() >= cap {
                match self.inner.cfg.policy {
                    QueuePolicy::Reject => return Err(RuntimeError::QueueFull(l.id.clone())),
                    QueuePolicy::Block => q = l.space.wait(q).expect("queue lock"),
                }
            }
            l.counters.enqueued.fetch_add(1, Ordering::Relaxed);
            l.retained.lock().expect("retained lock").push(rec.clone());
            self.inner.begin_work(1);
            q.push_back(rec);
        }
        self.inner.schedule(lane);
        Ok(())
    }

    /// Injects items that share one tick; returns that tick.
    pub fn inject_batch(&self, items: Vec<(String, Fields)>) -> Result<u64, RuntimeError> {
        if !self.is_running() {
            return Err(RuntimeError::NotRunning);
        }
        let mut lanes = Vec::with_capacity(items.len());
        for (s, _) in &items {
            lanes.push(*self.inner.lane_index.get(s).ok_or_else(|| RuntimeError::UnknownStream(s.clone()))?);
        }
        let tick = match self.inner.cfg.clock {
            ClockMode::Logical => self.inner.tick.fetch_add(1, Ordering::AcqRel),
            ClockMode::External => self.inner.tick.load(Ordering::Acquire),
        };
        for (lane, (_, fields)) in lanes.into_iter().zip(items) {
            self.enqueue_external(lane, Record::Item(StreamItem { tick, fields }))?;
        }
        Ok(tick)
    }

    pub fn inject(&self, stream: &str, fields: Fields) -> Result<u64, RuntimeError> {
        self.inject_batch(vec![(stream.to_string(), fields)])
    }

    /// Blocks until no item is queued or being processed.
    pub fn wait_idle(&self) {
        self.inner.wait_idle();
    }

    /// Drains mailboxes, flushes partial batches in dataflow order and stops
    /// the workers. Calling it again returns the final metrics.
    pub fn stop(&self) -> Result<MetricsSnapshot, RuntimeError> {
        {
            let mut phase = self.inner.phase.lock().expect("phase lock");
            match *phase {
                Phase::Running => *phase = Phase::Stopping,
                Phase::Idle => {
                    *phase = Phase::Stopped;
                    return Ok(self.inner.snapshot());
                }
                Phase::Stopping | Phase::Stopped => return Ok(self.inner.snapshot()),
            }
        }
        self.inner.wait_idle();
        for r in self.inner.graph.order.clone() {
            let i = self.inner.op_refs.iter().position(|x| *x == r).unwrap_or(0);
            let step = self.inner.ops[i].lock().expect("operator lock").flush();
            if let Some(out) = self.inner.op_output[i] {
                for e in step.emitted {
                    self.inner.publish(out, e);
                }
            }
            self.inner.wait_idle();
        }
        self.join_workers();
        *self.inner.phase.lock().expect("phase lock") = Phase::Stopped;
        let snap = self.inner.snapshot();
        self.inner.event(json!({"event": "stop", "metrics": snap}));
        Ok(snap)
    }

    fn join_workers(&self) {
        let mut threads = self.threads.lock().expect("threads lock");
        for _ in 0..threads.len() {
            let _ = self.inner.ready.send(usize::MAX);
        }
        self.inner.shutdown.fetch_add(threads.len(), Ordering::Relaxed);
        for t in threads.drain(..) {
            let _ = t.join();
        }
    }

    /// Everything ever written to a stream, in enqueue order.
    pub fn outputs(&self, stream: &str) -> Vec<Record> {
        match self.inner.lane_index.get(stream) {
            Some(&i) => self.inner.lanes[i].retained.lock().expect("retained lock").clone(),
            None => Vec::new(),
        }
    }

    pub fn all_outputs(&self) -> IndexMap<String, Vec<Record>> {
        self.inner.lanes.iter().map(|l| (l.id.clone(), l.retained.lock().expect("retained lock").clone())).collect()
    }

    pub fn metrics(&self) -> MetricsSnapshot {
        self.inner.snapshot()
    }

    pub fn errors(&self) -> Vec<NodeErrorEvent> {
        self.inner.errors.lock().expect("errors lock").clone()
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        self.join_workers();
    }
}

/// Replays a sandbox Env through a single-program runtime: the clock follows
/// item ticks and each injection settles before the next.
pub fn replay_env(
    program: &Program,
    env: &crate::sandbox::Env,
    registry: &ModelRegistry,
    mut cfg: RuntimeConfig,
) -> Result<(IndexMap<String, Vec<Record>>, MetricsSnapshot), RuntimeError> {
    let graph = build_sfg(std::slice::from_ref(program), &env.descriptions()).map_err(RuntimeError::Build)?;
    cfg.clock = ClockMode::External;
    let rt = Runtime::new(graph, registry, cfg)?;
    rt.start()?;
    let descs = env.descriptions();
    for (s, item) in env.merged() {
        rt.advance_to(item.tick);
        rt.inject(&descs[s].stream_id, item.fields)?;
        rt.wait_idle();
    }
    let metrics = rt.stop()?;
    let written = program.output_streams();
    let outputs = rt.all_outputs().into_iter().filter(|(k, _)| written.contains(k)).collect();
    Ok((outputs, metrics))
}
