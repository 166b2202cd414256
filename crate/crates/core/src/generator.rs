//! Feedback-guided program generation.
//!
//! Each iteration sends the base prompt plus the full history of Thought,
//! Code and Observation to the model, runs the emitted program in the
//! sandbox and feeds the result back, until the model answers `Finish` or
//! the iteration budget runs out.

use std::collections::BTreeSet;

use indexmap::IndexMap;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{oracle_outputs, score_report, EvalError, MetricConfig, Task, TaskResult};
use crate::model::{ModelHandle, Prompt, QueryOptions};
use crate::pipeline::program::parse_program;
use crate::sandbox::{run_sandbox_document, SandboxOptions, SandboxReport};
use crate::types::StreamDescription;

pub const DSL_REFERENCE: &str = include_str!("../assets/dsl_reference.md");

const RETRIEVAL_HEADER: &str = "# Stream retrieval";

const FORMAT_INSTRUCTIONS: &str = "## Answer format
Reply in one of two ways.
1. A line starting with `Thought:` explaining your plan, followed by the complete
   program document as JSON inside one fenced code block.
2. The single line `Finish` when the latest program is final.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub max_iterations: usize,
    /// Reference examples placed in the base prompt (0 or 1).
    pub example_count: usize,
    pub seed: u64,
    pub temperature: Option<f32>,
    /// Prompt size limit in estimated tokens (four characters each).
    pub token_limit: usize,
    /// Output items shown per stream in an Observation.
    pub sample_items: usize,
    /// Log lines shown in an Observation.
    pub log_tail: usize,
    /// Ask the model which available streams are relevant first.
    pub retrieve: bool,
    /// Attempt number, shown to the model so repeated runs can differ.
    pub attempt: u32,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            max_iterations: 5,
            example_count: 0,
            seed: 0,
            temperature: None,
            token_limit: 32_000,
            sample_items: 5,
            log_tail: 10,
            retrieve: true,
            attempt: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
pub enum GenerationError {
    #[error("GENERATION_BACKEND_ERROR: {0}")]
    Backend(String),
    #[error("NO_VALID_PROGRAM: {0}")]
    NoValidProgram(String),
    #[error("{0}")]
    Eval(String),
}

impl GenerationError {
    pub fn code(&self) -> &'static str {
        match self {
            GenerationError::Backend(_) => "GENERATION_BACKEND_ERROR",
            GenerationError::NoValidProgram(_) => "NO_VALID_PROGRAM",
            GenerationError::Eval(_) => "ORACLE_FAILED",
        }
    }
}

impl From<EvalError> for GenerationError {
    fn from(e: EvalError) -> Self {
        GenerationError::Eval(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub task_id: String,
    pub task: String,
    pub program_doc: String,
    pub features: BTreeSet<String>,
}

/// Read-only pool of solved tasks used as reference examples.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExampleStore {
    pub examples: Vec<Example>,
}

impl ExampleStore {
    /// Oracles of `tasks` except `exclude`; tasks whose oracle does not parse are skipped.
    pub fn from_tasks(tasks: &[Task], exclude: &str) -> Self {
        let examples = tasks
            .iter()
            .filter(|t| t.task_id != exclude)
            .filter_map(|t| {
                let p = t.oracle().ok()?;
                Some(Example {
                    task_id: t.task_id.clone(),
                    task: task_text(t),
                    program_doc: p.to_document(),
                    features: p.features().into_iter().collect(),
                })
            })
            .collect();
        ExampleStore { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Uniform pick among examples sharing a feature with `locus`; any
    /// example when `locus` is `None`.
    pub fn pick(&self, locus: Option<&BTreeSet<String>>, rng: &mut ChaCha8Rng) -> Option<&Example> {
        let pool: Vec<&Example> = match locus {
            Some(f) => self.examples.iter().filter(|e| !e.features.is_disjoint(f)).collect(),
            None => self.examples.iter().collect(),
        };
        if pool.is_empty() {
            return None;
        }
        Some(pool[rng.gen_range(0..pool.len())])
    }
}

fn task_text(t: &Task) -> String {
    if !t.description.is_empty() {
        return t.description.clone();
    }
    let targets: Vec<String> = t.target_streams.iter().map(|d| format!("{}: {}", d.stream_id, d.description)).collect();
    format!("Produce {}", targets.join("; "))
}

fn describe_streams(descs: &[StreamDescription]) -> String {
    let mut out = String::new();
    for d in descs {
        out.push_str(&format!("- `{}`: {}\n", d.stream_id, d.description));
        for (name, fs) in &d.fields_schema {
            out.push_str(&format!("  - `{name}` ({}): {}\n", fs.field_type.as_str(), fs.meaning));
        }
    }
    out
}

fn render_example(e: &Example) -> String {
    format!("Task: {}\n```json\n{}\n```\n", e.task, e.program_doc)
}

/// Assembles the fixed part of every generation prompt.
pub fn build_base_prompt(task: &Task, streams: &[StreamDescription], examples: &[&Example]) -> String {
    let mut s = String::new();
    s.push_str(DSL_REFERENCE.trim_end());
    s.push_str("\n\n");
    s.push_str(FORMAT_INSTRUCTIONS);
    s.push_str("\n\n## Available streams\n");
    s.push_str(&describe_streams(streams));
    s.push_str("\n## Target streams\n");
    s.push_str(&describe_streams(&task.target_streams));
    s.push_str("\n## Task\n");
    s.push_str(&task_text(task));
    s.push('\n');
    if !examples.is_empty() {
        s.push_str("\n## Examples\n");
        for e in examples {
            s.push_str(&render_example(e));
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub selected: Vec<String>,
    pub warnings: Vec<String>,
}

pub fn retrieval_prompt(task: &Task, all: &[StreamDescription]) -> String {
    format!(
        "{RETRIEVAL_HEADER}\nList the ids of the streams needed for the task, separated by commas or newlines.\n\n## Streams\n{}\n## Task\n{}\n",
        describe_streams(all),
        task_text(task)
    )
}

/// Parses a stream-id list; unknown ids are dropped and an empty result
/// falls back to every stream.
pub fn parse_retrieval(response: &str, all: &[StreamDescription]) -> Retrieval {
    let mut selected = Vec::new();
    let mut warnings = Vec::new();
    for tok in response.split([',', '\n']) {
        let id = tok.trim().trim_start_matches(['-', '*']).trim().trim_matches('`');
        if id.is_empty() {
            continue;
        }
        if all.iter().any(|d| d.stream_id == id) {
            if !selected.iter().any(|s| s == id) {
                selected.push(id.to_string());
            }
        } else {
            warnings.push(format!("dropped unknown stream id {id:?}"));
        }
    }
    if selected.is_empty() {
        warnings.push("no stream ids recognized, using all streams".into());
        selected = all.iter().map(|d| d.stream_id.clone()).collect();
    }
    Retrieval { selected, warnings }
}

pub fn retrieve_streams(task: &Task, all: &[StreamDescription], handle: &ModelHandle, opts: &QueryOptions) -> Result<Retrieval, GenerationError> {
    let reply = handle
        .query_with(&Prompt::text(retrieval_prompt(task, all)), opts)
        .map_err(|e| GenerationError::Backend(e.to_string()))?;
    let r = parse_retrieval(&reply.text, all);
    for w in &r.warnings {
        log::warn!("task {}: {w}", task.task_id);
    }
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Generation {
    Program { thought: String, doc: String },
    Finish,
    Unparsed { note: String },
}

/// Splits a model reply into the Thought paragraph and the first fenced code
/// block, or recognizes a standalone `Finish` line outside code blocks.
pub fn parse_generation(text: &str) -> Generation {
    let mut in_fence = false;
    let mut code: Option<Vec<&str>> = None;
    let mut code_done = false;
    let mut finish = false;
    let mut thought: Option<Vec<&str>> = None;
    let mut thought_open = false;
    for line in text.lines() {
        let t = line.trim();
        if t.starts_with("```") {
            if in_fence {
                in_fence = false;
                if code.is_some() {
                    code_done = true;
                }
            } else {
                in_fence = true;
                thought_open = false;
                if code.is_none() {
                    code = Some(Vec::new());
                }
            }
            continue;
        }
        if in_fence {
            if !code_done {
                if let Some(c) = code.as_mut() {
                    c.push(line);
                }
            }
            continue;
        }
        if t.eq_ignore_ascii_case("finish") || t.eq_ignore_ascii_case("finish.") {
            finish = true;
            thought_open = false;
            continue;
        }
        if let Some(rest) = t.strip_prefix("Thought:").or_else(|| t.strip_prefix("thought:")) {
            if thought.is_none() {
                thought = Some(vec![rest.trim()]);
                thought_open = true;
            }
            continue;
        }
        if thought_open {
            if t.is_empty() {
                thought_open = false;
            } else if let Some(th) = thought.as_mut() {
                th.push(t);
            }
        }
    }
    match code {
        Some(c) if code_done && c.iter().any(|l| !l.trim().is_empty()) => Generation::Program {
            thought: thought.map(|t| t.join(" ").trim().to_string()).unwrap_or_default(),
            doc: c.join("\n"),
        },
        _ if finish => Generation::Finish,
        _ => Generation::Unparsed {
            note: "reply had neither a fenced program block nor a Finish line".into(),
        },
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub output_sample: IndexMap<String, Vec<String>>,
    pub mismatch: Vec<String>,
    pub logs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_example: Option<Example>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Observation {
    pub fn parse_failure(note: &str) -> Self {
        Observation { note: Some(format!("{note}.\n{FORMAT_INSTRUCTIONS}")), ..Default::default() }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        if let Some(n) = &self.note {
            s.push_str(&format!("Note: {n}\n"));
        }
        match &self.error {
            Some(e) => s.push_str(&format!("Error: {e}\n")),
            None if self.note.is_none() => s.push_str("Error: none\n"),
            None => {}
        }
        if !self.mismatch.is_empty() {
            s.push_str("Output does not match the target streams:\n");
            for m in &self.mismatch {
                s.push_str(&format!("- {m}\n"));
            }
        }
        for (stream, items) in &self.output_sample {
            s.push_str(&format!("Output `{stream}` ({} shown):\n", items.len()));
            for i in items {
                s.push_str(&format!("  {i}\n"));
            }
        }
        if !self.logs.is_empty() {
            s.push_str("Logs:\n");
            for l in &self.logs {
                s.push_str(&format!("  {l}\n"));
            }
        }
        if let Some(e) = &self.reference_example {
            s.push_str("Reference example:\n");
            s.push_str(&render_example(e));
        }
        s
    }
}

/// Turns a sandbox report into feedback for the next iteration.
pub fn build_observation(
    report: &SandboxReport,
    candidate_doc: &str,
    store: &ExampleStore,
    rng: &mut ChaCha8Rng,
    cfg: &GenerationConfig,
) -> Observation {
    let error = report.first_error().map(|(stage, e)| format!("stage {stage} failed: {e}"));
    let mismatch: Vec<String> = report.schema_mismatches.iter().map(|m| m.to_string()).collect();
    let output_sample = report
        .outputs
        .iter()
        .map(|(s, rs)| (s.clone(), rs.iter().take(cfg.sample_items).map(|r| r.to_json()).collect()))
        .collect();
    let skip = report.logs.len().saturating_sub(cfg.log_tail);
    let logs = report.logs[skip..].iter().map(|l| format!("[{}] {}: {}", l.tick, l.node_id, l.text)).collect();

    let reference_example = if error.is_none() && mismatch.is_empty() {
        None
    } else {
        let program = parse_program(candidate_doc).ok();
        let locus: Option<BTreeSet<String>> = match (report.first_error(), &program) {
            (Some((_, e)), Some(p)) => match e.node_id.as_deref().and_then(|id| p.node(id)) {
                Some(n) => Some(n.features().into_iter().collect()),
                None => Some(p.features().into_iter().collect()),
            },
            (_, Some(p)) => Some(p.features().into_iter().collect()),
            (_, None) => None,
        };
        store.pick(locus.as_ref(), rng).cloned()
    };
    Observation { error, output_sample, mismatch, logs, reference_example, note: None }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: usize,
    pub thought: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub program_doc: Option<String>,
    pub finish: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<Observation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<TaskResult>,
    /// Oldest history entries omitted from this iteration's prompt.
    pub truncated: usize,
    pub prompt_chars: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub task_id: String,
    pub config: GenerationConfig,
    pub backend: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<Retrieval>,
    pub base_examples: Vec<String>,
    pub iterations: Vec<IterationRecord>,
}

impl GenerationTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("traces always serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutcome {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub program: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<TaskResult>,
    /// True when the loop ended on a Finish signal.
    pub finished: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<GenerationError>,
    pub trace: GenerationTrace,
}

impl GenerationOutcome {
    pub fn iterations(&self) -> usize {
        self.trace.iterations.len()
    }
}

fn estimate_tokens(chars: usize) -> usize {
    chars.div_ceil(4)
}

fn history_block(k: usize, thought: &str, doc: Option<&str>, obs: &str) -> String {
    let mut s = format!("### Iteration {k}\nThought: {thought}\n");
    if let Some(d) = doc {
        s.push_str(&format!("Code:\n```json\n{d}\n```\n"));
    }
    s.push_str(&format!("### Observation {k}\n{obs}\n"));
    s
}

fn assemble(base: &str, session: &str, history: &[String], limit: usize) -> (String, usize) {
    let mut skip = 0;
    loop {
        let mut p = format!("{base}\n{session}\n");
        if history.len() > skip {
            p.push_str("\n## History\n");
            if skip > 0 {
                p.push_str(&format!("({skip} earlier iterations omitted)\n"));
            }
            for h in &history[skip..] {
                p.push_str(h);
            }
        }
        if estimate_tokens(p.len()) <= limit || skip >= history.len() {
            return (p, skip);
        }
        skip += 1;
    }
}

fn better(a: &TaskResult, b: &TaskResult) -> bool {
    (a.result_score, a.executable as u8) > (b.result_score, b.executable as u8)
}

/// Runs the Thought/Code/Observation loop for one task.
pub fn generate(task: &Task, handle: &ModelHandle, store: &ExampleStore, cfg: &GenerationConfig) -> GenerationOutcome {
    let mut trace = GenerationTrace {
        task_id: task.task_id.clone(),
        config: cfg.clone(),
        backend: handle.backend_id().to_string(),
        retrieval: None,
        base_examples: Vec::new(),
        iterations: Vec::new(),
    };
    let fail = |trace: GenerationTrace, e: GenerationError| GenerationOutcome {
        program: None,
        result: None,
        finished: false,
        error: Some(e),
        trace,
    };
    let registry = task.registry();
    let oracle = match oracle_outputs(task, &registry) {
        Ok(o) => o,
        Err(e) => return fail(trace, e.into()),
    };
    let metric = MetricConfig::default();
    let env = task.run_env();
    let opts = QueryOptions { temperature: cfg.temperature };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let streams: Vec<StreamDescription> = if cfg.retrieve && !task.available_streams.is_empty() {
        match retrieve_streams(task, &task.available_streams, handle, &opts) {
            Ok(r) => {
                let chosen = task.available_streams.iter().filter(|d| r.selected.contains(&d.stream_id)).cloned().collect();
                trace.retrieval = Some(r);
                chosen
            }
            Err(e) => return fail(trace, e),
        }
    } else {
        task.available_streams.clone()
    };
    let k = cfg.example_count.min(store.len());
    let examples: Vec<&Example> = rand::seq::index::sample(&mut rng, store.len(), k).into_iter().map(|i| &store.examples[i]).collect();
    trace.base_examples = examples.iter().map(|e| e.task_id.clone()).collect();
    let base = build_base_prompt(task, &streams, &examples);
    let session = format!("Attempt: {}", cfg.attempt);

    let mut history: Vec<String> = Vec::new();
    let mut last_valid: Option<(String, TaskResult)> = None;
    let mut best: Option<(String, TaskResult)> = None;
    for k in 1..=cfg.max_iterations {
        let (prompt, truncated) = assemble(&base, &session, &history, cfg.token_limit);
        if truncated > 0 {
            log::info!("task {}: iteration {k} prompt omits {truncated} history entries", task.task_id);
        }
        let reply = match handle.query_with(&Prompt::text(prompt.clone()), &opts) {
            Ok(c) => c.text,
            Err(e) => return fail(trace, GenerationError::Backend(e.to_string())),
        };
        let mut rec = IterationRecord {
            index: k,
            thought: String::new(),
            program_doc: None,
            finish: false,
            observation: None,
            result: None,
            truncated,
            prompt_chars: prompt.len(),
        };
        match parse_generation(&reply) {
            Generation::Finish => {
                rec.finish = true;
                trace.iterations.push(rec);
                return match last_valid {
                    Some((doc, result)) => GenerationOutcome { program: Some(doc), result: Some(result), finished: true, error: None, trace },
                    None => fail(trace, GenerationError::NoValidProgram("Finish before any valid program".into())),
                };
            }
            Generation::Unparsed { note } => {
                let obs = Observation::parse_failure(&note);
                history.push(history_block(k, "", None, &obs.render()));
                rec.observation = Some(obs);
            }
            Generation::Program { thought, doc } => {
                let report = run_sandbox_document(&doc, &env, &registry, &SandboxOptions::default());
                let obs = build_observation(&report, &doc, store, &mut rng, cfg);
                let result = score_report(task, &oracle, &report, &metric);
                history.push(history_block(k, &thought, Some(&doc), &obs.render()));
                if parse_program(&doc).is_ok() {
                    last_valid = Some((doc.clone(), result.clone()));
                    if best.as_ref().is_none_or(|(_, b)| better(&result, b)) {
                        best = Some((doc.clone(), result.clone()));
                    }
                }
                rec.thought = thought;
                rec.program_doc = Some(doc);
                rec.observation = Some(obs);
                rec.result = Some(result);
            }
        }
        trace.iterations.push(rec);
    }
    match best {
        Some((doc, result)) => GenerationOutcome { program: Some(doc), result: Some(result), finished: false, error: None, trace },
        None => fail(trace, GenerationError::NoValidProgram(format!("no valid program in {} iterations", cfg.max_iterations))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelRegistry, ModelSignature, RuleSpec, ScriptedRules, MatchKind};
    use crate::sandbox::{Env, EnvItem, EnvStream};
    use crate::types::{FieldValue, SchemaType};

    fn rule(pattern: &str, response: &str) -> RuleSpec {
        RuleSpec { pattern: pattern.into(), kind: MatchKind::Substring, response: response.into() }
    }

    fn handle(rules: Vec<RuleSpec>, default: &str) -> ModelHandle {
        ModelRegistry::scripted(&ScriptedRules { rules, default: default.into() })
            .unwrap()
            .get_fm(&"text->text".parse::<ModelSignature>().unwrap())
            .unwrap()
    }

    const ORACLE: &str = r#"{"program_id":"loud","description":"","buffers":[],"nodes":[
        {"node_id":"f","kind":"filter","input":"microphone","output":"loud","predicate":"item.loudness > 70"}]}"#;
    const BROKEN: &str = r#"{"program_id":"loud","description":"","buffers":[],"nodes":[
        {"node_id":"f","kind":"filter","input":"microphone","output":"loud","predicate":"item.volume > 70"}]}"#;

    fn task() -> Task {
        let mic = StreamDescription::new("microphone", "sound level").field("loudness", SchemaType::Number, "dB");
        let other = StreamDescription::new("camera", "frames").field("frame", SchemaType::Image, "");
        let target = StreamDescription::new("loud", "loud moments").field("loudness", SchemaType::Number, "dB");
        let items = [40.0, 80.0, 75.0]
            .iter()
            .map(|v| EnvItem { tick: None, fields: [("loudness".to_string(), FieldValue::Number(*v))].into_iter().collect() })
            .collect();
        Task {
            task_id: "t1".into(),
            difficulty: crate::eval::Difficulty::Single,
            description: "Keep loud sound samples".into(),
            target_streams: vec![target],
            available_streams: vec![mic.clone(), other],
            env: Env::new(vec![EnvStream { stream: mic, items }]),
            oracle_program: serde_json::Value::String(ORACLE.into()),
        }
    }

    fn reply(doc: &str) -> String {
        format!("Thought: keep loud samples\n```json\n{doc}\n```")
    }

    #[test]
    fn parse_generation_cases() {
        assert_eq!(
            parse_generation("Thought: plan\nmore\n\n```\n{}\n```\n"),
            Generation::Program { thought: "plan more".into(), doc: "{}".into() }
        );
        assert_eq!(parse_generation("  finish  "), Generation::Finish);
        assert!(matches!(parse_generation("no code here"), Generation::Unparsed { .. }));
        // Finish inside a code block does not count.
        assert!(matches!(parse_generation("```\nFinish\n"), Generation::Unparsed { .. }));
    }

    #[test]
    fn retrieval_parsing() {
        let descs = vec![StreamDescription::new("all_news", ""), StreamDescription::new("email", ""), StreamDescription::new("x", "")];
        assert_eq!(parse_retrieval("all_news, email", &descs).selected, vec!["all_news", "email"]);
        let r = parse_retrieval("email\n- ghost", &descs);
        assert_eq!(r.selected, vec!["email"]);
        assert_eq!(r.warnings.len(), 1);
        let r = parse_retrieval("", &descs);
        assert_eq!(r.selected.len(), 3);
    }

    #[test]
    fn base_prompt_examples() {
        let t = task();
        let ex = Example { task_id: "e".into(), task: "example task".into(), program_doc: "{}".into(), features: BTreeSet::new() };
        let none = build_base_prompt(&t, &t.available_streams, &[]);
        assert!(!none.contains("## Examples"));
        let one = build_base_prompt(&t, &t.available_streams, &[&ex]);
        assert_eq!(one.matches("## Examples").count(), 1);
        assert_eq!(one, build_base_prompt(&t, &t.available_streams, &[&ex]));
    }

    #[test]
    fn broken_fixed_finish() {
        let h = handle(vec![rule(RETRIEVAL_HEADER, "microphone"), rule("### Observation 2", "Finish"), rule("### Observation 1", &reply(ORACLE))], &reply(BROKEN));
        let out = generate(&task(), &h, &ExampleStore::default(), &GenerationConfig::default());
        assert!(out.finished);
        assert_eq!(out.iterations(), 3);
        assert!(out.result.as_ref().unwrap().executable);
        assert_eq!(out.result.as_ref().unwrap().result_score, 1.0);
        let first = &out.trace.iterations[0];
        assert!(first.observation.as_ref().unwrap().error.as_ref().unwrap().contains("f"));
        assert_eq!(out.trace.retrieval.as_ref().unwrap().selected, vec!["microphone"]);
    }

    #[test]
    fn cutoff_returns_best() {
        let h = handle(vec![], &reply(BROKEN));
        let out = generate(&task(), &h, &ExampleStore::default(), &GenerationConfig::default());
        assert!(!out.finished);
        assert_eq!(out.iterations(), 5);
        assert!(out.program.is_some());
        assert!(!out.result.unwrap().executable);
    }

    #[test]
    fn finish_without_program_fails() {
        let out = generate(&task(), &handle(vec![], "Finish"), &ExampleStore::default(), &GenerationConfig::default());
        assert_eq!(out.iterations(), 1);
        assert_eq!(out.error.unwrap().code(), "NO_VALID_PROGRAM");
    }

    #[test]
    fn history_is_carried_verbatim() {
        let h = handle(vec![], &reply(BROKEN));
        let t = task();
        let store = ExampleStore::default();
        let cfg = GenerationConfig { max_iterations: 3, ..Default::default() };
        let a = generate(&t, &h, &store, &cfg);
        let b = generate(&t, &h, &store, &cfg);
        assert_eq!(a.trace.to_json(), b.trace.to_json());
        assert!(a.trace.iterations[2].prompt_chars > a.trace.iterations[1].prompt_chars);
    }

    #[test]
    fn token_guard_truncates_oldest() {
        let history = vec!["a".repeat(400), "b".repeat(400), "c".repeat(400)];
        let (p, skip) = assemble("base", "s", &history, 150);
        assert_eq!(skip, 2);
        assert!(p.contains(&"c".repeat(400)) && !p.contains(&"b".repeat(400)));
    }
}
