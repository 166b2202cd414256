//! Output similarity metrics and task evaluation.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelRegistry;
use crate::operator::digest;
use crate::pipeline::program::{parse_program, Program};
use crate::sandbox::{run_sandbox, Env, SandboxOptions, SandboxReport};
use crate::types::{canonical_string, Fields, StreamDescription};

// ------------------------------------------------------------ field sims

fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

fn ngram_counts(toks: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    for g in toks.windows(n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// Smoothed sentence BLEU with n capped at min(4, |ref|, |cand|).
pub fn field_sim_bleu(reference: &str, candidate: &str) -> f64 {
    let r = tokens(reference);
    let c = tokens(candidate);
    match (r.is_empty(), c.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let max_n = 4.min(r.len()).min(c.len());
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let rc = ngram_counts(&r, n);
        let cc = ngram_counts(&c, n);
        let clipped: usize = cc.iter().map(|(g, k)| (*k).min(rc.get(g).copied().unwrap_or(0))).sum();
        let total = c.len() - n + 1;
        log_sum += ((clipped as f64 + 1.0) / (total as f64 + 1.0)).ln();
    }
    let geo = (log_sum / max_n as f64).exp();
    let bp = if c.len() < r.len() { (1.0 - r.len() as f64 / c.len() as f64).exp() } else { 1.0 };
    (geo * bp).clamp(0.0, 1.0)
}

/// 1 - Levenshtein / max length, over characters.
pub fn field_sim_ed(reference: &str, candidate: &str) -> f64 {
    let max = reference.chars().count().max(candidate.chars().count());
    if max == 0 {
        return 1.0;
    }
    1.0 - strsim::levenshtein(reference, candidate) as f64 / max as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldSim {
    #[default]
    Bleu,
    Ed,
}

impl FieldSim {
    pub fn apply(self, reference: &str, candidate: &str) -> f64 {
        match self {
            FieldSim::Bleu => field_sim_bleu(reference, candidate),
            FieldSim::Ed => field_sim_ed(reference, candidate),
        }
    }
}

/// Per-field weights; absent fields weigh 1.
pub type FieldWeights = BTreeMap<String, f64>;

/// Per-stream weights; absent streams default to the oracle stream length.
pub type StreamWeights = BTreeMap<String, f64>;

/// Weighted mean of field similarity over the fields both items carry.
/// `reference` is the oracle side. No common fields gives 0.
pub fn item_sim(reference: &Fields, candidate: &Fields, w: &FieldWeights, f: &dyn Fn(&str, &str) -> f64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (k, rv) in reference {
        if let Some(cv) = candidate.get(k) {
            let wk = w.get(k).copied().unwrap_or(1.0);
            num += wk * f(&canonical_string(rv), &canonical_string(cv));
            den += wk;
        }
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceSim {
    pub raw: f64,
    pub normalized: f64,
}

/// Maximum-weight monotone alignment score for an m×n similarity function.
pub fn lcs_raw(m: usize, n: usize, sim: impl Fn(usize, usize) -> f64) -> f64 {
    let mut prev = vec![0.0; n + 1];
    let mut cur = vec![0.0; n + 1];
    for i in 1..=m {
        cur[0] = 0.0;
        for j in 1..=n {
            let diag = prev[j - 1] + sim(i - 1, j - 1);
            cur[j] = prev[j].max(cur[j - 1]).max(diag);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[n]
}

pub fn normalize(raw: f64, m: usize, n: usize) -> f64 {
    match (m, n) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => (raw / m.max(n) as f64).clamp(0.0, 1.0),
    }
}

pub fn sequence_sim(a: &[Fields], b: &[Fields], w: &FieldWeights, f: &dyn Fn(&str, &str) -> f64) -> SequenceSim {
    let raw = lcs_raw(a.len(), b.len(), |i, j| item_sim(&a[i], &b[j], w, f));
    SequenceSim { raw, normalized: normalize(raw, a.len(), b.len()) }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    #[serde(default)]
    pub field_sim: FieldSim,
    #[serde(default)]
    pub field_weights: FieldWeights,
    #[serde(default)]
    pub stream_weights: StreamWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamScores {
    pub score: f64,
    pub per_stream: IndexMap<String, f64>,
}

/// Weighted mean of per-stream normalized sequence similarity. Weights
/// default to oracle stream lengths; a stream the candidate lacks scores 0.
pub fn multi_stream_scores(
    oracle: &IndexMap<String, Vec<Fields>>,
    candidate: &IndexMap<String, Vec<Fields>>,
    cfg: &MetricConfig,
) -> StreamScores {
    let f = |a: &str, b: &str| cfg.field_sim.apply(a, b);
    let mut per_stream = IndexMap::new();
    let mut weights = Vec::new();
    for (id, a) in oracle {
        let s = match candidate.get(id) {
            Some(b) => sequence_sim(a, b, &cfg.field_weights, &f).normalized,
            None => 0.0,
        };
        per_stream.insert(id.clone(), s);
        weights.push(cfg.stream_weights.get(id).copied().unwrap_or(a.len() as f64));
    }
    let total: f64 = weights.iter().sum();
    let score = if per_stream.is_empty() {
        0.0
    } else if total > 0.0 {
        per_stream.values().zip(&weights).map(|(s, w)| s * w).sum::<f64>() / total
    } else {
        per_stream.values().sum::<f64>() / per_stream.len() as f64
    };
    StreamScores { score: score.clamp(0.0, 1.0), per_stream }
}

pub fn multi_stream_score(
    oracle: &IndexMap<String, Vec<Fields>>,
    candidate: &IndexMap<String, Vec<Fields>>,
    cfg: &MetricConfig,
) -> f64 {
    multi_stream_scores(oracle, candidate, cfg).score
}

// ----------------------------------------------------------------- tasks

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Single,
    Multi,
}

impl Difficulty {
    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Single => "single",
            Difficulty::Multi => "multi",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    pub difficulty: Difficulty,
    /// Natural-language request given to the generator.
    #[serde(default)]
    pub description: String,
    pub target_streams: Vec<StreamDescription>,
    pub available_streams: Vec<StreamDescription>,
    pub env: Env,
    /// Program document, inline as an object or as a string.
    pub oracle_program: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("ORACLE_FAILED: task {task_id}: {reason}")]
    OracleFailed { task_id: String, reason: String },
    #[error("EMPTY_RESULTS: no results to aggregate")]
    EmptyResults,
    #[error("BAD_TASK: {0}")]
    BadTask(String),
}

impl EvalError {
    pub fn code(&self) -> &'static str {
        match self {
            EvalError::OracleFailed { .. } => "ORACLE_FAILED",
            EvalError::EmptyResults => "EMPTY_RESULTS",
            EvalError::BadTask(_) => "BAD_TASK",
        }
    }
}

impl Task {
    pub fn from_file(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|e| EvalError::BadTask(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| EvalError::BadTask(format!("{}: {e}", path.display())))
    }

    pub fn oracle_document(&self) -> String {
        match &self.oracle_program {
            serde_json::Value::String(s) => s.clone(),
            v => serde_json::to_string_pretty(v).unwrap_or_default(),
        }
    }

    pub fn oracle(&self) -> Result<Program, EvalError> {
        parse_program(&self.oracle_document()).map_err(|d| EvalError::OracleFailed {
            task_id: self.task_id.clone(),
            reason: d.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; "),
        })
    }

    /// The Env with the target streams as expected outputs when none are given.
    pub fn run_env(&self) -> Env {
        let mut env = self.env.clone();
        if env.expected_outputs.is_empty() {
            env.expected_outputs = self.target_streams.clone();
        }
        env
    }

    /// Scripted registry from the Env's rules, or an empty registry.
    pub fn registry(&self) -> ModelRegistry {
        self.env.scripted_registry().unwrap_or_default()
    }

    pub fn target_ids(&self) -> Vec<String> {
        self.target_streams.iter().map(|d| d.stream_id.clone()).collect()
    }
}

/// Target-stream outputs of a report, flattened for scoring.
pub fn comparable_outputs(report: &SandboxReport, targets: &[String]) -> IndexMap<String, Vec<Fields>> {
    targets
        .iter()
        .filter_map(|t| report.outputs.get(t).map(|rs| (t.clone(), rs.iter().map(|r| r.comparable_fields()).collect())))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub executable: bool,
    pub result_score: f64,
    pub per_stream: IndexMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Digest of the candidate's serialized sandbox report.
    pub report_digest: String,
}

/// Oracle reference for a task: runs the oracle and requires a clean run.
pub fn oracle_outputs(task: &Task, registry: &ModelRegistry) -> Result<IndexMap<String, Vec<Fields>>, EvalError> {
    let oracle = task.oracle()?;
    let report = run_sandbox(&oracle, &task.run_env(), registry, &SandboxOptions::default());
    if let Some((stage, e)) = report.first_error() {
        return Err(EvalError::OracleFailed { task_id: task.task_id.clone(), reason: format!("{stage}: {e}") });
    }
    if !report.schema_mismatches.is_empty() {
        let m: Vec<String> = report.schema_mismatches.iter().map(|m| m.to_string()).collect();
        return Err(EvalError::OracleFailed { task_id: task.task_id.clone(), reason: m.join("; ") });
    }
    Ok(comparable_outputs(&report, &task.target_ids()))
}

/// Scores a finished candidate report against precomputed oracle outputs.
pub fn score_report(
    task: &Task,
    oracle: &IndexMap<String, Vec<Fields>>,
    report: &SandboxReport,
    cfg: &MetricConfig,
) -> TaskResult {
    let cand = comparable_outputs(report, &task.target_ids());
    let s = multi_stream_scores(oracle, &cand, cfg);
    TaskResult {
        task_id: task.task_id.clone(),
        executable: report.executable(),
        result_score: s.score,
        per_stream: s.per_stream,
        error: report.first_error().map(|(st, e)| format!("{st}: {e}")),
        report_digest: digest(report.to_json().as_bytes()),
    }
}

pub fn evaluate_task_with(
    task: &Task,
    candidate: &Program,
    registry: &ModelRegistry,
    cfg: &MetricConfig,
) -> Result<TaskResult, EvalError> {
    let oracle = oracle_outputs(task, registry)?;
    let report = run_sandbox(candidate, &task.run_env(), registry, &SandboxOptions::default());
    Ok(score_report(task, &oracle, &report, cfg))
}

/// Runs oracle and candidate on the task Env and compares target outputs.
pub fn evaluate_task(task: &Task, candidate: &Program) -> Result<TaskResult, EvalError> {
    evaluate_task_with(task, candidate, &task.registry(), &MetricConfig::default())
}

pub fn executable_rate(results: &[TaskResult]) -> Result<f64, EvalError> {
    if results.is_empty() {
        return Err(EvalError::EmptyResults);
    }
    Ok(results.iter().filter(|r| r.executable).count() as f64 / results.len() as f64)
}

/// Best of several attempts: executable if any is, highest score. The
/// first attempt reaching the maximum is kept as the representative.
pub fn best_of_n(attempts: &[TaskResult]) -> Option<TaskResult> {
    let first = attempts.first()?;
    let mut best = first.clone();
    for a in &attempts[1..] {
        if a.result_score > best.result_score {
            best = a.clone();
        }
    }
    best.executable = attempts.iter().any(|a| a.executable);
    best.result_score = attempts.iter().map(|a| a.result_score).fold(f64::NEG_INFINITY, f64::max);
    Some(best)
}
