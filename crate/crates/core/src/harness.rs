//! Benchmark suites: repeated generate-and-evaluate attempts per task,
//! aggregated into executable-rate and result-score tables.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::{best_of_n, oracle_outputs, score_report, Difficulty, MetricConfig, Task, TaskResult};
use crate::generator::{generate, ExampleStore, GenerationConfig};
use crate::model::{ModelError, ModelHandle, ModelRegistry, ModelSignature, RegistryConfig};
use crate::operator::digest;
use crate::runtime::RuntimeConfig;
use crate::sandbox::{run_sandbox_document, SandboxOptions};

/// The @k columns reported when enough attempts exist.
pub const AT_K: [usize; 3] = [1, 3, 5];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HarnessError {
    #[error("ORACLE_FAILED: {}", .0.join("; "))]
    OracleFailed(Vec<String>),
    #[error("EMPTY_RESULTS: report has no task rows")]
    EmptyResults,
    #[error("BAD_SUITE: {0}")]
    BadSuite(String),
    #[error("{0}")]
    Model(#[from] ModelError),
    #[error("IO_ERROR: {0}")]
    Io(String),
}

impl HarnessError {
    pub fn code(&self) -> &'static str {
        match self {
            HarnessError::OracleFailed(_) => "ORACLE_FAILED",
            HarnessError::EmptyResults => "EMPTY_RESULTS",
            HarnessError::BadSuite(_) => "BAD_SUITE",
            HarnessError::Model(e) => e.code(),
            HarnessError::Io(_) => "IO_ERROR",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suite {
    pub suite_id: String,
    /// Task files, relative to the suite file.
    pub tasks: Vec<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub metadata: IndexMap<String, usize>,
}

#[derive(Debug, Clone)]
pub struct LoadedSuite {
    pub suite: Suite,
    pub tasks: Vec<Task>,
}

impl LoadedSuite {
    /// Loads `suite.json` from a directory, or the given suite file.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let file: PathBuf = if path.is_dir() { path.join("suite.json") } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&file).map_err(|e| HarnessError::BadSuite(format!("{}: {e}", file.display())))?;
        let suite: Suite = serde_json::from_str(&text).map_err(|e| HarnessError::BadSuite(format!("{}: {e}", file.display())))?;
        let base = file.parent().unwrap_or(Path::new("."));
        let tasks = suite
            .tasks
            .iter()
            .map(|t| Task::from_file(&base.join(t)).map_err(|e| HarnessError::BadSuite(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let loaded = LoadedSuite { suite, tasks };
        for (k, v) in &loaded.suite.metadata {
            let actual = loaded.tasks.iter().filter(|t| t.difficulty.as_str() == k).count();
            if actual != *v {
                return Err(HarnessError::BadSuite(format!("metadata says {v} {k} tasks, found {actual}")));
            }
        }
        Ok(loaded)
    }

    pub fn from_tasks(suite_id: &str, seed: u64, tasks: Vec<Task>) -> Self {
        let suite = Suite { suite_id: suite_id.into(), tasks: tasks.iter().map(|t| t.task_id.clone()).collect(), seed, metadata: IndexMap::new() };
        LoadedSuite { suite, tasks }
    }
}

/// Where candidate programs come from.
#[derive(Clone)]
pub enum CandidateSource {
    /// Each task's oracle program.
    Oracle,
    /// Fixed documents per task id; attempt `a` uses entry `a % len`.
    Fixed(IndexMap<String, Vec<String>>),
    Generator { handle: ModelHandle, config: GenerationConfig },
}

impl CandidateSource {
    fn kind(&self) -> &'static str {
        match self {
            CandidateSource::Oracle => "oracle",
            CandidateSource::Fixed(_) => "fixed",
            CandidateSource::Generator { .. } => "generator",
        }
    }
}

/// Seed of one attempt, derived from the suite seed, task id and attempt.
pub fn derive_seed(suite_seed: u64, task_id: &str, attempt: usize) -> u64 {
    let h = Sha256::digest(format!("{suite_seed}:{task_id}:{attempt}").as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("sha256 has 32 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRow {
    pub attempt: usize,
    pub seed: u64,
    pub result: TaskResult,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task_id: String,
    pub difficulty: Difficulty,
    pub attempts: Vec<AttemptRow>,
    /// Best of the first k attempts, keyed "@k".
    pub best: IndexMap<String, TaskResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtK {
    pub executable_rate: f64,
    pub result_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub group: String,
    pub tasks: usize,
    pub at: IndexMap<String, AtK>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub config_digest: String,
    pub backend_ids: Vec<String>,
    pub suite_seed: u64,
    pub attempts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite_id: String,
    pub provenance: Provenance,
    pub rows: Vec<TaskRow>,
    pub aggregates: Vec<AggregateRow>,
}

fn ks(attempts: usize) -> Vec<usize> {
    let mut k: Vec<usize> = AT_K.iter().copied().filter(|&k| k <= attempts).collect();
    if k.is_empty() || (attempts > 0 && !k.contains(&attempts) && attempts < 5) {
        k.push(attempts);
    }
    k.sort();
    k.dedup();
    k
}

fn best_map(attempts: &[AttemptRow]) -> IndexMap<String, TaskResult> {
    let results: Vec<TaskResult> = attempts.iter().map(|a| a.result.clone()).collect();
    ks(attempts.len())
        .into_iter()
        .filter_map(|k| best_of_n(&results[..k]).map(|b| (format!("@{k}"), b)))
        .collect()
}

fn aggregate_group(group: &str, rows: &[&TaskRow]) -> AggregateRow {
    let mut at = IndexMap::new();
    if let Some(first) = rows.first() {
        for key in first.best.keys() {
            let n = rows.len() as f64;
            let exe = rows.iter().filter(|r| r.best.get(key).is_some_and(|b| b.executable)).count() as f64 / n;
            let score = rows.iter().map(|r| r.best.get(key).map_or(0.0, |b| b.result_score)).sum::<f64>() / n;
            at.insert(key.clone(), AtK { executable_rate: exe, result_score: score });
        }
    }
    AggregateRow { group: group.into(), tasks: rows.len(), at }
}

/// Aggregates by difficulty, plus a total row when both classes occur.
pub fn aggregate(rows: &[TaskRow]) -> Vec<AggregateRow> {
    let mut out = Vec::new();
    let mut groups = 0;
    for d in [Difficulty::Single, Difficulty::Multi] {
        let sel: Vec<&TaskRow> = rows.iter().filter(|r| r.difficulty == d).collect();
        if !sel.is_empty() {
            groups += 1;
            out.push(aggregate_group(d.as_str(), &sel));
        }
    }
    if groups > 1 {
        out.push(aggregate_group("total", &rows.iter().collect::<Vec<_>>()));
    }
    out
}

impl SuiteReport {
    /// True when stored best-of and aggregate values match a recomputation.
    pub fn aggregates_consistent(&self) -> bool {
        self.rows.iter().all(|r| best_map(&r.attempts) == r.best) && aggregate(&self.rows) == self.aggregates
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize")
    }

    pub fn from_json(s: &str) -> Result<Self, HarnessError> {
        let r: SuiteReport = serde_json::from_str(s).map_err(|e| HarnessError::BadSuite(e.to_string()))?;
        if !r.aggregates_consistent() {
            return Err(HarnessError::BadSuite("aggregates do not match task rows".into()));
        }
        Ok(r)
    }
}

fn failed_result(task: &Task, error: String) -> TaskResult {
    TaskResult {
        task_id: task.task_id.clone(),
        executable: false,
        result_score: 0.0,
        per_stream: task.target_ids().into_iter().map(|t| (t, 0.0)).collect(),
        error: Some(error),
        report_digest: String::new(),
    }
}

fn run_attempt(
    task: &Task,
    all: &[Task],
    oracle: &IndexMap<String, Vec<crate::types::Fields>>,
    source: &CandidateSource,
    attempt: usize,
    seed: u64,
) -> AttemptRow {
    let registry = task.registry();
    let env = task.run_env();
    let metric = MetricConfig::default();
    let score_doc = |doc: &str| {
        let report = run_sandbox_document(doc, &env, &registry, &SandboxOptions::default());
        score_report(task, oracle, &report, &metric)
    };
    match source {
        CandidateSource::Oracle => {
            AttemptRow { attempt, seed, result: score_doc(&task.oracle_document()), iterations: None, finished: None }
        }
        CandidateSource::Fixed(docs) => {
            let result = match docs.get(&task.task_id).filter(|d| !d.is_empty()) {
                Some(d) => score_doc(&d[(attempt - 1) % d.len()]),
                None => failed_result(task, "no candidate program".into()),
            };
            AttemptRow { attempt, seed, result, iterations: None, finished: None }
        }
        CandidateSource::Generator { handle, config } => {
            let cfg = GenerationConfig { seed, attempt: attempt as u32, ..config.clone() };
            let store = ExampleStore::from_tasks(all, &task.task_id);
            let out = generate(task, handle, &store, &cfg);
            let iterations = Some(out.iterations());
            let finished = Some(out.finished);
            let result = match (out.result, out.error) {
                (Some(r), _) => r,
                (None, Some(e)) => failed_result(task, e.to_string()),
                (None, None) => failed_result(task, "generation produced nothing".into()),
            };
            AttemptRow { attempt, seed, result, iterations, finished }
        }
    }
}

/// Runs `attempts` attempts per task with a bounded worker pool. Output is
/// independent of `parallelism`.
pub fn run_suite(
    suite: &LoadedSuite,
    source: &CandidateSource,
    attempts: usize,
    parallelism: usize,
) -> Result<SuiteReport, HarnessError> {
    let attempts = attempts.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| HarnessError::Io(e.to_string()))?;
    let oracles: Vec<Result<_, String>> = pool.install(|| {
        suite.tasks.par_iter().map(|t| oracle_outputs(t, &t.registry()).map_err(|e| e.to_string())).collect()
    });
    let failures: Vec<String> = oracles.iter().filter_map(|o| o.as_ref().err().cloned()).collect();
    if !failures.is_empty() {
        return Err(HarnessError::OracleFailed(failures));
    }
    let oracles: Vec<_> = oracles.into_iter().map(|o| o.expect("checked above")).collect();

    let rows: Vec<TaskRow> = pool.install(|| {
        suite
            .tasks
            .par_iter()
            .zip(oracles.par_iter())
            .map(|(task, oracle)| {
                let rows: Vec<AttemptRow> = (1..=attempts)
                    .map(|a| run_attempt(task, &suite.tasks, oracle, source, a, derive_seed(suite.suite.seed, &task.task_id, a)))
                    .collect();
                TaskRow { task_id: task.task_id.clone(), difficulty: task.difficulty, best: best_map(&rows), attempts: rows }
            })
            .collect()
    });

    let (config_json, backend_ids) = match source {
        CandidateSource::Generator { handle, config } => {
            (serde_json::to_string(config).unwrap_or_default(), handle.fallback_chain())
        }
        CandidateSource::Fixed(docs) => (serde_json::to_string(docs).unwrap_or_default(), Vec::new()),
        CandidateSource::Oracle => (String::new(), Vec::new()),
    };
    Ok(SuiteReport {
        suite_id: suite.suite.suite_id.clone(),
        provenance: Provenance {
            source: source.kind().into(),
            config_digest: digest(config_json.as_bytes()),
            backend_ids,
            suite_seed: suite.suite.seed,
            attempts,
        },
        aggregates: aggregate(&rows),
        rows,
    })
}

/// Fixed-width text table of the aggregate rows.
pub fn report_table(report: &SuiteReport) -> Result<String, HarnessError> {
    if report.rows.is_empty() {
        return Err(HarnessError::EmptyResults);
    }
    let keys: Vec<String> = report.aggregates.first().map(|a| a.at.keys().cloned().collect()).unwrap_or_default();
    let method = format!("{} ({})", report.provenance.source, report.suite_id);
    let mut header = format!("{:<28} {:<8} {:>5}", "method", "group", "tasks");
    for k in &keys {
        header.push_str(&format!(" {:>9} {:>9}", format!("exec{k}"), format!("score{k}")));
    }
    let mut out = header.clone();
    out.push('\n');
    out.push_str(&"-".repeat(header.len()));
    out.push('\n');
    for row in &report.aggregates {
        let mut line = format!("{:<28} {:<8} {:>5}", method, row.group, row.tasks);
        for k in &keys {
            let v = &row.at[k];
            line.push_str(&format!(" {:>9.3} {:>9.3}", v.executable_rate, v.result_score));
        }
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), HarnessError> {
    use std::io::Write;
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io(e.to_string()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| HarnessError::Io(e.to_string()))?;
    tmp.write_all(contents.as_bytes()).map_err(|e| HarnessError::Io(e.to_string()))?;
    tmp.persist(path).map_err(|e| HarnessError::Io(e.to_string()))?;
    Ok(())
}

/// Optional settings file shared by all CLI subcommands.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub models: Option<RegistryConfig>,
    pub generation: GenerationConfig,
    pub runtime: RuntimeConfig,
}

impl AppConfig {
    /// Loads TOML (`.toml`) or JSON (anything else).
    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        let bad = |e: String| HarnessError::BadSuite(format!("{}: {e}", path.display()));
        if path.extension().and_then(|e| e.to_str()) == Some("toml") {
            toml::from_str(&text).map_err(|e| bad(e.to_string()))
        } else {
            serde_json::from_str(&text).map_err(|e| bad(e.to_string()))
        }
    }

    /// Registry from the `models` section, resolved against `base_dir`.
    pub fn registry(&self, base_dir: &Path) -> Result<ModelRegistry, HarnessError> {
        match &self.models {
            Some(m) => Ok(ModelRegistry::from_config(m, base_dir)?),
            None => Ok(ModelRegistry::default()),
        }
    }
}

/// Text-to-text handle of one backend, for generation.
pub fn generator_handle(registry: &ModelRegistry, backend: Option<&str>) -> Result<ModelHandle, HarnessError> {
    let reg = match backend {
        Some(id) => registry.only(id)?,
        None => registry.clone(),
    };
    let sig: ModelSignature = "text->text".parse()?;
    Ok(reg.get_fm(&sig)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(id: &str, exe: bool, score: f64) -> TaskResult {
        TaskResult { task_id: id.into(), executable: exe, result_score: score, per_stream: IndexMap::new(), error: None, report_digest: String::new() }
    }

    fn row(id: &str, d: Difficulty, scores: &[(bool, f64)]) -> TaskRow {
        let attempts: Vec<AttemptRow> = scores
            .iter()
            .enumerate()
            .map(|(i, (e, s))| AttemptRow { attempt: i + 1, seed: 0, result: result(id, *e, *s), iterations: None, finished: None })
            .collect();
        TaskRow { task_id: id.into(), difficulty: d, best: best_map(&attempts), attempts }
    }

    #[test]
    fn seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(7, "t", 1), derive_seed(7, "t", 1));
        assert_ne!(derive_seed(7, "t", 1), derive_seed(7, "t", 2));
        assert_ne!(derive_seed(7, "t", 1), derive_seed(8, "t", 1));
    }

    #[test]
    fn at_k_columns() {
        assert_eq!(ks(1), vec![1]);
        assert_eq!(ks(3), vec![1, 3]);
        assert_eq!(ks(5), vec![1, 3, 5]);
        assert_eq!(ks(2), vec![1, 2]);
        assert_eq!(ks(8), vec![1, 3, 5]);
    }

    #[test]
    fn aggregates_split_by_difficulty() {
        let rows = vec![
            row("a", Difficulty::Single, &[(false, 0.2), (true, 0.7), (true, 0.5)]),
            row("b", Difficulty::Multi, &[(true, 0.4), (false, 0.1), (false, 0.0)]),
        ];
        let agg = aggregate(&rows);
        assert_eq!(agg.iter().map(|a| a.group.as_str()).collect::<Vec<_>>(), vec!["single", "multi", "total"]);
        assert_eq!(agg[0].at["@1"], AtK { executable_rate: 0.0, result_score: 0.2 });
        assert_eq!(agg[0].at["@3"], AtK { executable_rate: 1.0, result_score: 0.7 });
        assert_eq!(agg[2].at["@3"].result_score, (0.7 + 0.4) / 2.0);
        let single = aggregate(&rows[..1]);
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn table_and_empty_report() {
        let rows = vec![row("a", Difficulty::Single, &[(true, 1.0)])];
        let report = SuiteReport {
            suite_id: "s".into(),
            provenance: Provenance { source: "oracle".into(), config_digest: String::new(), backend_ids: vec![], suite_seed: 0, attempts: 1 },
            aggregates: aggregate(&rows),
            rows,
        };
        let t = report_table(&report).unwrap();
        assert_eq!(t.lines().count(), 3);
        assert!(report.aggregates_consistent());
        let round = SuiteReport::from_json(&report.to_json()).unwrap();
        assert_eq!(round, report);
        let empty = SuiteReport { rows: vec![], aggregates: vec![], ..report };
        assert_eq!(report_table(&empty), Err(HarnessError::EmptyResults));
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out").join("r.json");
        write_atomic(&p, "one").unwrap();
        write_atomic(&p, "two").unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "two");
    }
}
