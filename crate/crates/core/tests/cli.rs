mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::{corrupted, fixtures, task};
use streamsense::harness::SuiteReport;
use streamsense::pipeline::parse_program;
use streamsense::runtime::MetricsSnapshot;
use streamsense::sandbox::SandboxReport;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_streamsense"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn task_path(id: &str) -> PathBuf {
    fixtures().join("suite").join(format!("{id}.json"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["bench", "--attempts", "x"])), 1);
    assert_eq!(code(&run(&["sandbox"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn missing_input_file_is_a_usage_error() {
    let o = run(&["sandbox", "/nonexistent/prog.json", "--task", s(&task_path("t01_loud_filter"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn sandbox_oracle_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let o = run(&["sandbox", "--task", s(&task_path("t02_fahrenheit")), "--report", s(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: SandboxReport = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r.first_error().is_none());
    assert!(!r.outputs.is_empty());
}

#[test]
fn sandbox_reports_each_corrupted_fixture_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for c in corrupted() {
        let prog = dir.path().join(format!("{}.json", c.name));
        std::fs::write(&prog, c.document()).unwrap();
        let task = fixtures().join("corrupted").join(&c.task);
        let o = run(&["sandbox", s(&prog), "--task", s(&task)]);
        assert_eq!(code(&o), 2, "{}", c.name);
        let r: SandboxReport = serde_json::from_str(&stdout(&o)).unwrap();
        let (stage, e) = r.first_error().expect("error recorded");
        assert_eq!(stage.to_string(), c.expect.stage, "{}", c.name);
        assert_eq!(e.code, c.expect.code, "{}", c.name);
        assert_eq!(e.node_id.as_deref(), Some(c.expect.node_id.as_str()), "{}", c.name);
    }
}

#[test]
fn sandbox_output_is_byte_identical_across_invocations() {
    let a = run(&["sandbox", "--task", s(&task_path("t08_place_heart_rate"))]);
    let b = run(&["sandbox", "--task", s(&task_path("t08_place_heart_rate"))]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn eval_task_oracle_scores_one() {
    let o = run(&["eval", "--task", s(&task_path("t05_tachycardia"))]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["executable"], true);
    assert_eq!(v["result_score"].as_f64(), Some(1.0));
}

#[test]
fn eval_unparseable_candidate_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let prog = dir.path().join("bad.json");
    std::fs::write(&prog, "{\"program_id\": ").unwrap();
    let o = run(&["eval", "--task", s(&task_path("t01_loud_filter")), "--program", s(&prog)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_suite_prints_table_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nested/report.json");
    let o = run(&["eval", "--suite", s(&fixtures().join("suite")), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = stdout(&o);
    assert!(table.contains("single") && table.contains("multi") && table.contains("total"), "{table}");
    let r = SuiteReport::from_json(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(r.rows.len(), 10);
    assert!(r.rows.iter().all(|row| row.best["@1"].result_score == 1.0));
}

#[test]
fn bench_oracle_is_independent_of_parallelism() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let suite = fixtures().join("suite");
    for (out, par) in [(&a, "1"), (&b, "4")] {
        let o = run(&["bench", "--suite", s(&suite), "--oracle", "--attempts", "2", "--parallel", par, "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn run_replays_env_and_writes_metrics() {
    let t = task("t08_place_heart_rate");
    let dir = tempfile::tempdir().unwrap();
    let prog = dir.path().join("prog.json");
    let env = dir.path().join("env.json");
    let metrics = dir.path().join("metrics.json");
    let events = dir.path().join("events.jsonl");
    std::fs::write(&prog, t.oracle_document()).unwrap();
    std::fs::write(&env, serde_json::to_string(&t.run_env()).unwrap()).unwrap();
    let o = run(&[
        "run",
        "--program",
        s(&prog),
        "--env",
        s(&env),
        "--metrics-out",
        s(&metrics),
        "--events",
        s(&events),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let outputs: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let got = outputs["place_hr"].as_array().expect("target stream present");
    let sandbox = run(&["sandbox", "--task", s(&task_path("t08_place_heart_rate"))]);
    let report: SandboxReport = serde_json::from_str(&stdout(&sandbox)).unwrap();
    assert_eq!(got.len(), report.outputs["place_hr"].len());

    let m: MetricsSnapshot = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    assert!(m.conserved());
    assert_eq!(m.errors, 0);
    let ev = std::fs::read_to_string(&events).unwrap();
    let kinds: Vec<String> = ev
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["event"].as_str().unwrap_or_default().to_string())
        .collect();
    assert_eq!(kinds.first().map(String::as_str), Some("start"));
    assert_eq!(kinds.last().map(String::as_str), Some("stop"));
}

fn scripted_config(dir: &Path, response: &str) -> PathBuf {
    let cfg = serde_json::json!({
        "models": {
            "backends": [{
                "id": "script",
                "kind": "scripted",
                "rules": {
                    "rules": [
                        {"match": "# Stream retrieval", "response": "-"},
                        {"match": "### Observation 1", "response": "Finish"}
                    ],
                    "default": response
                }
            }]
        }
    });
    let p = dir.join("config.json");
    std::fs::write(&p, cfg.to_string()).unwrap();
    p
}

#[test]
fn generate_with_scripted_backend() {
    let t = task("t01_loud_filter");
    let dir = tempfile::tempdir().unwrap();
    let reply = format!("Thought: keep loud items\n```json\n{}\n```", t.oracle_document());
    let cfg = scripted_config(dir.path(), &reply);
    let trace = dir.path().join("trace.json");
    let o = run(&[
        "--config",
        s(&cfg),
        "generate",
        "--task",
        s(&task_path("t01_loud_filter")),
        "--store",
        s(&fixtures().join("suite")),
        "--examples",
        "2",
        "--trace",
        s(&trace),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let p = parse_program(&stdout(&o)).expect("generated program parses");
    assert_eq!(p, parse_program(&t.oracle_document()).unwrap());
    let tr: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&trace).unwrap()).unwrap();
    assert_eq!(tr["iterations"].as_array().unwrap().len(), 2);
    assert_eq!(tr["base_examples"].as_array().unwrap().len(), 2);
}

#[test]
fn generate_without_backend_exits_3() {
    let o = run(&["generate", "--task", s(&task_path("t01_loud_filter"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn generate_with_only_broken_replies_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scripted_config(dir.path(), "Thought: hmm\n```json\n{\"program_id\": \n```");
    let o = run(&["--config", s(&cfg), "generate", "--task", s(&task_path("t01_loud_filter")), "--max-iters", "2"]);
    assert_eq!(code(&o), 2);
}
