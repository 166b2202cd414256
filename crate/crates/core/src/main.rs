use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use indexmap::IndexMap;

use streamsense::eval::{evaluate_task_with, MetricConfig, Task};
use streamsense::generator::{generate, ExampleStore};
use streamsense::harness::{generator_handle, report_table, run_suite, write_atomic, AppConfig, CandidateSource, LoadedSuite};
use streamsense::model::ModelRegistry;
use streamsense::pipeline::program::parse_program;
use streamsense::runtime::{build_sfg, ClockMode, Runtime};
use streamsense::sandbox::{run_sandbox_document, Env, SandboxOptions};

const EXIT_USAGE: u8 = 1;
const EXIT_TASK: u8 = 2;
const EXIT_BACKEND: u8 = 3;

#[derive(Parser)]
#[command(name = "streamsense", version, about = "Stream pipeline runtime, sandbox, evaluator and generator")]
struct Cli {
    /// Settings file (TOML or JSON) with `models`, `generation` and `runtime` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run programs on the concurrent runtime, replaying an Env.
    Run {
        #[arg(long = "program", required = true)]
        programs: Vec<PathBuf>,
        #[arg(long)]
        env: PathBuf,
        /// Write runtime events as JSON lines.
        #[arg(long)]
        events: Option<PathBuf>,
        #[arg(long = "metrics-out", visible_alias = "metrics")]
        metrics: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one program through the sandbox lifecycle and print the report.
    Sandbox {
        program: Option<PathBuf>,
        #[arg(long, conflicts_with = "task")]
        env: Option<PathBuf>,
        /// Use the task's Env; the oracle runs when no program is given.
        #[arg(long)]
        task: Option<PathBuf>,
        #[arg(long = "report", visible_alias = "out")]
        out: Option<PathBuf>,
    },
    /// Score a program against a task oracle, or self-evaluate a suite.
    Eval {
        #[arg(long, conflicts_with = "suite")]
        task: Option<PathBuf>,
        #[arg(long)]
        program: Option<PathBuf>,
        #[arg(long)]
        suite: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a program for a task with a model backend.
    Generate {
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        backend: Option<String>,
        #[arg(long = "max-iters")]
        max_iters: Option<usize>,
        #[arg(long)]
        examples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Suite whose other tasks supply reference examples.
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run a suite with N attempts per task and print the score table.
    Bench {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long, default_value_t = 1)]
        attempts: usize,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        backend: Option<String>,
        /// Evaluate each task's oracle instead of generating.
        #[arg(long)]
        oracle: bool,
    },
}

struct Failure {
    code: u8,
    message: String,
}

fn usage(m: impl std::fmt::Display) -> Failure {
    Failure { code: EXIT_USAGE, message: m.to_string() }
}

fn task_fail(m: impl std::fmt::Display) -> Failure {
    Failure { code: EXIT_TASK, message: m.to_string() }
}

fn backend_fail(m: impl std::fmt::Display) -> Failure {
    Failure { code: EXIT_BACKEND, message: m.to_string() }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => write_atomic(p, text).map_err(usage),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn load_task(path: &Path) -> Result<Task, Failure> {
    Task::from_file(path).map_err(task_fail)
}

/// The Env's scripted rules win; otherwise the configured backends.
fn registry_for(env: &Env, cfg: &AppConfig, base: &Path) -> Result<ModelRegistry, Failure> {
    match env.scripted_registry() {
        Some(r) => Ok(r),
        None => cfg.registry(base).map_err(backend_fail),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = match &cli.config {
        Some(p) => AppConfig::from_file(p).map_err(usage)?,
        None => AppConfig::default(),
    };
    let base = cli.config.as_deref().and_then(Path::parent).unwrap_or(Path::new(".")).to_path_buf();
    match cli.command {
        Command::Run { programs, env, events, metrics, out } => {
            let env = Env::from_file(&env).map_err(usage)?;
            let mut parsed = Vec::new();
            for p in &programs {
                let doc = read(p)?;
                parsed.push(parse_program(&doc).map_err(|d| {
                    task_fail(format!("{}: {}", p.display(), d.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")))
                })?);
            }
            let graph = build_sfg(&parsed, &env.descriptions())
                .map_err(|d| task_fail(d.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")))?;
            for h in streamsense::runtime::race_hazards(&graph) {
                log::warn!("ordering hazard: {h}");
            }
            let registry = registry_for(&env, &cfg, &base)?;
            let sink: Option<Box<dyn std::io::Write + Send>> = match &events {
                Some(p) => Some(Box::new(fs::File::create(p).map_err(|e| usage(format!("{}: {e}", p.display())))?)),
                None => None,
            };
            let mut rcfg = cfg.runtime.clone();
            rcfg.clock = ClockMode::External;
            let rt = Runtime::with_sink(graph, &registry, rcfg, sink).map_err(backend_fail)?;
            rt.start().map_err(usage)?;
            let descs = env.descriptions();
            for (s, item) in env.merged() {
                rt.advance_to(item.tick);
                rt.inject(&descs[s].stream_id, item.fields).map_err(usage)?;
                rt.wait_idle();
            }
            let snap = rt.stop().map_err(usage)?;
            if let Some(p) = metrics {
                write_atomic(&p, &snap.to_json()).map_err(usage)?;
            }
            let written: Vec<String> = parsed.iter().flat_map(|p| p.output_streams()).collect();
            let outputs: IndexMap<String, Vec<serde_json::Value>> = rt
                .all_outputs()
                .into_iter()
                .filter(|(k, _)| written.contains(k))
                .map(|(k, rs)| (k, rs.iter().map(|r| serde_json::from_str(&r.to_json()).unwrap_or_default()).collect()))
                .collect();
            emit(out.as_deref(), &serde_json::to_string_pretty(&outputs).unwrap_or_default())?;
            if snap.errors > 0 {
                return Err(task_fail(format!("{} node errors", snap.errors)));
            }
            Ok(())
        }
        Command::Sandbox { program, env, task, out } => {
            let (doc, env, registry) = match (&task, &env) {
                (Some(t), _) => {
                    let t = load_task(t)?;
                    let doc = match &program {
                        Some(p) => read(p)?,
                        None => t.oracle_document(),
                    };
                    let reg = t.registry();
                    (doc, t.run_env(), reg)
                }
                (None, Some(e)) => {
                    let env = Env::from_file(e).map_err(usage)?;
                    let doc = read(program.as_deref().ok_or_else(|| usage("--program is required with --env"))?)?;
                    let reg = registry_for(&env, &cfg, &base)?;
                    (doc, env, reg)
                }
                (None, None) => return Err(usage("give --task or --env")),
            };
            let report = run_sandbox_document(&doc, &env, &registry, &SandboxOptions::default());
            emit(out.as_deref(), &report.to_json())?;
            match report.first_error() {
                Some((stage, e)) => Err(task_fail(format!("{stage}: {e}"))),
                None => Ok(()),
            }
        }
        Command::Eval { task, program, suite, out } => {
            if let Some(t) = task {
                let t = load_task(&t)?;
                let doc = match &program {
                    Some(p) => read(p)?,
                    None => t.oracle_document(),
                };
                let cand = parse_program(&doc).map_err(|d| {
                    task_fail(d.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; "))
                })?;
                let r = evaluate_task_with(&t, &cand, &t.registry(), &MetricConfig::default()).map_err(task_fail)?;
                return emit(out.as_deref(), &serde_json::to_string_pretty(&r).unwrap_or_default());
            }
            let suite = suite.ok_or_else(|| usage("give --task or --suite"))?;
            let loaded = LoadedSuite::load(&suite).map_err(task_fail)?;
            let report = run_suite(&loaded, &CandidateSource::Oracle, 1, 1).map_err(task_fail)?;
            if let Some(p) = &out {
                write_atomic(p, &report.to_json()).map_err(usage)?;
            }
            println!("{}", report_table(&report).map_err(task_fail)?);
            Ok(())
        }
        Command::Generate { task, backend, max_iters, examples, seed, store, out, trace } => {
            let t = load_task(&task)?;
            let registry = cfg.registry(&base).map_err(backend_fail)?;
            let handle = generator_handle(&registry, backend.as_deref()).map_err(backend_fail)?;
            let mut gcfg = cfg.generation.clone();
            if let Some(k) = max_iters {
                gcfg.max_iterations = k;
            }
            if let Some(e) = examples {
                gcfg.example_count = e;
            }
            if let Some(s) = seed {
                gcfg.seed = s;
            }
            let store = match &store {
                Some(dir) => ExampleStore::from_tasks(&LoadedSuite::load(dir).map_err(task_fail)?.tasks, &t.task_id),
                None => ExampleStore::default(),
            };
            let outcome = generate(&t, &handle, &store, &gcfg);
            if let Some(p) = &trace {
                write_atomic(p, &outcome.trace.to_json()).map_err(usage)?;
            }
            match (&outcome.program, &outcome.error) {
                (Some(doc), _) => {
                    emit(out.as_deref(), doc)?;
                    if let Some(r) = &outcome.result {
                        eprintln!(
                            "iterations {} finished {} executable {} score {:.4}",
                            outcome.iterations(),
                            outcome.finished,
                            r.executable,
                            r.result_score
                        );
                    }
                    Ok(())
                }
                (None, Some(e)) if e.code() == "GENERATION_BACKEND_ERROR" => Err(backend_fail(e)),
                (None, Some(e)) => Err(task_fail(e)),
                (None, None) => Err(task_fail("no program")),
            }
        }
        Command::Bench { suite, attempts, parallel, out, backend, oracle } => {
            let loaded = LoadedSuite::load(&suite).map_err(task_fail)?;
            let source = if oracle {
                CandidateSource::Oracle
            } else {
                let registry = cfg.registry(&base).map_err(backend_fail)?;
                let handle = generator_handle(&registry, backend.as_deref()).map_err(backend_fail)?;
                CandidateSource::Generator { handle, config: cfg.generation.clone() }
            };
            let report = run_suite(&loaded, &source, attempts, parallel).map_err(task_fail)?;
            if let Some(p) = &out {
                write_atomic(p, &report.to_json()).map_err(usage)?;
            }
            println!("{}", report_table(&report).map_err(task_fail)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log_level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
