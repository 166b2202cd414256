//! C ABI over the streamsense library.
//!
//! Every function returns an [`StsStatus`]. On failure a thread-local
//! message is kept and can be fetched with [`sts_last_error_message`].
//! Strings handed out by this library must be released with
//! [`sts_string_free`]; handles with their matching `_free` function.
//! Structured values cross the boundary as JSON text.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use streamsense::eval::{evaluate_task_with, field_sim_bleu, field_sim_ed, sequence_sim, FieldWeights, MetricConfig, Task};
use streamsense::model::{ModelRegistry, ScriptedRules};
use streamsense::pipeline::{parse_program, validate_program, Program};
use streamsense::runtime::{build_sfg, QueuePolicy, Runtime, RuntimeConfig, RuntimeError};
use streamsense::sandbox::{run_sandbox, Env, SandboxOptions};
use streamsense::types::{Fields, StreamDescription};

/// Result code of every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Malformed JSON or an argument of the wrong shape.
    InvalidArgument = 3,
    /// The program failed to parse or validate.
    InvalidProgram = 4,
    /// The task oracle failed, or a sandbox run reported an error.
    TaskFailed = 5,
    /// Runtime misuse: not started, already running, unknown stream.
    RuntimeState = 6,
    QueueFull = 7,
    Backend = 8,
    Panic = 9,
}

/// Parsed program document.
pub struct StsProgram {
    inner: Program,
}

/// Concurrent runtime over one or more programs.
pub struct StsRuntime {
    inner: Runtime,
}

/// Runtime settings. Zero fields keep the library defaults.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct StsRuntimeConfig {
    pub workers: u32,
    pub mailbox_capacity: u32,
    /// Reject injections into a full mailbox instead of blocking.
    pub reject_when_full: bool,
}

/// Field similarity used by [`sts_sequence_sim`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StsFieldSim {
    Bleu = 0,
    EditDistance = 1,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Fail(StsStatus, String);

type Res<T> = Result<T, Fail>;

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Res<()>) -> StsStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => StsStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            StsStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or a NUL-terminated string valid for reads.
unsafe fn text<'a>(p: *const c_char, what: &str) -> Res<&'a str> {
    if p.is_null() {
        return Err(Fail(StsStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|e| Fail(StsStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn opt_text<'a>(p: *const c_char, what: &str) -> Res<Option<&'a str>> {
    if p.is_null() {
        Ok(None)
    } else {
        text(p, what).map(Some)
    }
}

fn json<T: serde::de::DeserializeOwned>(s: &str, what: &str) -> Res<T> {
    serde_json::from_str(s).map_err(|e| Fail(StsStatus::InvalidArgument, format!("{what}: {e}")))
}

/// # Safety
/// `out` must be null or valid for one pointer write.
unsafe fn put_string(out: *mut *mut c_char, s: String) -> Res<()> {
    if out.is_null() {
        return Err(Fail(StsStatus::NullPointer, "output pointer is null".into()));
    }
    let c = CString::new(s).map_err(|e| Fail(StsStatus::InvalidArgument, e.to_string()))?;
    *out = c.into_raw();
    Ok(())
}

unsafe fn put_f64(out: *mut f64, v: f64) -> Res<()> {
    if out.is_null() {
        return Err(Fail(StsStatus::NullPointer, "output pointer is null".into()));
    }
    *out = v;
    Ok(())
}

fn parse(doc: &str) -> Res<Program> {
    parse_program(doc).map_err(|d| {
        Fail(StsStatus::InvalidProgram, serde_json::to_string(&d).unwrap_or_else(|_| "invalid program".into()))
    })
}

fn registry(rules: Option<&str>) -> Res<ModelRegistry> {
    match rules {
        None => Ok(ModelRegistry::default()),
        Some(r) => {
            let rules: ScriptedRules = json(r, "model rules")?;
            ModelRegistry::scripted(&rules).map_err(|e| Fail(StsStatus::Backend, e.to_string()))
        }
    }
}

fn runtime_fail(e: RuntimeError) -> Fail {
    let code = match e {
        RuntimeError::QueueFull(..) => StsStatus::QueueFull,
        RuntimeError::Model(_) => StsStatus::Backend,
        RuntimeError::Build(_) => StsStatus::InvalidProgram,
        _ => StsStatus::RuntimeState,
    };
    Fail(code, e.to_string())
}

/// Library version as a static string. Do not free.
#[no_mangle]
pub extern "C" fn sts_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy of the calling thread's last error message, or null when the last
/// call succeeded. Free with [`sts_string_free`].
#[no_mangle]
pub extern "C" fn sts_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null_mut(), |c| c.clone().into_raw()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a pointer obtained from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sts_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses a program document into a handle.
///
/// On `InvalidProgram` the last error message is a JSON list of diagnostics.
///
/// # Safety
/// `doc` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sts_program_parse(doc: *const c_char, out: *mut *mut StsProgram) -> StsStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail(StsStatus::NullPointer, "out is null".into()));
        }
        let p = parse(text(doc, "doc")?)?;
        *out = Box::into_raw(Box::new(StsProgram { inner: p }));
        Ok(())
    })
}

/// # Safety
/// `p` must be null or a handle from [`sts_program_parse`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sts_program_free(p: *mut StsProgram) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Canonical document of a parsed program.
///
/// # Safety
/// `p` must be a live program handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sts_program_to_json(p: *const StsProgram, out: *mut *mut c_char) -> StsStatus {
    guard(|| {
        let p = p.as_ref().ok_or_else(|| Fail(StsStatus::NullPointer, "program is null".into()))?;
        put_string(out, p.inner.to_document())
    })
}

/// Static validation against a JSON list of source stream descriptions.
/// Writes the diagnostics as a JSON list (empty when valid) and returns
/// `InvalidProgram` when there are any.
///
/// # Safety
/// `p` must be a live program handle; `streams_json` a NUL-terminated
/// string; `diagnostics_out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sts_program_validate(
    p: *const StsProgram,
    streams_json: *const c_char,
    diagnostics_out: *mut *mut c_char,
) -> StsStatus {
    let mut failed = false;
    let status = guard(|| {
        let p = p.as_ref().ok_or_else(|| Fail(StsStatus::NullPointer, "program is null".into()))?;
        let streams: Vec<StreamDescription> = json(text(streams_json, "streams_json")?, "streams_json")?;
        let diags = validate_program(&p.inner, &streams);
        failed = !diags.is_empty();
        put_string(diagnostics_out, serde_json::to_string(&diags).unwrap_or_default())
    });
    if status == StsStatus::Ok && failed {
        set_error("program has validation diagnostics".into());
        return StsStatus::InvalidProgram;
    }
    status
}

/// Runs a program through the sandbox lifecycle on an Env (JSON). The
/// Env's `model_rules`, if any, serve model calls. The report is written
/// even when a stage fails; the status is then `TaskFailed`.
///
/// # Safety
/// `p` must be a live program handle; `env_json` a NUL-terminated string;
/// `report_out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sts_sandbox_run(p: *const StsProgram, env_json: *const c_char, report_out: *mut *mut c_char) -> StsStatus {
    let mut failure = None;
    let status = guard(|| {
        let p = p.as_ref().ok_or_else(|| Fail(StsStatus::NullPointer, "program is null".into()))?;
        let env: Env = json(text(env_json, "env_json")?, "env_json")?;
        let reg = env.scripted_registry().unwrap_or_default();
        let report = run_sandbox(&p.inner, &env, &reg, &SandboxOptions::default());
        failure = report.first_error().map(|(s, e)| format!("{s}: {e}"));
        put_string(report_out, report.to_json())
    });
    match failure {
        Some(msg) if status == StsStatus::Ok => {
            set_error(msg);
            StsStatus::TaskFailed
        }
        _ => status,
    }
}

/// Smoothed BLEU of `candidate` against `reference`.
///
/// # Safety
/// Both strings must be NUL-terminated; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sts_field_sim_bleu(reference: *const c_char, candidate: *const c_char, out: *mut f64) -> StsStatus {
    guard(|| put_f64(out, field_sim_bleu(text(reference, "reference")?, text(candidate, "candidate")?)))
}

/// One minus normalized edit distance.
///
/// # Safety
/// Both strings must be NUL-terminated; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sts_field_sim_ed(reference: *const c_char, candidate: *const c_char, out: *mut f64) -> StsStatus {
    guard(|| put_f64(out, field_sim_ed(text(reference, "reference")?, text(candidate, "candidate")?)))
}

/// Normalized alignment similarity of two JSON lists of field maps, the
/// oracle side first.
///
/// # Safety
/// Both strings must be NUL-terminated; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sts_sequence_sim(
    oracle_json: *const c_char,
    candidate_json: *const c_char,
    sim: StsFieldSim,
    out: *mut f64,
) -> StsStatus {
    guard(|| {
        let a: Vec<Fields> = json(text(oracle_json, "oracle_json")?, "oracle_json")?;
        let b: Vec<Fields> = json(text(candidate_json, "candidate_json")?, "candidate_json")?;
        let f = |r: &str, c: &str| match sim {
            StsFieldSim::Bleu => field_sim_bleu(r, c),
            StsFieldSim::EditDistance => field_sim_ed(r, c),
        };
        put_f64(out, sequence_sim(&a, &b, &FieldWeights::new(), &f).normalized)
    })
}

/// Scores a program against a task (JSON) and writes the result as JSON.
///
/// # Safety
/// `task_json` must be NUL-terminated; `p` a live program handle;
/// `result_out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sts_evaluate(task_json: *const c_char, p: *const StsProgram, result_out: *mut *mut c_char) -> StsStatus {
    guard(|| {
        let task: Task = json(text(task_json, "task_json")?, "task_json")?;
        let p = p.as_ref().ok_or_else(|| Fail(StsStatus::NullPointer, "program is null".into()))?;
        let r = evaluate_task_with(&task, &p.inner, &task.registry(), &MetricConfig::default())
            .map_err(|e| Fail(StsStatus::TaskFailed, e.to_string()))?;
        put_string(result_out, serde_json::to_string(&r).unwrap_or_default())
    })
}

/// Builds a runtime over `n` programs and a JSON list of source stream
/// descriptions. `config` and `model_rules_json` may be null.
///
/// # Safety
/// `programs` must point to `n` live program handles; strings must be
/// NUL-terminated; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sts_runtime_new(
    programs: *const *const StsProgram,
    n: usize,
    streams_json: *const c_char,
    config: *const StsRuntimeConfig,
    model_rules_json: *const c_char,
    out: *mut *mut StsRuntime,
) -> StsStatus {
    guard(|| {
        if out.is_null() || (programs.is_null() && n > 0) {
            return Err(Fail(StsStatus::NullPointer, "null argument".into()));
        }
        let mut progs = Vec::with_capacity(n);
        for i in 0..n {
            let p = (*programs.add(i)).as_ref().ok_or_else(|| Fail(StsStatus::NullPointer, format!("program {i} is null")))?;
            progs.push(p.inner.clone());
        }
        let streams: Vec<StreamDescription> = json(text(streams_json, "streams_json")?, "streams_json")?;
        let reg = registry(opt_text(model_rules_json, "model_rules_json")?)?;
        let mut cfg = RuntimeConfig::default();
        if let Some(c) = config.as_ref() {
            if c.workers > 0 {
                cfg.workers = c.workers as usize;
            }
            if c.mailbox_capacity > 0 {
                cfg.mailbox_capacity = c.mailbox_capacity as usize;
            }
            if c.reject_when_full {
                cfg.policy = QueuePolicy::Reject;
            }
        }
        let graph = build_sfg(&progs, &streams)
            .map_err(|d| Fail(StsStatus::InvalidProgram, serde_json::to_string(&d).unwrap_or_default()))?;
        let rt = Runtime::new(graph, &reg, cfg).map_err(runtime_fail)?;
        *out = Box::into_raw(Box::new(StsRuntime { inner: rt }));
        Ok(())
    })
}

/// Stops the runtime if needed and releases it.
///
/// # Safety
/// `rt` must be null or a handle from [`sts_runtime_new`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sts_runtime_free(rt: *mut StsRuntime) {
    if !rt.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(rt))));
    }
}

unsafe fn runtime<'a>(rt: *const StsRuntime) -> Res<&'a Runtime> {
    rt.as_ref().map(|r| &r.inner).ok_or_else(|| Fail(StsStatus::NullPointer, "runtime is null".into()))
}

/// # Safety
/// `rt` must be a live runtime handle.
#[no_mangle]
pub unsafe extern "C" fn sts_runtime_start(rt: *const StsRuntime) -> StsStatus {
    guard(|| runtime(rt)?.start().map_err(runtime_fail))
}

/// Injects one item (a JSON field map) into a source stream. `seq_out`
/// may be null.
///
/// # Safety
/// `rt` must be a live runtime handle; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sts_runtime_inject(
    rt: *const StsRuntime,
    stream: *const c_char,
    fields_json: *const c_char,
    seq_out: *mut u64,
) -> StsStatus {
    guard(|| {
        let rt = runtime(rt)?;
        let fields: Fields = json(text(fields_json, "fields_json")?, "fields_json")?;
        let seq = rt.inject(text(stream, "stream")?, fields).map_err(runtime_fail)?;
        if !seq_out.is_null() {
            *seq_out = seq;
        }
        Ok(())
    })
}

/// Blocks until every queued item has been processed.
///
/// # Safety
/// `rt` must be a live runtime handle.
#[no_mangle]
pub unsafe extern "C" fn sts_runtime_wait_idle(rt: *const StsRuntime) -> StsStatus {
    guard(|| {
        runtime(rt)?.wait_idle();
        Ok(())
    })
}

/// Drains, flushes and stops the runtime. Writes the final metrics as JSON
/// when `metrics_out` is not null.
///
/// # Safety
/// `rt` must be a live runtime handle.
#[no_mangle]
pub unsafe extern "C" fn sts_runtime_stop(rt: *const StsRuntime, metrics_out: *mut *mut c_char) -> StsStatus {
    guard(|| {
        let snap = runtime(rt)?.stop().map_err(runtime_fail)?;
        if !metrics_out.is_null() {
            put_string(metrics_out, snap.to_json())?;
        }
        Ok(())
    })
}

/// Records delivered on `stream` so far, as a JSON list.
///
/// # Safety
/// `rt` must be a live runtime handle; `stream` NUL-terminated; `out`
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sts_runtime_outputs(rt: *const StsRuntime, stream: *const c_char, out: *mut *mut c_char) -> StsStatus {
    guard(|| {
        let rt = runtime(rt)?;
        let recs = rt.outputs(text(stream, "stream")?);
        let items: Vec<serde_json::Value> =
            recs.iter().map(|r| serde_json::from_str(&r.to_json()).unwrap_or_default()).collect();
        put_string(out, serde_json::to_string(&items).unwrap_or_default())
    })
}
