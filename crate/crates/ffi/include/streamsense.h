#ifndef STREAMSENSE_H
#define STREAMSENSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Field similarity used by [`sts_sequence_sim`].
typedef enum StsFieldSim {
  STS_FIELD_SIM_BLEU = 0,
  STS_FIELD_SIM_EDIT_DISTANCE = 1,
} StsFieldSim;

// Result code of every exported function.
typedef enum StsStatus {
  STS_STATUS_OK = 0,
  STS_STATUS_NULL_POINTER = 1,
  STS_STATUS_INVALID_UTF8 = 2,
  // Malformed JSON or an argument of the wrong shape.
  STS_STATUS_INVALID_ARGUMENT = 3,
  // The program failed to parse or validate.
  STS_STATUS_INVALID_PROGRAM = 4,
  // The task oracle failed, or a sandbox run reported an error.
  STS_STATUS_TASK_FAILED = 5,
  // Runtime misuse: not started, already running, unknown stream.
  STS_STATUS_RUNTIME_STATE = 6,
  STS_STATUS_QUEUE_FULL = 7,
  STS_STATUS_BACKEND = 8,
  STS_STATUS_PANIC = 9,
} StsStatus;

// Parsed program document.
typedef struct StsProgram StsProgram;

// Concurrent runtime over one or more programs.
typedef struct StsRuntime StsRuntime;

// Runtime settings. Zero fields keep the library defaults.
typedef struct StsRuntimeConfig {
  uint32_t workers;
  uint32_t mailbox_capacity;
  // Reject injections into a full mailbox instead of blocking.
  bool reject_when_full;
} StsRuntimeConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static string. Do not free.
const char *sts_version(void);

// Copy of the calling thread's last error message, or null when the last
// call succeeded. Free with [`sts_string_free`].
char *sts_last_error_message(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must be null or a pointer obtained from this library, not yet freed.
void sts_string_free(char *s);

// Parses a program document into a handle.
//
// On `InvalidProgram` the last error message is a JSON list of diagnostics.
//
// # Safety
// `doc` must be a NUL-terminated string; `out` must be valid for writes.
enum StsStatus sts_program_parse(const char *doc, struct StsProgram **out);

// # Safety
// `p` must be null or a handle from [`sts_program_parse`], not yet freed.
void sts_program_free(struct StsProgram *p);

// Canonical document of a parsed program.
//
// # Safety
// `p` must be a live program handle; `out` must be valid for writes.
enum StsStatus sts_program_to_json(const struct StsProgram *p, char **out);

// Static validation against a JSON list of source stream descriptions.
// Writes the diagnostics as a JSON list (empty when valid) and returns
// `InvalidProgram` when there are any.
//
// # Safety
// `p` must be a live program handle; `streams_json` a NUL-terminated
// string; `diagnostics_out` valid for writes.
enum StsStatus sts_program_validate(const struct StsProgram *p,
                                    const char *streams_json,
                                    char **diagnostics_out);

// Runs a program through the sandbox lifecycle on an Env (JSON). The
// Env's `model_rules`, if any, serve model calls. The report is written
// even when a stage fails; the status is then `TaskFailed`.
//
// # Safety
// `p` must be a live program handle; `env_json` a NUL-terminated string;
// `report_out` valid for writes.
enum StsStatus sts_sandbox_run(const struct StsProgram *p, const char *env_json, char **report_out);

// Smoothed BLEU of `candidate` against `reference`.
//
// # Safety
// Both strings must be NUL-terminated; `out` valid for writes.
enum StsStatus sts_field_sim_bleu(const char *reference, const char *candidate, double *out);

// One minus normalized edit distance.
//
// # Safety
// Both strings must be NUL-terminated; `out` valid for writes.
enum StsStatus sts_field_sim_ed(const char *reference, const char *candidate, double *out);

// Normalized alignment similarity of two JSON lists of field maps, the
// oracle side first.
//
// # Safety
// Both strings must be NUL-terminated; `out` valid for writes.
enum StsStatus sts_sequence_sim(const char *oracle_json,
                                const char *candidate_json,
                                enum StsFieldSim sim,
                                double *out);

// Scores a program against a task (JSON) and writes the result as JSON.
//
// # Safety
// `task_json` must be NUL-terminated; `p` a live program handle;
// `result_out` valid for writes.
enum StsStatus sts_evaluate(const char *task_json, const struct StsProgram *p, char **result_out);

// Builds a runtime over `n` programs and a JSON list of source stream
// descriptions. `config` and `model_rules_json` may be null.
//
// # Safety
// `programs` must point to `n` live program handles; strings must be
// NUL-terminated; `out` valid for writes.
enum StsStatus sts_runtime_new(const struct StsProgram *const *programs,
                               size_t n,
                               const char *streams_json,
                               const struct StsRuntimeConfig *config,
                               const char *model_rules_json,
                               struct StsRuntime **out);

// Stops the runtime if needed and releases it.
//
// # Safety
// `rt` must be null or a handle from [`sts_runtime_new`], not yet freed.
void sts_runtime_free(struct StsRuntime *rt);

// # Safety
// `rt` must be a live runtime handle.
enum StsStatus sts_runtime_start(const struct StsRuntime *rt);

// Injects one item (a JSON field map) into a source stream. `seq_out`
// may be null.
//
// # Safety
// `rt` must be a live runtime handle; strings NUL-terminated.
enum StsStatus sts_runtime_inject(const struct StsRuntime *rt,
                                  const char *stream,
                                  const char *fields_json,
                                  uint64_t *seq_out);

// Blocks until every queued item has been processed.
//
// # Safety
// `rt` must be a live runtime handle.
enum StsStatus sts_runtime_wait_idle(const struct StsRuntime *rt);

// Drains, flushes and stops the runtime. Writes the final metrics as JSON
// when `metrics_out` is not null.
//
// # Safety
// `rt` must be a live runtime handle.
enum StsStatus sts_runtime_stop(const struct StsRuntime *rt, char **metrics_out);

// Records delivered on `stream` so far, as a JSON list.
//
// # Safety
// `rt` must be a live runtime handle; `stream` NUL-terminated; `out`
// valid for writes.
enum StsStatus sts_runtime_outputs(const struct StsRuntime *rt, const char *stream, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STREAMSENSE_H */
