#ifndef TSODE_H
#define TSODE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TsodeController {
  TSODE_CONTROLLER_MEAL_BOLUS = 0,
  TSODE_CONTROLLER_PID = 1,
  TSODE_CONTROLLER_TSMPC = 2,
  TSODE_CONTROLLER_TSODE = 3,
} TsodeController;

typedef enum TsodeMode {
  TSODE_MODE_WARMUP = 0,
  TSODE_MODE_EVAL = 1,
} TsodeMode;

typedef enum TsodeOutcome {
  TSODE_OUTCOME_COLD_START = 0,
  TSODE_OUTCOME_REFRACTORY = 1,
  TSODE_OUTCOME_UNGATED = 2,
  TSODE_OUTCOME_ACCEPT = 3,
  TSODE_OUTCOME_SCALED = 4,
  TSODE_OUTCOME_REJECT = 5,
  TSODE_OUTCOME_BYPASSED = 6,
  TSODE_OUTCOME_GUARDRAIL_BLOCKED = 7,
  TSODE_OUTCOME_GUARDRAIL_CAPPED = 8,
} TsodeOutcome;

typedef enum TsodeStatus {
  TSODE_STATUS_OK = 0,
  TSODE_STATUS_NULL_POINTER = 1,
  TSODE_STATUS_INVALID_UTF8 = 2,
  TSODE_STATUS_INVALID_ARGUMENT = 3,
  TSODE_STATUS_NOT_FOUND = 4,
  TSODE_STATUS_CONFIG = 5,
  TSODE_STATUS_NUMERICAL = 6,
  TSODE_STATUS_IO = 7,
  TSODE_STATUS_PARSE = 8,
  TSODE_STATUS_PANIC = 9,
} TsodeStatus;

// A validated experiment configuration.
typedef struct TsodeConfig TsodeConfig;

// A closed-loop episode on one cohort patient.
typedef struct TsodeEpisode TsodeEpisode;

// The result of a sweep.
typedef struct TsodeReport TsodeReport;

// One control step of an episode trace.
typedef struct TsodeStep {
  uint64_t step;
  uint64_t day;
  // Minute of day.
  double clock;
  double bg_true;
  double bg_observed;
  double iob;
  double cob;
  double meal_carbs;
  double proposed_dose;
  double final_dose;
  double delivered_dose;
  enum TsodeOutcome decision;
} TsodeStep;

// Clinical metrics in percent of steps, plus mean glucose in mg/dL.
typedef struct TsodeMetrics {
  double tir;
  double below_70;
  double below_54;
  double above_180;
  double mean_bg;
  uint64_t steps;
} TsodeMetrics;

// Mean over one controller's successful sweep cells.
typedef struct TsodeSummary {
  uint64_t cells;
  uint64_t failed;
  double tir;
  double below_70;
  double below_54;
  double above_180;
  double mean_bg;
} TsodeSummary;

typedef struct TsodeSafetyCheck {
  bool passes;
  double w_lcb;
  double s_lcb;
} TsodeSafetyCheck;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *tsode_version(void);

// Copy the calling thread's last error message into `buf` (NUL-terminated,
// truncated to `len`). Returns the buffer size needed for the whole message,
// or 0 when the last call succeeded.
//
// # Safety
// `buf` must be null or valid for `len` bytes.
size_t tsode_last_error(char *buf, size_t len);

// Start an episode for a named patient of the standard cohort with the
// default loop configuration.
//
// # Safety
// `patient` must be a NUL-terminated string; `out` must be writable.
enum TsodeStatus tsode_episode_new(const char *patient,
                                   enum TsodeController controller,
                                   uint64_t seed,
                                   struct TsodeEpisode **out);

// Advance the episode by whole days. A fresh TSODE controller evaluates
// behind the guardrails only, since it has no trained forecaster.
//
// # Safety
// `episode` must come from [`tsode_episode_new`].
enum TsodeStatus tsode_episode_run(struct TsodeEpisode *episode,
                                   uint32_t days,
                                   enum TsodeMode mode);

// # Safety
// `episode` must come from [`tsode_episode_new`]; `out` must be writable.
enum TsodeStatus tsode_episode_trace_len(const struct TsodeEpisode *episode, size_t *out);

// # Safety
// `episode` must come from [`tsode_episode_new`]; `out` must be writable.
enum TsodeStatus tsode_episode_step(const struct TsodeEpisode *episode,
                                    size_t index,
                                    struct TsodeStep *out);

// Metrics on true glucose over the steps recorded since the last
// [`tsode_episode_clear_trace`].
//
// # Safety
// `episode` must come from [`tsode_episode_new`]; `out` must be writable.
enum TsodeStatus tsode_episode_metrics(const struct TsodeEpisode *episode,
                                       struct TsodeMetrics *out);

// Drop the recorded trace; the patient and controller state carry on.
//
// # Safety
// `episode` must come from [`tsode_episode_new`].
enum TsodeStatus tsode_episode_clear_trace(struct TsodeEpisode *episode);

// # Safety
// `episode` must be null or come from [`tsode_episode_new`], and not be used
// afterwards.
void tsode_episode_free(struct TsodeEpisode *episode);

// # Safety
// `out` must be writable.
enum TsodeStatus tsode_config_default(struct TsodeConfig **out);

// Parse and validate an experiment configuration written as TOML.
//
// # Safety
// `text` must be a NUL-terminated string; `out` must be writable.
enum TsodeStatus tsode_config_from_toml(const char *text, struct TsodeConfig **out);

// # Safety
// `config` must be null or come from a `tsode_config_*` constructor, and
// not be used afterwards.
void tsode_config_free(struct TsodeConfig *config);

// Run the configured sweep. Report files are written when the config names
// an output directory. Individual failed cells do not fail the call; see
// `TsodeSummary::failed`.
//
// # Safety
// `config` must come from a `tsode_config_*` constructor; `out` must be
// writable.
enum TsodeStatus tsode_experiment_run(const struct TsodeConfig *config, struct TsodeReport **out);

// Summary row of one controller; `TSODE_STATUS_NOT_FOUND` when the sweep
// did not include it.
//
// # Safety
// `report` must come from [`tsode_experiment_run`]; `out` must be writable.
enum TsodeStatus tsode_report_summary(const struct TsodeReport *report,
                                      enum TsodeController controller,
                                      struct TsodeSummary *out);

// # Safety
// `report` must be null or come from [`tsode_experiment_run`], and not be
// used afterwards.
void tsode_report_free(struct TsodeReport *report);

// Test a forecast mean trajectory of `k` steps against the default safety
// thresholds after shifting it down by `q_alpha`.
//
// # Safety
// `mu` must be valid for `k` reads; `out` must be writable.
enum TsodeStatus tsode_check_safety(const double *mu,
                                    size_t k,
                                    double bg_now,
                                    double q_alpha,
                                    struct TsodeSafetyCheck *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TSODE_H */
