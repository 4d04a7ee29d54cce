#ifndef LAZYPIM_H
#define LAZYPIM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum LpStatus {
  LP_STATUS_OK = 0,
  LP_STATUS_NULL_ARGUMENT = 1,
  LP_STATUS_INVALID_UTF8 = 2,
  LP_STATUS_CONFIG = 3,
  LP_STATUS_PARSE = 4,
  LP_STATUS_TRACE = 5,
  LP_STATUS_PARAM = 6,
  LP_STATUS_IO = 7,
  LP_STATUS_SIMULATION = 8,
  LP_STATUS_PANIC = 9,
} LpStatus;

/**
 * Simulator configuration.
 */
typedef struct LpConfig LpConfig;

/**
 * A finished simulation: metrics, final memory and the JSON report.
 */
typedef struct LpRun LpRun;

/**
 * Parsed or generated memory trace.
 */
typedef struct LpTrace LpTrace;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static NUL-terminated string.
 */
const char *lp_version(void);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into the library from the same thread.
 */
const char *lp_last_error(void);

/**
 * Release a string returned by the library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void lp_string_free(char *s);

/**
 * Default configuration. Never null.
 */
struct LpConfig *lp_config_default(void);

/**
 * Parse a TOML configuration.
 *
 * # Safety
 * `toml` must be a NUL-terminated string and `out` a writable pointer.
 */
enum LpStatus lp_config_from_toml(const char *toml, struct LpConfig **out);

/**
 * Load a TOML configuration file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum LpStatus lp_config_load(const char *path, struct LpConfig **out);

/**
 * Apply one `key.path=value` override in place. On failure the
 * configuration is unchanged.
 *
 * # Safety
 * `cfg` must be a live configuration and `assignment` a NUL-terminated string.
 */
enum LpStatus lp_config_set(struct LpConfig *cfg, const char *assignment);

/**
 * Serialize a configuration to TOML. Free with `lp_string_free`; null if
 * `cfg` is null.
 *
 * # Safety
 * `cfg` must be null or a live configuration.
 */
char *lp_config_to_toml(const struct LpConfig *cfg);

/**
 * # Safety
 * `cfg` must be null or a configuration not yet freed.
 */
void lp_config_free(struct LpConfig *cfg);

/**
 * Parse a trace in the text format.
 *
 * # Safety
 * `trace_text` must be a NUL-terminated string and `out` a writable pointer.
 */
enum LpStatus lp_trace_parse(const char *trace_text, struct LpTrace **out);

/**
 * Load a text or binary trace file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum LpStatus lp_trace_load(const char *path, struct LpTrace **out);

/**
 * Generate the trace described by the configuration's `[workload]` table.
 *
 * # Safety
 * `cfg` must be a live configuration and `out` a writable pointer.
 */
enum LpStatus lp_trace_generate(const struct LpConfig *cfg, struct LpTrace **out);

/**
 * Event count of a trace; 0 for null.
 *
 * # Safety
 * `trace` must be null or a live trace.
 */
size_t lp_trace_len(const struct LpTrace *trace);

/**
 * # Safety
 * `trace` must be null or a trace not yet freed.
 */
void lp_trace_free(struct LpTrace *trace);

/**
 * Simulate `trace` under `cfg`.
 *
 * # Safety
 * `cfg` and `trace` must be live objects and `out` a writable pointer.
 */
enum LpStatus lp_run(const struct LpConfig *cfg, const struct LpTrace *trace, struct LpRun **out);

/**
 * Total simulated cycles; 0 for null.
 *
 * # Safety
 * `r` must be null or a live run.
 */
uint64_t lp_run_total_cycles(const struct LpRun *r);

/**
 * Off-chip bytes over all traffic categories; 0 for null.
 *
 * # Safety
 * `r` must be null or a live run.
 */
uint64_t lp_run_offchip_bytes(const struct LpRun *r);

/**
 * Commit attempts that ended in a conflict; 0 for null.
 *
 * # Safety
 * `r` must be null or a live run.
 */
uint64_t lp_run_conflicts(const struct LpRun *r);

/**
 * Read one 8-byte word of the final memory image.
 *
 * # Safety
 * `r` must be a live run and `value` a writable pointer.
 */
enum LpStatus lp_run_read_word(const struct LpRun *r, uint64_t addr, uint64_t *value);

/**
 * The run's report as JSON. Free with `lp_string_free`; null if `r` is null.
 *
 * # Safety
 * `r` must be null or a live run.
 */
char *lp_run_report_json(const struct LpRun *r);

/**
 * # Safety
 * `r` must be null or a run not yet freed.
 */
void lp_run_free(struct LpRun *r);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LAZYPIM_H */
