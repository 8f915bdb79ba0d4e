#ifndef QALLOC_H
#define QALLOC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum QallocStatus {
  QALLOC_STATUS_OK = 0,
  QALLOC_STATUS_NULL_POINTER = 1,
  QALLOC_STATUS_INVALID_UTF8 = 2,
  /**
   * Unparseable config or unknown keys.
   */
  QALLOC_STATUS_CONFIG = 3,
  /**
   * A model assumption does not hold.
   */
  QALLOC_STATUS_VALIDATION = 4,
  QALLOC_STATUS_OUT_OF_RANGE = 5,
  /**
   * The simulation itself failed.
   */
  QALLOC_STATUS_RUNTIME = 6,
  QALLOC_STATUS_PANIC = 7,
} QallocStatus;

typedef struct QallocRun QallocRun;

typedef struct QallocScenario QallocScenario;

typedef struct QallocNodeFinal {
  int64_t q_s;
  /**
   * Valid only when `terminated` is true.
   */
  int64_t w_star;
  bool terminated;
  int64_t y_alpha;
  int64_t z_alpha;
} QallocNodeFinal;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *qalloc_last_error(void);

/**
 * Parses and validates a TOML config, drawing the graph and node inputs.
 *
 * # Safety
 * `toml` must be a NUL-terminated string and `out` a valid pointer.
 */
enum QallocStatus qalloc_scenario_from_toml(const char *toml, struct QallocScenario **out);

/**
 * # Safety
 * `scenario` must come from [`qalloc_scenario_from_toml`] or be null.
 */
void qalloc_scenario_free(struct QallocScenario *scenario);

/**
 * # Safety
 * `scenario` must be a live handle or null.
 */
size_t qalloc_scenario_node_count(const struct QallocScenario *scenario);

/**
 * Replaces the routing seed; the graph and inputs stay as drawn.
 *
 * # Safety
 * `scenario` must be a live handle.
 */
enum QallocStatus qalloc_scenario_set_seed(struct QallocScenario *scenario, uint64_t seed);

/**
 * Runs the scenario to termination or the iteration cap.
 *
 * # Safety
 * `scenario` must be a live handle and `out` a valid pointer.
 */
enum QallocStatus qalloc_run(const struct QallocScenario *scenario, struct QallocRun **out);

/**
 * # Safety
 * `run` must come from [`qalloc_run`] or be null.
 */
void qalloc_run_free(struct QallocRun *run);

/**
 * Termination round, or 0 if the cap was reached first.
 *
 * # Safety
 * `run` must be a live handle or null.
 */
uint64_t qalloc_run_k_end(const struct QallocRun *run);

/**
 * Exact global ratio of the run as a reduced fraction.
 *
 * # Safety
 * All pointers must be valid.
 */
enum QallocStatus qalloc_run_ratio(const struct QallocRun *run,
                                   int64_t *numerator,
                                   int64_t *denominator);

/**
 * # Safety
 * `run` must be a live handle and `out` a valid pointer.
 */
enum QallocStatus qalloc_run_final(const struct QallocRun *run,
                                   size_t node,
                                   struct QallocNodeFinal *out);

/**
 * Event log as JSON lines. Free the string with [`qalloc_string_free`].
 *
 * # Safety
 * `run` must be a live handle and `out` a valid pointer.
 */
enum QallocStatus qalloc_run_events_jsonl(const struct QallocRun *run, char **out);

/**
 * # Safety
 * `s` must come from this library or be null.
 */
void qalloc_string_free(char *s);

/**
 * Total tests over total infections for `n` nodes, reduced.
 *
 * # Safety
 * `tests` and `infections` must point to `n` values; outputs must be valid.
 */
enum QallocStatus qalloc_global_ratio(const int64_t *tests,
                                      const int64_t *infections,
                                      size_t n,
                                      int64_t *numerator,
                                      int64_t *denominator);

/**
 * Windows needed for a walk to reach every node with probability `1 - eps`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum QallocStatus qalloc_tau(double eps, size_t max_out_degree, size_t n, uint64_t *out);

/**
 * Library version, static string.
 */
const char *qalloc_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QALLOC_H */
