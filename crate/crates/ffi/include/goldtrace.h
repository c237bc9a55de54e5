#ifndef GOLDTRACE_H
#define GOLDTRACE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum GtStatus {
  GT_STATUS_OK = 0,
  GT_STATUS_NULL_POINTER = 1,
  GT_STATUS_INVALID_UTF8 = 2,
  GT_STATUS_IO = 3,
  GT_STATUS_PARSE = 4,
  GT_STATUS_INVALID_ARGUMENT = 5,
  GT_STATUS_SIMULATION = 6,
  GT_STATUS_GOLDEN = 7,
  GT_STATUS_PANIC = 8,
} GtStatus;

typedef enum GtPreset {
  GT_PRESET_VEC_ADD = 0,
  GT_PRESET_MAT_MUL = 1,
  GT_PRESET_HISTOGRAM = 2,
  GT_PRESET_BITONIC_SORT = 3,
  GT_PRESET_ALEX_NET = 4,
  GT_PRESET_CIFAR_NET = 5,
} GtPreset;

typedef enum GtGroup {
  GT_GROUP_SM = 0,
  GT_GROUP_MEMORY = 1,
} GtGroup;

typedef enum GtDecision {
  GT_DECISION_BENIGN = 0,
  GT_DECISION_COMPROMISED = 1,
  GT_DECISION_INCOMPLETE = 2,
} GtDecision;

/**
 * Opaque golden model handle.
 */
typedef struct GtGolden GtGolden;

/**
 * Opaque trace handle.
 */
typedef struct GtTrace GtTrace;

/**
 * Summary of one validation.
 */
typedef struct GtVerdict {
  enum GtDecision decision;
  /**
   * Program ordinal of the flagged kernel, or -1.
   */
  int64_t flagged_kernel;
  size_t max_consecutive_rejections;
  /**
   * Segments matched against a reference.
   */
  size_t segments;
  /**
   * Lowest correlation over matched segments; NaN without segments.
   */
  double min_correlation;
} GtVerdict;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the calling thread's last failure, or null. Valid until the
 * next failing call on the same thread.
 */
const char *gt_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *gt_version(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum GtStatus gt_trace_read_file(const char *path_, struct GtTrace **out);

/**
 * # Safety
 * `data` must point to `len` readable bytes and `out` be a valid pointer.
 */
enum GtStatus gt_trace_from_bytes(const uint8_t *data, size_t len, struct GtTrace **out);

/**
 * Serializes a trace into `buf`. Call with a null `buf` to learn the size.
 *
 * # Safety
 * `trace` must be a live handle, `buf` null or writable for `cap` bytes,
 * `needed` a valid pointer.
 */
enum GtStatus gt_trace_to_bytes(const struct GtTrace *trace,
                                uint8_t *buf,
                                size_t cap,
                                size_t *needed);

/**
 * # Safety
 * `trace` must be a live handle and `path` a NUL-terminated string.
 */
enum GtStatus gt_trace_write_file(const struct GtTrace *trace, const char *path_);

/**
 * Reads a profiler CSV export over the event group and device of `golden`.
 *
 * # Safety
 * `path` must be a NUL-terminated string, `golden` a live handle and `out`
 * a valid pointer.
 */
enum GtStatus gt_trace_ingest_csv(const char *path_,
                                  const struct GtGolden *golden,
                                  struct GtTrace **out);

/**
 * Number of samples in the trace; 0 for a null handle.
 *
 * # Safety
 * `trace` must be null or a live handle.
 */
size_t gt_trace_len(const struct GtTrace *trace);

/**
 * # Safety
 * `trace` must be null or a handle not yet freed.
 */
void gt_trace_free(struct GtTrace *trace);

/**
 * Simulates a bundled program on the default device. `seed` selects the
 * run.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum GtStatus gt_trace_simulate(enum GtPreset preset,
                                enum GtGroup group,
                                uint64_t seed,
                                struct GtTrace **out);

/**
 * Golden model of a bundled program from `count` simulated runs with seeds
 * `seed..seed + count`, under the default policy and device.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum GtStatus gt_golden_build_preset(enum GtPreset preset,
                                     enum GtGroup group,
                                     size_t count,
                                     uint64_t seed,
                                     struct GtGolden **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum GtStatus gt_golden_read_file(const char *path_, struct GtGolden **out);

/**
 * # Safety
 * `golden` must be a live handle and `path` a NUL-terminated string.
 */
enum GtStatus gt_golden_write_file(const struct GtGolden *golden, const char *path_);

/**
 * Serializes a golden model as JSON into `buf`. Call with a null `buf` to
 * learn the size.
 *
 * # Safety
 * `golden` must be a live handle, `buf` null or writable for `cap` bytes,
 * `needed` a valid pointer.
 */
enum GtStatus gt_golden_to_bytes(const struct GtGolden *golden,
                                 uint8_t *buf,
                                 size_t cap,
                                 size_t *needed);

/**
 * # Safety
 * `golden` must be null or a handle not yet freed.
 */
void gt_golden_free(struct GtGolden *golden);

/**
 * # Safety
 * `golden` and `trace` must be live handles and `out` a valid pointer.
 */
enum GtStatus gt_validate(const struct GtGolden *golden,
                          const struct GtTrace *trace,
                          struct GtVerdict *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GOLDTRACE_H */
