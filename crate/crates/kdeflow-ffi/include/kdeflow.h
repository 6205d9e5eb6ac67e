#ifndef KDEFLOW_H
#define KDEFLOW_H

/* Generated by cbindgen; edit the Rust sources in kdeflow-ffi instead. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code shared by every entry point.
 */
typedef enum KdeflowStatus {
  /**
   * The call succeeded.
   */
  KDEFLOW_STATUS_OK = 0,
  /**
   * A pointer, encoding, length, or scalar argument was unusable.
   */
  KDEFLOW_STATUS_INVALID_ARGUMENT = 1,
  /**
   * The JSON payload or configuration failed to parse or validate.
   */
  KDEFLOW_STATUS_CONFIG_ERROR = 2,
  /**
   * The operation failed while executing.
   */
  KDEFLOW_STATUS_RUNTIME_ERROR = 3,
  /**
   * The operation ran to completion but its check did not pass.
   */
  KDEFLOW_STATUS_CHECK_FAILED = 4,
} KdeflowStatus;

/**
 * Opaque handle to an isotropic density kernel of fixed dimension.
 */
typedef struct KdeflowKernel KdeflowKernel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string; do not free.
 */
const char *kdeflow_version(void);

/**
 * Returns and clears the message describing the most recent non-OK status
 * on this thread, or null if there is none. The caller frees the returned
 * string with [`kdeflow_string_free`].
 */
char *kdeflow_last_error(void);

/**
 * Releases a string returned by this library. Null is a no-op.
 *
 * # Safety
 * `s` must be null or a pointer previously returned by this library's
 * string-producing functions, not yet freed.
 */
void kdeflow_string_free(char *s);

/**
 * Creates a kernel handle. `family` is one of `"box"`, `"triangular"`,
 * `"epanechnikov"`; `dim` is the ambient dimension (>= 1). On success
 * writes the handle to `out`.
 *
 * # Safety
 * `family` must be a NUL-terminated string and `out` a valid location to
 * store one pointer.
 */
enum KdeflowStatus kdeflow_kernel_new(const char *family, size_t dim, struct KdeflowKernel **out);

/**
 * Releases a kernel handle. Null is a no-op.
 *
 * # Safety
 * `kernel` must be null or a handle from [`kdeflow_kernel_new`], not yet
 * freed.
 */
void kdeflow_kernel_free(struct KdeflowKernel *kernel);

/**
 * Evaluates the bandwidth-scaled kernel `h^-d K(x / h)` at the point `x`
 * of length `dim`, which must match the handle's dimension.
 *
 * # Safety
 * `kernel` must be a live handle, `x` must point to `dim` doubles, and
 * `out` must be a valid location for one double.
 */
enum KdeflowStatus kdeflow_kernel_eval(const struct KdeflowKernel *kernel,
                                       const double *x,
                                       size_t dim,
                                       double bandwidth,
                                       double *out);

/**
 * Writes the p-th radial moment of the kernel to `out`; requires `p > 1`.
 *
 * # Safety
 * `kernel` must be a live handle and `out` a valid location for one double.
 */
enum KdeflowStatus kdeflow_kernel_moment(const struct KdeflowKernel *kernel, double p, double *out);

/**
 * Writes the closed-form sup-norm estimation rate for `n` samples at
 * bandwidth `h`, confidence level `alpha`, dimension `dim`.
 *
 * # Safety
 * `out` must be a valid location for one double.
 */
enum KdeflowStatus kdeflow_rate(double n, double h, double alpha, size_t dim, double *out);

/**
 * Runs one experiment described by a JSON config document. `out_dir`, if
 * non-null, overrides the config's output directory. On success (and on
 * `CHECK_FAILED`) writes a JSON summary of the artifacts to `out_json`.
 * Returns `CHECK_FAILED` when the run finishes but its mass sanity check
 * fails.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string, `out_dir` null or a
 * NUL-terminated path, and `out_json` a valid location to store one
 * pointer.
 */
enum KdeflowStatus kdeflow_run_json(const char *config_json, const char *out_dir, char **out_json);

/**
 * Checks schedule admissibility from a JSON request document and writes
 * the full JSON report to `out_json` whenever the check runs. Returns
 * `CHECK_FAILED` when the report verdict is negative.
 *
 * # Safety
 * `request_json` must be a NUL-terminated string and `out_json` a valid
 * location to store one pointer.
 */
enum KdeflowStatus kdeflow_check_schedule_json(const char *request_json, char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KDEFLOW_H */
