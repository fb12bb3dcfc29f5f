#ifndef CONTA_H
#define CONTA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every exported function.
 */
typedef enum ContaStatus {
  CONTA_STATUS_OK = 0,
  CONTA_STATUS_VALIDATION = 1,
  CONTA_STATUS_CONFIG = 2,
  CONTA_STATUS_NULL_EVENT = 3,
  CONTA_STATUS_POSITIVITY = 4,
  CONTA_STATUS_UNSUPPORTED = 5,
  CONTA_STATUS_SHAPE = 6,
  CONTA_STATUS_PLACEMENT = 7,
  CONTA_STATUS_TRAINING = 8,
  CONTA_STATUS_EVAL = 9,
  CONTA_STATUS_VERIFY = 10,
  CONTA_STATUS_LOCKED = 11,
  CONTA_STATUS_NOT_FOUND = 12,
  CONTA_STATUS_IO = 13,
  CONTA_STATUS_JSON = 14,
  CONTA_STATUS_IMAGE = 15,
  /**
   * A required pointer argument was null.
   */
  CONTA_STATUS_NULL_POINTER = 16,
  /**
   * A string argument was not valid UTF-8.
   */
  CONTA_STATUS_INVALID_UTF8 = 17,
  /**
   * The output buffer is shorter than the result.
   */
  CONTA_STATUS_BUFFER_TOO_SMALL = 18,
  CONTA_STATUS_PANIC = 19,
} ContaStatus;

/**
 * Class-average masks with a uniform prior.
 */
typedef struct ContaConfounders ContaConfounders;

/**
 * Discrete causal model over (C, X, M, Y).
 */
typedef struct ContaScm ContaScm;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a success.
 *
 * The pointer stays valid until the next call into this library on the
 * same thread.
 */
const char *conta_last_error(void);

/**
 * Static name of a status code, e.g. `"E_SHAPE"`.
 */
const char *conta_status_name(enum ContaStatus status);

/**
 * Parses and validates a model from its JSON form.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a writable pointer.
 */
enum ContaStatus conta_scm_from_json(const char *json, struct ContaScm **out);

/**
 * Built-in model in which observing and intervening on X disagree.
 *
 * # Safety
 * `out` must be a writable pointer.
 */
enum ContaStatus conta_scm_confounded_example(struct ContaScm **out);

/**
 * # Safety
 * `scm` must be null or a handle from this library not yet freed.
 */
void conta_scm_free(struct ContaScm *scm);

/**
 * Writes the cardinalities of (C, X, M, Y) into `out[0..4]`.
 *
 * # Safety
 * `scm` must be a live handle and `out` must hold 4 values.
 */
enum ContaStatus conta_scm_cards(const struct ContaScm *scm, size_t *out);

/**
 * P(Y | X = x) into `out`, which must hold at least |Y| values.
 *
 * # Safety
 * `scm` must be a live handle and `out` must point to `out_len` doubles.
 */
enum ContaStatus conta_scm_observe(const struct ContaScm *scm,
                                   size_t x,
                                   double *out,
                                   size_t out_len);

/**
 * P(Y | do(X = x)) by truncated factorization.
 *
 * # Safety
 * As for [`conta_scm_observe`].
 */
enum ContaStatus conta_scm_intervene(const struct ContaScm *scm,
                                     size_t x,
                                     double *out,
                                     size_t out_len);

/**
 * P(Y | do(X = x)) by adjusting over C. Requires a deterministic mediator.
 *
 * # Safety
 * As for [`conta_scm_observe`].
 */
enum ContaStatus conta_scm_backdoor(const struct ContaScm *scm,
                                    size_t x,
                                    double *out,
                                    size_t out_len);

/**
 * Largest gap between the adjusted and interventional distributions.
 *
 * # Safety
 * `scm` must be a live handle; `max_gap` and `pass` must be writable.
 */
enum ContaStatus conta_scm_verify_backdoor(const struct ContaScm *scm, double *max_gap, bool *pass);

/**
 * Largest total-variation distance between P(Y|x) and P(Y|do(x)) over x.
 *
 * # Safety
 * `scm` must be a live handle and `out` writable.
 */
enum ContaStatus conta_scm_confounding_gap(const struct ContaScm *scm, double *out);

/**
 * Exact `Σ σ(s_c) P(c)` against `σ(Σ s_c P(c))` for `n` strata.
 *
 * # Safety
 * `scores` and `prior` must each point to `n` doubles; the outputs must be writable.
 */
enum ContaStatus conta_nwgm_gap(const double *scores,
                                const double *prior,
                                size_t n,
                                double *exact,
                                double *approx,
                                double *gap);

/**
 * Mean IoU of one `height x width` prediction against ground truth.
 *
 * `per_class` may be null; otherwise it receives `n_classes + 1` values with
 * NaN for classes absent from both masks. Pixels equal to 255 in `gt` are
 * skipped.
 *
 * # Safety
 * `pred` and `gt` must point to `height * width` bytes; `mean` must be writable.
 */
enum ContaStatus conta_miou(const uint8_t *pred,
                            const uint8_t *gt,
                            size_t height,
                            size_t width,
                            size_t n_classes,
                            double *per_class,
                            double *mean);

/**
 * Averages `count` masks of `height x width` into one map per class.
 *
 * `labels` holds `count * n_classes` flags; a nonzero flag at
 * `[k * n_classes + i]` marks class `i + 1` as present in image `k`.
 *
 * # Safety
 * `masks` must point to `count * height * width` bytes, `labels` to
 * `count * n_classes` bytes, and `out` must be writable.
 */
enum ContaStatus conta_confounders_build(const uint8_t *masks,
                                         const uint8_t *labels,
                                         size_t count,
                                         size_t height,
                                         size_t width,
                                         size_t n_classes,
                                         struct ContaConfounders **out);

/**
 * # Safety
 * `conf` must be null or a handle from this library not yet freed.
 */
void conta_confounders_free(struct ContaConfounders *conf);

/**
 * Copies class map `class_index` (0-based) into `out`, which holds `height * width` values.
 *
 * # Safety
 * `conf` must be a live handle and `out` must point to `out_len` doubles.
 */
enum ContaStatus conta_confounders_entry(const struct ContaConfounders *conf,
                                         size_t class_index,
                                         double *out,
                                         size_t out_len);

/**
 * Attention-weighted context map for one mask.
 *
 * `w1` and `w2` are `n_classes x (height * width)` row-major; `out` receives
 * `height * width` values.
 *
 * # Safety
 * `x_m` must point to `height * width` bytes matching the confounder size,
 * `w1`/`w2` to `n * hw` doubles and `out` to `out_len` doubles.
 */
enum ContaStatus conta_context_map(const struct ContaConfounders *conf,
                                   const uint8_t *x_m,
                                   const double *w1,
                                   const double *w2,
                                   double *out,
                                   size_t out_len);

/**
 * Runs the full refinement loop into `run_dir`.
 *
 * `config_path` may be null for the default configuration.
 *
 * # Safety
 * `run_dir` must be a NUL-terminated string; `config_path` null or one.
 */
enum ContaStatus conta_run(const char *config_path, const char *run_dir, bool resume);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONTA_H */
