/* C interface to the stogate sparse stochastic gating library. */

#ifndef STOGATE_H
#define STOGATE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call in this API.
typedef enum StogateStatus {
  STOGATE_STATUS_OK = 0,
  // A required pointer argument was null.
  STOGATE_STATUS_NULL_ARGUMENT = 1,
  // Arguments were structurally valid but semantically wrong
  // (bad dimensions, values out of range, malformed config).
  STOGATE_STATUS_INVALID_ARGUMENT = 2,
  // A path or string was not valid UTF-8.
  STOGATE_STATUS_UTF8 = 3,
  // The underlying file could not be read or written.
  STOGATE_STATUS_IO = 4,
  // Checkpoint or JSON payload failed to parse or validate.
  STOGATE_STATUS_FORMAT = 5,
  // Everything else, including panics caught at the boundary.
  STOGATE_STATUS_INTERNAL = 6,
} StogateStatus;

// Trained gated model loaded from a checkpoint file.
typedef struct StogateModel StogateModel;

// Counter-based random stream; same (seed, stream) always yields the same
// sequence regardless of platform.
typedef struct StogateRng StogateRng;

// Evaluation summary over a labelled batch.
typedef struct StogateEval {
  // Fraction of rows whose argmax prediction differs from the label.
  double error_rate;
  // Mean cross-entropy.
  double mean_loss;
  // Fraction of gates open under the calibrated threshold.
  double active_fraction;
  // Expert multiply-accumulates actually done over the dense count.
  double mac_ratio;
} StogateEval;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on this thread.
//
// The pointer stays valid until the next failing call on the same thread.
// Never null; the message is empty if nothing has failed yet.
const char *stogate_last_error(void);

// Logistic sigmoid 1/(1+exp(-a)).
double stogate_sigm(double a);

// Softplus log(1+exp(a)), the mean output of a logistic-noise rectifier.
double stogate_softplus(double a);

// Inverse sigmoid. Returns NaN outside (0,1).
double stogate_logit(double p);

// Create a random stream. Never fails; free with [`stogate_rng_free`].
struct StogateRng *stogate_rng_new(uint64_t seed, uint64_t stream);

// Destroy a stream created by [`stogate_rng_new`]. Null is a no-op.
//
// # Safety
// `rng` must be a pointer returned by [`stogate_rng_new`] that has not been
// freed already.
void stogate_rng_free(struct StogateRng *rng);

// Next uniform double in [0,1). Returns NaN if `rng` is null.
//
// # Safety
// `rng` must be a live pointer from [`stogate_rng_new`].
double stogate_rng_uniform(struct StogateRng *rng);

// Load a model from a JSON checkpoint written by the `stogate` trainer.
//
// On success writes the new handle to `*out` and returns `Ok`; free it
// with [`stogate_model_free`].
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum StogateStatus stogate_model_load(const char *path, struct StogateModel **out);

// Destroy a model handle. Null is a no-op.
//
// # Safety
// `model` must be a pointer returned by [`stogate_model_load`] that has not
// been freed already.
void stogate_model_free(struct StogateModel *model);

// Model shape: input dimension, gater bottleneck width, gate count, classes.
// Any of the output pointers may be null to skip that field.
//
// # Safety
// `model` must be a live handle; non-null outputs must be valid pointers.
enum StogateStatus stogate_model_dims(const struct StogateModel *model,
                                      uintptr_t *d,
                                      uintptr_t *m,
                                      uintptr_t *n,
                                      uintptr_t *classes);

// Deterministic test-mode prediction. `x` is row-major `rows x dim`;
// `out_labels` receives `rows` class indices. Uses the sparse execution
// path; only gates past the calibrated threshold fire.
//
// # Safety
// `x` must point to `rows*dim` doubles and `out_labels` to `rows` u32.
enum StogateStatus stogate_model_predict(const struct StogateModel *model,
                                         const double *x,
                                         uintptr_t rows,
                                         uintptr_t dim,
                                         uint32_t *out_labels);

// Evaluate on a labelled batch. Labels must be in `[0, classes)`.
//
// # Safety
// `x` must point to `rows*dim` doubles, `labels` to `rows` bytes, and `out`
// to a [`StogateEval`].
enum StogateStatus stogate_model_evaluate(const struct StogateModel *model,
                                          const double *x,
                                          const uint8_t *labels,
                                          uintptr_t rows,
                                          uintptr_t dim,
                                          struct StogateEval *out);

// Run the statistical verification suites (estimator unbiasedness, optimal
// baseline, noise statistics, moment identities, sign agreement).
//
// Zero `problems`, `mc_samples`, `rect_samples` or `st_trials` select the
// full default scale. Writes 1 to `*out_passed` if every check passed.
//
// # Safety
// `out_passed` must be a valid pointer.
enum StogateStatus stogate_verify(uint64_t seed,
                                  uintptr_t problems,
                                  uintptr_t mc_samples,
                                  uintptr_t rect_samples,
                                  uintptr_t st_trials,
                                  uint8_t *out_passed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STOGATE_H */
