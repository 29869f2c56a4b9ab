#ifndef GENMATCH_H
#define GENMATCH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GmStatus {
  GM_STATUS_OK = 0,
  GM_STATUS_NULL_POINTER = 1,
  GM_STATUS_INVALID_UTF8 = 2,
  GM_STATUS_CONFIG = 3,
  GM_STATUS_DOMAIN = 4,
  GM_STATUS_SHAPE = 5,
  GM_STATUS_SINGULARITY = 6,
  GM_STATUS_RUNTIME = 7,
  GM_STATUS_PANIC = 8,
} GmStatus;

// Exact marginal model handle.
typedef struct GmModel GmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or an empty string. The
// pointer stays valid until the next failing call on the same thread.
const char *gm_last_error_message(void);

// Builds a model from JSON with keys `path`, `dataset`, and optionally
// `generator`, `combinators` and `bins`, in the experiment config format.
//
// # Safety
// `json` must be a NUL-terminated string and `out` a valid pointer.
enum GmStatus gm_model_from_json(const char *json, struct GmModel **out);

// Releases a model; null is ignored.
//
// # Safety
// `model` must come from [`gm_model_from_json`] and not be used afterwards.
void gm_model_free(struct GmModel *model);

// Number of Euclidean coordinates and of token coordinates.
//
// # Safety
// All pointers must be valid.
enum GmStatus gm_model_dims(const struct GmModel *model, size_t *euclid, size_t *discrete);

// Marginal velocity at `(t, x)` for models without token coordinates.
// `x` and `out` hold `n` values.
//
// # Safety
// `x` and `out` must point to `n` doubles.
enum GmStatus gm_model_velocity(const struct GmModel *model,
                                double t,
                                const double *x,
                                size_t n,
                                double *out);

// Full generator at `(t, state)` as JSON: `velocity`, `diffusion`,
// `jump_intensity` (0 where there is no jump) and `rates`. Free the string
// with [`gm_string_free`].
//
// # Safety
// `x` must point to `n_x` doubles, `tokens` to `n_tok` sizes, `out` must
// be valid.
enum GmStatus gm_model_genout_json(const struct GmModel *model,
                                   double t,
                                   const double *x,
                                   size_t n_x,
                                   const size_t *tokens,
                                   size_t n_tok,
                                   char **out);

// Samples `n_samples` final states of a model without token coordinates
// into `out` (row major, `n_samples * euclid` doubles).
//
// # Safety
// `out` must point to `out_len` doubles.
enum GmStatus gm_simulate(const struct GmModel *model,
                          size_t n_steps,
                          size_t n_samples,
                          uint64_t seed,
                          double *out,
                          size_t out_len);

// Runs the KFE residual suite. `suite_json` may be null for the default
// sweep. Writes the per-pair report as JSON and whether every pair and
// control passed.
//
// # Safety
// `suite_json` is null or NUL-terminated; `out` and `all_pass` are valid.
enum GmStatus gm_verify_kfe_json(const char *suite_json, char **out, bool *all_pass);

// Releases a string returned by the library; null is ignored.
//
// # Safety
// `s` must come from this library and not be used afterwards.
void gm_string_free(char *s);

// Probability of no jump on `[t, t + h]` under the CondOT jump intensity
// `lambda` measured at `t`.
//
// # Safety
// `out` must be valid.
enum GmStatus gm_jump_survival(double lambda, double t, double h, double *out);

// Bregman divergence `D(a, b)` by name (`mse`, `rate_kl`, `mse_cosh:1`,
// `mse_exp:1`, ...).
//
// # Safety
// `a` and `b` must point to `n` doubles, `out` must be valid.
enum GmStatus gm_bregman_value(const char *name,
                               const double *a,
                               const double *b,
                               size_t n,
                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GENMATCH_H */
