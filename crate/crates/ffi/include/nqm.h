#ifndef NQM_H
#define NQM_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NqmRule {
  NQM_RULE_SGD = 0,
  NQM_RULE_MOMENTUM = 1,
  NQM_RULE_EMA = 2,
} NqmRule;

/*
 Status codes returned by every fallible function.
 */
typedef enum NqmStatus {
  NQM_STATUS_OK = 0,
  NQM_STATUS_NULL_POINTER = 1,
  NQM_STATUS_INVALID_ARGUMENT = 2,
  NQM_STATUS_UNSTABLE = 3,
  NQM_STATUS_UNREACHABLE = 4,
  NQM_STATUS_IO = 5,
  NQM_STATUS_INTERNAL = 6,
} NqmStatus;

/*
 Opaque optimizer configuration handle.
 */
typedef struct NqmOptimizer NqmOptimizer;

/*
 Opaque spectrum handle.
 */
typedef struct NqmSpectrum NqmSpectrum;

/*
 Result of a hyperparameter search.
 */
typedef struct NqmTuneResult {
  double alpha;
  /*
   Momentum or averaging coefficient of the winner; 0 for SGD.
   */
  double coef;
  double effective_lr;
  /*
   Steps to target; meaningful only when `reached` is nonzero.
   */
  uint64_t steps;
  int32_t reached;
  int32_t frontier_flag;
} NqmTuneResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the most recent failure on this thread, or null. Valid until
 the next call into this library on the same thread.
 */
const char *nqm_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *nqm_version(void);

/*
 Power-law spectrum `h_i = 1/i`, `i = 1..=d`, with `c_i = h_i`.

 # Safety
 `out_spectrum` must be a valid pointer.
 */
enum NqmStatus nqm_spectrum_power(uintptr_t d, struct NqmSpectrum **out_spectrum);

/*
 Spectrum from `n` curvature, noise and weight triples. `weights` may be
 null for unit weights.

 # Safety
 `h` and `c` must point to `n` values; `weights` to `n` values or null.
 */
enum NqmStatus nqm_spectrum_new(const double *h,
                                const double *c,
                                const double *weights,
                                uintptr_t n,
                                struct NqmSpectrum **out_spectrum);

/*
 Spectrum read from a JSON file or a `power:d=N` shorthand.

 # Safety
 `source` must be a NUL-terminated string.
 */
enum NqmStatus nqm_spectrum_load(const char *source, struct NqmSpectrum **out_spectrum);

/*
 New spectrum with curvatures merged into `bins` log-spaced bins.

 # Safety
 `spectrum` must be a live handle and `out_spectrum` a valid pointer.
 */
enum NqmStatus nqm_spectrum_quantize(const struct NqmSpectrum *spectrum,
                                     uintptr_t bins,
                                     struct NqmSpectrum **out_spectrum);

/*
 Number of entries, or 0 for a null handle.

 # Safety
 `spectrum` must be a live handle or null.
 */
uintptr_t nqm_spectrum_len(const struct NqmSpectrum *spectrum);

/*
 Total weight, i.e. the effective dimension; NaN for a null handle.

 # Safety
 `spectrum` must be a live handle or null.
 */
double nqm_spectrum_dimension(const struct NqmSpectrum *spectrum);

/*
 # Safety
 `spectrum` must be null or a handle not yet freed.
 */
void nqm_spectrum_free(struct NqmSpectrum *spectrum);

/*
 Optimizer configuration. `coef` is the momentum coefficient for
 `Momentum`, the averaging coefficient for `Ema`, and must be 0 for `Sgd`.
 `p` is the preconditioner power.

 # Safety
 `out_optimizer` must be a valid pointer.
 */
enum NqmStatus nqm_optimizer_new(enum NqmRule rule,
                                 double alpha,
                                 double coef,
                                 double batch_size,
                                 double p,
                                 struct NqmOptimizer **out_optimizer);

/*
 # Safety
 `optimizer` must be null or a handle not yet freed.
 */
void nqm_optimizer_free(struct NqmOptimizer *optimizer);

/*
 Exact expected risk after `t` steps from `theta_0` with per-coordinate
 second moment `init_second_moment`.

 # Safety
 Handles must be live and `out_risk` valid.
 */
enum NqmStatus nqm_risk(const struct NqmSpectrum *spectrum,
                        const struct NqmOptimizer *optimizer,
                        uint64_t t,
                        double init_second_moment,
                        double *out_risk);

/*
 Writes the exact risk at steps `0..len` into `out_risks`.

 # Safety
 Handles must be live and `out_risks` must hold `len` values.
 */
enum NqmStatus nqm_risk_trajectory(const struct NqmSpectrum *spectrum,
                                   const struct NqmOptimizer *optimizer,
                                   double init_second_moment,
                                   double *out_risks,
                                   uintptr_t len);

/*
 Limiting risk as the step count grows.

 # Safety
 Handles must be live and `out_risk` valid.
 */
enum NqmStatus nqm_steady_state_risk(const struct NqmSpectrum *spectrum,
                                     const struct NqmOptimizer *optimizer,
                                     double *out_risk);

/*
 First step at which the risk is at or below `target`, searching up to
 `cap` steps. Returns `Unreachable` when the target is never met.

 # Safety
 Handles must be live and `out_steps` valid.
 */
enum NqmStatus nqm_steps_to_target(const struct NqmSpectrum *spectrum,
                                   const struct NqmOptimizer *optimizer,
                                   double target,
                                   uint64_t cap,
                                   double init_second_moment,
                                   uint64_t *out_steps);

/*
 Tunes learning rate and coefficient on the default grids for one
 family and batch size. An unreached target is reported through
 `reached = 0`, not through the status.

 # Safety
 `spectrum` must be live and `out_result` valid.
 */
enum NqmStatus nqm_tune(const struct NqmSpectrum *spectrum,
                        enum NqmRule rule,
                        double p,
                        double batch_size,
                        double target,
                        uint64_t cap,
                        struct NqmTuneResult *out_result);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NQM_H */
