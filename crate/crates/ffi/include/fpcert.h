#ifndef FPCERT_H
#define FPCERT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes shared by every entry point.
typedef enum FpcertStatus {
  FPCERT_STATUS_OK = 0,
  FPCERT_STATUS_NULL_POINTER = 1,
  FPCERT_STATUS_INVALID_UTF8 = 2,
  FPCERT_STATUS_DOMAIN = 3,
  FPCERT_STATUS_PRECONDITION = 4,
  FPCERT_STATUS_BUDGET = 5,
  FPCERT_STATUS_NON_FINITE = 6,
  FPCERT_STATUS_PARSE = 7,
  FPCERT_STATUS_CONFIG = 8,
  FPCERT_STATUS_LINALG = 9,
  FPCERT_STATUS_IO = 10,
  FPCERT_STATUS_INFINITE_DIVERGENCE = 11,
  FPCERT_STATUS_NON_DIFFERENTIABLE = 12,
  FPCERT_STATUS_OUT_OF_RANGE = 13,
  FPCERT_STATUS_PANIC = 14,
} FpcertStatus;

typedef enum FpcertRateKind {
  FPCERT_RATE_KIND_LINEAR = 0,
  FPCERT_RATE_KIND_AVERAGED = 1,
} FpcertRateKind;

// Opaque handle to a loaded trace tensor.
typedef struct FpcertTrace FpcertTrace;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failing call on this thread, or NULL. The pointer is
// valid until the next failing call on the same thread.
const char *fpcert_last_error_message(void);

// Bernoulli KL divergence kl(q || p).
//
// # Safety
// `out_kl` must be a valid pointer or NULL.
enum FpcertStatus fpcert_bernoulli_kl(double q, double p, double *out_kl);

// Largest p in [q, 1) with kl(q || p) <= c.
//
// # Safety
// `out_p` must be a valid pointer or NULL.
enum FpcertStatus fpcert_kl_inverse(double q, double c, double *out_p);

// Partial derivatives of the KL inverse with respect to q and c.
//
// # Safety
// `out_dq` and `out_dc` must be valid pointers or NULL.
enum FpcertStatus fpcert_kl_inverse_grad(double q, double c, double *out_dq, double *out_dc);

// Sample-convergence risk bound kl_inverse(r_hat, log(2/delta)/n).
//
// # Safety
// `out_bound` must be a valid pointer or NULL.
enum FpcertStatus fpcert_sample_convergence_bound(double r_hat,
                                                  size_t n,
                                                  double delta,
                                                  double *out_bound);

// PAC-Bayes bound kl_inverse(r_hat, (kl + log(2 sqrt(n)/delta))/n).
//
// # Safety
// `out_bound` must be a valid pointer or NULL.
enum FpcertStatus fpcert_maurer_bound(double r_hat,
                                      size_t n,
                                      double kl_div,
                                      double delta,
                                      double *out_bound);

// Overall confidence of the risk certificates and of the quantile bounds.
//
// # Safety
// Output pointers must be valid or NULL.
enum FpcertStatus fpcert_confidence_ledger(double delta,
                                           double omega,
                                           size_t n_btargets,
                                           size_t n_tolerances,
                                           double *out_risk,
                                           double *out_quantile);

// Worst-case residual ratio after k steps for a contractive or averaged operator.
//
// # Safety
// `out_rate` must be a valid pointer or NULL.
enum FpcertStatus fpcert_worst_case_rate(enum FpcertRateKind kind,
                                         double param,
                                         size_t k,
                                         double *out_rate);

// Loads a binary trace file. Release with `fpcert_trace_free`.
//
// # Safety
// `path` must be a NUL-terminated string; `out_handle` a valid pointer or NULL.
enum FpcertStatus fpcert_trace_load(const char *path, struct FpcertTrace **out_handle);

// Dimensions of a loaded trace.
//
// # Safety
// `handle` must come from `fpcert_trace_load`; outputs valid or NULL.
enum FpcertStatus fpcert_trace_dims(const struct FpcertTrace *handle,
                                    size_t *out_n,
                                    size_t *out_h,
                                    size_t *out_k_max);

// Metric value for instance i, weight sample j, iteration k.
//
// # Safety
// `handle` must come from `fpcert_trace_load`; `out_value` valid or NULL.
enum FpcertStatus fpcert_trace_get(const struct FpcertTrace *handle,
                                   size_t i,
                                   size_t j,
                                   size_t k,
                                   double *out_value);

// Fraction of trajectories whose metric at step k is at least epsilon.
//
// # Safety
// `handle` must come from `fpcert_trace_load`; `out_risk` valid or NULL.
enum FpcertStatus fpcert_trace_empirical_risk(const struct FpcertTrace *handle,
                                              size_t k,
                                              double epsilon,
                                              double *out_risk);

// Releases a trace handle. NULL is ignored.
//
// # Safety
// `handle` must come from `fpcert_trace_load` and not be used afterwards.
void fpcert_trace_free(struct FpcertTrace *handle);

// Runs every pipeline stage for a JSON config. `out_dir` may be NULL to use
// the directory named in the config. A negative `seed` keeps the config seed.
// Non-finite rollouts abort the run when `strict_finite` is non-zero.
//
// # Safety
// `config_path` and a non-NULL `out_dir` must be NUL-terminated strings.
enum FpcertStatus fpcert_run_config(const char *config_path,
                                    const char *out_dir,
                                    int64_t seed,
                                    int32_t strict_finite);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FPCERT_H */
