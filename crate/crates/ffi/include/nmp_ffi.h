#ifndef NMP_FFI_H
#define NMP_FFI_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NmpStatus {
  NMP_STATUS_OK = 0,
  NMP_STATUS_NULL_POINTER = 1,
  NMP_STATUS_INVALID_UTF8 = 2,
  NMP_STATUS_JSON = 3,
  NMP_STATUS_INVALID_SPEC = 4,
  NMP_STATUS_OUT_OF_RANGE = 5,
  NMP_STATUS_BUDGET = 6,
  NMP_STATUS_NOT_CONVERGED = 7,
  NMP_STATUS_PANIC = 8,
  NMP_STATUS_OTHER = 9,
} NmpStatus;

/**
 * Service distribution handle.
 */
typedef struct NmpDist NmpDist;

/**
 * State measure handle.
 */
typedef struct NmpMeasure NmpMeasure;

/**
 * Library version as a static NUL-terminated string.
 */
const char *nmp_version(void);

/**
 * Copies the last error message of this thread into `buf` (truncated,
 * always NUL-terminated when `len > 0`). Returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t nmp_last_error(char *buf, size_t len);

/**
 * Builds a distribution from a service spec such as
 * `{"blocks": [[1, 1], [3, 3]], "last": true}`.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum NmpStatus nmp_dist_from_json(const char *json, struct NmpDist **out);

/**
 * # Safety
 * `d` must come from [`nmp_dist_from_json`] and not be used afterwards.
 */
void nmp_dist_free(struct NmpDist *d);

/**
 * Completion probability at elapsed time `tau >= 1`.
 *
 * # Safety
 * Pointers must be valid.
 */
enum NmpStatus nmp_dist_hazard(const struct NmpDist *d, uint64_t tau, double *out);

/**
 * First and second moments.
 *
 * # Safety
 * Pointers must be valid.
 */
enum NmpStatus nmp_dist_moments(const struct NmpDist *d, double *m1, double *m2);

/**
 * Largest service time.
 *
 * # Safety
 * `d` must be valid.
 */
uint64_t nmp_dist_max_service(const struct NmpDist *d);

/**
 * Measure from parallel arrays; `n = 0` is the idle state.
 *
 * # Safety
 * The three arrays must hold `len` elements each.
 */
enum NmpStatus nmp_measure_from_atoms(const uint64_t *n,
                                      const uint64_t *tau,
                                      const double *mass,
                                      size_t len,
                                      struct NmpMeasure **out);

/**
 * # Safety
 * `m` must come from this library and not be used afterwards.
 */
void nmp_measure_free(struct NmpMeasure *m);

/**
 * # Safety
 * Pointers must be valid.
 */
enum NmpStatus nmp_measure_mean_queue(const struct NmpMeasure *m, double *out);

/**
 * # Safety
 * Pointers must be valid.
 */
enum NmpStatus nmp_measure_idle_mass(const struct NmpMeasure *m, double *out);

/**
 * Mass at `(n, tau)`; `(0, 0)` is idle.
 *
 * # Safety
 * `m` must be valid.
 */
double nmp_measure_get(const struct NmpMeasure *m, uint64_t n, uint64_t tau);

/**
 * Runs `horizon` endogenous steps with default tolerances, writing
 * `lambda(1..=horizon)` into `lambda_out`. When `final_state` is non-null it
 * receives a new measure handle.
 *
 * # Safety
 * `lambda_out` must hold `horizon` doubles.
 */
enum NmpStatus nmp_run(const struct NmpDist *d,
                       const struct NmpMeasure *nu,
                       size_t horizon,
                       double *lambda_out,
                       struct NmpMeasure **final_state);

/**
 * Closed-form stationary rate for mean queue `rho` as printed in the
 * literature (queue-only).
 *
 * # Safety
 * `out` must be writable.
 */
enum NmpStatus nmp_pk_rate(double rho, double m1, double m2, double *out);

/**
 * Stationary rate for mean number in system `rho`, matching the dynamics.
 *
 * # Safety
 * `out` must be writable.
 */
enum NmpStatus nmp_pk_rate_in_system(double rho, double m1, double m2, double *out);

/**
 * Long-run state at mean queue `rho`. `state_out` may be null.
 *
 * # Safety
 * `rate_out` must be writable; `state_out` null or writable.
 */
enum NmpStatus nmp_stationary(const struct NmpDist *d,
                              double rho,
                              double *rate_out,
                              struct NmpMeasure **state_out);

#endif  /* NMP_FFI_H */
