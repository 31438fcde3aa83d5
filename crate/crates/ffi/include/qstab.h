#ifndef QSTAB_H
#define QSTAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum QstabStatus {
  QSTAB_STATUS_OK = 0,
  QSTAB_STATUS_NULL_POINTER = 1,
  QSTAB_STATUS_INVALID_ARGUMENT = 2,
  QSTAB_STATUS_CONFIG = 3,
  QSTAB_STATUS_NON_CONVERGENCE = 4,
  QSTAB_STATUS_INCOMPATIBLE = 5,
  QSTAB_STATUS_RESOURCE = 6,
  QSTAB_STATUS_PANIC = 7,
} QstabStatus;

/**
 * Observation schemes, as accepted by the `scheme` arguments.
 */
typedef enum QstabScheme {
  QSTAB_SCHEME_FULL = 0,
  QSTAB_SCHEME_STATE = 1,
  QSTAB_SCHEME_OUTPUT = 2,
  QSTAB_SCHEME_QUEUE = 3,
  QSTAB_SCHEME_NONE = 4,
} QstabScheme;

/**
 * Finite-state controller for the output-observation scheme.
 */
typedef struct QstabController QstabController;

/**
 * System parameters: arrival rate and both servers.
 */
typedef struct QstabSystem QstabSystem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *qstab_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *qstab_version(void);

/**
 * Benchmark servers (`gamma = 0.5`, `mu0 = 0.2`, `mu1 = 0.8`) with the
 * given correlations.
 *
 * # Safety
 * `out` must be valid for writing one pointer.
 */
enum QstabStatus qstab_system_benchmark(double rho1,
                                        double rho2,
                                        double lambda,
                                        struct QstabSystem **out);

/**
 * System from a JSON document.
 *
 * # Safety
 * `json` must be NUL-terminated; `out` must be valid for writing one pointer.
 */
enum QstabStatus qstab_system_from_json(const char *json, struct QstabSystem **out);

/**
 * Releases a system. NULL is ignored.
 *
 * # Safety
 * `system` must be NULL or a handle not yet freed.
 */
void qstab_system_free(struct QstabSystem *system);

/**
 * Throughput of always serving with the best server on average.
 *
 * # Safety
 * `system` must be a live handle; `out` valid for writing.
 */
enum QstabStatus qstab_mu_star_no(const struct QstabSystem *system, double *out);

/**
 * Throughput when both environment states are observed.
 *
 * # Safety
 * `system` must be a live handle; `out` valid for writing.
 */
enum QstabStatus qstab_mu_star_full(const struct QstabSystem *system, double *out);

/**
 * Controller of size `m` following the symmetric myopic rule.
 *
 * # Safety
 * `system` must be a live handle; `out` valid for writing one pointer.
 */
enum QstabStatus qstab_controller_myopic(const struct QstabSystem *system,
                                         size_t m,
                                         double epsilon,
                                         struct QstabController **out);

/**
 * Controller from its JSON document.
 *
 * # Safety
 * `json` must be NUL-terminated; `out` valid for writing one pointer.
 */
enum QstabStatus qstab_controller_from_json(const char *json, struct QstabController **out);

/**
 * Releases a controller. NULL is ignored.
 *
 * # Safety
 * `controller` must be NULL or a handle not yet freed.
 */
void qstab_controller_free(struct QstabController *controller);

/**
 * Controller size `M`, or 0 for NULL.
 *
 * # Safety
 * `controller` must be NULL or a live handle.
 */
size_t qstab_controller_size(const struct QstabController *controller);

/**
 * Arrival rates below the returned bound keep the queue stable under the
 * controller. The arrival rate of `system` is not used.
 *
 * # Safety
 * Both handles must be live; `out` valid for writing.
 */
enum QstabStatus qstab_stability_bound(const struct QstabController *controller,
                                       const struct QstabSystem *system,
                                       double *out);

/**
 * Optimal throughput of a partial-observation scheme by relative value
 * iteration on a grid of `cells` cells per axis.
 *
 * # Safety
 * `system` must be a live handle; `out` valid for writing.
 */
enum QstabStatus qstab_solve_rvi(const struct QstabSystem *system,
                                 int32_t scheme,
                                 size_t cells,
                                 double tol,
                                 size_t max_iters,
                                 double *out);

/**
 * Saturated throughput of the myopic policy over `horizon` slots.
 *
 * # Safety
 * `system` must be a live handle; `out` valid for writing.
 */
enum QstabStatus qstab_simulate_myopic(const struct QstabSystem *system,
                                       int32_t scheme,
                                       uint64_t horizon,
                                       uint64_t seed,
                                       double *out);

/**
 * Saturated throughput of a controller under output observations.
 *
 * # Safety
 * Both handles must be live; `out` valid for writing.
 */
enum QstabStatus qstab_simulate_controller(const struct QstabController *controller,
                                           const struct QstabSystem *system,
                                           uint64_t horizon,
                                           uint64_t seed,
                                           double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QSTAB_H */
