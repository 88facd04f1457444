#ifndef KOOPMAN_LQR_H
#define KOOPMAN_LQR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every entry point.
 */
typedef enum KlStatus {
  KL_STATUS_OK = 0,
  KL_STATUS_NULL_POINTER = 1,
  KL_STATUS_INVALID_ARGUMENT = 2,
  KL_STATUS_DIMENSION = 3,
  KL_STATUS_NON_FINITE = 4,
  KL_STATUS_NOT_CONVERGED = 5,
  KL_STATUS_IO = 6,
  KL_STATUS_PARSE = 7,
  KL_STATUS_NUMERICAL = 8,
  KL_STATUS_PANIC = 9,
} KlStatus;

/**
 * Kernel families accepted by [`kl_model_fit_csv`].
 */
typedef enum KlKernel {
  KL_KERNEL_RBF = 0,
  KL_KERNEL_MATERN52 = 1,
  KL_KERNEL_MATERN32 = 2,
} KlKernel;

/**
 * LQR state-feedback law for a model.
 */
typedef struct KlController KlController;

/**
 * Fitted surrogate model.
 */
typedef struct KlModel KlModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the message of the last failed call on this thread into `buf`,
 * truncated and NUL-terminated. Returns the full message length.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t kl_last_error_message(char *buf, size_t len);

/**
 * Fits a Nyström model on trajectories read from a CSV file or a directory
 * of CSV files. Landmarks are drawn independently on both sides.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum KlStatus kl_model_fit_csv(const char *path,
                               enum KlKernel kernel,
                               double lengthscale,
                               size_t m,
                               double gamma,
                               uint64_t seed,
                               struct KlModel **out);

/**
 * Loads a model saved as JSON.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum KlStatus kl_model_load(const char *path, struct KlModel **out);

/**
 * Writes the model as JSON.
 *
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum KlStatus kl_model_save(const struct KlModel *model, const char *path);

/**
 * State dimension, control dimension and lifted dimension.
 *
 * # Safety
 * All pointers must be valid.
 */
enum KlStatus kl_model_dims(const struct KlModel *model, size_t *d, size_t *n_u, size_t *m);

/**
 * Open-loop forecast. `controls` holds `steps` rows of `n_u` values; `out`
 * receives `steps + 1` rows of `d` values starting with `x0`.
 *
 * # Safety
 * Buffers must have the documented sizes.
 */
enum KlStatus kl_model_forecast(const struct KlModel *model,
                                const double *x0,
                                const double *controls,
                                size_t steps,
                                double *out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void kl_model_free(struct KlModel *model);

/**
 * Builds the LQR law for `Σ xᵀQ'x + uᵀRu` (row-major `d×d` and `n_u×n_u`).
 * When the Riccati iteration exhausts its budget the last iterate is used
 * and [`kl_controller_converged`] reports 0.
 *
 * # Safety
 * Buffers must have the documented sizes.
 */
enum KlStatus kl_controller_new(const struct KlModel *model,
                                const double *qprime,
                                const double *r,
                                struct KlController **out);

/**
 * Writes `n_u` control values for state `x` (length `d`).
 *
 * # Safety
 * Buffers must have the documented sizes.
 */
enum KlStatus kl_controller_control(const struct KlController *ctrl, const double *x, double *u);

/**
 * 1 when the Riccati iteration met its tolerance, 0 otherwise or on null.
 *
 * # Safety
 * `ctrl` must be null or come from this library.
 */
int32_t kl_controller_converged(const struct KlController *ctrl);

/**
 * Releases a controller. Null is ignored.
 *
 * # Safety
 * `ctrl` must come from this library and not be used afterwards.
 */
void kl_controller_free(struct KlController *ctrl);

/**
 * Solves `P = Q + AᵀPA − AᵀPB(R + BᵀPB)^{-1}BᵀPA` for an `n`-state,
 * `k`-input system (row-major buffers). Writes `P` (`n×n`) and the gain
 * `K` (`k×n`, `u = Kx`).
 *
 * # Safety
 * Buffers must have the documented sizes.
 */
enum KlStatus kl_dare_solve(const double *a,
                            const double *b,
                            const double *q,
                            const double *r,
                            size_t n,
                            size_t k,
                            double *p_out,
                            double *k_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KOOPMAN_LQR_H */
