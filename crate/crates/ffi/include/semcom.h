#ifndef SEMCOM_H
#define SEMCOM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes shared by every entry point.
typedef enum SclStatus {
  SCL_STATUS_OK = 0,
  SCL_STATUS_NULL_POINTER = 1,
  SCL_STATUS_INVALID_ARGUMENT = 2,
  SCL_STATUS_SHAPE = 3,
  SCL_STATUS_NON_FINITE = 4,
  SCL_STATUS_IO = 5,
  SCL_STATUS_CHECKPOINT = 6,
  SCL_STATUS_UNTRAINED = 7,
  SCL_STATUS_PANIC = 8,
  SCL_STATUS_INTERNAL = 9,
} SclStatus;

// Common-unit encoder loaded from a checkpoint.
typedef struct SclCu SclCu;

// Fitted density-ratio estimator.
typedef struct SclDre SclDre;

// Specific-unit encoder/decoder loaded from a checkpoint.
typedef struct SclSu SclSu;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` (always NUL
// terminated when `len > 0`) and returns the full message length in bytes,
// excluding the terminator. An empty message means the last call succeeded.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t scl_last_error_message(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *scl_version(void);

// Fits a kernel logistic-regression ratio estimator of `p / q` from
// `n_p` and `n_q` row-major samples of dimension `dim`. Pass 0 for
// `max_iters` to use the default budget.
//
// # Safety
// `samples_p` / `samples_q` must hold `n_p * dim` / `n_q * dim` doubles;
// `out` must be writable.
enum SclStatus scl_dre_fit(const double *samples_p,
                           size_t n_p,
                           const double *samples_q,
                           size_t n_q,
                           size_t dim,
                           double bandwidth,
                           double gamma,
                           size_t max_iters,
                           struct SclDre **out);

// Writes the estimated ratio `r(x)` for `n` rows of `x` into `out`.
//
// # Safety
// `model` must come from [`scl_dre_fit`]; `x` holds `n * dim` doubles and
// `out` has room for `n`.
enum SclStatus scl_dre_estimate(const struct SclDre *model,
                                const double *x,
                                size_t n,
                                size_t dim,
                                double *out);

// Input dimension of a fitted estimator, 0 for a null handle.
//
// # Safety
// `model` must be null or come from [`scl_dre_fit`].
size_t scl_dre_dim(const struct SclDre *model);

// # Safety
// `model` must be null or come from [`scl_dre_fit`] and not be used again.
void scl_dre_free(struct SclDre *model);

// KL divergence of `N(mu, diag(sigma^2))` from the standard normal.
//
// # Safety
// `mu` and `sigma` hold `d` doubles; `out` is writable.
enum SclStatus scl_kl_gaussian(const double *mu, const double *sigma, size_t d, double *out);

// Sigmoid approximation of the KL to a log-uniform prior. `clamped`
// (optional) receives how many coordinates hit the `sigma^2 / mu^2` clamp.
//
// # Safety
// `mu` and `sigma` hold `d` doubles; `out` is writable; `clamped` is null
// or writable.
enum SclStatus scl_kl_loguniform(const double *mu,
                                 const double *sigma,
                                 size_t d,
                                 double *out,
                                 size_t *clamped);

// Loads a CU checkpoint written by `semcom train-cu`.
//
// # Safety
// `path` is a NUL-terminated UTF-8 string; `out` is writable.
enum SclStatus scl_cu_load(const char *path, struct SclCu **out);

// # Safety
// `cu` must be null or a live handle from [`scl_cu_load`].
size_t scl_cu_input_dim(const struct SclCu *cu);

// # Safety
// `cu` must be null or a live handle from [`scl_cu_load`].
size_t scl_cu_latent_dim(const struct SclCu *cu);

// Encoder mean and standard deviation for `n` observations.
//
// # Safety
// `images` holds `n * input_dim` doubles; `mu_out` and `sigma_out` each
// have room for `n * latent_dim`.
enum SclStatus scl_cu_encode(const struct SclCu *cu,
                             const double *images,
                             size_t n,
                             double *mu_out,
                             double *sigma_out);

// # Safety
// `cu` must be null or a live handle from [`scl_cu_load`], not used again.
void scl_cu_free(struct SclCu *cu);

// Loads an SU checkpoint written by `semcom train-su`.
//
// # Safety
// `path` is a NUL-terminated UTF-8 string; `out` is writable.
enum SclStatus scl_su_load(const char *path, struct SclSu **out);

// Task id (1 binary, 2 digit), 0 for a null handle.
//
// # Safety
// `su` must be null or a live handle from [`scl_su_load`].
uint8_t scl_su_task(const struct SclSu *su);

// # Safety
// `su` must be null or a live handle from [`scl_su_load`].
size_t scl_su_input_dim(const struct SclSu *su);

// Number of channel uses `d`.
//
// # Safety
// `su` must be null or a live handle from [`scl_su_load`].
size_t scl_su_channel_dim(const struct SclSu *su);

// Width of the decoder output: 1 for the binary task, 10 for digits.
//
// # Safety
// `su` must be null or a live handle from [`scl_su_load`].
size_t scl_su_output_dim(const struct SclSu *su);

// Channel-input mean and standard deviation for `n` CU representations.
//
// # Safety
// `c` holds `n * input_dim` doubles; outputs have room for `n * d` each.
enum SclStatus scl_su_encode(const struct SclSu *su,
                             const double *c,
                             size_t n,
                             double *mu_out,
                             double *sigma_out);

// Decoder probabilities for `n` received channel outputs, plus the hard
// decision per row when `labels_out` is not null.
//
// # Safety
// `received` holds `n * d` doubles; `probs_out` has room for
// `n * output_dim`; `labels_out` is null or has room for `n`.
enum SclStatus scl_su_decode(const struct SclSu *su,
                             const double *received,
                             size_t n,
                             double *probs_out,
                             uint32_t *labels_out);

// # Safety
// `su` must be null or a live handle from [`scl_su_load`], not used again.
void scl_su_free(struct SclSu *su);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEMCOM_H */
