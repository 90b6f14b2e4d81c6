/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef SGS_H
#define SGS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SgsStatus {
  SGS_STATUS_OK = 0,
  SGS_STATUS_NULL_POINTER = 1,
  SGS_STATUS_INVALID_ARGUMENT = 2,
  SGS_STATUS_SHAPE = 3,
  SGS_STATUS_NUMERIC = 4,
  SGS_STATUS_IO = 5,
  SGS_STATUS_PANIC = 6,
} SgsStatus;

/**
 * Opaque scaling matrix handle.
 */
typedef struct SgsScaling SgsScaling;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *sgs_last_error_message(void);

/**
 * Static, NUL-terminated library version.
 */
const char *sgs_version(void);

/**
 * 3x3 scaling with centre 1, edges `1/alpha`, corners `1/beta`, mean 1.
 */
enum SgsStatus sgs_scaling_from_alpha_beta(double alpha, double beta, struct SgsScaling **out);

/**
 * Floors `values` (row-major `rows x cols`) at `epsilon_floor` and
 * normalizes to mean 1.
 */
enum SgsStatus sgs_scaling_from_values(size_t rows,
                                       size_t cols,
                                       const double *values,
                                       double epsilon_floor,
                                       struct SgsScaling **out);

/**
 * Scaling from a spatial dependence matrix `s` with entries in `[0, 1]`:
 * k-transform, floor, normalize.
 */
enum SgsStatus sgs_scaling_from_dependence(size_t rows,
                                           size_t cols,
                                           const double *s,
                                           double k,
                                           double epsilon_floor,
                                           struct SgsScaling **out);

/**
 * Normalized coverage of `n_masks` binary masks stored back to back as
 * `n_masks * rows * cols` bytes (nonzero = set). When `raw_out` is not
 * NULL it receives the unnormalized coverage counts.
 */
enum SgsStatus sgs_scaling_from_masks(size_t rows,
                                      size_t cols,
                                      size_t n_masks,
                                      const uint8_t *masks,
                                      double *raw_out,
                                      struct SgsScaling **out);

enum SgsStatus sgs_scaling_dims(const struct SgsScaling *h, size_t *rows, size_t *cols);

/**
 * Copies the row-major values into `out`, which holds `len` doubles.
 */
enum SgsStatus sgs_scaling_values(const struct SgsScaling *h, double *out, size_t len);

/**
 * Scales a `[c_out, c_in, rows, cols]` gradient in place.
 */
enum SgsStatus sgs_scaling_apply(const struct SgsScaling *h,
                                 double *grad,
                                 size_t c_out,
                                 size_t c_in,
                                 size_t rows,
                                 size_t cols);

void sgs_scaling_free(struct SgsScaling *h);

/**
 * `k s / ((k - 1) s + 1)`.
 */
double sgs_k_transform(double s, double k);

/**
 * Normalized mutual information of a `bins x bins` joint count table.
 */
enum SgsStatus sgs_normalized_mi(size_t bins, const uint64_t *counts, double *out);

/**
 * Per-displacement normalized MI over feature maps `[n, c, h, w]` for a
 * `kh x kw` kernel; writes `kh * kw` values to `out`.
 */
enum SgsStatus sgs_dependence_mi(const double *maps,
                                 size_t n,
                                 size_t c,
                                 size_t h,
                                 size_t w,
                                 size_t kh,
                                 size_t kw,
                                 size_t bins,
                                 double *out);

/**
 * Lockstep run of a masked branched conv against a single conv scaled by
 * the mask coverage. `family` is `acb`, `full_plus_center`,
 * `all_rectangles`, `full` or `random:<n>:<seed>`; `optimizer` is `sgd`,
 * `sgd_momentum`, `adam` or `adagrad`. `guaranteed` is set to 0 for
 * optimizers outside the linear family.
 */
enum SgsStatus sgs_verify_equivalence(size_t kernel_rows,
                                      size_t kernel_cols,
                                      const char *family,
                                      const char *optimizer,
                                      size_t steps,
                                      uint64_t seed,
                                      double lr,
                                      double momentum,
                                      double weight_decay,
                                      double *max_divergence,
                                      bool *guaranteed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SGS_H */
