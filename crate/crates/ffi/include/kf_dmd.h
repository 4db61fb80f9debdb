#ifndef KF_DMD_H
#define KF_DMD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Success.
 */
#define KFDMD_OK 0

/**
 * Null pointer or malformed handle.
 */
#define KFDMD_ERR_NULL 1

/**
 * Invalid configuration or arguments.
 */
#define KFDMD_ERR_CONFIG 2

/**
 * Numerical failure.
 */
#define KFDMD_ERR_NUMERICAL 3

/**
 * IO failure.
 */
#define KFDMD_ERR_IO 4

/**
 * Panic caught at the boundary.
 */
#define KFDMD_ERR_PANIC 5

/**
 * A completed filter run (opaque).
 */
typedef struct KfdmdFilterRun KfdmdFilterRun;

/**
 * Estimated modes, eigenvalues, and amplitudes (opaque).
 */
typedef struct KfdmdSpectrum KfdmdSpectrum;

/**
 * Copies the last error message on this thread into `buf` (NUL-terminated,
 * truncated to `len`); returns the full message length.
 */
size_t kfdmd_last_error(char *buf, size_t len);

/**
 * Exact DMD on `count` snapshots of dimension `dim` (each snapshot
 * contiguous in `data`); writes an owned spectrum handle to `out`.
 *
 * # Safety
 * `data` must point to `dim*count` doubles; `out` must be a valid pointer.
 */
int kfdmd_exact_dmd(const double *data,
                    size_t dim,
                    size_t count,
                    double dt,
                    size_t rank,
                    struct KfdmdSpectrum **out);

/**
 * Runs the ensemble filter on `count` snapshots of dimension `dim`.
 * `filter_kind`: 0 = ETKF, 1 = stochastic EnKF. `nonautonomous`: 0 or 1.
 *
 * # Safety
 * `data` must point to `dim*count` doubles; `out` must be a valid pointer.
 */
int kfdmd_run_filter(const double *data,
                     size_t dim,
                     size_t count,
                     double dt,
                     size_t rank,
                     size_t ensemble_size,
                     size_t delays,
                     double sigma,
                     double q_std,
                     double mode_prior_var,
                     double eig_prior_var,
                     uint64_t seed,
                     int filter_kind,
                     int nonautonomous,
                     struct KfdmdFilterRun **out);

/**
 * # Safety
 * `handle` must come from this library and not have been freed.
 */
size_t kfdmd_spectrum_rank(const struct KfdmdSpectrum *handle);

/**
 * # Safety
 * `handle` must come from this library and not have been freed.
 */
size_t kfdmd_spectrum_dim(const struct KfdmdSpectrum *handle);

/**
 * Writes the eigenvalues into `out_re`/`out_im` (length = rank).
 *
 * # Safety
 * Pointers must be valid for `rank` doubles each.
 */
int kfdmd_spectrum_eigenvalues(const struct KfdmdSpectrum *handle, double *out_re, double *out_im);

/**
 * Writes the modes column by column into `out_re`/`out_im`
 * (length = dim·rank each).
 *
 * # Safety
 * Pointers must be valid for `dim*rank` doubles each.
 */
int kfdmd_spectrum_modes(const struct KfdmdSpectrum *handle, double *out_re, double *out_im);

/**
 * Writes the amplitudes into `out_re`/`out_im` (length = rank).
 *
 * # Safety
 * Pointers must be valid for `rank` doubles each.
 */
int kfdmd_spectrum_amplitudes(const struct KfdmdSpectrum *handle, double *out_re, double *out_im);

/**
 * Reconstructs the snapshot at step `k` into `out` (length = dim).
 *
 * # Safety
 * `out` must be valid for `dim` doubles.
 */
int kfdmd_spectrum_reconstruct(const struct KfdmdSpectrum *handle, size_t k, double *out);

/**
 * Number of assimilation steps in a completed run.
 *
 * # Safety
 * `handle` must come from this library and not have been freed.
 */
size_t kfdmd_filter_run_steps(const struct KfdmdFilterRun *handle);

/**
 * Posterior-mean spectrum after step `index` (0-based record index) as a
 * new owned handle; pass `steps - 1` for the final estimate.
 *
 * # Safety
 * `handle` and `out` must be valid pointers.
 */
int kfdmd_filter_run_spectrum(const struct KfdmdFilterRun *handle,
                              size_t index,
                              struct KfdmdSpectrum **out);

/**
 * # Safety
 * `handle` must come from this library; it must not be used afterwards.
 */
void kfdmd_spectrum_free(struct KfdmdSpectrum *handle);

/**
 * # Safety
 * `handle` must come from this library; it must not be used afterwards.
 */
void kfdmd_filter_run_free(struct KfdmdFilterRun *handle);

#endif /* KF_DMD_H */
