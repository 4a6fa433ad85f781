/* C interface to the cordseg segmentation and quantification pipeline. */

#pragma once

/* Generated with cbindgen:0.27.0 */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible FFI call.
typedef enum CordsegStatus {
  // Success; output arguments are populated.
  CORDSEG_STATUS_OK = 0,
  // A required pointer argument was null.
  CORDSEG_STATUS_NULL_POINTER = 1,
  // Inputs were rejected before any work ran (bad dimensions, malformed
  // files, out-of-domain values).
  CORDSEG_STATUS_INVALID_ARGUMENT = 2,
  // The computation itself failed (non-finite loss, solver breakdown,
  // or a caught panic).
  CORDSEG_STATUS_INTERNAL = 3,
} CordsegStatus;

// Loaded segmentation network plus its parameters (opaque).
typedef struct CordsegModel CordsegModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on this thread; empty string when no
// call has failed yet. Valid until the next failing call on this thread.
const char *cordseg_last_error(void);

// Library version as a static NUL-terminated string.
const char *cordseg_version(void);

// Load a checkpoint written by `cordseg train`. On success `*out` owns the
// model; release it with [`cordseg_model_free`].
enum CordsegStatus cordseg_model_load(const char *path, struct CordsegModel **out);

// Release a model handle. Null is a no-op.
void cordseg_model_free(struct CordsegModel *model);

// Number of output classes the loaded model predicts.
enum CordsegStatus cordseg_model_num_classes(const struct CordsegModel *model, size_t *out);

// Segment an image volume. `image` holds `nz*ny*nx` f32 intensities in
// Z-major order; `labels_out` receives the same number of label bytes.
enum CordsegStatus cordseg_model_segment(const struct CordsegModel *model,
                                         const float *image,
                                         size_t nz,
                                         size_t ny,
                                         size_t nx,
                                         uint8_t *labels_out);

// Load an image volume from disk (`.raw` + JSON sidecar) and segment it,
// writing the predicted labels next to `labels_path`.
enum CordsegStatus cordseg_model_segment_file(const struct CordsegModel *model,
                                              const char *image_path,
                                              const char *labels_path);

// Cross-sectional metrics of one axial label slice. `labels` holds `ny*nx`
// bytes (0 background, 1 CSF, 2..=8 cord at C1..C7); `dy`/`dx` are the
// in-plane voxel extents in mm. `ratio_out` receives NaN when the slice
// has no cord (the ratio is undefined, not zero).
enum CordsegStatus cordseg_quantify_slice(const uint8_t *labels,
                                          size_t ny,
                                          size_t nx,
                                          double dy,
                                          double dx,
                                          double *csa_out,
                                          double *sac_out,
                                          double *ratio_out);

// Weighted-least-squares diffusion fit for one voxel. `bvals` holds `n`
// b-values (s/mm^2), `dirs` holds `3n` unit-direction components
// (x,y,z per sample), `signals` holds `n` positive measurements. Requires
// n >= 7 spanning at least 6 distinct directions.
enum CordsegStatus cordseg_dti_fit(const double *bvals,
                                   const double *dirs,
                                   const double *signals,
                                   size_t n,
                                   double *fa_out,
                                   double *md_out,
                                   double *rd_out);

// Pearson correlation of two length-`n` series.
enum CordsegStatus cordseg_pearson(const double *x, const double *y, size_t n, double *r_out);

// Fisher z-transform `atanh(r)`; requires |r| < 1.
enum CordsegStatus cordseg_fisher_z(double r, double *z_out);

// Two-sided Fisher z-test between two independent correlations. Both
// groups need n > 3.
enum CordsegStatus cordseg_compare_correlations(double r_a,
                                                size_t n_a,
                                                double r_b,
                                                size_t n_b,
                                                double *z_out,
                                                double *p_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus
