#ifndef FACEVOX_H
#define FACEVOX_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum FvxStatus {
  FVX_STATUS_OK = 0,
  FVX_STATUS_NULL_POINTER = 1,
  FVX_STATUS_INVALID_ARGUMENT = 2,
  FVX_STATUS_NOT_FOUND = 3,
  FVX_STATUS_IO = 4,
  FVX_STATUS_PARSE = 5,
  FVX_STATUS_SHAPE = 6,
  FVX_STATUS_CHECKPOINT = 7,
  FVX_STATUS_BUFFER_TOO_SMALL = 8,
  FVX_STATUS_PANIC = 9,
} FvxStatus;

/**
 * A voxel grid (opaque).
 */
typedef struct FvxGrid FvxGrid;

/**
 * A trained model ready for inference (opaque).
 */
typedef struct FvxModel FvxModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *fvx_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fvx_version(void);

/**
 * Encodes `n_points` voxel-space points into a `dims[0] x dims[1] x
 * dims[2]` (w, h, d) grid with Gaussian width `sigma`.
 *
 * # Safety
 * `points` must hold `3 * n_points` doubles, `dims` three sizes, and `out`
 * must be writable.
 */
enum FvxStatus fvx_grid_encode(const double *points,
                               size_t n_points,
                               const size_t *dims,
                               double sigma,
                               bool truncate,
                               struct FvxGrid **out);

/**
 * Reads a grid file written by [`fvx_grid_save`] or the CLI.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum FvxStatus fvx_grid_load(const char *path, struct FvxGrid **out);

/**
 * # Safety
 * `grid` must be a live handle and `path` a NUL-terminated string.
 */
enum FvxStatus fvx_grid_save(const struct FvxGrid *grid, const char *path);

/**
 * Writes `(w, h, d)` into `out_dims`.
 *
 * # Safety
 * `grid` must be a live handle; `out_dims` must hold three sizes.
 */
enum FvxStatus fvx_grid_dims(const struct FvxGrid *grid, size_t *out_dims);

/**
 * Copies the voxel values, x fastest then y then z, into `out`.
 *
 * # Safety
 * `grid` must be a live handle; `out` must hold `len` doubles.
 */
enum FvxStatus fvx_grid_values(const struct FvxGrid *grid, double *out, size_t len);

/**
 * Releases a grid. NULL is ignored.
 *
 * # Safety
 * `grid` must come from this library and not be used afterwards.
 */
void fvx_grid_free(struct FvxGrid *grid);

/**
 * Finds local maxima above `min_value`, merging peaks closer than
 * `min_separation` voxels. `*out_count` always receives the number found;
 * if it exceeds `capacity` (in points) nothing is written and
 * `FVX_STATUS_BUFFER_TOO_SMALL` is returned.
 *
 * # Safety
 * `grid` must be a live handle, `out_points` must hold `3 * capacity`
 * doubles (may be NULL when `capacity` is 0), `out_count` writable.
 */
enum FvxStatus fvx_decode_peaks(const struct FvxGrid *grid,
                                double min_value,
                                double min_separation,
                                double *out_points,
                                size_t capacity,
                                size_t *out_count);

/**
 * Mean 3D point error over the ground-truth outer-eye distance, percent.
 *
 * # Safety
 * `pred` and `gt` must hold `3 * n_points` doubles; `out` writable.
 */
enum FvxStatus fvx_gte(const double *pred,
                       const double *gt,
                       size_t n_points,
                       size_t left_eye_outer,
                       size_t right_eye_outer,
                       bool interocular_2d,
                       double *out);

/**
 * Mean 2D point error over `sqrt(w * h)` of `bbox = {x0, y0, w, h}`,
 * percent. Depth values are ignored.
 *
 * # Safety
 * `pred` and `gt` must hold `3 * n_points` doubles, `bbox` four doubles;
 * `out` writable.
 */
enum FvxStatus fvx_nme(const double *pred,
                       const double *gt,
                       size_t n_points,
                       const double *bbox,
                       double *out);

/**
 * Loads a training checkpoint for inference.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum FvxStatus fvx_model_load(const char *path, struct FvxModel **out);

/**
 * Number of landmarks the model predicts.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum FvxStatus fvx_model_n_landmarks(const struct FvxModel *model, size_t *out);

/**
 * Predicts landmarks for a planar RGB image (`3 * height * width` doubles
 * in [0, 1], channel-major, rows top to bottom). `bbox` is `{x0, y0, w, h}`
 * or NULL for the whole image. Output points are in image pixels with
 * zero-mean depth.
 *
 * # Safety
 * `model` must be a live handle; `rgb` must hold `3 * width * height`
 * doubles; `bbox` four doubles or NULL; `out_points` `3 * capacity`
 * doubles.
 */
enum FvxStatus fvx_model_predict(const struct FvxModel *model,
                                 const double *rgb,
                                 size_t width,
                                 size_t height,
                                 const double *bbox,
                                 double *out_points,
                                 size_t capacity);

/**
 * Releases a model. NULL is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void fvx_model_free(struct FvxModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FACEVOX_H */
