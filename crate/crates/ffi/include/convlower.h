#ifndef CONVLOWER_H
#define CONVLOWER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ConvlowerStatus {
  CONVLOWER_STATUS_OK = 0,
  CONVLOWER_STATUS_NULL_POINTER = 1,
  CONVLOWER_STATUS_INVALID_ARGUMENT = 2,
  CONVLOWER_STATUS_SHAPE_MISMATCH = 3,
  CONVLOWER_STATUS_INVALID_GEOMETRY = 4,
  CONVLOWER_STATUS_OUT_OF_BOUNDS = 5,
  CONVLOWER_STATUS_IO = 6,
  CONVLOWER_STATUS_FORMAT = 7,
  CONVLOWER_STATUS_NON_FINITE = 8,
  CONVLOWER_STATUS_PANIC = 9,
} ConvlowerStatus;

typedef enum ConvlowerEngine {
  CONVLOWER_ENGINE_DIRECT = 0,
  CONVLOWER_ENGINE_TRUE2D = 1,
  CONVLOWER_ENGINE_GEMM = 2,
  CONVLOWER_ENGINE_LAZY = 3,
} ConvlowerEngine;

/**
 * Filter bank laid out `(f, kh, kw, c_in)`.
 */
typedef struct ConvlowerFilters ConvlowerFilters;

/**
 * Row-major `f64` matrix.
 */
typedef struct ConvlowerMatrix ConvlowerMatrix;

/**
 * NHWC `f64` tensor.
 */
typedef struct ConvlowerTensor ConvlowerTensor;

/**
 * Convolution geometry. `pad` zeros are added on every side; with
 * `truncate` set, a stride that does not divide the span is floored.
 */
typedef struct ConvlowerGeometry {
  size_t kh;
  size_t kw;
  size_t c_in;
  size_t filters;
  size_t stride;
  size_t pad;
  bool truncate;
} ConvlowerGeometry;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *convlower_version(void);

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *convlower_last_error(void);

/**
 * Copies `len` values into a new tensor of shape `(b, h, w, c)`.
 *
 * # Safety
 * `data` must point to `len` readable values; `out` must be writable.
 */
enum ConvlowerStatus convlower_tensor_new(size_t b,
                                          size_t h,
                                          size_t w,
                                          size_t c,
                                          const double *data,
                                          size_t len,
                                          struct ConvlowerTensor **out);

/**
 * Loads an IDX image file or a tensor dump.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum ConvlowerStatus convlower_tensor_load(const char *path, struct ConvlowerTensor **out);

/**
 * # Safety
 * `t` must be NULL or a handle from this library not yet freed.
 */
void convlower_tensor_free(struct ConvlowerTensor *t);

/**
 * Writes `(b, h, w, c)` into `shape`.
 *
 * # Safety
 * `t` must be a live handle; `shape` must have room for 4 values.
 */
enum ConvlowerStatus convlower_tensor_shape(const struct ConvlowerTensor *t, size_t *shape);

/**
 * Borrowed view of the tensor's values; valid while the handle lives.
 *
 * # Safety
 * `t` must be a live handle; `len` must be NULL or writable.
 */
const double *convlower_tensor_data(const struct ConvlowerTensor *t, size_t *len);

/**
 * Copies `len` values into a new bank of `f` filters, each `(kh, kw, c_in)`.
 *
 * # Safety
 * `data` must point to `len` readable values; `out` must be writable.
 */
enum ConvlowerStatus convlower_filters_new(size_t f,
                                           size_t kh,
                                           size_t kw,
                                           size_t c_in,
                                           const double *data,
                                           size_t len,
                                           struct ConvlowerFilters **out);

/**
 * # Safety
 * `k` must be NULL or a handle from this library not yet freed.
 */
void convlower_filters_free(struct ConvlowerFilters *k);

/**
 * # Safety
 * `m` must be NULL or a handle from this library not yet freed.
 */
void convlower_matrix_free(struct ConvlowerMatrix *m);

/**
 * # Safety
 * `m` must be a live handle; `rows` and `cols` must be writable.
 */
enum ConvlowerStatus convlower_matrix_dims(const struct ConvlowerMatrix *m,
                                           size_t *rows,
                                           size_t *cols);

/**
 * Borrowed row-major values; valid while the handle lives.
 *
 * # Safety
 * `m` must be a live handle; `len` must be NULL or writable.
 */
const double *convlower_matrix_data(const struct ConvlowerMatrix *m, size_t *len);

/**
 * Output height and width for an unpadded `h × w` input.
 *
 * # Safety
 * `geom` must be readable; `h_out` and `w_out` must be writable.
 */
enum ConvlowerStatus convlower_output_shape(const struct ConvlowerGeometry *geom,
                                            size_t h,
                                            size_t w,
                                            size_t *h_out,
                                            size_t *w_out);

/**
 * Patch matrix of `input`, one row per kernel position, padding applied
 * virtually.
 *
 * # Safety
 * `input` and `geom` must be readable; `out` must be writable.
 */
enum ConvlowerStatus convlower_im2col(const struct ConvlowerTensor *input,
                                      const struct ConvlowerGeometry *geom,
                                      struct ConvlowerMatrix **out);

/**
 * Cross-correlates `input` with `filters`; `True2d` flips each kernel first.
 * `engine` is a `ConvlowerEngine` value, taken as an integer so that an
 * out-of-range value is reported rather than undefined.
 *
 * # Safety
 * `input`, `filters` and `geom` must be readable; `out` must be writable.
 */
enum ConvlowerStatus convlower_conv(const struct ConvlowerTensor *input,
                                    const struct ConvlowerFilters *filters,
                                    const struct ConvlowerGeometry *geom,
                                    int32_t engine,
                                    struct ConvlowerTensor **out);

/**
 * Source coordinates `(l, i, j, d)` of patch-matrix cell `(p, q)` for an
 * unpadded input of shape `(b, h, w, c_in)`. `i` and `j` index the padded
 * input, so border cells report positions below `pad` or past `h`/`w`.
 *
 * # Safety
 * `geom` must be readable; `coords` must have room for 4 values.
 */
enum ConvlowerStatus convlower_index_map(const struct ConvlowerGeometry *geom,
                                         size_t b,
                                         size_t h,
                                         size_t w,
                                         size_t p,
                                         size_t q,
                                         size_t *coords);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONVLOWER_H */
