#ifndef AVEMO_H
#define AVEMO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  AVEMO_STATUS_OK = 0,
  AVEMO_STATUS_NULL_POINTER = 1,
  /**
   * Shapes, ranges or bounds outside a function's contract.
   */
  AVEMO_STATUS_INVALID_ARGUMENT = 2,
  AVEMO_STATUS_CONFIG = 3,
  /**
   * Malformed or insufficient data (short signal, bad checkpoint, ...).
   */
  AVEMO_STATUS_DATA = 4,
  AVEMO_STATUS_IO = 5,
  /**
   * The output buffer is too small; the required size was still written.
   */
  AVEMO_STATUS_BUFFER_TOO_SMALL = 6,
  AVEMO_STATUS_PANIC = 7,
} AvemoStatus;

typedef enum {
  AVEMO_TASK_EXPR = 0,
  AVEMO_TASK_VA = 1,
} AvemoTask;

/**
 * A loaded sequence model.
 */
typedef struct AvemoModel AvemoModel;

typedef struct {
  double lambda_x;
  double lambda_y;
  double conf_threshold;
} AvemoExpansion;

/**
 * Half-open pixel box: rows `top..bottom`, columns `left..right`.
 */
typedef struct {
  size_t top;
  size_t bottom;
  size_t left;
  size_t right;
} AvemoBBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failure on this thread, or NULL if none.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *avemo_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *avemo_version(void);

/**
 * Concordance correlation coefficient of two length-`n` series.
 *
 * # Safety
 * `x` and `y` must point to `n` doubles; `out` must be writable.
 */
AvemoStatus avemo_ccc(const double *x, const double *y, size_t n, double *out);

double avemo_total_expr(double macro_f1, double accuracy);

double avemo_total_va(double ccc_valence, double ccc_arousal);

AvemoExpansion avemo_expansion_default(void);

/**
 * Agent box from 75 BODY25 values (x, y, confidence per joint) in an
 * image of `height x width`. `cfg` may be NULL for the defaults.
 * `*present` is 0 when no joint passes the confidence threshold, in
 * which case `*out` is left untouched.
 *
 * # Safety
 * `keypoints` must point to `n_values` doubles; `cfg` must be NULL or
 * valid; `out` and `present` must be writable.
 */
AvemoStatus avemo_agent_bbox(const double *keypoints,
                             size_t n_values,
                             size_t height,
                             size_t width,
                             const AvemoExpansion *cfg,
                             AvemoBBox *out,
                             int32_t *present);

/**
 * Zeroes the agent box in an interleaved 8-bit image, in place.
 * A NULL `bbox` (no agent) leaves the image unchanged.
 *
 * # Safety
 * `pixels` must point to `height * width * channels` writable bytes.
 */
AvemoStatus avemo_mask_agent(uint8_t *pixels,
                             size_t height,
                             size_t width,
                             size_t channels,
                             const AvemoBBox *bbox);

/**
 * Log-mel spectrogram with the default configuration, row-major
 * `frames x n_mels` into `out`. Input at another rate is resampled first.
 * Call with `out_len == 0` to learn the shape; `*frames` and `*n_mels`
 * are written whenever the signal is long enough.
 *
 * # Safety
 * `samples` must point to `n_samples` doubles; `out` must be NULL or
 * valid for `out_len` doubles; `frames` and `n_mels` must be writable.
 */
AvemoStatus avemo_melspectrogram(const double *samples,
                                 size_t n_samples,
                                 uint32_t sample_rate,
                                 double *out,
                                 size_t out_len,
                                 size_t *frames,
                                 size_t *n_mels);

/**
 * Loads a checkpoint. On success `*out` owns a handle for
 * [`avemo_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
 */
AvemoStatus avemo_model_load(const char *path, AvemoModel **out);

/**
 * Releases a handle from [`avemo_model_load`]. NULL is ignored.
 *
 * # Safety
 * `model` must be NULL or a live handle not used afterwards.
 */
void avemo_model_free(AvemoModel *model);

/**
 * # Safety
 * `model` must be a live handle.
 */
AvemoTask avemo_model_task(const AvemoModel *model);

/**
 * Feature width the model expects.
 *
 * # Safety
 * `model` must be a live handle.
 */
size_t avemo_model_input_dim(const AvemoModel *model);

/**
 * Values per frame produced by [`avemo_model_predict`]: 7 class
 * probabilities for expression, (valence, arousal) for VA.
 *
 * # Safety
 * `model` must be a live handle.
 */
size_t avemo_model_output_dim(const AvemoModel *model);

/**
 * Runs the model over one sequence of `frames x dim` row-major features
 * and writes `frames x output_dim` values to `out`.
 *
 * # Safety
 * `model` must be a live handle; `features` must point to
 * `frames * dim` doubles; `out` must be valid for `out_len` doubles.
 */
AvemoStatus avemo_model_predict(const AvemoModel *model,
                                const double *features,
                                size_t frames,
                                size_t dim,
                                double *out,
                                size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AVEMO_H */
