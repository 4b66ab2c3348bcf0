#ifndef FRNET_H
#define FRNET_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Side length of a network input plane.
 */
#define FR_INPUT_SIZE 28

typedef enum FrStatus {
  FR_STATUS_OK = 0,
  FR_STATUS_NULL_POINTER = 1,
  FR_STATUS_INVALID_ARGUMENT = 2,
  FR_STATUS_DATA = 3,
  FR_STATUS_IO = 4,
  FR_STATUS_FORMAT = 5,
  FR_STATUS_SHAPE = 6,
  FR_STATUS_NON_FINITE = 7,
  FR_STATUS_PANIC = 8,
} FrStatus;

typedef enum FrVariant {
  FR_VARIANT_BASIC = 0,
  FR_VARIANT_FR = 1,
  FR_VARIANT_FR_FC = 2,
  FR_VARIANT_FR_CONCAT = 3,
} FrVariant;

/**
 * A trained network loaded from a checkpoint file.
 */
typedef struct FrModel FrModel;

/**
 * Aggregate metrics of [`fr_compute_metrics`].
 */
typedef struct FrMetrics {
  double acc;
  double uf1;
  double uar;
} FrMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *fr_version(void);

/**
 * Copies the calling thread's last error message (empty after a success)
 * into `buf` as a NUL-terminated string, truncating to `len - 1` bytes.
 * Returns the buffer size the full message needs, NUL included.
 *
 * # Safety
 * `buf` must be null or valid for writing `len` bytes.
 */
size_t fr_last_error_message(char *buf, size_t len);

/**
 * Loads a checkpoint file. The handle must be released with
 * [`fr_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for writing.
 */
enum FrStatus fr_model_load(const char *path, struct FrModel **out);

/**
 * Releases a model handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`fr_model_load`] and not be used afterwards.
 */
void fr_model_free(struct FrModel *model);

/**
 * Number of classes K of a loaded model.
 *
 * # Safety
 * `model` must be a live handle; `out` must be valid for writing.
 */
enum FrStatus fr_model_num_classes(const struct FrModel *model, size_t *out);

/**
 * Classifies `n` samples. `u` and `v` hold `n` standardized 28×28 planes
 * each. Writes `n` class indices to `labels` and, when `logits` is not
 * null, `n × K` logits.
 *
 * # Safety
 * Pointers must be valid for the sizes above; `logits` may be null.
 */
enum FrStatus fr_model_predict(const struct FrModel *model,
                               const float *u,
                               const float *v,
                               size_t n,
                               uint32_t *labels,
                               float *logits);

/**
 * Learnable parameter count of a variant with K classes and default sizes.
 *
 * # Safety
 * `out` must be valid for writing.
 */
enum FrStatus fr_count_parameters(enum FrVariant variant, size_t k, uint64_t *out);

/**
 * TV-L1 flow from `onset` to `apex` (both `height × width`) with default
 * solver settings. Writes the horizontal and vertical components.
 *
 * # Safety
 * All pointers must be valid for `height * width` values.
 */
enum FrStatus fr_tvl1_flow(const float *onset,
                           const float *apex,
                           size_t height,
                           size_t width,
                           float *out_u,
                           float *out_v);

/**
 * Resizes a `height × width` flow to 28×28 and standardizes each
 * component, giving the inputs of [`fr_model_predict`].
 *
 * # Safety
 * `u` and `v` must hold `height * width` values; the outputs 784 each.
 */
enum FrStatus fr_flow_to_inputs(const float *u,
                                const float *v,
                                size_t height,
                                size_t width,
                                float *out_u,
                                float *out_v);

/**
 * Apex index of a clip of `n_frames` consecutive `height × width` frames,
 * frame 0 being the onset.
 *
 * # Safety
 * `frames` must hold `n_frames * height * width` values.
 */
enum FrStatus fr_spot_apex(const float *frames,
                           size_t n_frames,
                           size_t height,
                           size_t width,
                           size_t *out);

/**
 * Metrics over `n_folds` K×K confusion matrices stored back to back,
 * each row-major with rows indexed by the true class.
 *
 * # Safety
 * `counts` must hold `n_folds * k * k` values; `out` must be writable.
 */
enum FrStatus fr_compute_metrics(const uint64_t *counts,
                                 size_t k,
                                 size_t n_folds,
                                 struct FrMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FRNET_H */
