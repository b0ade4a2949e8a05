#ifndef DAIAM_H
#define DAIAM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DaiamStatus {
  DAIAM_STATUS_OK = 0,
  DAIAM_STATUS_NULL_POINTER = 1,
  DAIAM_STATUS_INVALID_ARGUMENT = 2,
  DAIAM_STATUS_IO = 3,
  DAIAM_STATUS_CHECKPOINT = 4,
  DAIAM_STATUS_IMAGE_TOO_SMALL = 5,
  DAIAM_STATUS_NON_FINITE = 6,
  DAIAM_STATUS_PANIC = 7,
  DAIAM_STATUS_INTERNAL = 8,
} DaiamStatus;

/**
 * Opaque model handle.
 */
typedef struct DaiamModel DaiamModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Load a checkpoint (training or inference) and store a new handle in
 * `*out`. Release it with [`daiam_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum DaiamStatus daiam_model_load(const char *path, struct DaiamModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`daiam_model_load`] not yet freed.
 */
void daiam_model_free(struct DaiamModel *model);

/**
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum DaiamStatus daiam_model_param_count(const struct DaiamModel *model, size_t *out);

/**
 * Derain one image. The result, clamped to `[0, 1]`, has the input's size.
 *
 * # Safety
 * `model` must be a live handle; `input` and `output` must each hold
 * `height * width * 3` floats and may alias.
 */
enum DaiamStatus daiam_model_derain(const struct DaiamModel *model,
                                    const float *input,
                                    size_t height,
                                    size_t width,
                                    float *output);

/**
 * PSNR in dB over RGB, inputs clamped to `[0, 1]`, capped at 100.
 *
 * # Safety
 * `a` and `b` must hold `height * width * 3` floats; `out` must be writable.
 */
enum DaiamStatus daiam_psnr(const float *a,
                            const float *b,
                            size_t height,
                            size_t width,
                            double *out);

/**
 * SSIM on luminance with an 11x11 Gaussian window (sigma 1.5).
 *
 * # Safety
 * As for [`daiam_psnr`].
 */
enum DaiamStatus daiam_ssim(const float *a,
                            const float *b,
                            size_t height,
                            size_t width,
                            double *out);

/**
 * Soft rain mask of `rainy` against `clean`, written as
 * `height * width` floats in `[0, 1]`.
 *
 * # Safety
 * `rainy` and `clean` must hold `height * width * 3` floats; `mask` must
 * hold `height * width`.
 */
enum DaiamStatus daiam_soft_mask(const float *rainy,
                                 const float *clean,
                                 size_t height,
                                 size_t width,
                                 float *mask);

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next call into this library from the same thread.
 */
const char *daiam_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *daiam_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DAIAM_H */
