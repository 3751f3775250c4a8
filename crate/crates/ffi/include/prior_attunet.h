#ifndef PRIOR_ATTUNET_H
#define PRIOR_ATTUNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum PattunetStatus {
  PATTUNET_STATUS_OK = 0,
  PATTUNET_STATUS_NULL_POINTER = 1,
  PATTUNET_STATUS_INVALID_ARGUMENT = 2,
  PATTUNET_STATUS_IO = 3,
  PATTUNET_STATUS_CHECKPOINT = 4,
  PATTUNET_STATUS_MODEL = 5,
  PATTUNET_STATUS_PANIC = 6,
} PattunetStatus;

/**
 * A loaded network and its frozen prior.
 */
typedef struct PattunetModel PattunetModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *pattunet_last_error(void);

/**
 * Static name of a status code.
 */
const char *pattunet_status_name(enum PattunetStatus status);

/**
 * Loads a segmentation checkpoint written by `prior-attunet train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 * On success `*out` owns a handle to release with [`pattunet_model_free`].
 */
enum PattunetStatus pattunet_model_load(const char *path, struct PattunetModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`pattunet_model_load`] and not be used afterwards.
 */
void pattunet_model_free(struct PattunetModel *model);

/**
 * Network input height and width, the size images are resampled to.
 *
 * # Safety
 * `model` must be a live handle; `height` and `width` writable pointers.
 */
enum PattunetStatus pattunet_model_input_size(const struct PattunetModel *model,
                                              uint32_t *height,
                                              uint32_t *width);

/**
 * Number of trainable parameters in the segmentation network.
 *
 * # Safety
 * `model` must be a live handle; `count` a writable pointer.
 */
enum PattunetStatus pattunet_model_param_count(const struct PattunetModel *model, uint64_t *count);

/**
 * Predicts a class mask for one 8-bit grayscale slice.
 *
 * `pixels` holds `height * width` row-major intensities. The mask is
 * written to `mask_out` at the same resolution, one class id per pixel
 * (0 background, 1 IRF, 2 SRF, 3 PED).
 *
 * # Safety
 * `model` must be a live handle not used concurrently; `pixels` must hold
 * `height * width` readable bytes and `mask_out` `mask_len` writable bytes.
 */
enum PattunetStatus pattunet_model_predict(struct PattunetModel *model,
                                           const uint8_t *pixels,
                                           uint32_t height,
                                           uint32_t width,
                                           uint8_t *mask_out,
                                           size_t mask_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PRIOR_ATTUNET_H */
