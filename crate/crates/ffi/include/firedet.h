#ifndef FIREDET_H
#define FIREDET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum FdStatus {
  FD_STATUS_OK = 0,
  FD_STATUS_NULL_ARGUMENT = 1,
  FD_STATUS_INVALID_ARGUMENT = 2,
  FD_STATUS_IO = 3,
  FD_STATUS_FORMAT = 4,
  FD_STATUS_OUT_OF_RANGE = 5,
  FD_STATUS_INTERNAL = 6,
} FdStatus;

/**
 * Detections from one image, in descending confidence.
 */
typedef struct FdDetections FdDetections;

/**
 * A loaded model.
 */
typedef struct FdModel FdModel;

/**
 * Post-processing thresholds.
 */
typedef struct FdDetectOptions {
  double conf_threshold;
  double nms_iou_threshold;
  uint32_t max_detections;
} FdDetectOptions;

/**
 * One box in source-image pixels.
 */
typedef struct FdDetection {
  uint32_t class_id;
  double confidence;
  double x1;
  double y1;
  double x2;
  double y2;
} FdDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *fd_version(void);

/**
 * Message for the last failed call on this thread, or NULL. The pointer
 * stays valid until the next call on the same thread.
 */
const char *fd_last_error(void);

/**
 * Interactive defaults: confidence 0.25, NMS IoU 0.45, 300 boxes.
 */
struct FdDetectOptions fd_default_options(void);

/**
 * Loads a checkpoint (and its sidecar) from a UTF-8 path.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum FdStatus fd_model_load(const char *path, struct FdModel **out);

/**
 * # Safety
 * `model` must come from [`fd_model_load`] and not be freed twice. NULL is ignored.
 */
void fd_model_free(struct FdModel *model);

/**
 * Square input side the model was trained at, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
uint32_t fd_model_input_size(const struct FdModel *model);

/**
 * Number of classes, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
uint32_t fd_model_num_classes(const struct FdModel *model);

/**
 * Detects objects in a packed RGB8 image (`width * height * 3` bytes,
 * row-major). `options` may be NULL for the defaults. `latency_s` may be
 * NULL; otherwise it receives the forward plus post-processing time.
 *
 * # Safety
 * `model` must be a live handle, `rgb` must point to `width * height * 3`
 * readable bytes and `out` must be writable.
 */
enum FdStatus fd_detect_rgb(const struct FdModel *model,
                            const uint8_t *rgb,
                            uint32_t width,
                            uint32_t height,
                            const struct FdDetectOptions *options,
                            struct FdDetections **out,
                            double *latency_s);

/**
 * Number of detections, or 0 for NULL.
 *
 * # Safety
 * `dets` must be NULL or a live handle.
 */
size_t fd_detections_len(const struct FdDetections *dets);

/**
 * Copies detection `index` into `out`.
 *
 * # Safety
 * `dets` must be a live handle and `out` writable.
 */
enum FdStatus fd_detections_get(const struct FdDetections *dets,
                                size_t index,
                                struct FdDetection *out);

/**
 * # Safety
 * `dets` must come from [`fd_detect_rgb`] and not be freed twice. NULL is ignored.
 */
void fd_detections_free(struct FdDetections *dets);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FIREDET_H */
