#ifndef FCTN_H
#define FCTN_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Label value of pixels without a class (unlabeled / ignored).
 */
#define FCTN_IGNORE_ID 255

typedef enum FctnStatus {
  FCTN_STATUS_OK = 0,
  FCTN_STATUS_NULL_POINTER = 1,
  FCTN_STATUS_INVALID_ARGUMENT = 2,
  FCTN_STATUS_IO = 3,
  FCTN_STATUS_CHECKPOINT = 4,
  FCTN_STATUS_SHAPE = 5,
  FCTN_STATUS_NUMERIC = 6,
  FCTN_STATUS_PANIC = 7,
  FCTN_STATUS_OTHER = 8,
} FctnStatus;

typedef enum FctnBranch {
  FCTN_BRANCH_F1 = 0,
  FCTN_BRANCH_F2 = 1,
  FCTN_BRANCH_FT = 2,
} FctnBranch;

/**
 * Opaque model handle.
 */
typedef struct FctnModelHandle FctnModelHandle;

/**
 * Copies the last error message of this thread into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t fctn_last_error(char *buf, size_t len);

/**
 * Loads a checkpoint written by the trainer.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum FctnStatus fctn_model_load(const char *path, struct FctnModelHandle **out);

/**
 * Releases a handle from [`fctn_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must come from [`fctn_model_load`] and not be used afterwards.
 */
void fctn_model_free(struct FctnModelHandle *model);

/**
 * # Safety
 * `model` must be a live handle; the out pointers must be writable.
 */
enum FctnStatus fctn_model_info(const struct FctnModelHandle *model,
                                size_t *num_classes,
                                size_t *input_channels);

/**
 * Per-pixel class and softmax confidence for one `height x width x
 * channels` image (row-major, channels last, values in [0, 1]).
 *
 * # Safety
 * `image` must hold `height*width*channels` floats, `labels` room for
 * `height*width` bytes, `confidence` null or room for `height*width` floats.
 */
enum FctnStatus fctn_predict(const struct FctnModelHandle *model,
                             enum FctnBranch branch,
                             const float *image,
                             size_t height,
                             size_t width,
                             size_t channels,
                             uint8_t *labels,
                             float *confidence);

/**
 * Pseudo-label mask of one image: the F1/F2 class where both agree and
 * the larger confidence reaches `threshold`, else [`FCTN_IGNORE_ID`].
 *
 * # Safety
 * As [`fctn_predict`]; `coverage` may be null.
 */
enum FctnStatus fctn_pseudo_label(const struct FctnModelHandle *model,
                                  const float *image,
                                  size_t height,
                                  size_t width,
                                  size_t channels,
                                  double threshold,
                                  uint8_t *mask,
                                  double *coverage);

/**
 * IoU per class (NaN where undefined) and mIoU over `count` images
 * stored back to back, with their ground-truth masks.
 *
 * # Safety
 * `images` must hold `count*height*width*channels` floats, `masks`
 * `count*height*width` bytes, `iou` room for `num_classes` doubles
 * (or null), `miou` a writable double.
 */
enum FctnStatus fctn_evaluate(const struct FctnModelHandle *model,
                              enum FctnBranch branch,
                              const float *images,
                              const uint8_t *masks,
                              size_t count,
                              size_t height,
                              size_t width,
                              size_t channels,
                              double *iou,
                              double *miou);

#endif  /* FCTN_H */
