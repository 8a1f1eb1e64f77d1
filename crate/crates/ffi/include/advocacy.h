#ifndef ADVOCACY_H
#define ADVOCACY_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum AdvStatus {
  ADV_STATUS_OK = 0,
  ADV_STATUS_NULL_POINTER = 1,
  ADV_STATUS_INVALID_ARGUMENT = 2,
  ADV_STATUS_SHAPE = 3,
  ADV_STATUS_CONFIG = 4,
  ADV_STATUS_IO = 5,
  ADV_STATUS_FORMAT = 6,
  ADV_STATUS_FROZEN = 7,
  ADV_STATUS_INTERNAL = 8,
} AdvStatus;

// Opaque model handle.
typedef struct AdvModel AdvModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next failing call on the same thread.
const char *adv_last_error(void);

// Library version as a static NUL-terminated string.
const char *adv_version(void);

// Builds a freshly initialized model in eval mode. `variant` is one of
// `advocacy`, `honest_advocacy`, `multi_attention`, `attention`.
//
// # Safety
// `variant` must be a NUL-terminated string and `out` a writable pointer.
enum AdvStatus adv_model_new(const char *variant,
                             size_t num_classes,
                             size_t channels,
                             size_t height,
                             size_t width,
                             uint64_t seed,
                             struct AdvModel **out);

// Loads a checkpoint written by the `advocacy` binary or [`adv_model_save`].
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum AdvStatus adv_model_load(const char *path, struct AdvModel **out);

// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum AdvStatus adv_model_save(const struct AdvModel *model, const char *path);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void adv_model_free(struct AdvModel *model);

// Number of classes, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t adv_model_num_classes(const struct AdvModel *model);

// Writes `batch * num_classes` log-probabilities to `out`.
//
// # Safety
// `images` must hold `batch * C * H * W` floats and `out` room for
// `batch * num_classes`.
enum AdvStatus adv_model_log_probs(const struct AdvModel *model,
                                   const float *images,
                                   size_t batch,
                                   float *out);

// Writes one 1-based predicted class per image to `out`.
//
// # Safety
// `images` must hold `batch * C * H * W` floats and `out` room for `batch`.
enum AdvStatus adv_model_predict(const struct AdvModel *model,
                                 const float *images,
                                 size_t batch,
                                 uint32_t *out);

// Writes the attention map of module `module` (1-based) for one image:
// `C * H * W` floats in `[0, 1]`.
//
// # Safety
// `image` must hold `C * H * W` floats and `out` room for as many.
enum AdvStatus adv_model_attention(const struct AdvModel *model,
                                   const float *image,
                                   size_t module,
                                   float *out);

// Percent reduction in error rate of `acc_model` relative to `acc_baseline`.
//
// # Safety
// `out` must be a writable pointer.
enum AdvStatus adv_error_reduction(double acc_model, double acc_baseline, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADVOCACY_H */
