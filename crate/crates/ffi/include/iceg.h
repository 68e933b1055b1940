#ifndef ICEG_H
#define ICEG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum IcegStatus {
  ICEG_STATUS_OK = 0,
  ICEG_STATUS_NULL_ARGUMENT = 1,
  ICEG_STATUS_INVALID_UTF8 = 2,
  ICEG_STATUS_INVALID_PARAMETER = 3,
  ICEG_STATUS_NOT_FOUND = 4,
  ICEG_STATUS_BAD_FILE = 5,
  ICEG_STATUS_DATASET_INVALID = 6,
  ICEG_STATUS_VALIDATION_FAILED = 7,
  ICEG_STATUS_CONFLICT = 8,
  ICEG_STATUS_BACKEND_FAILED = 9,
  ICEG_STATUS_DIVERGED = 10,
  ICEG_STATUS_BUFFER_TOO_SMALL = 11,
  ICEG_STATUS_JOB_FAILED = 12,
  ICEG_STATUS_INTERNAL = 13,
  ICEG_STATUS_PANIC = 14,
} IcegStatus;

/**
 * Loaded multi-view dataset.
 */
typedef struct IcegDataset IcegDataset;

/**
 * Gaussian scene read from a checkpoint.
 */
typedef struct IcegGaussians IcegGaussians;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on the same thread.
 */
const char *iceg_last_error(void);

/**
 * # Safety
 * `s` must come from this library or be null.
 */
void iceg_string_free(char *s);

/**
 * Loads a dataset directory (`transforms.json` plus images).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum IcegStatus iceg_dataset_load(const char *path, struct IcegDataset **out);

/**
 * # Safety
 * `ds` must come from [`iceg_dataset_load`] or be null.
 */
void iceg_dataset_free(struct IcegDataset *ds);

/**
 * # Safety
 * `ds` must be a live handle; out pointers must be writable.
 */
enum IcegStatus iceg_dataset_info(const struct IcegDataset *ds,
                                  size_t *views,
                                  size_t *width,
                                  size_t *height);

/**
 * Id of view `index`, released with [`iceg_string_free`].
 *
 * # Safety
 * `ds` must be a live handle; `out` must be writable.
 */
enum IcegStatus iceg_dataset_view_id(const struct IcegDataset *ds, size_t index, char **out);

/**
 * Reads the gaussians of a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum IcegStatus iceg_gaussians_load(const char *path, struct IcegGaussians **out);

/**
 * # Safety
 * `g` must come from [`iceg_gaussians_load`] or be null.
 */
void iceg_gaussians_free(struct IcegGaussians *g);

/**
 * # Safety
 * `g` must be a live handle; `count` must be writable.
 */
enum IcegStatus iceg_gaussians_count(const struct IcegGaussians *g, size_t *count);

/**
 * Renders `g` from the camera of `view_id` into `rgb`, row-major RGB floats
 * of `width * height * 3` values.
 *
 * # Safety
 * Handles must be live; `rgb` must hold `len` floats.
 */
enum IcegStatus iceg_render(const struct IcegGaussians *g,
                            const struct IcegDataset *ds,
                            const char *view_id,
                            float *rgb,
                            size_t len);

/**
 * Segments a dataset view into at most `max_masks` regions with the
 * built-in segmenter. Writes one mask id per pixel into `labels` and the
 * number of masks into `count`.
 *
 * # Safety
 * `ds` must be live; `labels` must hold `len` values; `count` writable.
 */
enum IcegStatus iceg_segment(const struct IcegDataset *ds,
                             const char *view_id,
                             size_t max_masks,
                             uint64_t seed,
                             uint32_t *labels,
                             size_t len,
                             size_t *count);

/**
 * Sets hue (degrees) and saturation of the pixels where `mask` is non-zero,
 * keeping their value. `rgb` is modified in place.
 *
 * # Safety
 * `rgb` must hold `width * height * 3` floats and `mask` `width * height` bytes.
 */
enum IcegStatus iceg_apply_color(float *rgb,
                                 const uint8_t *mask,
                                 size_t width,
                                 size_t height,
                                 double hue,
                                 double sat);

/**
 * Mean SSIM of two RGB float images of equal size.
 *
 * # Safety
 * `a` and `b` must hold `width * height * 3` floats; `out` writable.
 */
enum IcegStatus iceg_ssim(const float *a, const float *b, size_t width, size_t height, double *out);

/**
 * Runs an edit job to completion on the project at `project_root`.
 * `plan_json` is a plan (`{"edit_image": ..., "style": {...}}`) and
 * `overrides_json` an optional object of config overrides (may be null).
 * The final job record is returned as JSON in `out_job`, also when the job
 * failed, in which case the status is `JobFailed`.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out_job` must be writable.
 */
enum IcegStatus iceg_run_edit_job(const char *project_root,
                                  const char *plan_json,
                                  const char *overrides_json,
                                  char **out_job);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ICEG_H */
