#ifndef CRRN_H
#define CRRN_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum CrrnStatus {
  CRRN_STATUS_OK = 0,
  CRRN_STATUS_NOT_FOUND = 1,
  CRRN_STATUS_FORMAT = 2,
  CRRN_STATUS_IO = 3,
  CRRN_STATUS_DIMENSION = 4,
  CRRN_STATUS_ARGUMENT = 5,
  CRRN_STATUS_CONFIG = 6,
  CRRN_STATUS_INTEGRITY = 7,
  CRRN_STATUS_NUMERIC = 8,
  CRRN_STATUS_VERSION = 9,
  CRRN_STATUS_NULL_POINTER = 10,
  CRRN_STATUS_PANIC = 11,
} CrrnStatus;

/**
 * Planar float image, values in [0, 1].
 */
typedef struct CrrnImage CrrnImage;

/**
 * Trained networks loaded from a checkpoint.
 */
typedef struct CrrnModel CrrnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *crrn_version(void);

/**
 * Copy the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length, or 0 if none.
 *
 * # Safety
 * `buf` must be NULL or point to `len` writable bytes.
 */
size_t crrn_last_error_message(char *buf, size_t len);

/**
 * Load a checkpoint written by the joint training stage.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CrrnStatus crrn_model_load(const char *path, struct CrrnModel **out);

/**
 * # Safety
 * `model` must be NULL or a handle from [`crrn_model_load`] not yet freed.
 */
void crrn_model_free(struct CrrnModel *model);

/**
 * Image from planar (`channels x height x width`) samples; channels is 1 or 3.
 *
 * # Safety
 * `data` must point to `height * width * channels` readable floats.
 */
enum CrrnStatus crrn_image_new(size_t height,
                               size_t width,
                               size_t channels,
                               const float *data,
                               struct CrrnImage **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CrrnStatus crrn_image_load(const char *path, struct CrrnImage **out);

/**
 * Write an 8-bit PNG.
 *
 * # Safety
 * `image` must be a live handle; `path` a NUL-terminated string.
 */
enum CrrnStatus crrn_image_save(const struct CrrnImage *image, const char *path);

/**
 * # Safety
 * `image` must be a live handle; the out pointers must be NULL or writable.
 */
enum CrrnStatus crrn_image_dims(const struct CrrnImage *image,
                                size_t *height,
                                size_t *width,
                                size_t *channels);

/**
 * Planar samples, valid until the handle is freed. NULL for a NULL handle.
 *
 * # Safety
 * `image` must be NULL or a live handle.
 */
const float *crrn_image_data(const struct CrrnImage *image);

/**
 * # Safety
 * `image` must be NULL or a live handle not yet freed.
 */
void crrn_image_free(struct CrrnImage *image);

/**
 * Separate `mixture` into background, reflection and a one-channel
 * background gradient, each at the input resolution. Without
 * `auto_resize` the input sides must be multiples of 32.
 *
 * # Safety
 * `model` and `mixture` must be live handles; the out pointers writable.
 */
enum CrrnStatus crrn_model_predict(const struct CrrnModel *model,
                                   const struct CrrnImage *mixture,
                                   bool auto_resize,
                                   struct CrrnImage **background,
                                   struct CrrnImage **reflection,
                                   struct CrrnImage **gradient);

/**
 * Mean SSIM with the default window.
 *
 * # Safety
 * `a`, `b` must be live handles; `out` writable.
 */
enum CrrnStatus crrn_ssim(const struct CrrnImage *a, const struct CrrnImage *b, double *out);

/**
 * Mean structure index (SSIM without the luminance term).
 *
 * # Safety
 * `a`, `b` must be live handles; `out` writable.
 */
enum CrrnStatus crrn_si(const struct CrrnImage *a, const struct CrrnImage *b, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CRRN_H */
