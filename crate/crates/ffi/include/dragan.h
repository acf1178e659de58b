#ifndef DRAGAN_H
#define DRAGAN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DraganStatus {
  DRAGAN_STATUS_OK = 0,
  DRAGAN_STATUS_NULL_POINTER = 1,
  DRAGAN_STATUS_INVALID_ARGUMENT = 2,
  DRAGAN_STATUS_IO = 3,
  DRAGAN_STATUS_FORMAT = 4,
  DRAGAN_STATUS_CHECKPOINT = 5,
  DRAGAN_STATUS_INTERNAL = 6,
} DraganStatus;

// Opaque generator loaded from a checkpoint.
typedef struct DraganGenerator DraganGenerator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next call on the same thread.
const char *dragan_last_error(void);

// Loads the generator from a checkpoint file. Release it with
// [`dragan_generator_free`].
//
// # Safety
// `path` must be a nul-terminated string and `out` a valid pointer.
enum DraganStatus dragan_generator_load(const char *path, struct DraganGenerator **out);

// # Safety
// `generator` must come from [`dragan_generator_load`] and not be used
// afterwards. Null is ignored.
void dragan_generator_free(struct DraganGenerator *generator);

// Side length the generator expects for scenes and pictograms.
//
// # Safety
// `generator` must be a live handle and `out` a valid pointer.
enum DraganStatus dragan_generator_resolution(const struct DraganGenerator *generator,
                                              uintptr_t *out);

// Translates `scene` to the class shown by `pictogram`. Both inputs and
// `out` are `size x size` RGB images, `size` the generator resolution.
//
// # Safety
// Buffers must hold `3*size*size` bytes; `generator` must be a live handle.
enum DraganStatus dragan_generate(const struct DraganGenerator *generator,
                                  const uint8_t *scene,
                                  const uint8_t *pictogram,
                                  uintptr_t size,
                                  uint8_t *out);

// Renders the frontal pictogram of `class_id` into a `size x size` image.
//
// # Safety
// `out` must hold `3*size*size` bytes.
enum DraganStatus dragan_render_pictogram(uint32_t class_id, uintptr_t size, uint8_t *out);

// PSNR over pixels strictly outside the circle `(cx, cy, r)`. When the two
// images agree there, `*identical` is set to 1 and `*psnr_db` is untouched.
//
// # Safety
// `a` and `b` must hold `3*width*height` bytes; out pointers must be valid.
enum DraganStatus dragan_background_psnr(const uint8_t *a,
                                         const uint8_t *b,
                                         uintptr_t width,
                                         uintptr_t height,
                                         double cx,
                                         double cy,
                                         double r,
                                         double *psnr_db,
                                         int32_t *identical);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DRAGAN_H */
