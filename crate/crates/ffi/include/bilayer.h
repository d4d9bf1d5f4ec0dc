#ifndef BILAYER_H
#define BILAYER_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes. The first four match the command-line exit codes.
 */
typedef enum BlStatus {
  BL_STATUS_OK = 0,
  BL_STATUS_OTHER = 1,
  BL_STATUS_CONFIG = 2,
  BL_STATUS_NUMERICAL = 3,
  BL_STATUS_IO = 4,
  BL_STATUS_FORMAT = 5,
  BL_STATUS_SHAPE = 6,
  BL_STATUS_NULL_ARGUMENT = 7,
  BL_STATUS_BUFFER_TOO_SMALL = 8,
  BL_STATUS_PANIC = 9,
} BlStatus;

/*
 Opaque avatar handle.
 */
typedef struct BlAvatar BlAvatar;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Load an avatar file. On success `*out` receives a handle that must be
 released with [`bl_avatar_free`].

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum BlStatus bl_avatar_load(const char *path, struct BlAvatar **out);

/*
 Load an avatar from an in-memory copy of its file.

 # Safety
 `data` must point to `len` readable bytes and `out` be a valid pointer.
 */
enum BlStatus bl_avatar_load_bytes(const uint8_t *data, size_t len, struct BlAvatar **out);

/*
 Release a handle; null is ignored.

 # Safety
 `avatar` must come from `bl_avatar_load*` and not be used afterwards.
 */
void bl_avatar_free(struct BlAvatar *avatar);

/*
 Frame side length and number of keypoints the avatar expects.

 # Safety
 Output pointers must be valid.
 */
enum BlStatus bl_avatar_info(const struct BlAvatar *avatar,
                             uint32_t *image_size,
                             uint32_t *n_points);

/*
 Multiply-accumulates of one driven frame, texture sampling excluded.

 # Safety
 `total` must be a valid pointer.
 */
enum BlStatus bl_avatar_macs(const struct BlAvatar *avatar, uint64_t *total);

/*
 Render the frame for `n_points` keypoints given as `x0, y0, x1, y1, ...`
 in normalized `[0, 1]` image coordinates. Writes `size * size * 3` bytes
 of row-major interleaved RGB.

 # Safety
 `points` must hold `2 * n_points` floats and `rgb` `rgb_len` bytes.
 */
enum BlStatus bl_avatar_drive_rgb8(const struct BlAvatar *avatar,
                                   const float *points,
                                   size_t n_points,
                                   uint8_t *rgb,
                                   size_t rgb_len);

/*
 Like [`bl_avatar_drive_rgb8`] but writes the unclamped `(3, size, size)`
 planar float frame in `[-1, 1]`.

 # Safety
 `points` must hold `2 * n_points` floats and `out` `out_len` floats.
 */
enum BlStatus bl_avatar_drive_f32(const struct BlAvatar *avatar,
                                  const float *points,
                                  size_t n_points,
                                  float *out,
                                  size_t out_len);

/*
 Copy the calling thread's last error message, NUL-terminated and
 truncated to `len - 1` bytes. Returns the full message length.

 # Safety
 `buf` must point to `len` writable bytes or be null.
 */
size_t bl_last_error(char *buf, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BILAYER_H */
