#ifndef GSAVATAR_H
#define GSAVATAR_H

/* Generated with cbindgen:0.29.4 */

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum GsaStatus {
  GSA_STATUS_OK = 0,
  // A required pointer argument was null.
  GSA_STATUS_NULL_ARGUMENT = 1,
  // Malformed or inconsistent input: bad files, shapes, settings or text.
  GSA_STATUS_INVALID_INPUT = 2,
  // Non-finite values or a collapsed optimization.
  GSA_STATUS_NUMERICAL = 3,
  // Reading or writing a file failed.
  GSA_STATUS_IO = 4,
  // An output buffer is smaller than the image.
  GSA_STATUS_BUFFER_TOO_SMALL = 5,
  // An internal panic was caught.
  GSA_STATUS_PANIC = 6,
} GsaStatus;

// A trained avatar together with the body model it articulates on.
typedef struct GsaAvatar GsaAvatar;

// Pinhole camera with extrinsics.
typedef struct GsaCamera GsaCamera;

// Body pose, shape and expression parameters of one frame.
typedef struct GsaPose GsaPose;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, a static NUL-terminated string.
const char *gsa_version(void);

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on this thread.
const char *gsa_last_error(void);

// Write a synthetic cylinder-arm dataset with ground truth into `dir`.
//
// # Safety
// `dir` must be a NUL-terminated string.
enum GsaStatus gsa_synth(const char *dir,
                         uint32_t train_frames,
                         uint32_t test_frames,
                         uint32_t size,
                         uint64_t seed);

// Load an avatar archive directory.
//
// # Safety
// `dir` must be a NUL-terminated string and `out` writable.
enum GsaStatus gsa_avatar_load(const char *dir, struct GsaAvatar **out);

// Write `avatar` as an archive directory.
//
// # Safety
// `avatar` must be a live handle and `dir` a NUL-terminated string.
enum GsaStatus gsa_avatar_save(const struct GsaAvatar *avatar, const char *dir);

// Number of Gaussians; 0 for a null handle.
//
// # Safety
// `avatar` must be null or a live handle.
size_t gsa_avatar_num_gaussians(const struct GsaAvatar *avatar);

// # Safety
// `avatar` must be null or a handle not yet freed.
void gsa_avatar_free(struct GsaAvatar *avatar);

// Camera with identity extrinsics looking down +z.
//
// # Safety
// `out` must be writable.
enum GsaStatus gsa_camera_new(double fx,
                              double fy,
                              double cx,
                              double cy,
                              uint32_t width,
                              uint32_t height,
                              struct GsaCamera **out);

// Load a camera JSON file such as a dataset's `camera.json`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum GsaStatus gsa_camera_load(const char *path, struct GsaCamera **out);

// Image size in pixels.
//
// # Safety
// `camera` must be a live handle; `width` and `height` writable or null.
enum GsaStatus gsa_camera_size(const struct GsaCamera *camera, uint32_t *width, uint32_t *height);

// Orbit the camera by `angle` radians about its vertical axis through
// the world point `pivot[0..3]`.
//
// # Safety
// `camera` must be a live handle and `pivot` point to three doubles.
enum GsaStatus gsa_camera_orbit(struct GsaCamera *camera, const double *pivot, double angle);

// # Safety
// `camera` must be null or a handle not yet freed.
void gsa_camera_free(struct GsaCamera *camera);

// Load a pose file (`poses/<id>.json` in a dataset).
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum GsaStatus gsa_pose_load(const char *path, struct GsaPose **out);

// # Safety
// `pose` must be null or a handle not yet freed.
void gsa_pose_free(struct GsaPose *pose);

// Render `avatar` in `pose` through `camera`.
//
// Buffers are row-major and must hold `pixels >= width * height`
// entries (`color` three per pixel, interleaved RGB). `depth` and
// `alpha` may be null. `background` may be null for black.
//
// # Safety
// Handles must be live and buffers valid for the stated sizes.
enum GsaStatus gsa_render(const struct GsaAvatar *avatar,
                          const struct GsaPose *pose,
                          const struct GsaCamera *camera,
                          const double *background,
                          size_t pixels,
                          double *color,
                          double *depth,
                          double *alpha);

// Train on the dataset in `data_dir`, writing logs and the archive to
// `out_dir`. `config` is an optional flat `key = value` file. When `out`
// is non-null it receives a handle to the trained avatar.
//
// # Safety
// Strings must be NUL-terminated (`config` may be null); `out` null or
// writable.
enum GsaStatus gsa_train(const char *data_dir,
                         const char *out_dir,
                         const char *config,
                         struct GsaAvatar **out);

// Score `avatar` on the test frames of `data_dir` (the training frames if
// there are none). Writes the per-frame table to `csv_path` when it is
// non-null and the full-region means to `psnr` and `ssim` when non-null.
//
// # Safety
// `avatar` must be a live handle, strings NUL-terminated, outputs null or
// writable.
enum GsaStatus gsa_evaluate(const struct GsaAvatar *avatar,
                            const char *data_dir,
                            const char *csv_path,
                            double *psnr,
                            double *ssim);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GSAVATAR_H */
