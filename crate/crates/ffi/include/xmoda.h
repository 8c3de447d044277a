#ifndef XMODA_H
#define XMODA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum XmodaStatus {
  XMODA_STATUS_OK = 0,
  XMODA_STATUS_NULL_POINTER = 1,
  XMODA_STATUS_INVALID_ARGUMENT = 2,
  XMODA_STATUS_IO = 3,
  XMODA_STATUS_FORMAT = 4,
  XMODA_STATUS_SHAPE = 5,
  XMODA_STATUS_CONFIG = 6,
  XMODA_STATUS_TRAINING = 7,
  /**
   * A Rust panic was caught at the boundary.
   */
  XMODA_STATUS_INTERNAL = 8,
} XmodaStatus;

/**
 * Trained slice translator.
 */
typedef struct XmodaGenerator XmodaGenerator;

/**
 * Label map (0 background, 1 VS, 2 cochlea).
 */
typedef struct XmodaLabels XmodaLabels;

/**
 * Trained segmentation network.
 */
typedef struct XmodaSegNet XmodaSegNet;

/**
 * Intensity image.
 */
typedef struct XmodaVolume XmodaVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until
 * the next call into this library from the same thread.
 */
const char *xmoda_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *xmoda_version(void);

/**
 * New volume from `shape[0]*shape[1]*shape[2]` values, x fastest.
 *
 * # Safety
 * `shape` and `spacing` point to 3 elements; `data` to the full grid.
 */
enum XmodaStatus xmoda_volume_new(const size_t *shape,
                                  const double *spacing,
                                  const float *data,
                                  struct XmodaVolume **out);

/**
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum XmodaStatus xmoda_volume_load(const char *path, struct XmodaVolume **out);

/**
 * # Safety
 * `v` is a live handle; `path` is a NUL-terminated string.
 */
enum XmodaStatus xmoda_volume_save(const struct XmodaVolume *v, const char *path);

/**
 * Writes the grid extent to `shape[3]` and voxel size to `spacing[3]`.
 *
 * # Safety
 * `v` is a live handle; `shape` and `spacing` hold 3 elements each.
 */
enum XmodaStatus xmoda_volume_geometry(const struct XmodaVolume *v, size_t *shape, double *spacing);

/**
 * Copies the voxel values into `buf`, which must hold exactly `len` values.
 *
 * # Safety
 * `v` is a live handle; `buf` holds `len` floats.
 */
enum XmodaStatus xmoda_volume_copy_data(const struct XmodaVolume *v, float *buf, size_t len);

/**
 * # Safety
 * `v` is null or a handle not yet freed.
 */
void xmoda_volume_free(struct XmodaVolume *v);

/**
 * New label map from class ids in {0, 1, 2}, x fastest.
 *
 * # Safety
 * `shape` and `spacing` point to 3 elements; `data` to the full grid.
 */
enum XmodaStatus xmoda_labels_new(const size_t *shape,
                                  const double *spacing,
                                  const uint8_t *data,
                                  struct XmodaLabels **out);

/**
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum XmodaStatus xmoda_labels_load(const char *path, struct XmodaLabels **out);

/**
 * # Safety
 * `l` is a live handle; `path` is a NUL-terminated string.
 */
enum XmodaStatus xmoda_labels_save(const struct XmodaLabels *l, const char *path);

/**
 * # Safety
 * `l` is a live handle; `shape` holds 3 elements.
 */
enum XmodaStatus xmoda_labels_shape(const struct XmodaLabels *l, size_t *shape);

/**
 * # Safety
 * `l` is a live handle; `buf` holds `len` bytes.
 */
enum XmodaStatus xmoda_labels_copy_data(const struct XmodaLabels *l, uint8_t *buf, size_t len);

/**
 * # Safety
 * `l` is null or a handle not yet freed.
 */
void xmoda_labels_free(struct XmodaLabels *l);

/**
 * Dice of class `class_id` between two label maps on the same grid.
 *
 * # Safety
 * `a`, `b` are live handles; `out` is writable.
 */
enum XmodaStatus xmoda_dice(const struct XmodaLabels *a,
                            const struct XmodaLabels *b,
                            uint8_t class_id,
                            double *out);

/**
 * Average symmetric surface distance in mm; fails when either mask is empty.
 *
 * # Safety
 * `a`, `b` are live handles; `out` is writable.
 */
enum XmodaStatus xmoda_assd(const struct XmodaLabels *a,
                            const struct XmodaLabels *b,
                            uint8_t class_id,
                            double *out);

/**
 * Union of `n` label maps; VS wins over cochlea.
 *
 * # Safety
 * `maps` points to `n` live handles; `out` is writable.
 */
enum XmodaStatus xmoda_fuse_union(const struct XmodaLabels *const *maps,
                                  size_t n,
                                  struct XmodaLabels **out);

/**
 * Keeps only the largest 26-connected component of `class_id`.
 *
 * # Safety
 * `l` is a live handle; `out` is writable.
 */
enum XmodaStatus xmoda_largest_component(const struct XmodaLabels *l,
                                         uint8_t class_id,
                                         struct XmodaLabels **out);

/**
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum XmodaStatus xmoda_segnet_load(const char *path, struct XmodaSegNet **out);

/**
 * Segments a preprocessed ROI image.
 *
 * # Safety
 * `net`, `v` are live handles; `out` is writable.
 */
enum XmodaStatus xmoda_segnet_predict(const struct XmodaSegNet *net,
                                      const struct XmodaVolume *v,
                                      struct XmodaLabels **out);

/**
 * # Safety
 * `net` is null or a handle not yet freed.
 */
void xmoda_segnet_free(struct XmodaSegNet *net);

/**
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum XmodaStatus xmoda_generator_load(const char *path, struct XmodaGenerator **out);

/**
 * Translates a [0, 1] volume slice by slice along `axis`.
 *
 * # Safety
 * `g`, `v` are live handles; `out` is writable.
 */
enum XmodaStatus xmoda_generator_translate(const struct XmodaGenerator *g,
                                           const struct XmodaVolume *v,
                                           size_t axis,
                                           struct XmodaVolume **out);

/**
 * # Safety
 * `g` is null or a handle not yet freed.
 */
void xmoda_generator_free(struct XmodaGenerator *g);

/**
 * Phantom subject `index` of the default cohort with `seed`: modality A,
 * modality B and labels.
 *
 * # Safety
 * All three outputs are writable.
 */
enum XmodaStatus xmoda_phantom_subject(uint64_t seed,
                                       size_t index,
                                       struct XmodaVolume **out_a,
                                       struct XmodaVolume **out_b,
                                       struct XmodaLabels **out_labels);

/**
 * Runs the whole pipeline described by a TOML configuration file.
 *
 * # Safety
 * Both arguments are NUL-terminated strings.
 */
enum XmodaStatus xmoda_run_pipeline(const char *config_path, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* XMODA_H */
