#ifndef DIVSEG_H
#define DIVSEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum DsegStatus {
  DSEG_STATUS_OK = 0,
  DSEG_STATUS_NULL_POINTER = 1,
  DSEG_STATUS_INVALID_ARGUMENT = 2,
  DSEG_STATUS_CONFIG = 3,
  DSEG_STATUS_PARSE = 4,
  DSEG_STATUS_IO = 5,
  DSEG_STATUS_NUMERIC = 6,
  DSEG_STATUS_CONTRACT = 7,
  DSEG_STATUS_BUFFER_TOO_SMALL = 8,
  DSEG_STATUS_PANIC = 9,
} DsegStatus;

// Divergence selector mirroring the core enum.
typedef enum DsegDivergence {
  DSEG_DIVERGENCE_HOLDER = 0,
  DSEG_DIVERGENCE_TOTAL_VARIATION = 1,
  DSEG_DIVERGENCE_SQUARED_HELLINGER = 2,
  DSEG_DIVERGENCE_KULLBACK_LEIBLER = 3,
  DSEG_DIVERGENCE_NEYMAN_CHI2 = 4,
  DSEG_DIVERGENCE_JENSEN_SHANNON = 5,
} DsegDivergence;

// Evaluation region: WT = {1,2,3}, TC = {2,3}, ET = {3}.
typedef enum DsegRegion {
  DSEG_REGION_WHOLE_TUMOR = 0,
  DSEG_REGION_TUMOR_CORE = 1,
  DSEG_REGION_ENHANCING_TUMOR = 2,
} DsegRegion;

// Opaque model handle.
typedef struct DsegModel DsegModel;

// Network shape. `channels` points to `levels` widths.
typedef struct DsegArch {
  const size_t *channels;
  size_t levels;
  size_t classes;
  size_t groups;
} DsegArch;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL after a success.
// The pointer stays valid until the next call into this library on the
// same thread.
const char *dseg_last_error(void);

// Library version as a static NUL-terminated string.
const char *dseg_version(void);

// Hölder pseudo-divergence of two probability vectors of length `n`.
//
// # Safety
// `p` and `q` must point to `n` readable doubles; `out` must be writable.
enum DsegStatus dseg_hpd(const double *p, const double *q, size_t n, double alpha, double *out);

// Any supported divergence D(p : q). `alpha` is used only for Hölder.
//
// # Safety
// `p` and `q` must point to `n` readable doubles; `out` must be writable.
enum DsegStatus dseg_divergence(enum DsegDivergence kind,
                                const double *p,
                                const double *q,
                                size_t n,
                                double alpha,
                                double *out);

// Dice similarity of two label maps of `n` voxels over `region`.
// `both_empty` (optional) receives 1 when the region is absent from both.
//
// # Safety
// `pred` and `gt` must point to `n` readable bytes; `out` must be writable
// and `both_empty` either NULL or writable.
enum DsegStatus dseg_dsc(const uint8_t *pred,
                         const uint8_t *gt,
                         size_t n,
                         enum DsegRegion region,
                         double *out,
                         uint8_t *both_empty);

// Synthesises one phantom. `volumes` receives the four modalities
// back to back (Fl, T2, T1c, T1), each `d*h*w` voxels; `labels` receives
// the class map.
//
// # Safety
// `volumes` must hold `4*d*h*w` doubles and `labels` `d*h*w` bytes.
enum DsegStatus dseg_phantom(uint64_t seed,
                             size_t d,
                             size_t h,
                             size_t w,
                             double *volumes,
                             uint8_t *labels);

// Reads a volume file into `out` (capacity `cap` doubles) and its
// `[C, D, H, W]` extents into `dims`. With `out` NULL only `dims` is filled,
// which lets the caller size the buffer.
//
// # Safety
// `path` must be a NUL-terminated string, `dims` must hold 4 writable
// `size_t`, and `out` must be NULL or hold `cap` writable doubles.
enum DsegStatus dseg_volume_read(const char *path, double *out, size_t cap, size_t *dims);

// Writes a `[C, D, H, W]` float volume (stored as f32).
//
// # Safety
// `path` must be a NUL-terminated string, `dims` 4 readable `size_t`, and
// `data` the product of `dims` readable doubles.
enum DsegStatus dseg_volume_write(const char *path, const double *data, const size_t *dims);

// Creates a freshly initialised model.
//
// # Safety
// `arch` must be a valid pointer and `out` writable.
enum DsegStatus dseg_model_new(const struct DsegArch *arch, uint64_t seed, struct DsegModel **out);

// Loads a checkpoint. The architecture must match the one it was saved with.
//
// # Safety
// `path` must be a NUL-terminated string, `arch` valid and `out` writable.
enum DsegStatus dseg_model_load(const char *path,
                                const struct DsegArch *arch,
                                struct DsegModel **out);

// Saves a model checkpoint.
//
// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum DsegStatus dseg_model_save(const struct DsegModel *model, const char *path);

// Releases a model handle. NULL is ignored.
//
// # Safety
// `model` must be NULL or a handle not yet freed.
void dseg_model_free(struct DsegModel *model);

// Number of scalar parameters, or 0 for NULL.
//
// # Safety
// `model` must be NULL or a live handle.
size_t dseg_model_param_count(const struct DsegModel *model);

// Number of output classes, or 0 for NULL.
//
// # Safety
// `model` must be NULL or a live handle.
size_t dseg_model_classes(const struct DsegModel *model);

// Runs the model on the modalities selected by `mask_bits` (bit 0 = Fl,
// bit 1 = T2, bit 2 = T1c, bit 3 = T1). `volumes` holds all four
// modalities back to back; masked-off ones are ignored and may hold
// anything. `logits` receives `classes*d*h*w` values and `labels`
// (optional) the per-voxel argmax.
//
// # Safety
// `volumes` must hold `4*d*h*w` readable doubles, `logits` `logits_len`
// writable doubles, and `labels` be NULL or hold `d*h*w` writable bytes.
enum DsegStatus dseg_model_predict(const struct DsegModel *model,
                                   const double *volumes,
                                   size_t d,
                                   size_t h,
                                   size_t w,
                                   uint8_t mask_bits,
                                   double *logits,
                                   size_t logits_len,
                                   uint8_t *labels);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIVSEG_H */
