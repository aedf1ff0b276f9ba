/* C interface for the lpd retrieval library. */

#ifndef LPD_H
#define LPD_H

/* Generated by cbindgen from lpd-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// ABI revision; bump on any breaking change to this surface.
#define LPD_ABI_VERSION 1

// Status codes returned by every fallible call.
typedef enum LpdStatus {
  LPD_STATUS_OK = 0,
  LPD_STATUS_NULL_ARGUMENT = 1,
  LPD_STATUS_INVALID_UTF8 = 2,
  LPD_STATUS_LOAD_FAILED = 3,
  LPD_STATUS_SHAPE_MISMATCH = 4,
  LPD_STATUS_SCORING_FAILED = 5,
  LPD_STATUS_BUFFER_TOO_SMALL = 6,
} LpdStatus;

// Opaque model handle.
typedef struct LpdModel LpdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// ABI revision of this library.
uint32_t lpd_abi_version(void);

// Message describing the most recent failure on this thread. Never NULL;
// the pointer stays valid until the next failing call on the same thread.
const char *lpd_last_error_message(void);

// Load a model checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer. On
// `Ok`, `*out` owns a model that must be released with `lpd_model_free`.
enum LpdStatus lpd_model_load(const char *path, struct LpdModel **out);

// Release a model handle. NULL is a no-op.
//
// # Safety
// `model` must be NULL or a pointer returned by `lpd_model_load` that has
// not been freed yet.
void lpd_model_free(struct LpdModel *model);

// Number of text features (k1); 0 on NULL.
//
// # Safety
// `model` must be NULL or a live handle from `lpd_model_load`.
uint32_t lpd_model_text_features(const struct LpdModel *model);

// Number of video features (k2); 0 on NULL.
//
// # Safety
// `model` must be NULL or a live handle from `lpd_model_load`.
uint32_t lpd_model_video_features(const struct LpdModel *model);

// Common-space dimension d; 0 on NULL.
//
// # Safety
// `model` must be NULL or a live handle from `lpd_model_load`.
uint32_t lpd_model_common_dim(const struct LpdModel *model);

// Write the raw input dimension of each text feature into `out`.
//
// # Safety
// `model` must be a live handle; `out` must point to at least `len` u32s,
// with `len >= lpd_model_text_features(model)`.
enum LpdStatus lpd_model_text_dims(const struct LpdModel *model, uint32_t *out, size_t len);

// Write the raw input dimension of each video feature into `out`.
//
// # Safety
// Same contract as `lpd_model_text_dims`, with `len >=
// lpd_model_video_features(model)`.
enum LpdStatus lpd_model_video_dims(const struct LpdModel *model, uint32_t *out, size_t len);

// Score one text-video pair from raw feature vectors.
//
// `text`/`video` are arrays of `k1`/`k2` pointers to f64 vectors whose
// lengths are given in `text_lens`/`video_lens` and must match the model's
// feature dims. The aggregate similarity is written to `aggregate_out`;
// when `per_space_out` is non-NULL it receives k1+k2 per-space scores.
//
// # Safety
// All pointers must satisfy the stated shapes; `aggregate_out` must be a
// valid pointer; `per_space_out` must be NULL or point to k1+k2 f64s.
enum LpdStatus lpd_score_pair(const struct LpdModel *model,
                              const double *const *text,
                              const size_t *text_lens,
                              const double *const *video,
                              const size_t *video_lens,
                              double *aggregate_out,
                              double *per_space_out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* LPD_H */
