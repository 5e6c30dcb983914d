#ifndef DPA_H
#define DPA_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result codes.
typedef enum DpaStatus {
  DPA_STATUS_OK = 0,
  DPA_STATUS_NULL_ARGUMENT = 1,
  DPA_STATUS_INVALID_ARGUMENT = 2,
  DPA_STATUS_SHAPE_MISMATCH = 3,
  DPA_STATUS_CONFIG_INVALID = 4,
  DPA_STATUS_CHECKPOINT_MISMATCH = 5,
  DPA_STATUS_IO = 6,
  DPA_STATUS_FORMAT = 7,
  DPA_STATUS_NO_VALID_MATCH = 8,
  DPA_STATUS_NUMERIC_ERROR = 9,
  DPA_STATUS_PANIC = 10,
} DpaStatus;

// Attention units inserted by `dpa_model_new`.
typedef enum DpaAttention {
  DPA_ATTENTION_NONE = 0,
  DPA_ATTENTION_DUAL = 1,
  DPA_ATTENTION_CHANNEL_ONLY = 2,
  DPA_ATTENTION_SPATIAL_ONLY = 3,
} DpaAttention;

typedef enum DpaPoolKind {
  DPA_POOL_KIND_AVG = 0,
  DPA_POOL_KIND_MIN = 1,
  DPA_POOL_KIND_GEM = 2,
  DPA_POOL_KIND_SOFT = 3,
} DpaPoolKind;

typedef enum DpaPoolAxis {
  DPA_POOL_AXIS_SPATIAL = 0,
  DPA_POOL_AXIS_CHANNEL = 1,
} DpaPoolAxis;

// Opaque model handle.
typedef struct DpaModel DpaModel;

// Retrieval metrics of one evaluation.
typedef struct DpaMetrics {
  double map;
  double rank1;
  double rank5;
  double rank10;
  double rank20;
  double minp;
} DpaMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null after a
// successful call. Valid until the next call on the same thread.
const char *dpa_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *dpa_version(void);

// Builds an untrained model with the default backbone: four stages,
// attention (if any) after the third, `height`×`width` inputs.
// `attention` is a `DpaAttention` value.
//
// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum DpaStatus dpa_model_new(size_t height,
                             size_t width,
                             size_t num_classes,
                             uint32_t attention,
                             uint64_t seed,
                             struct DpaModel **out);

// Loads a checkpoint written by `dpa train`.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum DpaStatus dpa_model_load(const char *path, struct DpaModel **out);

// Releases a handle; null is ignored.
//
// # Safety
// `model` must be null or a handle from this library not yet freed.
void dpa_model_free(struct DpaModel *model);

// Embedding width of `model`.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum DpaStatus dpa_model_embed_dim(const struct DpaModel *model, size_t *out);

// Expected input height and width.
//
// # Safety
// `model` must be a live handle; `height` and `width` writable.
enum DpaStatus dpa_model_input_size(const struct DpaModel *model, size_t *height, size_t *width);

// Eval-mode embeddings of `count` images laid out `count×3×H×W`
// (row-major, values in `[0, 1]`), written to `out` as `count×D`.
//
// # Safety
// `images` must hold `count·3·H·W` values and `out` `out_len` values.
enum DpaStatus dpa_model_embed(struct DpaModel *model,
                               const double *images,
                               size_t count,
                               double *out,
                               size_t out_len);

// Scores a `queries×gallery` row-major distance matrix.
//
// # Safety
// `distances` must hold `queries·gallery` values, the query arrays
// `queries` values, the gallery arrays `gallery` values; `out` writable.
enum DpaStatus dpa_evaluate(const double *distances,
                            size_t queries,
                            size_t gallery,
                            const size_t *query_ids,
                            const size_t *query_cams,
                            const size_t *gallery_ids,
                            const size_t *gallery_cams,
                            bool cross_camera_filter,
                            struct DpaMetrics *out);

// Pools an `n×c×h×w` buffer. Spatial pooling writes `n·c` values, channel
// pooling `n·h·w`. `kind` is a `DpaPoolKind`, `axis` a `DpaPoolAxis`;
// `alpha` is read for GeM only.
//
// # Safety
// `x` must hold `n·c·h·w` values and `out` `out_len` values.
enum DpaStatus dpa_pool(const double *x,
                        size_t n,
                        size_t c,
                        size_t h,
                        size_t w,
                        uint32_t kind,
                        double alpha,
                        uint32_t axis,
                        double *out,
                        size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DPA_H */
