#ifndef ADAPT2_H
#define ADAPT2_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum Adapt2Protocol {
  ADAPT2_PROTOCOL_LINEAR_EVAL = 0,
  ADAPT2_PROTOCOL_END_TO_END = 1,
} Adapt2Protocol;

typedef enum Adapt2Status {
  ADAPT2_STATUS_OK = 0,
  ADAPT2_STATUS_NULL_ARGUMENT = 1,
  ADAPT2_STATUS_INVALID_ARGUMENT = 2,
  ADAPT2_STATUS_IO = 3,
  ADAPT2_STATUS_FORMAT = 4,
  ADAPT2_STATUS_CONFIG = 5,
  ADAPT2_STATUS_NUMERIC = 6,
  // A Rust panic was caught at the boundary.
  ADAPT2_STATUS_INTERNAL = 7,
} Adapt2Status;

// Opaque labeled or unlabeled window collection.
typedef struct Adapt2Dataset Adapt2Dataset;

// Opaque encoder, heads and normalization statistics.
typedef struct Adapt2Model Adapt2Model;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the most recent failure on this thread, or null if the
// last call succeeded. Valid until the next call on the same thread.
const char *adapt2_last_error_message(void);

// Reads a dataset file (`.csv` by extension, binary otherwise).
//
// # Safety
// `path` must be a nul-terminated string; `out` must be writable.
enum Adapt2Status adapt2_dataset_load(const char *path, struct Adapt2Dataset **out);

// Builds a dataset from `n` windows. `labels` may be null for unlabeled
// data; otherwise a negative label marks an unlabeled window. Domain ids
// must be dense from zero.
//
// # Safety
// `values` must hold `n * channels * timesteps` floats, `domains` and (if
// non-null) `labels` must hold `n` entries, and `out` must be writable.
enum Adapt2Status adapt2_dataset_from_buffers(const float *values,
                                              const int64_t *labels,
                                              const size_t *domains,
                                              size_t n,
                                              size_t channels,
                                              size_t timesteps,
                                              size_t n_classes,
                                              struct Adapt2Dataset **out);

// # Safety
// `dataset` must come from this library and not be used afterwards.
void adapt2_dataset_free(struct Adapt2Dataset *dataset);

// # Safety
// `dataset` must be a live handle; `path` a nul-terminated string.
enum Adapt2Status adapt2_dataset_save(const struct Adapt2Dataset *dataset, const char *path);

// Window count, channels, timesteps, classes and domains.
//
// # Safety
// `dataset` must be a live handle; the out pointers must be writable.
enum Adapt2Status adapt2_dataset_shape(const struct Adapt2Dataset *dataset,
                                       size_t *len,
                                       size_t *channels,
                                       size_t *timesteps,
                                       size_t *n_classes,
                                       size_t *n_domains);

// # Safety
// `path` must be a nul-terminated string; `out` must be writable.
enum Adapt2Status adapt2_model_load(const char *path, struct Adapt2Model **out);

// # Safety
// `model` must be a live handle; `path` a nul-terminated string.
enum Adapt2Status adapt2_model_save(const struct Adapt2Model *model, const char *path);

// # Safety
// `model` must come from this library and not be used afterwards.
void adapt2_model_free(struct Adapt2Model *model);

// Input channels, embedding width and classifier size (0 without one).
//
// # Safety
// `model` must be a live handle; the out pointers must be writable.
enum Adapt2Status adapt2_model_info(const struct Adapt2Model *model,
                                    size_t *in_channels,
                                    size_t *embedding_dim,
                                    size_t *n_classes);

// Writes `n * embedding_dim` floats to `out`.
//
// # Safety
// `values` must hold `n * in_channels * timesteps` floats and `out` must
// have room for `out_len` floats.
enum Adapt2Status adapt2_model_embed(const struct Adapt2Model *model,
                                     const float *values,
                                     size_t n,
                                     size_t timesteps,
                                     float *out,
                                     size_t out_len);

// Writes one predicted class per window to `out`.
//
// # Safety
// `values` must hold `n * in_channels * timesteps` floats and `out` must
// have room for `n` entries.
enum Adapt2Status adapt2_model_predict(const struct Adapt2Model *model,
                                       const float *values,
                                       size_t n,
                                       size_t timesteps,
                                       size_t *out);

// Pretext replay on every window of `shots` (labels are ignored). The
// objective is the one whose head the model carries. Returns a new model.
//
// # Safety
// `model` and `shots` must be live handles; `out` must be writable.
enum Adapt2Status adapt2_model_replay(const struct Adapt2Model *model,
                                      const struct Adapt2Dataset *shots,
                                      size_t steps,
                                      float lr,
                                      uint64_t seed,
                                      struct Adapt2Model **out);

// Trains a fresh classifier on the labeled windows of `shots`; every class
// of the dataset needs at least one. A non-positive `lr` selects the
// protocol's default rate. Returns a new model.
//
// # Safety
// `model` and `shots` must be live handles; `out` must be writable.
enum Adapt2Status adapt2_model_finetune(const struct Adapt2Model *model,
                                        const struct Adapt2Dataset *shots,
                                        enum Adapt2Protocol protocol,
                                        float lr,
                                        size_t epochs,
                                        struct Adapt2Model **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADAPT2_H */
