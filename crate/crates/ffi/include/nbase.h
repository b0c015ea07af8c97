#ifndef NBASE_H
#define NBASE_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum NbStatus {
  NB_STATUS_OK = 0,
  NB_STATUS_NULL_POINTER = 1,
  NB_STATUS_INVALID_UTF8 = 2,
  NB_STATUS_IO = 3,
  NB_STATUS_PARSE = 4,
  NB_STATUS_INVALID = 5,
  NB_STATUS_PANIC = 6,
} NbStatus;

/**
 * Model plus corpus plus bucket index.
 */
typedef struct NbBase NbBase;

/**
 * Tokenized corpus.
 */
typedef struct NbCorpus NbCorpus;

/**
 * Trained twin model.
 */
typedef struct NbModel NbModel;

/**
 * Generation parameters. Zero fields take the library defaults.
 */
typedef struct NbGenerateOptions {
  uint64_t seed;
  size_t length_segments;
  size_t top_k;
} NbGenerateOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null after a success.
 * Valid until the next call from the same thread.
 */
const char *nb_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *nb_version(void);

/**
 * Loads a corpus JSON file written by `nbase ingest`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum NbStatus nb_corpus_load(const char *path, struct NbCorpus **out);

/**
 * # Safety
 * `corpus` must come from `nb_corpus_load` and not be freed twice. Null is ignored.
 */
void nb_corpus_free(struct NbCorpus *corpus);

/**
 * Number of segments, or 0 for a null handle.
 *
 * # Safety
 * `corpus` must be null or a live handle.
 */
size_t nb_corpus_segment_count(const struct NbCorpus *corpus);

/**
 * Loads a checkpoint written by `nbase train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum NbStatus nb_model_load(const char *path, struct NbModel **out);

/**
 * # Safety
 * `model` must come from `nb_model_load` and not be freed twice. Null is ignored.
 */
void nb_model_free(struct NbModel *model);

/**
 * Number of buckets H, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t nb_model_bucket_count(const struct NbModel *model);

/**
 * Indexes `corpus` with `model`. Both inputs are copied and stay owned by
 * the caller.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum NbStatus nb_base_build(const struct NbModel *model,
                            const struct NbCorpus *corpus,
                            struct NbBase **out);

/**
 * Loads a base file written by `nbase build`, with its corpus and model.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum NbStatus nb_base_load(const char *path, struct NbBase **out);

/**
 * # Safety
 * `base` must come from `nb_base_build` or `nb_base_load` and not be freed
 * twice. Null is ignored.
 */
void nb_base_free(struct NbBase *base);

/**
 * Number of indexed segments, or 0 for a null handle.
 *
 * # Safety
 * `base` must be null or a live handle.
 */
size_t nb_base_segment_count(const struct NbBase *base);

/**
 * Copies the bucket occupancy histogram into `counts` (capacity `len`) and
 * stores the bucket count in `buckets`. Fails with `NB_STATUS_INVALID` when
 * `len` is too small; `buckets` is still written.
 *
 * # Safety
 * `counts` must point to `len` writable elements; `buckets` must be writable.
 */
enum NbStatus nb_base_histogram(const struct NbBase *base,
                                size_t *counts,
                                size_t len,
                                size_t *buckets);

/**
 * Generates one song and returns it as Standard MIDI File bytes. Release
 * the buffer with `nb_bytes_free(*data, *len)`.
 *
 * # Safety
 * Handles and out pointers must be valid.
 */
enum NbStatus nb_generate_midi(const struct NbBase *base,
                               struct NbGenerateOptions options,
                               uint8_t **data,
                               size_t *len);

/**
 * Releases a buffer returned by `nb_generate_midi`.
 *
 * # Safety
 * `data` and `len` must be exactly what the library returned. Null is ignored.
 */
void nb_bytes_free(uint8_t *data, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NBASE_H */
