#ifndef MUFASA_H
#define MUFASA_H

/* Generated by cbindgen from mufasa-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum MufasaStatus {
  MUFASA_STATUS_OK = 0,
  MUFASA_STATUS_NULL_ARGUMENT = 1,
  MUFASA_STATUS_INVALID_CONFIG = 2,
  MUFASA_STATUS_DATA_ERROR = 3,
  MUFASA_STATUS_NUMERIC_ERROR = 4,
  MUFASA_STATUS_BUFFER_TOO_SMALL = 5,
} MufasaStatus;

/**
 * Opaque catalog handle; item ids are cached as C strings so id pointers
 * stay valid until the handle is freed.
 */
typedef struct MufasaCatalog MufasaCatalog;

/**
 * Opaque trained-model handle.
 */
typedef struct MufasaModel MufasaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Crate version as a static C string.
 */
const char *mufasa_version(void);

/**
 * Message describing the most recent failure on this thread. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *mufasa_last_error(void);

/**
 * Load a checkpoint written by the trainer.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum MufasaStatus mufasa_model_load(const char *path, struct MufasaModel **out);

/**
 * # Safety
 * `handle` must come from [`mufasa_model_load`] and not already be freed.
 */
void mufasa_model_free(struct MufasaModel *handle);

/**
 * Embedding dimension of a loaded model.
 *
 * # Safety
 * `handle` must be a live model handle.
 */
uintptr_t mufasa_model_dim(const struct MufasaModel *handle);

/**
 * Load an item file (line-delimited records).
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum MufasaStatus mufasa_catalog_load(const char *path, struct MufasaCatalog **out);

/**
 * # Safety
 * `handle` must come from [`mufasa_catalog_load`] and not already be freed.
 */
void mufasa_catalog_free(struct MufasaCatalog *handle);

/**
 * Number of items in a loaded catalog.
 *
 * # Safety
 * `handle` must be a live catalog handle.
 */
uintptr_t mufasa_catalog_len(const struct MufasaCatalog *handle);

/**
 * Item id at a catalog index, or NULL when out of range. The pointer is
 * owned by the catalog handle.
 *
 * # Safety
 * `handle` must be a live catalog handle.
 */
const char *mufasa_catalog_item_id(const struct MufasaCatalog *handle, uintptr_t index);

/**
 * Compute the user embedding for a chronological context of item ids and
 * write it into `out_embedding` (capacity `out_len >= model dim`).
 *
 * # Safety
 * All pointers must be live; `context_ids` must hold `context_len` valid
 * NUL-terminated strings; `out_embedding` must hold `out_len` doubles.
 */
enum MufasaStatus mufasa_user_embedding(const struct MufasaModel *model,
                                        const struct MufasaCatalog *catalog,
                                        const char *const *context_ids,
                                        uintptr_t context_len,
                                        double *out_embedding,
                                        uintptr_t out_len);

/**
 * Rank the whole catalog for a context and write the top-k catalog
 * indices and scores into the caller's buffers (capacity `k` each).
 * `out_written` receives the number of entries written (min(k, catalog)).
 *
 * # Safety
 * All pointers must be live; `out_indices` and `out_scores` must hold
 * `k` elements; `context_ids` must hold `context_len` valid strings.
 */
enum MufasaStatus mufasa_rank_top_k(const struct MufasaModel *model,
                                    const struct MufasaCatalog *catalog,
                                    const char *const *context_ids,
                                    uintptr_t context_len,
                                    uintptr_t k,
                                    uintptr_t *out_indices,
                                    double *out_scores,
                                    uintptr_t *out_written);

/**
 * Run the finite-difference gradient suite; `Ok` means every component
 * passed at the given tolerance.
 */
enum MufasaStatus mufasa_gradcheck(uint64_t seed, double tolerance);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MUFASA_H */
