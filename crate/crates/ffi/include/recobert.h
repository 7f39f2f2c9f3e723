#ifndef RECOBERT_H
#define RECOBERT_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  RCB_STATUS_OK = 0,
  RCB_STATUS_NULL_POINTER = 1,
  RCB_STATUS_INVALID_UTF8 = 2,
  RCB_STATUS_INVALID_ARGUMENT = 3,
  RCB_STATUS_IO = 4,
  RCB_STATUS_NOT_FOUND = 5,
  RCB_STATUS_MISMATCH = 6,
  RCB_STATUS_PANIC = 99,
} RcbStatus;

typedef struct RcbCatalog RcbCatalog;

/**
 * A checkpoint together with its vocabulary and encoding options.
 */
typedef struct RcbModel RcbModel;

typedef struct RcbRanking RcbRanking;

typedef struct RcbStore RcbStore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null after a
 * success. The pointer stays valid until the next call on the same thread.
 */
const char *rcb_last_error(void);

/**
 * Loads a checkpoint and the vocabulary it was trained with. `title_cap`
 * of 0 selects the default.
 *
 * # Safety
 * `checkpoint_path` and `vocab_path` must be NUL-terminated strings and
 * `out` a valid pointer.
 */
RcbStatus rcb_model_load(const char *checkpoint_path,
                         const char *vocab_path,
                         uintptr_t title_cap,
                         RcbModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`rcb_model_load`] not yet freed.
 */
void rcb_model_free(RcbModel *model);

/**
 * Width of the pooled feature vectors.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
RcbStatus rcb_model_hidden(const RcbModel *model, uintptr_t *out);

/**
 * Title-description match score of one pair, in [0, 1].
 *
 * # Safety
 * `model` must be a live handle, `title` and `description` NUL-terminated
 * strings and `out` a valid pointer.
 */
RcbStatus rcb_tdm_score(const RcbModel *model,
                        const char *title,
                        const char *description,
                        double *out);

/**
 * Loads a JSONL or CSV catalog; the format follows the file extension.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
RcbStatus rcb_catalog_load(const char *path, RcbCatalog **out);

/**
 * # Safety
 * `catalog` must be null or a handle from [`rcb_catalog_load`] not yet freed.
 */
void rcb_catalog_free(RcbCatalog *catalog);

/**
 * # Safety
 * `catalog` must be a live handle and `out` a valid pointer.
 */
RcbStatus rcb_catalog_len(const RcbCatalog *catalog, uintptr_t *out);

/**
 * Embeds every catalog item with `model`.
 *
 * # Safety
 * `model` and `catalog` must be live handles and `out` a valid pointer.
 */
RcbStatus rcb_embed(const RcbModel *model, const RcbCatalog *catalog, RcbStore **out);

/**
 * # Safety
 * `store` must be a live handle and `path` a NUL-terminated string.
 */
RcbStatus rcb_store_save(const RcbStore *store, const char *path);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
RcbStatus rcb_store_load(const char *path, RcbStore **out);

/**
 * # Safety
 * `store` must be a live handle and `out` a valid pointer.
 */
RcbStatus rcb_store_len(const RcbStore *store, uintptr_t *out);

/**
 * # Safety
 * `store` must be null or a handle from [`rcb_embed`]/[`rcb_store_load`]
 * not yet freed.
 */
void rcb_store_free(RcbStore *store);

/**
 * Ranks every other catalog item for `seed_id`. `lambdas` points to four
 * weights: description cosine, title cosine and the two cross scores.
 *
 * # Safety
 * Handles must be live, `seed_id` a NUL-terminated string, `lambdas` four
 * readable doubles and `out` a valid pointer.
 */
RcbStatus rcb_rank(const RcbModel *model,
                   const RcbCatalog *catalog,
                   const RcbStore *store,
                   const char *seed_id,
                   const double *lambdas,
                   RcbRanking **out);

/**
 * # Safety
 * `ranking` must be a live handle and `out` a valid pointer.
 */
RcbStatus rcb_ranking_len(const RcbRanking *ranking, uintptr_t *out);

/**
 * Id and combined score at position `index` (0 is the best match). The id
 * pointer is owned by the ranking.
 *
 * # Safety
 * `ranking` must be a live handle; `id` and `score` valid pointers.
 */
RcbStatus rcb_ranking_get(const RcbRanking *ranking,
                          uintptr_t index,
                          const char **id,
                          double *score);

/**
 * # Safety
 * `ranking` must be null or a handle from [`rcb_rank`] not yet freed.
 */
void rcb_ranking_free(RcbRanking *ranking);

/**
 * Evaluates the whole catalog against an annotation file and returns the
 * report as a JSON string, to be released with [`rcb_string_free`].
 *
 * # Safety
 * Handles must be live, `annotations_path` a NUL-terminated string,
 * `lambdas` four readable doubles, `ks` `n_ks` readable values and `out` a
 * valid pointer.
 */
RcbStatus rcb_evaluate_json(const RcbModel *model,
                            const RcbCatalog *catalog,
                            const RcbStore *store,
                            const char *annotations_path,
                            const double *lambdas,
                            const uintptr_t *ks,
                            uintptr_t n_ks,
                            char **out);

/**
 * # Safety
 * `s` must be null or a string returned by this library not yet freed.
 */
void rcb_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RECOBERT_H */
