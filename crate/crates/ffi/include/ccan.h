#ifndef CCAN_H
#define CCAN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Zero is success.
 */
typedef enum CcanStatus {
  CCAN_STATUS_OK = 0,
  CCAN_STATUS_NULL_POINTER = 1,
  CCAN_STATUS_INVALID_ARGUMENT = 2,
  CCAN_STATUS_BUFFER_TOO_SMALL = 3,
  CCAN_STATUS_IO = 4,
  CCAN_STATUS_FORMAT = 5,
  CCAN_STATUS_DATA = 6,
  CCAN_STATUS_SHAPE = 7,
  CCAN_STATUS_NUMERIC = 8,
  CCAN_STATUS_CONFIG = 9,
  CCAN_STATUS_METRIC = 10,
  CCAN_STATUS_PANIC = 11,
} CcanStatus;

/**
 * One bag of patch features with grid coordinates.
 */
typedef struct CcanBag CcanBag;

/**
 * A trained model loaded from a checkpoint.
 */
typedef struct CcanModel CcanModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint written by `ccan train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum CcanStatus ccan_model_load(const char *path, struct CcanModel **out);

/**
 * # Safety
 * `model` must come from [`ccan_model_load`] and not be used afterwards.
 * Null is ignored.
 */
void ccan_model_free(struct CcanModel *model);

/**
 * Number of probabilities [`ccan_predict`] writes: 1 for binary models,
 * the class count otherwise.
 *
 * # Safety
 * Pointers must be valid.
 */
enum CcanStatus ccan_model_num_outputs(const struct CcanModel *model, size_t *out);

/**
 * Feature width the model expects.
 *
 * # Safety
 * Pointers must be valid.
 */
enum CcanStatus ccan_model_feature_dim(const struct CcanModel *model, size_t *out);

/**
 * Reads a bag file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum CcanStatus ccan_bag_read(const char *path, struct CcanBag **out);

/**
 * Builds a bag from `n × dim` row-major features and per-token grid
 * positions on a `grid_rows × grid_cols` grid.
 *
 * # Safety
 * `features` must hold `n * dim` floats, `rows` and `cols` `n` values each.
 */
enum CcanStatus ccan_bag_from_features(const float *features,
                                       size_t n,
                                       size_t dim,
                                       const uint32_t *rows,
                                       const uint32_t *cols,
                                       uint32_t grid_rows,
                                       uint32_t grid_cols,
                                       struct CcanBag **out);

/**
 * # Safety
 * Pointers must be valid.
 */
enum CcanStatus ccan_bag_num_tokens(const struct CcanBag *bag, size_t *out);

/**
 * # Safety
 * `bag` must come from this library and not be used afterwards. Null is
 * ignored.
 */
void ccan_bag_free(struct CcanBag *bag);

/**
 * Eval-mode class probabilities averaged over stages. `probs` must have
 * room for [`ccan_model_num_outputs`] values.
 *
 * # Safety
 * `probs` must be writable for `len` doubles.
 */
enum CcanStatus ccan_predict(const struct CcanModel *model,
                             const struct CcanBag *bag,
                             double *probs,
                             size_t len);

/**
 * Per-token attention scores in `[0, 1]`, aggregated over stages.
 * `scores` must have room for [`ccan_bag_num_tokens`] values.
 *
 * # Safety
 * `scores` must be writable for `len` doubles.
 */
enum CcanStatus ccan_explain(const struct CcanModel *model,
                             const struct CcanBag *bag,
                             double *scores,
                             size_t len);

/**
 * Area under the ROC curve; ties count one half. `labels` are 0 or 1.
 *
 * # Safety
 * `scores` and `labels` must hold `n` values.
 */
enum CcanStatus ccan_auc_binary(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into the library on the same thread.
 */
const char *ccan_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ccan_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CCAN_H */
