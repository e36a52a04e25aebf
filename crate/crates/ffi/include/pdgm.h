#ifndef PDGM_H
#define PDGM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PdgmStatus {
  PDGM_STATUS_OK = 0,
  PDGM_STATUS_NULL_POINTER = 1,
  PDGM_STATUS_INVALID_ARGUMENT = 2,
  PDGM_STATUS_BUFFER_TOO_SMALL = 3,
  PDGM_STATUS_IO = 4,
  PDGM_STATUS_MODEL = 5,
  PDGM_STATUS_PANIC = 6,
} PdgmStatus;

/**
 * Opaque model handle.
 */
typedef struct PdgmModel PdgmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *pdgm_version(void);

/**
 * Message for the last failed call on this thread; empty after success.
 * Valid until the next call on the same thread.
 */
const char *pdgm_last_error(void);

/**
 * Creates a freshly initialised model. `scale` is "tiny", "small" or
 * "base".
 *
 * # Safety
 * `scale` must be a valid C string and `out` a valid pointer.
 */
enum PdgmStatus pdgm_model_new(const char *scale,
                               size_t num_classes,
                               uint64_t seed,
                               struct PdgmModel **out);

/**
 * Loads a checkpoint written by the library or the `pdgm` tool.
 *
 * # Safety
 * `path` must be a valid C string and `out` a valid pointer.
 */
enum PdgmStatus pdgm_model_load(const char *path, struct PdgmModel **out);

/**
 * # Safety
 * `model` must come from this library; `path` must be a valid C string.
 */
enum PdgmStatus pdgm_model_save(const struct PdgmModel *model, const char *path);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void pdgm_model_free(struct PdgmModel *model);

/**
 * Number of output classes, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or come from this library.
 */
size_t pdgm_model_num_classes(const struct PdgmModel *model);

/**
 * Total number of scalar parameters, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or come from this library.
 */
size_t pdgm_model_num_params(const struct PdgmModel *model);

/**
 * Classifies one cloud in inference mode. The cloud is normalized first.
 * Writes `num_classes` logits and the arg-max class.
 *
 * # Safety
 * `points` must hold `3 * num_points` doubles and `logits` `logits_len`.
 */
enum PdgmStatus pdgm_model_classify(const struct PdgmModel *model,
                                    const double *points,
                                    size_t num_points,
                                    double *logits,
                                    size_t logits_len,
                                    size_t *class_out);

/**
 * Centers a cloud at the origin and scales it into the unit sphere, in
 * place.
 *
 * # Safety
 * `points` must hold `3 * num_points` doubles.
 */
enum PdgmStatus pdgm_normalize(double *points, size_t num_points);

/**
 * Intra-block scan order over `blocks` concatenated length-`len` blocks.
 *
 * # Safety
 * `out` must hold `out_len` entries, at least `len * blocks`.
 */
enum PdgmStatus pdgm_ids_order(size_t len, size_t blocks, size_t *out, size_t out_len);

/**
 * Cross-block scan order: position `t` of every block, then `t + 1`.
 *
 * # Safety
 * `out` must hold `out_len` entries, at least `len * blocks`.
 */
enum PdgmStatus pdgm_cds_order(size_t len, size_t blocks, size_t *out, size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PDGM_H */
