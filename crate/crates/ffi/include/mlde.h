#ifndef MLDE_H
#define MLDE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum MldeStatus {
  MLDE_STATUS_OK = 0,
  MLDE_STATUS_NULL_POINTER = 1,
  MLDE_STATUS_INVALID_ARGUMENT = 2,
  MLDE_STATUS_IO = 3,
  MLDE_STATUS_CHECKSUM = 4,
  MLDE_STATUS_UNDEFINED_AUC = 5,
  MLDE_STATUS_NON_FINITE = 6,
  MLDE_STATUS_INTERNAL = 7,
} MldeStatus;

/**
 * A trained one-vs-rest ensemble.
 */
typedef struct MldeModel MldeModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint file into a new handle stored in `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MldeStatus mlde_model_load(const char *path, struct MldeModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`mlde_model_load`] and not be used afterwards.
 */
void mlde_model_free(struct MldeModel *model);

/**
 * Canonical index (0 = MEL ... 6 = VASC) of the model's target class.
 *
 * # Safety
 * Pointers must be valid.
 */
enum MldeStatus mlde_model_target(const struct MldeModel *model, uint32_t *out_class);

/**
 * Writes the four normalized fusion weights.
 *
 * # Safety
 * `out_weights` must point to 4 writable doubles.
 */
enum MldeStatus mlde_model_fusion_weights(const struct MldeModel *model, double *out_weights);

/**
 * Scores one interleaved RGB8 image of `height * width * 3` bytes.
 * `out_branches` may be null; otherwise it receives the 4 branch probabilities.
 *
 * # Safety
 * `pixels` must hold `height * width * 3` bytes; output pointers must be valid.
 */
enum MldeStatus mlde_model_predict_rgb8(const struct MldeModel *model,
                                        const uint8_t *pixels,
                                        size_t height,
                                        size_t width,
                                        double *out_fused,
                                        double *out_branches);

/**
 * `sum_i softmax(alpha)_i * p_i` for 4 logits and 4 probabilities.
 *
 * # Safety
 * `alpha` and `p` must point to 4 doubles; `out` must be valid.
 */
enum MldeStatus mlde_fuse(const double *alpha, const double *p, double *out);

/**
 * Gradients of `upstream * fused` with respect to alpha and p.
 *
 * # Safety
 * Every pointer must reference 4 doubles (outputs writable).
 */
enum MldeStatus mlde_fuse_gradients(const double *alpha,
                                    const double *p,
                                    double upstream,
                                    double *out_grad_alpha,
                                    double *out_grad_p);

/**
 * Mann-Whitney AUC of `n` scores with 0/1 labels.
 *
 * # Safety
 * `scores` and `labels` must hold `n` elements; `out` must be valid.
 */
enum MldeStatus mlde_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Static NUL-terminated code ("MEL", "NV", ...) of a class index, or null.
 */
const char *mlde_class_code(uint32_t index);

/**
 * Number of diagnosis classes.
 */
uint32_t mlde_class_count(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `len > 0`). Returns the full message length
 * excluding the terminator.
 *
 * # Safety
 * `buf` must point to `len` writable bytes, or be null with `len == 0`.
 */
size_t mlde_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mlde_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MLDE_H */
