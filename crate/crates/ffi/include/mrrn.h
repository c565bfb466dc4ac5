#ifndef MRRN_H
#define MRRN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MrrnStatus {
  MRRN_STATUS_OK = 0,
  /**
   * A required pointer was null.
   */
  MRRN_STATUS_NULL_ARGUMENT = 1,
  /**
   * Bad configuration or argument value.
   */
  MRRN_STATUS_INVALID_ARGUMENT = 2,
  /**
   * A caller buffer has the wrong length.
   */
  MRRN_STATUS_BUFFER_SIZE = 3,
  MRRN_STATUS_IO = 4,
  /**
   * Corrupt or incompatible checkpoint.
   */
  MRRN_STATUS_DECODE = 5,
  /**
   * The engine rejected the operation (shape mismatch, unpopulated batch-norm statistics, ...).
   */
  MRRN_STATUS_ENGINE = 6,
  /**
   * A panic was caught at the boundary.
   */
  MRRN_STATUS_INTERNAL = 7,
} MrrnStatus;

/**
 * Opaque network handle.
 */
typedef struct MrrnModel MrrnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message on this thread, or an empty string after a success.
 * The pointer stays valid until the next call into this library on the
 * same thread.
 */
const char *mrrn_last_error(void);

/**
 * Builds a network from run-config TOML text (an `[arch]` section and an
 * optional `precision`). An empty string gives the default configuration.
 *
 * # Safety
 * `config` must be a nul-terminated string and `out` a valid pointer.
 */
enum MrrnStatus mrrn_model_new(const char *config, uint64_t seed, struct MrrnModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void mrrn_model_free(struct MrrnModel *model);

/**
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum MrrnStatus mrrn_model_param_count(const struct MrrnModel *model, uint64_t *out);

/**
 * Input side length and class count of the network.
 *
 * # Safety
 * All pointers must be valid.
 */
enum MrrnStatus mrrn_model_shape(const struct MrrnModel *model,
                                 size_t *input_size,
                                 size_t *num_classes);

/**
 * Selects batch statistics (`training` nonzero) or running statistics for
 * batch normalization. Forward passes in training mode update the running
 * statistics.
 *
 * # Safety
 * `model` must be a valid handle.
 */
enum MrrnStatus mrrn_model_set_training(struct MrrnModel *model, bool training);

/**
 * Forward pass on `n` images of `S×S` floats, row-major. Writes `n·K·S·S`
 * logits in NCHW order.
 *
 * # Safety
 * `images` must hold `images_len` floats and `logits` `logits_len` floats.
 */
enum MrrnStatus mrrn_model_forward(struct MrrnModel *model,
                                   const float *images,
                                   size_t images_len,
                                   size_t n,
                                   float *logits,
                                   size_t logits_len);

/**
 * Per-pixel argmax labels for `n` images; `labels` receives `n·S·S` bytes.
 *
 * # Safety
 * `images` must hold `images_len` floats and `labels` `labels_len` bytes.
 */
enum MrrnStatus mrrn_model_predict(struct MrrnModel *model,
                                   const float *images,
                                   size_t images_len,
                                   size_t n,
                                   uint8_t *labels,
                                   size_t labels_len);

/**
 * Writes the network to a checkpoint file.
 *
 * # Safety
 * `model` must be valid and `path` nul-terminated.
 */
enum MrrnStatus mrrn_model_save(const struct MrrnModel *model, const char *path);

/**
 * Reads a checkpoint in whichever precision it was written.
 *
 * # Safety
 * `path` must be nul-terminated and `out` valid.
 */
enum MrrnStatus mrrn_model_load(const char *path, struct MrrnModel **out);

/**
 * Nonzero into `out` when both handles hold bit-identical checkpoints.
 *
 * # Safety
 * All pointers must be valid.
 */
enum MrrnStatus mrrn_model_equal(const struct MrrnModel *a, const struct MrrnModel *b, bool *out);

/**
 * Dice coefficient of `label` between two label maps of `len` pixels.
 * Both empty gives 1, exactly one empty gives 0.
 *
 * # Safety
 * `pred` and `truth` must hold `len` bytes; `out` must be valid.
 */
enum MrrnStatus mrrn_dsc(const uint8_t *pred,
                         const uint8_t *truth,
                         size_t len,
                         uint8_t label,
                         double *out);

/**
 * Generates one phantom slice with default geometry. `image` receives
 * `size·size` floats in [0, 1] and `mask` the matching labels 0..5.
 *
 * # Safety
 * `image` and `mask` must each hold `size·size` elements.
 */
enum MrrnStatus mrrn_phantom_generate(size_t size, uint64_t seed, float *image, uint8_t *mask);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MRRN_H */
