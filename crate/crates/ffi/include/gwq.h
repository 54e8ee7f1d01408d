#ifndef GWQ_H
#define GWQ_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum GwqStatus {
  GWQ_STATUS_OK = 0,
  /**
   * Invalid configuration or arguments.
   */
  GWQ_STATUS_USAGE = 1,
  /**
   * Unreadable or malformed input.
   */
  GWQ_STATUS_DATA = 2,
  /**
   * An internal consistency check failed.
   */
  GWQ_STATUS_INVARIANT = 3,
  /**
   * A required pointer argument was null.
   */
  GWQ_STATUS_NULL_ARGUMENT = 4,
  GWQ_STATUS_PANIC = 5,
} GwqStatus;

/**
 * A dense model (tensor container contents).
 */
typedef struct GwqModel GwqModel;

/**
 * A quantized model.
 */
typedef struct GwqQuantized GwqQuantized;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Text of the last error on this thread, or NULL after a successful call.
 * The pointer stays valid until the next `gwq_*` call on the same thread.
 */
const char *gwq_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *gwq_version(void);

/**
 * Load a dense model from a tensor container.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum GwqStatus gwq_model_load(const char *path, struct GwqModel **out);

/**
 * Release a model handle. NULL is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void gwq_model_free(struct GwqModel *model);

/**
 * Number of tensors in a model.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum GwqStatus gwq_model_tensor_count(const struct GwqModel *model, size_t *out);

/**
 * Perplexity of the reference decoder over `tokens`.
 *
 * # Safety
 * `model` must be a live handle, `tokens` must point to `len` values and
 * `out` must be a valid pointer.
 */
enum GwqStatus gwq_model_perplexity(const struct GwqModel *model,
                                    const uint32_t *tokens,
                                    size_t len,
                                    double *out);

/**
 * Capture calibration gradients from the first `samples` windows of
 * `tokens` and write their mean to `path`.
 *
 * # Safety
 * `model` must be a live handle, `tokens` must point to `len` values and
 * `path` must be a NUL-terminated string.
 */
enum GwqStatus gwq_gradients_write(const struct GwqModel *model,
                                   const uint32_t *tokens,
                                   size_t len,
                                   size_t samples,
                                   const char *path);

/**
 * Quantize `model`. Outliers are the top `fraction` of `|g|` per layer from
 * the gradient file at `grads_path`; with a NULL path `fraction` must be 0
 * and the result is plain round-to-nearest.
 *
 * # Safety
 * `model` must be a live handle, `grads_path` NULL or a NUL-terminated
 * string, and `out` a valid pointer.
 */
enum GwqStatus gwq_quantize(const struct GwqModel *model,
                            const char *grads_path,
                            uint8_t bits,
                            uint16_t group_size,
                            double fraction,
                            struct GwqQuantized **out);

/**
 * Write a quantized model to a GWQ file (atomically).
 *
 * # Safety
 * `q` must be a live handle and `path` a NUL-terminated string.
 */
enum GwqStatus gwq_quantized_write(const struct GwqQuantized *q, const char *path);

/**
 * Read a GWQ file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum GwqStatus gwq_quantized_read(const char *path, struct GwqQuantized **out);

/**
 * Dense reconstruction of a quantized model as a new model handle.
 *
 * # Safety
 * `q` must be a live handle and `out` a valid pointer.
 */
enum GwqStatus gwq_quantized_dequantize(const struct GwqQuantized *q, struct GwqModel **out);

/**
 * Payload bits per quantized weight (codes, scales, zeros and outliers).
 *
 * # Safety
 * `q` must be a live handle and `out` a valid pointer.
 */
enum GwqStatus gwq_quantized_average_bits(const struct GwqQuantized *q, double *out);

/**
 * Release a quantized handle. NULL is ignored.
 *
 * # Safety
 * `q` must come from this library and not be used afterwards.
 */
void gwq_quantized_free(struct GwqQuantized *q);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GWQ_H */
