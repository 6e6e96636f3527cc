/* C interface to the dynamic high-frequency convolution library. */

#ifndef DHIF_H
#define DHIF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call in this interface.
 */
typedef enum DhifStatus {
  /**
   * The call succeeded.
   */
  DHIF_STATUS_OK = 0,
  /**
   * A required pointer argument was NULL.
   */
  DHIF_STATUS_NULL_ARGUMENT = 1,
  /**
   * Arguments or configuration were rejected; see `dhif_last_error`.
   */
  DHIF_STATUS_INVALID_ARGUMENT = 2,
  /**
   * A file exists but its contents could not be parsed.
   */
  DHIF_STATUS_PARSE_ERROR = 3,
  /**
   * The operating system reported an I/O failure.
   */
  DHIF_STATUS_IO_ERROR = 4,
  /**
   * An internal invariant failed; see `dhif_last_error`.
   */
  DHIF_STATUS_INTERNAL = 5,
} DhifStatus;

/**
 * Opaque handle to a trained detector.
 */
typedef struct DhifDetector DhifDetector;

/**
 * Opaque handle to one dynamic convolution layer.
 */
typedef struct DhifOperator DhifOperator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on the calling thread, as a
 * NUL-terminated UTF-8 string. Empty until a call fails. The pointer is
 * borrowed: it stays valid until the next failing call on this thread and
 * must not be freed.
 */
const char *dhif_last_error(void);

/**
 * Library version as a static NUL-terminated string. Must not be freed.
 */
const char *dhif_version(void);

/**
 * Create a dynamic convolution layer. The plain-convolution weights are
 * Kaiming-initialized from `seed`; the filter generator starts at zero, so
 * a fresh operator computes exactly the standard convolution until
 * `dhif_operator_randomize_generator` (or training in the core library)
 * gives it nonzero weights. `nonlinearity` is one of "tanh", "sigmoid",
 * "relu", "leaky-relu", "gelu", "none".
 *
 * # Safety
 * `nonlinearity` must be NULL or point to a NUL-terminated string; `out`
 * must point to writable storage for one pointer. On success `*out` owns
 * the handle and must be released with `dhif_operator_free`.
 */
enum DhifStatus dhif_operator_new(uintptr_t in_channels,
                                  uintptr_t out_channels,
                                  uintptr_t kernel_size,
                                  uintptr_t stride,
                                  uintptr_t padding,
                                  const char *nonlinearity,
                                  uint64_t seed,
                                  struct DhifOperator **out);

/**
 * Release an operator handle. NULL is ignored.
 *
 * # Safety
 * `op` must be NULL or a pointer obtained from `dhif_operator_new` that has
 * not been freed already.
 */
void dhif_operator_free(struct DhifOperator *op);

/**
 * Fill the filter generator (projection and bias) with centered Gaussian
 * values of the given standard deviation, drawn from `seed`. With a zero
 * scale this restores the plain-convolution behavior.
 *
 * # Safety
 * `op` must be a live pointer from `dhif_operator_new`.
 */
enum DhifStatus dhif_operator_randomize_generator(struct DhifOperator *op,
                                                  double scale,
                                                  uint64_t seed);

/**
 * Output extents for a given input size: writes the number of output
 * channels, rows, and columns the operator produces for an
 * `in_channels × height × width` input.
 *
 * # Safety
 * `op` must be a live operator handle; the three out-pointers must each be
 * NULL or point to writable `usize` storage (NULL entries are skipped).
 */
enum DhifStatus dhif_operator_output_dims(const struct DhifOperator *op,
                                          uintptr_t height,
                                          uintptr_t width,
                                          uintptr_t *out_channels,
                                          uintptr_t *out_height,
                                          uintptr_t *out_width);

/**
 * Run the operator on one image. `input` holds `in_channels × height ×
 * width` values in channel-major order; `output` receives `out_channels ×
 * out_height × out_width` values (sizes from `dhif_operator_output_dims`).
 *
 * # Safety
 * `op` must be a live operator handle, `input` must point to
 * `in_channels·height·width` readable doubles, and `output` to
 * `output_len` writable doubles. The buffers must not overlap.
 */
enum DhifStatus dhif_operator_forward(const struct DhifOperator *op,
                                      const double *input,
                                      uintptr_t height,
                                      uintptr_t width,
                                      double *output,
                                      uintptr_t output_len);

/**
 * Total trainable parameters of the operator (convolution weights plus the
 * filter generator).
 *
 * # Safety
 * `op` must be a live operator handle and `out` writable.
 */
enum DhifStatus dhif_operator_param_count(const struct DhifOperator *op, uintptr_t *out);

/**
 * Load a detector from a checkpoint file written by `dhif train`.
 *
 * # Safety
 * `path` must point to a NUL-terminated string and `out` to writable
 * storage for one pointer. On success `*out` owns the handle and must be
 * released with `dhif_detector_free`.
 */
enum DhifStatus dhif_detector_load(const char *path, struct DhifDetector **out);

/**
 * Release a detector handle. NULL is ignored.
 *
 * # Safety
 * `det` must be NULL or a pointer obtained from `dhif_detector_load` that
 * has not been freed already.
 */
void dhif_detector_free(struct DhifDetector *det);

/**
 * Number of input channels the detector expects.
 *
 * # Safety
 * `det` must be a live detector handle and `out` writable.
 */
enum DhifStatus dhif_detector_input_channels(const struct DhifDetector *det, uintptr_t *out);

/**
 * Trainable parameter count and the share contributed by the dynamic
 * layers' filter generators. Either out-pointer may be NULL to skip it.
 *
 * # Safety
 * `det` must be a live detector handle; non-NULL out-pointers must be
 * writable.
 */
enum DhifStatus dhif_detector_param_counts(const struct DhifDetector *det,
                                           uintptr_t *total,
                                           uintptr_t *extra);

/**
 * Run inference on one image and write the per-pixel target probabilities.
 * `input` holds `channels × height × width` values in channel-major order
 * with `channels` equal to the detector's input channels; `output`
 * receives `height × width` probabilities in row-major order.
 *
 * # Safety
 * `det` must be a live detector handle, `input` must point to
 * `channels·height·width` readable doubles, and `output` to
 * `height·width` writable doubles. The buffers must not overlap.
 */
enum DhifStatus dhif_detector_predict(struct DhifDetector *det,
                                      const double *input,
                                      uintptr_t channels,
                                      uintptr_t height,
                                      uintptr_t width,
                                      double *output);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DHIF_H */
