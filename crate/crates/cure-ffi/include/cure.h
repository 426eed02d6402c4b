#ifndef CURE_H
#define CURE_H

/* Generated by cbindgen from cure-ffi; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum CureStatus {
  CURE_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  CURE_STATUS_NULL_POINTER = 1,
  /**
   * Arguments failed validation (shape, range, class index, config).
   */
  CURE_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Filesystem error.
   */
  CURE_STATUS_IO = 3,
  /**
   * Checkpoint or dataset failed integrity checks (magic, CRC,
   * truncation, header).
   */
  CURE_STATUS_CORRUPT = 4,
  /**
   * Internal numerical or training failure.
   */
  CURE_STATUS_RUNTIME = 5,
} CureStatus;

/**
 * Opaque network handle.
 */
typedef struct CureNetwork CureNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *cure_version(void);

/**
 * Message of the last error on this thread. Valid until the next failing
 * call on the same thread. Never null.
 */
const char *cure_last_error_message(void);

/**
 * Load a checkpoint into a new network handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must point to writable
 * memory for one pointer. On success `*out` owns the handle and must be
 * released with [`cure_network_free`].
 */
enum CureStatus cure_network_load(const char *path, struct CureNetwork **out);

/**
 * Serialize a network handle to a checkpoint file (double precision).
 *
 * # Safety
 * `net` must be a live handle from this library; `path` a NUL-terminated
 * string.
 */
enum CureStatus cure_network_save(const struct CureNetwork *net, const char *path);

/**
 * Release a network handle. Null is a no-op.
 *
 * # Safety
 * `net` must be a handle returned by this library, not yet freed.
 */
void cure_network_free(struct CureNetwork *net);

/**
 * Flat input length the network expects.
 *
 * # Safety
 * `net` and `out` must be valid pointers.
 */
enum CureStatus cure_network_input_len(const struct CureNetwork *net, size_t *out);

/**
 * Number of classes of the network head.
 *
 * # Safety
 * `net` and `out` must be valid pointers.
 */
enum CureStatus cure_network_num_classes(const struct CureNetwork *net, size_t *out);

/**
 * Forward pass: writes `num_classes` logits.
 *
 * # Safety
 * `x` must point to `x_len` doubles and `logits_out` to `num_classes`
 * writable doubles.
 */
enum CureStatus cure_forward(const struct CureNetwork *net,
                             const double *x,
                             size_t x_len,
                             double *logits_out);

/**
 * Sound l-inf robustness certificate over `clamp(x +- eps, 0, 1)`.
 *
 * # Safety
 * Pointer arguments as in [`cure_forward`]; `out` receives the flag.
 */
enum CureStatus cure_certify_linf(const struct CureNetwork *net,
                                  const double *x,
                                  size_t x_len,
                                  size_t label,
                                  double eps,
                                  bool *out);

/**
 * Sound (incomplete) l-2 robustness certificate over the eps ball
 * intersected with the unit hypercube.
 *
 * # Safety
 * Pointer arguments as in [`cure_forward`]; `out` receives the flag.
 */
enum CureStatus cure_certify_l2(const struct CureNetwork *net,
                                const double *x,
                                size_t x_len,
                                size_t label,
                                double eps,
                                bool *out);

/**
 * Run a full training job from a config file, writing the run directory
 * (checkpoints, logs, manifest, eval report). Equivalent to
 * `cure train --config <path> --out <out_dir>`.
 *
 * # Safety
 * Both arguments must be NUL-terminated strings.
 */
enum CureStatus cure_train_run(const char *config_path, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CURE_H */
