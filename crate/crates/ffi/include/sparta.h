#ifndef SPARTA_H
#define SPARTA_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum SpartaStatus {
  SPARTA_STATUS_OK = 0,
  /**
   * A required pointer was null or a string was not UTF-8.
   */
  SPARTA_STATUS_NULL_ARGUMENT = 1,
  /**
   * Invalid configuration or an out-of-range request.
   */
  SPARTA_STATUS_USAGE = 2,
  /**
   * Malformed input data or files.
   */
  SPARTA_STATUS_DATA = 3,
  /**
   * Any other failure, including I/O.
   */
  SPARTA_STATUS_RUNTIME = 4,
  /**
   * A Rust panic was caught at the boundary.
   */
  SPARTA_STATUS_PANIC = 5,
} SpartaStatus;

/**
 * A sparse delta (index set and values) bound to one base model.
 */
typedef struct SpartaDelta SpartaDelta;

/**
 * A model checkpoint.
 */
typedef struct SpartaModel SpartaModel;

/**
 * Architecture for [`sparta_model_init`].
 */
typedef struct SpartaModelConfig {
  size_t vocab_size;
  size_t hidden_dim;
  size_t num_layers;
  size_t num_heads;
  size_t num_kv_heads;
  size_t mlp_dim;
  size_t max_seq_len;
  /**
   * 0 keeps the vocabulary-sized head.
   */
  size_t num_classes;
} SpartaModelConfig;

/**
 * Training-memory accounting in bytes at 16-bit width.
 */
typedef struct SpartaMemoryReport {
  uint64_t n;
  uint64_t m;
  uint64_t fullft_train_bytes;
  uint64_t sparta_train_bytes;
  uint64_t extra_adapter_bytes;
  uint64_t storage_bytes;
  /**
   * NaN when there are no savings.
   */
  double savings_fraction;
  bool breakeven;
} SpartaMemoryReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *sparta_last_error(void);

/**
 * Creates a randomly initialized model.
 *
 * # Safety
 * `config` must point to a valid struct and `out` to writable storage.
 */
enum SpartaStatus sparta_model_init(const struct SpartaModelConfig *config,
                                    uint64_t seed,
                                    struct SpartaModel **out);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum SpartaStatus sparta_model_load(const char *path, struct SpartaModel **out);

/**
 * Writes a checkpoint file atomically.
 *
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum SpartaStatus sparta_model_save(const struct SpartaModel *model, const char *path);

/**
 * Total scalar parameters, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uint64_t sparta_model_num_scalars(const struct SpartaModel *model);

/**
 * Rows of the classification head, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t sparta_model_num_classes(const struct SpartaModel *model);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void sparta_model_free(struct SpartaModel *model);

/**
 * Draws a random index set over all sparsifiable tensors of `model` at
 * `density` and returns an all-zero delta for it.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum SpartaStatus sparta_sample_indices(const struct SpartaModel *model,
                                        double density,
                                        uint64_t seed,
                                        struct SpartaDelta **out);

/**
 * Loads a sparse-delta file and checks it against `base`.
 *
 * # Safety
 * `base` must be a live handle, `path` a NUL-terminated string, `out` writable.
 */
enum SpartaStatus sparta_delta_load(const char *path,
                                    const struct SpartaModel *base,
                                    struct SpartaDelta **out);

/**
 * Writes a sparse-delta file atomically.
 *
 * # Safety
 * `delta` must be a live handle and `path` a NUL-terminated string.
 */
enum SpartaStatus sparta_delta_save(const struct SpartaDelta *delta, const char *path);

/**
 * Number of selected scalars, or 0 for a null handle.
 *
 * # Safety
 * `delta` must be null or a live handle.
 */
size_t sparta_delta_count(const struct SpartaDelta *delta);

/**
 * Overwrites the delta values in index order. `len` must equal
 * [`sparta_delta_count`].
 *
 * # Safety
 * `delta` must be a live handle and `values` readable for `len` floats.
 */
enum SpartaStatus sparta_delta_set_values(struct SpartaDelta *delta,
                                          const float *values,
                                          size_t len);

/**
 * # Safety
 * `delta` must be null or a handle not yet freed.
 */
void sparta_delta_free(struct SpartaDelta *delta);

/**
 * Folds `delta` into a copy of `base`, producing a standalone model.
 *
 * # Safety
 * `base` and `delta` must be live handles and `out` writable.
 */
enum SpartaStatus sparta_inference_merge(const struct SpartaModel *base,
                                         const struct SpartaDelta *delta,
                                         struct SpartaModel **out);

/**
 * Classifies one token sequence. Writes `num_classes` logits to `logits`
 * when it is non-null and the argmax class to `out_class`.
 *
 * # Safety
 * `model` must be a live handle, `tokens` readable for `len` ids, `logits`
 * null or writable for `logits_len` floats, `out_class` writable.
 */
enum SpartaStatus sparta_classify(const struct SpartaModel *model,
                                  const uint32_t *tokens,
                                  size_t len,
                                  float *logits,
                                  size_t logits_len,
                                  size_t *out_class);

/**
 * Training-memory accounting for `n` scalars at density `k`.
 *
 * # Safety
 * `out` must be writable.
 */
enum SpartaStatus sparta_memory_report(uint64_t n, double density, struct SpartaMemoryReport *out);

/**
 * Fraction of full fine-tuning memory saved at density `k`. Fails with
 * `Usage` when `k ≥ 0.5`.
 *
 * # Safety
 * `out` must be writable.
 */
enum SpartaStatus sparta_savings_fraction(double density, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPARTA_H */
