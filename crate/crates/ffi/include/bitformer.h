#ifndef BITFORMER_H
#define BITFORMER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum BfStatus {
  BF_STATUS_OK = 0,
  BF_STATUS_NULL_POINTER = 1,
  BF_STATUS_INVALID_ARGUMENT = 2,
  BF_STATUS_IO = 3,
  /**
   * Checkpoint format, version, checksum or tensor-set mismatch.
   */
  BF_STATUS_SCHEMA = 4,
  BF_STATUS_NON_FINITE = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  BF_STATUS_INTERNAL = 6,
} BfStatus;

typedef enum BfVariant {
  BF_VARIANT_BASELINE = 0,
  BF_VARIANT_BIPFT_A = 1,
  BF_VARIANT_BIPFT_B = 2,
  BF_VARIANT_FP = 3,
} BfVariant;

/**
 * Opaque model handle.
 */
typedef struct BfModel BfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call on the same thread.
 */
const char *bf_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *bf_version(void);

/**
 * Fresh model with the small default shape.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum BfStatus bf_model_new_tiny(size_t vocab,
                                enum BfVariant variant,
                                uint64_t seed,
                                struct BfModel **out);

/**
 * Loads a checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum BfStatus bf_model_load(const char *path, struct BfModel **out);

/**
 * Writes a checkpoint.
 *
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string.
 */
enum BfStatus bf_model_save(const struct BfModel *model, const char *path);

/**
 * Releases a handle. NULL is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void bf_model_free(struct BfModel *model);

/**
 * Vocabulary size, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t bf_model_vocab_size(const struct BfModel *model);

/**
 * Hidden width, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t bf_model_hidden_size(const struct BfModel *model);

/**
 * Longest accepted sequence, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t bf_model_max_seq(const struct BfModel *model);

/**
 * MLM logits for one sequence, row-major `len × vocab`, as `f32`.
 *
 * `packed` selects the XNOR-popcount path; otherwise the float simulation
 * runs. `segments` may be NULL (all zero).
 *
 * # Safety
 * `tokens` (and `segments` when non-NULL) must hold `len` entries and
 * `logits` must hold `logits_len` writable floats.
 */
enum BfStatus bf_model_forward(const struct BfModel *model,
                               const uint32_t *tokens,
                               const uint32_t *segments,
                               size_t len,
                               bool packed,
                               float *logits,
                               size_t logits_len);

/**
 * Words per packed row of `cols` bits.
 */
size_t bf_words_for(size_t cols);

/**
 * Integer accumulators of `A · Bᵀ` for ±1 matrices packed one bit per
 * entry (bit set = +1), rows padded to `bf_words_for(k)` words.
 * `a` is `m × k`, `b_t` is `n × k`, `out` receives `m × n` values.
 *
 * # Safety
 * `a`, `b_t` and `out` must point to `m·words`, `n·words` and `m·n`
 * elements respectively.
 */
enum BfStatus bf_binary_gemm(const uint64_t *a,
                             const uint64_t *b_t,
                             size_t m,
                             size_t n,
                             size_t k,
                             int32_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BITFORMER_H */
