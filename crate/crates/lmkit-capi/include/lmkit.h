/* C interface to the lmkit n-gram language model toolkit. */

#pragma once

/* Generated with cbindgen:0.27.0 */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. Anything but `LM_STATUS_OK` leaves a
 * message retrievable via `lm_last_error`.
 */
typedef enum LmStatus {
  LM_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  LM_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  LM_STATUS_INVALID_UTF8 = 2,
  /**
   * File could not be opened, read, or written.
   */
  LM_STATUS_IO = 3,
  /**
   * Model file is not valid ARPA text.
   */
  LM_STATUS_PARSE = 4,
  /**
   * The operation itself failed (bad parameter, degenerate model, ...).
   */
  LM_STATUS_COMPUTE = 5,
  /**
   * An internal panic was caught at the boundary.
   */
  LM_STATUS_PANIC = 6,
} LmStatus;

/**
 * Opaque backoff language model. Create with `lm_model_read`; destroy with
 * `lm_model_free`.
 */
typedef struct LmModel LmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing this thread's most recent failure. The pointer stays
 * valid until the next failing call on the same thread; never free it.
 */
const char *lm_last_error(void);

/**
 * Loads an ARPA model from `path` into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum LmStatus lm_model_read(const char *path, struct LmModel **out);

/**
 * Serializes the model as ARPA text at `path`.
 *
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum LmStatus lm_model_write(const struct LmModel *model, const char *path);

/**
 * Releases a model handle. Null is a no-op; a handle must not be used after.
 */
void lm_model_free(struct LmModel *model);

/**
 * Highest n-gram order of the model, or 0 when the handle is null.
 */
uint32_t lm_model_order(const struct LmModel *model);

/**
 * Number of entries stored at `order` (1-based), or 0 when out of range.
 */
uint64_t lm_model_entry_count(const struct LmModel *model, uint32_t order);

/**
 * Conditional log10 probability of `word` after `context` (an array of
 * `context_len` token strings, oldest first). Out-of-vocabulary tokens are
 * scored through `<unk>`; longer contexts than the model uses are truncated.
 *
 * # Safety
 * `context` must point to `context_len` NUL-terminated strings (it may be
 * null only when `context_len` is 0); `word` and `out_log10_prob` must be
 * valid.
 */
enum LmStatus lm_model_query(const struct LmModel *model,
                             const char *const *context,
                             uintptr_t context_len,
                             const char *word,
                             double *out_log10_prob);

/**
 * Prunes the model at relative-entropy threshold `theta` into a new handle.
 *
 * # Safety
 * `model` must come from this library; `out` must be a valid pointer.
 */
enum LmStatus lm_model_prune(const struct LmModel *model, double theta, struct LmModel **out);

/**
 * Scores a segmented corpus file (UTF-8, one sentence per line, tokens
 * space-separated). Writes perplexity, predicted-token count, and
 * out-of-vocabulary count through the out pointers (each may be null).
 *
 * # Safety
 * `model` must come from this library; `corpus_path` must be NUL-terminated.
 */
enum LmStatus lm_model_perplexity_file(const struct LmModel *model,
                                       const char *corpus_path,
                                       double *out_perplexity,
                                       uint64_t *out_tokens,
                                       uint64_t *out_oov_tokens);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus
