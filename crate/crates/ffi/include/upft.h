#ifndef UPFT_H
#define UPFT_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum UpftStatus {
  UPFT_STATUS_OK = 0,
  UPFT_STATUS_NULL_POINTER = 1,
  UPFT_STATUS_INVALID_UTF8 = 2,
  UPFT_STATUS_VALIDATION = 3,
  UPFT_STATUS_TRANSPORT = 4,
  UPFT_STATUS_RESOURCE = 5,
  UPFT_STATUS_VERIFICATION = 6,
  UPFT_STATUS_BUFFER_TOO_SMALL = 7,
  UPFT_STATUS_OTHER = 8,
  UPFT_STATUS_PANIC = 9,
} UpftStatus;

/**
 * Opaque model handle.
 */
typedef struct UpftModel UpftModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until
 * the next call into the library from the same thread.
 */
const char *upft_last_error(void);

/**
 * Library version as a static string.
 */
const char *upft_version(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void upft_string_free(char *s);

/**
 * Loads a JSON checkpoint.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum UpftStatus upft_model_load(const char *path, struct UpftModel **out);

/**
 * Uniform model. `end_token < 0` means no end token.
 *
 * # Safety
 * `out` must be writable.
 */
enum UpftStatus upft_model_uniform(size_t vocab_size,
                                   size_t order,
                                   int64_t end_token,
                                   struct UpftModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `m` must come from this library and not have been freed.
 */
void upft_model_free(struct UpftModel *m);

/**
 * Sets the logit row following `context` (only the last `order` tokens
 * matter).
 *
 * # Safety
 * `context` must hold `context_len` ids and `logits` `n_logits` values.
 */
enum UpftStatus upft_model_set_logits(struct UpftModel *m,
                                      const uint32_t *context,
                                      size_t context_len,
                                      const double *logits,
                                      size_t n_logits);

/**
 * `log p(next | context)` at temperature 1.
 *
 * # Safety
 * `context` must hold `context_len` ids; `out` must be writable.
 */
enum UpftStatus upft_model_token_log_prob(const struct UpftModel *m,
                                          const uint32_t *context,
                                          size_t context_len,
                                          uint32_t next,
                                          double *out);

/**
 * `log p(seq | prompt)`.
 *
 * # Safety
 * Arrays must hold the given number of ids; `out` must be writable.
 */
enum UpftStatus upft_model_sequence_log_prob(const struct UpftModel *m,
                                             const uint32_t *prompt,
                                             size_t prompt_len,
                                             const uint32_t *seq,
                                             size_t seq_len,
                                             double *out);

/**
 * Greedy continuation of `prompt` for at most `max_len` tokens, written to
 * `buf`. `*out_len` always receives the full length; if it exceeds `cap`
 * nothing is written and [`UpftStatus::BufferTooSmall`] is returned.
 *
 * # Safety
 * `prompt` must hold `prompt_len` ids, `buf` room for `cap` ids, and
 * `out_len` must be writable.
 */
enum UpftStatus upft_model_greedy(const struct UpftModel *m,
                                  const uint32_t *prompt,
                                  size_t prompt_len,
                                  size_t max_len,
                                  uint32_t *buf,
                                  size_t cap,
                                  size_t *out_len);

/**
 * Exact marginal, Jensen and prefix bounds for `prompt` (synthetic
 * vocabulary text) and `answer`, as a JSON report. `epsilon <= 0` selects
 * the indicator likelihood, otherwise the smoothed one.
 *
 * # Safety
 * Strings must be nul-terminated; `out_json` must be writable.
 */
enum UpftStatus upft_verify_bounds_json(const struct UpftModel *m,
                                        const char *prompt,
                                        const char *answer,
                                        size_t max_len,
                                        double epsilon,
                                        char **out_json);

/**
 * Question text followed by the prefix instruction.
 *
 * # Safety
 * `prompt` must be nul-terminated; `out` must be writable.
 */
enum UpftStatus upft_apply_template(const char *prompt, char **out);

/**
 * Synthetic corpus as JSONL.
 *
 * # Safety
 * `out` must be writable.
 */
enum UpftStatus upft_synth_jsonl(size_t n_questions,
                                 size_t n_steps,
                                 uint32_t modulus,
                                 uint64_t seed,
                                 char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UPFT_H */
