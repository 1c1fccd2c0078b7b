#ifndef UFA_H
#define UFA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum UfaStatus {
  UFA_STATUS_OK = 0,
  UFA_STATUS_NULL_POINTER = 1,
  UFA_STATUS_INVALID_UTF8 = 2,
  UFA_STATUS_IO = 3,
  UFA_STATUS_FORMAT = 4,
  UFA_STATUS_CONFIG = 5,
  UFA_STATUS_DECODE = 6,
  UFA_STATUS_LENGTH = 7,
  UFA_STATUS_BUFFER_TOO_SMALL = 8,
  UFA_STATUS_INTERNAL = 9,
} UfaStatus;

/**
 * Opaque model handle.
 */
typedef struct UfaModel UfaModel;

/**
 * Opaque tokenizer handle.
 */
typedef struct UfaTokenizer UfaTokenizer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message, NUL-terminated, into
 * `buf`. `*len_out` receives the message length without the terminator.
 *
 * # Safety
 * `buf` must be valid for `cap` bytes; `len_out` must be writable.
 */
enum UfaStatus ufa_last_error(char *buf, size_t cap, size_t *len_out);

/**
 * Loads a tokenizer file written by `train-tokenizer`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum UfaStatus ufa_tokenizer_load(const char *path, struct UfaTokenizer **out);

/**
 * # Safety
 * `tok` must come from `ufa_tokenizer_load` and not be used afterwards.
 */
void ufa_tokenizer_free(struct UfaTokenizer *tok);

/**
 * Vocabulary size, or 0 for a null handle.
 *
 * # Safety
 * `tok` must be null or a live handle.
 */
size_t ufa_tokenizer_vocab_size(const struct UfaTokenizer *tok);

/**
 * Encodes NUL-terminated UTF-8 `text` into token ids.
 *
 * # Safety
 * `tok` must be live; `text` NUL-terminated; `ids_out` valid for `cap`
 * ids; `len_out` writable.
 */
enum UfaStatus ufa_tokenizer_encode(const struct UfaTokenizer *tok,
                                    const char *text,
                                    uint32_t *ids_out,
                                    size_t cap,
                                    size_t *len_out);

/**
 * Decodes `n` ids into NUL-terminated UTF-8 text. `*len_out` excludes the
 * terminator, which also needs room in `buf`.
 *
 * # Safety
 * `tok` must be live; `ids` valid for `n` ids; `buf` valid for `cap`
 * bytes; `len_out` writable.
 */
enum UfaStatus ufa_tokenizer_decode(const struct UfaTokenizer *tok,
                                    const uint32_t *ids,
                                    size_t n,
                                    char *buf,
                                    size_t cap,
                                    size_t *len_out);

/**
 * Loads a model checkpoint.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` writable.
 */
enum UfaStatus ufa_model_load(const char *path, struct UfaModel **out);

/**
 * # Safety
 * `model` must come from `ufa_model_load` and not be used afterwards.
 */
void ufa_model_free(struct UfaModel *model);

/**
 * Number of scalar parameters, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t ufa_model_param_count(const struct UfaModel *model);

/**
 * Decodes a response for `n` input ids. `beam_width` 1 is greedy
 * search. The output excludes the end-of-sequence id.
 *
 * # Safety
 * `model` must be live; `input_ids` valid for `n` ids; `out_ids` valid
 * for `cap` ids; `len_out` writable.
 */
enum UfaStatus ufa_model_generate(const struct UfaModel *model,
                                  const uint32_t *input_ids,
                                  size_t n,
                                  size_t max_length,
                                  size_t beam_width,
                                  uint32_t *out_ids,
                                  size_t cap,
                                  size_t *len_out);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ufa_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UFA_H */
