#ifndef DUALDEC_H
#define DUALDEC_H

/* Generated by cbindgen. Do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DdStatus {
  DD_STATUS_OK = 0,
  DD_STATUS_NULL_POINTER = 1,
  DD_STATUS_INVALID_UTF8 = 2,
  DD_STATUS_INVALID_ARGUMENT = 3,
  DD_STATUS_CONFIG = 4,
  DD_STATUS_CHECKPOINT = 5,
  DD_STATUS_IO = 6,
  DD_STATUS_INTERNAL = 7,
  DD_STATUS_PANIC = 8,
} DdStatus;

/*
 A loaded checkpoint with its subword models.
 */
typedef struct DdModel DdModel;

/*
 Result of one dual translation.
 */
typedef struct DdTranslation DdTranslation;

/*
 Search settings exposed to C. Anything not listed keeps the library default.
 */
typedef struct DdSearchOptions {
  uint32_t beam_size;
  uint32_t max_len;
  double length_penalty_alpha;
} DdSearchOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failed call on this thread, or null if none.
 The pointer stays valid until the next failing call on the same thread.
 */
const char *dd_last_error_message(void);

/*
 Library defaults: beam 4, at most 100 tokens per side, alpha 1.
 */
struct DdSearchOptions dd_search_options_default(void);

/*
 Loads a checkpoint written by `dualdec train` or `dualdec pretrain`.

 # Safety
 `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum DdStatus dd_model_load(const char *path, struct DdModel **out);

/*
 # Safety
 `model` must come from [`dd_model_load`] and not be used afterwards.
 */
void dd_model_free(struct DdModel *model);

/*
 Number of decoders, 1 or 2. Returns 0 for a null handle.

 # Safety
 `model` must be null or a live handle.
 */
uint32_t dd_model_num_decoders(const struct DdModel *model);

/*
 Translates one sentence with synchronous beam search over both decoders.
 `tag` and `options` may be null.

 # Safety
 Pointers must be null or valid; strings NUL-terminated.
 */
enum DdStatus dd_translate(const struct DdModel *model,
                           const char *source,
                           const char *tag,
                           const struct DdSearchOptions *options,
                           struct DdTranslation **out);

/*
 Output text of decoder `side`, or null if the side does not exist.
 Owned by the translation handle.

 # Safety
 `t` must be null or a live handle.
 */
const char *dd_translation_text(const struct DdTranslation *t, uint32_t side);

/*
 Length-normalized joint score; NaN for a null handle.

 # Safety
 `t` must be null or a live handle.
 */
double dd_translation_score(const struct DdTranslation *t);

/*
 # Safety
 `t` must come from [`dd_translate`] and not be used afterwards.
 */
void dd_translation_free(struct DdTranslation *t);

/*
 Corpus BLEU-4 (0 to 100) over `n` whitespace-tokenized sentence pairs.

 # Safety
 `hyps` and `refs` must point to `n` NUL-terminated strings each.
 */
enum DdStatus dd_bleu(const char *const *hyps, const char *const *refs, uintptr_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DUALDEC_H */
