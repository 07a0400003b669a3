#ifndef IPLFORGE_H
#define IPLFORGE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum IplStatus {
  IPL_STATUS_OK = 0,
  IPL_STATUS_NULL_ARGUMENT = 1,
  IPL_STATUS_INVALID_UTF8 = 2,
  IPL_STATUS_INVALID_ARGUMENT = 3,
  IPL_STATUS_BUFFER_TOO_SMALL = 4,
  IPL_STATUS_IO = 5,
  IPL_STATUS_CHECKPOINT = 6,
  IPL_STATUS_VOCAB = 7,
  IPL_STATUS_DECODE = 8,
  IPL_STATUS_METRIC = 9,
  IPL_STATUS_LOSS = 10,
  IPL_STATUS_PANIC = 11,
} IplStatus;

/**
 * Opaque trained model.
 */
typedef struct IplModel IplModel;

/**
 * Opaque tokenizer vocabulary.
 */
typedef struct IplVocab IplVocab;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *ipl_last_error(void);

/**
 * Frees a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void ipl_string_free(char *s);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum IplStatus ipl_model_load(const char *path, struct IplModel **out);

/**
 * # Safety
 * `model` must come from `ipl_model_load` and not have been freed.
 */
void ipl_model_free(struct IplModel *model);

/**
 * Number of labels (excluding blank) the model predicts.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
size_t ipl_model_vocab_size(const struct IplModel *model);

/**
 * Feature dimension the model expects.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
size_t ipl_model_feature_dim(const struct IplModel *model);

/**
 * Loads a vocabulary file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum IplStatus ipl_vocab_load(const char *path, struct IplVocab **out);

/**
 * # Safety
 * `vocab` must come from `ipl_vocab_load` and not have been freed.
 */
void ipl_vocab_free(struct IplVocab *vocab);

/**
 * Labels excluding blank, i.e. the model vocab size this vocabulary needs.
 *
 * # Safety
 * `vocab` must be a live handle or null.
 */
size_t ipl_vocab_label_count(const struct IplVocab *vocab);

/**
 * Encodes `text` into token ids. `*out_len` always receives the required
 * length; if it exceeds `capacity`, nothing is written to `out_ids` and
 * `BufferTooSmall` is returned.
 *
 * # Safety
 * `out_ids` must have room for `capacity` ids (may be null if 0).
 */
enum IplStatus ipl_vocab_encode(const struct IplVocab *vocab,
                                const char *text,
                                uint32_t *out_ids,
                                size_t capacity,
                                size_t *out_len);

/**
 * Decodes token ids to text.
 *
 * # Safety
 * `ids` must point to `len` ids; `out` must be writable.
 */
enum IplStatus ipl_vocab_decode(const struct IplVocab *vocab,
                                const uint32_t *ids,
                                size_t len,
                                char **out);

/**
 * Greedy-decodes a row-major `frames × dim` feature matrix.
 *
 * # Safety
 * `features` must point to `frames * dim` floats; out-pointers must be
 * writable (`out_certainty` may be null).
 */
enum IplStatus ipl_transcribe(const struct IplModel *model,
                              const struct IplVocab *vocab,
                              const float *features,
                              size_t frames,
                              size_t dim,
                              char **out_text,
                              double *out_certainty);

/**
 * Corpus WER over `n` reference/hypothesis pairs.
 *
 * # Safety
 * `refs` and `hyps` must each point to `n` NUL-terminated strings.
 */
enum IplStatus ipl_corpus_wer(const char *const *refs,
                              const char *const *hyps,
                              size_t n,
                              double *out);

/**
 * Relative WER reduction in percent.
 *
 * # Safety
 * `out` must be writable.
 */
enum IplStatus ipl_werr(double wer_reference, double wer_model, double *out);

/**
 * Transducer negative log-likelihood of `labels` under a logit lattice of
 * shape `frames × (label_len + 1) × (vocab_size + 1)`, row-major, class 0
 * being blank. If `out_grad` is non-null it receives the gradient with
 * respect to the logits, same shape.
 *
 * # Safety
 * Pointers must be valid for the sizes implied above.
 */
enum IplStatus ipl_transducer_loss(const double *logits,
                                   size_t frames,
                                   size_t label_len,
                                   size_t vocab_size,
                                   const uint32_t *labels,
                                   double *out_nll,
                                   double *out_grad);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IPLFORGE_H */
