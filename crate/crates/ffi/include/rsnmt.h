#ifndef RSNMT_H
#define RSNMT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RsnmtStatus {
  RSNMT_STATUS_OK = 0,
  RSNMT_STATUS_NULL_ARGUMENT = 1,
  RSNMT_STATUS_INVALID_UTF8 = 2,
  RSNMT_STATUS_IO = 3,
  RSNMT_STATUS_INVALID_CONFIG = 4,
  RSNMT_STATUS_INVALID_ARGUMENT = 5,
  RSNMT_STATUS_RUNTIME = 6,
  RSNMT_STATUS_PANIC = 7,
} RsnmtStatus;

/**
 * Opaque handle to a loaded model and its vocabularies.
 */
typedef struct RsnmtModel RsnmtModel;

/**
 * Shape of a model for [`rsnmt_count_parameters`].
 */
typedef struct RsnmtModelShape {
  size_t d_model;
  size_t d_ff;
  size_t n_heads;
  /**
   * Layers per side when `recurrent` is false, recurrences otherwise.
   */
  size_t depth;
  bool recurrent;
  size_t src_vocab_size;
  size_t tgt_vocab_size;
  bool share_src_tgt_embedding;
  bool tie_output_projection;
} RsnmtModelShape;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *rsnmt_version(void);

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call into the library on this thread.
 */
const char *rsnmt_last_error(void);

/**
 * Loads a run directory (containing `model.rsnmt`) or a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum RsnmtStatus rsnmt_model_load(const char *path, struct RsnmtModel **out);

/**
 * # Safety
 * `model` must come from [`rsnmt_model_load`] and not be freed twice. Null is ignored.
 */
void rsnmt_model_free(struct RsnmtModel *model);

/**
 * Number of trainable parameters of a loaded model.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum RsnmtStatus rsnmt_model_parameter_count(const struct RsnmtModel *model, size_t *out);

/**
 * Translates one tokenized sentence. `beam_size` 1 with `alpha` 0 is greedy.
 * `dec_recurrences` 0 keeps the trained depth. The result must be released
 * with [`rsnmt_string_free`].
 *
 * # Safety
 * `model` must be a live handle, `source` NUL-terminated and `out` writable.
 */
enum RsnmtStatus rsnmt_translate(const struct RsnmtModel *model,
                                 const char *source,
                                 size_t beam_size,
                                 double alpha,
                                 size_t dec_recurrences,
                                 char **out);

/**
 * # Safety
 * `s` must come from this library and not be freed twice. Null is ignored.
 */
void rsnmt_string_free(char *s);

/**
 * Corpus BLEU (0 to 100, order 4, case-sensitive) of `n` hypothesis lines
 * against `n` reference lines.
 *
 * # Safety
 * `hyps` and `refs` must each point to `n` NUL-terminated strings; `out` writable.
 */
enum RsnmtStatus rsnmt_bleu(const char *const *hyps,
                            const char *const *refs,
                            size_t n,
                            double *out);

/**
 * Shannon entropy in nats of one attention row.
 *
 * # Safety
 * `row` must point to `len` doubles; `out` writable.
 */
enum RsnmtStatus rsnmt_attention_entropy(const double *row, size_t len, double *out);

/**
 * Trainable parameter count of a configuration, without building it.
 *
 * # Safety
 * `shape` must be readable and `out` writable.
 */
enum RsnmtStatus rsnmt_count_parameters(const struct RsnmtModelShape *shape, size_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RSNMT_H */
