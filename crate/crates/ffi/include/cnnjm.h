#ifndef CNNJM_H
#define CNNJM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CnnjmArch {
  CNNJM_ARCH_GENERIC = 0,
  CNNJM_ARCH_TAG = 1,
  CNNJM_ARCH_TAG_DEP = 2,
  CNNJM_ARCH_ATTENTION = 3,
} CnnjmArch;

/**
 * Result codes.
 */
typedef enum CnnjmStatus {
  CNNJM_STATUS_OK = 0,
  CNNJM_STATUS_NULL_POINTER = 1,
  CNNJM_STATUS_INVALID_UTF8 = 2,
  CNNJM_STATUS_IO = 3,
  /**
   * Malformed or corrupted model file.
   */
  CNNJM_STATUS_FORMAT = 4,
  CNNJM_STATUS_UNSUPPORTED_VERSION = 5,
  /**
   * Malformed source, hypothesis, alignment or heads input.
   */
  CNNJM_STATUS_INVALID_INPUT = 6,
  /**
   * The model's arch needs an alignment (or heads) that was not given.
   */
  CNNJM_STATUS_MISSING_GUIDE = 7,
  CNNJM_STATUS_PANIC = 8,
} CnnjmStatus;

/**
 * A loaded model.
 */
typedef struct CnnjmModel CnnjmModel;

typedef struct CnnjmModelInfo {
  enum CnnjmArch arch;
  size_t source_vocab_size;
  size_t target_vocab_size;
  size_t maxlen;
  /**
   * Number of previous target words the model conditions on.
   */
  size_t history;
  size_t parameter_count;
  /**
   * Nonzero when scores include the sentence-end prediction.
   */
  uint8_t emit_eos;
} CnnjmModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a model file. On success `*out` owns a handle that must be
 * released with [`cnnjm_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CnnjmStatus cnnjm_model_load(const char *path, struct CnnjmModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`cnnjm_model_load`] and not be used afterwards.
 */
void cnnjm_model_free(struct CnnjmModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum CnnjmStatus cnnjm_model_info(const struct CnnjmModel *model, struct CnnjmModelInfo *out);

/**
 * Scores one hypothesis: the sum of natural-log word probabilities (plus
 * the sentence end when the model predicts it).
 *
 * `source` and `hypothesis` are whitespace-tokenized sentences.
 * `alignment` holds `i-j` pairs (hypothesis word `i`, source word `j`); it
 * is required by tag archs and may be null otherwise. `heads` is a line of
 * dependency heads for the source (`-1` = root), required by the
 * dependency-tag arch and ignored by the others.
 *
 * # Safety
 * String arguments must be NUL-terminated or null where allowed; `model`
 * must be a live handle and `out_score` a valid pointer.
 */
enum CnnjmStatus cnnjm_model_score(const struct CnnjmModel *model,
                                   const char *source,
                                   const char *hypothesis,
                                   const char *alignment,
                                   const char *heads,
                                   double *out_score);

/**
 * Scores one n-best line against its source sentence and returns the line
 * with `feature= score` appended to its features field. The sentence id of
 * the line is ignored. The returned string must be released with
 * [`cnnjm_string_free`].
 *
 * # Safety
 * As for [`cnnjm_model_score`]; `out_line` must be a valid pointer.
 */
enum CnnjmStatus cnnjm_score_nbest_line(const struct CnnjmModel *model,
                                        const char *source,
                                        const char *heads,
                                        const char *line,
                                        const char *feature,
                                        char **out_line);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void cnnjm_string_free(char *s);

/**
 * Description of the last failure on the calling thread, or null. The
 * pointer stays valid until the next library call on the same thread.
 */
const char *cnnjm_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cnnjm_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CNNJM_H */
