#ifndef ALIGNLAB_H
#define ALIGNLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AlStatus {
  AL_STATUS_OK = 0,
  AL_STATUS_NULL_ARGUMENT = 1,
  AL_STATUS_INVALID_ARGUMENT = 2,
  AL_STATUS_IO = 3,
  AL_STATUS_NO_PATH = 4,
  AL_STATUS_RUNTIME = 5,
  AL_STATUS_PANIC = 6,
} AlStatus;

typedef struct AlCorpus AlCorpus;

typedef struct AlLexicon AlLexicon;

typedef struct AlModel AlModel;

typedef struct AlNaturalClasses AlNaturalClasses;

/**
 * Boundary scores of a model on a corpus, in milliseconds.
 */
typedef struct AlScore {
  double mean_abs_ms;
  double mean_signed_ms;
  size_t boundaries;
  size_t aligned_utterances;
} AlScore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL. Valid until the
 * next failing call on the same thread.
 */
const char *al_last_error(void);

/**
 * Library version as a static string.
 */
const char *al_version(void);

/**
 * Load a corpus from a manifest file or a directory holding `manifest.tsv`.
 *
 * # Safety
 * `path` must be a valid C string; `out` must be writable.
 */
enum AlStatus al_corpus_load(const char *path, struct AlCorpus **out);

/**
 * Number of utterances, or 0 for NULL.
 *
 * # Safety
 * `corpus` must be NULL or a live handle.
 */
size_t al_corpus_len(const struct AlCorpus *corpus);

/**
 * # Safety
 * `corpus` must be NULL or a handle not yet freed.
 */
void al_corpus_free(struct AlCorpus *corpus);

/**
 * # Safety
 * `path` must be a valid C string; `out` must be writable.
 */
enum AlStatus al_lexicon_load(const char *path, struct AlLexicon **out);

/**
 * # Safety
 * `lexicon` must be NULL or a handle not yet freed.
 */
void al_lexicon_free(struct AlLexicon *lexicon);

/**
 * # Safety
 * `path` must be a valid C string; `out` must be writable.
 */
enum AlStatus al_natural_classes_load(const char *path, struct AlNaturalClasses **out);

/**
 * # Safety
 * `classes` must be NULL or a handle not yet freed.
 */
void al_natural_classes_free(struct AlNaturalClasses *classes);

/**
 * Synthetic corpus with its lexicon and natural classes. Any of the three
 * outputs may be NULL if not wanted.
 *
 * # Safety
 * Non-NULL output pointers must be writable.
 */
enum AlStatus al_synthesize(double minutes,
                            size_t speakers,
                            uint64_t seed,
                            struct AlCorpus **corpus,
                            struct AlLexicon **lexicon,
                            struct AlNaturalClasses **classes);

/**
 * Train all four stages. `schedule` is an `m_t_l_s` label; `class_map`
 * is a class file path, or NULL for one class per phone.
 *
 * # Safety
 * Handles must be live; strings valid or NULL where allowed; `out` writable.
 */
enum AlStatus al_model_train(const struct AlCorpus *corpus,
                             const struct AlLexicon *lexicon,
                             const char *schedule,
                             const char *class_map,
                             uint64_t seed,
                             struct AlModel **out);

/**
 * # Safety
 * `path` must be a valid C string; `out` must be writable.
 */
enum AlStatus al_model_load(const char *path, struct AlModel **out);

/**
 * # Safety
 * `model` must be live; `path` a valid C string.
 */
enum AlStatus al_model_save(const struct AlModel *model, const char *path);

/**
 * Total Gaussian components, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t al_model_gaussians(const struct AlModel *model);

/**
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void al_model_free(struct AlModel *model);

/**
 * Align `corpus` and write `<id>.TextGrid` files into `out_dir`. The
 * number of aligned utterances goes to `aligned` when it is not NULL.
 *
 * # Safety
 * Handles must be live; `out_dir` a valid C string.
 */
enum AlStatus al_align_to_textgrids(const struct AlModel *model,
                                    const struct AlCorpus *corpus,
                                    const struct AlLexicon *lexicon,
                                    const char *out_dir,
                                    size_t *aligned);

/**
 * Align `corpus` with `model` and score the phone boundaries against the
 * corpus's own phone tiers. `classes` may be NULL (IPA-based classes).
 *
 * # Safety
 * Handles must be live or NULL where allowed; `out` writable.
 */
enum AlStatus al_evaluate(const struct AlModel *model,
                          const struct AlCorpus *corpus,
                          const struct AlLexicon *lexicon,
                          const struct AlNaturalClasses *classes,
                          struct AlScore *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ALIGNLAB_H */
