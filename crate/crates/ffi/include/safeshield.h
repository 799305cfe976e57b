#ifndef SAFESHIELD_H
#define SAFESHIELD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SsStatus {
  SS_STATUS_OK = 0,
  SS_STATUS_NULL_POINTER = 1,
  SS_STATUS_INVALID_ARGUMENT = 2,
  SS_STATUS_DATA_ERROR = 3,
  SS_STATUS_SOLVER_FAILURE = 4,
  SS_STATUS_PANIC = 5,
} SsStatus;

/**
 * A demonstration corpus.
 */
typedef struct SsCorpus SsCorpus;

/**
 * A learned safety value function with its dynamics.
 */
typedef struct SsModel SsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ss_version(void);

/**
 * Message for the last failed call on this thread, or an empty string.
 * Valid until the next call into the library on the same thread.
 */
const char *ss_last_error_message(void);

/**
 * Parses a corpus file's JSON text.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SsStatus ss_corpus_load_json(const char *json, struct SsCorpus **out);

/**
 * Generates a synthetic corpus from a named preset (`default` or
 * `prefix_overlap`) on the built-in scenario.
 *
 * # Safety
 * `preset` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SsStatus ss_corpus_generate(const char *preset, uint64_t seed, struct SsCorpus **out);

/**
 * Number of demonstrations in the corpus.
 *
 * # Safety
 * `corpus` must be a live handle and `out` a valid pointer.
 */
enum SsStatus ss_corpus_len(const struct SsCorpus *corpus, size_t *out);

/**
 * # Safety
 * `corpus` must be null or a handle not yet freed.
 */
void ss_corpus_free(struct SsCorpus *corpus);

/**
 * Learns a model. `config_json` may be null for the defaults. Fails with
 * [`SsStatus::SolverFailure`] unless the solver reaches optimality.
 *
 * # Safety
 * `corpus` must be a live handle, `config_json` null or NUL-terminated, and
 * `out` a valid pointer.
 */
enum SsStatus ss_learn(const struct SsCorpus *corpus,
                       const char *config_json,
                       struct SsModel **out);

/**
 * Parses a model file's JSON text.
 *
 * # Safety
 * `json` must be NUL-terminated and `out` a valid pointer.
 */
enum SsStatus ss_model_load_json(const char *json, struct SsModel **out);

/**
 * Canonical model file text. Free the string with [`ss_string_free`].
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum SsStatus ss_model_to_json(const struct SsModel *model, char **out);

/**
 * # Safety
 * `s` must be null or a string returned by this library and not yet freed.
 */
void ss_string_free(char *s);

/**
 * State dimension the model expects.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum SsStatus ss_model_state_dim(const struct SsModel *model, size_t *out);

/**
 * `h(x)`.
 *
 * # Safety
 * `x` must point to `n` doubles and `out` be a valid pointer.
 */
enum SsStatus ss_model_evaluate(const struct SsModel *model,
                                const double *x,
                                size_t n,
                                double *out);

/**
 * `∇h(x)` written to `grad`, which must hold `n` doubles.
 *
 * # Safety
 * `x` and `grad` must each point to `n` doubles.
 */
enum SsStatus ss_model_gradient(const struct SsModel *model,
                                const double *x,
                                size_t n,
                                double *grad);

/**
 * Runs the safety filter at state `x` (length `n`) on the reference
 * control `u_ref` (length `m`) with safety level `tau`. Writes the filtered
 * control to `u_out` (length `m`); `intervened` may be null.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum SsStatus ss_filter(const struct SsModel *model,
                        const double *x,
                        size_t n,
                        const double *u_ref,
                        size_t m,
                        double tau,
                        double *u_out,
                        bool *intervened);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void ss_model_free(struct SsModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAFESHIELD_H */
