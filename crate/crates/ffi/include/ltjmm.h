#ifndef LTJMM_H
#define LTJMM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Random-effect variant.
 */
typedef enum LtjmmVariant {
  /**
   * Independent random intercepts and slopes.
   */
  LTJMM_VARIANT_UNIVARIATE = 0,
  /**
   * Jointly Gaussian random intercepts and slopes.
   */
  LTJMM_VARIANT_MULTIVARIATE = 1,
} LtjmmVariant;

/**
 * Result of every fallible call.
 */
typedef enum LtjmmStatus {
  LTJMM_STATUS_OK = 0,
  LTJMM_STATUS_NULL_POINTER = 1,
  LTJMM_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The dataset or model failed validation.
   */
  LTJMM_STATUS_VALIDATION = 3,
  LTJMM_STATUS_IO = 4,
  LTJMM_STATUS_PARSE = 5,
  /**
   * Sampling or evaluation failed at run time.
   */
  LTJMM_STATUS_RUNTIME = 6,
  /**
   * An internal panic was caught at the boundary.
   */
  LTJMM_STATUS_PANIC = 7,
} LtjmmStatus;

/**
 * Opaque dataset handle.
 */
typedef struct LtjmmDataset LtjmmDataset;

/**
 * Opaque fitted-model handle.
 */
typedef struct LtjmmFit LtjmmFit;

/**
 * Model and sampler settings for [`ltjmm_fit`].
 */
typedef struct LtjmmFitOptions {
  enum LtjmmVariant variant;
  /**
   * Nonzero to include the subject time shift.
   */
  uint8_t latent_time;
  uintptr_t chains;
  /**
   * Iterations per chain, warmup included.
   */
  uintptr_t iterations;
  uintptr_t warmup;
  uintptr_t thin;
  uint64_t seed;
  uintptr_t max_tree_depth;
  double target_accept;
} LtjmmFitOptions;

/**
 * Identifiability findings; each flag is 1 when the check passes.
 */
typedef struct LtjmmIdentifiability {
  uint8_t design_rank_ok;
  uint8_t time_independent_of_intercept;
  uint8_t constraint_system_unique;
} LtjmmIdentifiability;

/**
 * Posterior summary of one parameter.
 */
typedef struct LtjmmSummary {
  double mean;
  double sd;
  double lower;
  double upper;
  double rhat;
  double ess;
} LtjmmSummary;

/**
 * Information criteria on the deviance scale.
 */
typedef struct LtjmmCriteria {
  double waic;
  double p_waic;
  double looic;
  double p_loo;
  double dic;
  double p_dic;
  /**
   * Observations whose Pareto shape estimate exceeds 0.7.
   */
  uintptr_t n_high_pareto_k;
} LtjmmCriteria;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread, or null. The string
 * stays valid until the next call into the library on this thread.
 */
const char *ltjmm_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *ltjmm_version(void);

/**
 * Default options: independent effects, latent time on, 2 chains of 2000
 * iterations with 1000 warmup.
 */
struct LtjmmFitOptions ltjmm_fit_options_default(void);

/**
 * Reads a long-format CSV file into a new dataset handle.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum LtjmmStatus ltjmm_dataset_read_csv(const char *path, struct LtjmmDataset **out);

/**
 * Builds a dataset from column arrays of length `n_obs`. `covariates` is
 * row-major `n_obs x n_covariates` and may be null when `n_covariates` is 0.
 * Subjects and outcomes are zero-based indices and receive generated names
 * `S1..` and `Y1..`.
 *
 * # Safety
 * Every non-null array must hold the stated number of elements.
 */
enum LtjmmStatus ltjmm_dataset_from_arrays(uintptr_t n_obs,
                                           const uintptr_t *subject,
                                           const uintptr_t *outcome,
                                           const double *time,
                                           const double *value,
                                           const double *covariates,
                                           uintptr_t n_subjects,
                                           uintptr_t n_outcomes,
                                           uintptr_t n_covariates,
                                           struct LtjmmDataset **out);

/**
 * Releases a dataset handle. Null is ignored.
 *
 * # Safety
 * `dataset` must come from this library and not be used afterwards.
 */
void ltjmm_dataset_free(struct LtjmmDataset *dataset);

/**
 * Subjects, outcomes, covariates and rows of a dataset. Any output pointer
 * may be null.
 *
 * # Safety
 * `dataset` must be a valid handle.
 */
enum LtjmmStatus ltjmm_dataset_dims(const struct LtjmmDataset *dataset,
                                    uintptr_t *n_subjects,
                                    uintptr_t *n_outcomes,
                                    uintptr_t *n_covariates,
                                    uintptr_t *n_rows);

/**
 * Validates the dataset and runs the identifiability checks. Returns
 * `Validation` (with the findings as the error message) when any check
 * fails; `report` is filled in either case when non-null.
 *
 * # Safety
 * `dataset` must be a valid handle; `report` may be null.
 */
enum LtjmmStatus ltjmm_dataset_check(const struct LtjmmDataset *dataset,
                                     uint8_t latent_time,
                                     struct LtjmmIdentifiability *report);

/**
 * Fits the model to `dataset`. `options` may be null for defaults.
 *
 * # Safety
 * `dataset` must be a valid handle and `out` a valid pointer.
 */
enum LtjmmStatus ltjmm_fit(const struct LtjmmDataset *dataset,
                           const struct LtjmmFitOptions *options,
                           struct LtjmmFit **out);

/**
 * Releases a fit handle. Null is ignored.
 *
 * # Safety
 * `fit` must come from [`ltjmm_fit`] and not be used afterwards.
 */
void ltjmm_fit_free(struct LtjmmFit *fit);

/**
 * Chains, stored draws per chain and constrained parameters of a fit.
 *
 * # Safety
 * `fit` must be a valid handle; output pointers may be null.
 */
enum LtjmmStatus ltjmm_fit_dims(const struct LtjmmFit *fit,
                                uintptr_t *n_chains,
                                uintptr_t *draws_per_chain,
                                uintptr_t *n_params);

/**
 * Name of parameter `index`, owned by the fit; null when out of range.
 *
 * # Safety
 * `fit` must be a valid handle.
 */
const char *ltjmm_fit_parameter_name(const struct LtjmmFit *fit, uintptr_t index);

/**
 * Copies the draws of `chain` into `buffer`, row-major `draws x params`.
 * `len` must equal `draws_per_chain * n_params`.
 *
 * # Safety
 * `buffer` must hold `len` doubles.
 */
enum LtjmmStatus ltjmm_fit_draws(const struct LtjmmFit *fit,
                                 uintptr_t chain,
                                 double *buffer,
                                 uintptr_t len);

/**
 * Posterior summary of parameter `index`.
 *
 * # Safety
 * `fit` and `out` must be valid pointers.
 */
enum LtjmmStatus ltjmm_fit_summary(const struct LtjmmFit *fit,
                                   uintptr_t index,
                                   struct LtjmmSummary *out);

/**
 * WAIC, PSIS-LOO and DIC of a fit on its own data.
 *
 * # Safety
 * `fit` and `out` must be valid pointers.
 */
enum LtjmmStatus ltjmm_fit_criteria(const struct LtjmmFit *fit, struct LtjmmCriteria *out);

/**
 * Weighted normal scores of `values` written to `out` (all of length `n`).
 *
 * # Safety
 * `values`, `weights` and `out` must hold `n` doubles; `out` may alias
 * neither input.
 */
enum LtjmmStatus ltjmm_weighted_normal_scores(const double *values,
                                              const double *weights,
                                              uintptr_t n,
                                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LTJMM_H */
