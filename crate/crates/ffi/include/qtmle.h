#ifndef QTMLE_H
#define QTMLE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Bit flags selecting scenarios in [`QtmleSimulationOptions::scenarios`].
 */
#define QTMLE_SCENARIO_A 1

#define QTMLE_SCENARIO_B 2

#define QTMLE_SCENARIO_C 4

#define QTMLE_SCENARIO_D 8

typedef enum QtmleStatus {
  QTMLE_STATUS_OK = 0,
  QTMLE_STATUS_NULL_POINTER = 1,
  QTMLE_STATUS_INVALID_ARGUMENT = 2,
  QTMLE_STATUS_ESTIMATION_FAILED = 3,
  /**
   * The requested quantity does not exist for this result.
   */
  QTMLE_STATUS_NOT_AVAILABLE = 4,
  /**
   * A Rust panic was caught at the boundary.
   */
  QTMLE_STATUS_INTERNAL = 5,
} QtmleStatus;

typedef enum QtmleDataKind {
  /**
   * Indicator is observation of the outcome.
   */
  QTMLE_DATA_KIND_MISSING_OUTCOME = 0,
  /**
   * Indicator is treatment; every outcome is observed.
   */
  QTMLE_DATA_KIND_EFFECT_ON_TREATED = 1,
} QtmleDataKind;

typedef enum QtmleEstimand {
  QTMLE_ESTIMAND_MISSING = 0,
  QTMLE_ESTIMAND_EFFECT = 1,
  QTMLE_ESTIMAND_ATT = 2,
} QtmleEstimand;

typedef enum QtmleEstimator {
  QTMLE_ESTIMATOR_TMLE = 0,
  QTMLE_ESTIMATOR_AIPW = 1,
  QTMLE_ESTIMATOR_IPW = 2,
  QTMLE_ESTIMATOR_FIRPO = 3,
  QTMLE_ESTIMATOR_OD = 4,
} QtmleEstimator;

typedef enum QtmleOutcomeModel {
  QTMLE_OUTCOME_MODEL_GAUSSIAN = 0,
  QTMLE_OUTCOME_MODEL_DENSITY_SL = 1,
} QtmleOutcomeModel;

typedef struct QtmleDataset QtmleDataset;

typedef struct QtmleEstimate QtmleEstimate;

typedef struct QtmleSimulation QtmleSimulation;

typedef struct QtmleEstimateOptions {
  enum QtmleEstimand estimand;
  enum QtmleEstimator estimator;
  double q;
  double ci_level;
  size_t grid_size;
  uint64_t seed;
  enum QtmleOutcomeModel outcome_model;
} QtmleEstimateOptions;

typedef struct QtmleSimulationOptions {
  size_t n;
  size_t reps;
  uint32_t scenarios;
  double q;
  size_t grid_size;
  uint64_t seed;
  double shift;
  double ci_level;
  /**
   * 0 runs on the global thread pool.
   */
  size_t threads;
  enum QtmleOutcomeModel outcome_model;
} QtmleSimulationOptions;

/**
 * One aggregated row. Quantities that do not apply are NaN.
 */
typedef struct QtmleSummaryRow {
  /**
   * `'a'` to `'d'`.
   */
  char scenario;
  enum QtmleEstimator estimator;
  size_t n;
  double q;
  double bias;
  double sd;
  double rmse;
  double coverage;
  double rejection_rate;
  double mean_iterations;
  size_t reps;
  size_t failures;
} QtmleSummaryRow;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *qtmle_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *qtmle_version(void);

/**
 * Copies `n` rows of `p` row-major covariates, `n` indicator bytes (nonzero
 * is 1) and `n` outcomes. Outcomes of units with indicator 0 may be NaN
 * for [`QtmleDataKind::MissingOutcome`].
 *
 * # Safety
 * `covariates` must point to `n * p` doubles, `indicator` to `n` bytes and
 * `outcome` to `n` doubles; `out` must be writable.
 */
enum QtmleStatus qtmle_dataset_new(const double *covariates,
                                   size_t n,
                                   size_t p,
                                   const uint8_t *indicator,
                                   const double *outcome,
                                   enum QtmleDataKind kind,
                                   struct QtmleDataset **out);

/**
 * # Safety
 * `dataset` must come from [`qtmle_dataset_new`] and not be used afterwards.
 */
void qtmle_dataset_free(struct QtmleDataset *dataset);

/**
 * Number of units, or 0 for a null handle.
 *
 * # Safety
 * `dataset` must be null or a live handle.
 */
size_t qtmle_dataset_len(const struct QtmleDataset *dataset);

struct QtmleEstimateOptions qtmle_estimate_options_default(void);

/**
 * Fits the nuisance models on `dataset` and runs one estimator at one level.
 *
 * # Safety
 * `dataset` and `options` must be live; `out` must be writable.
 */
enum QtmleStatus qtmle_estimate(const struct QtmleDataset *dataset,
                                const struct QtmleEstimateOptions *options,
                                struct QtmleEstimate **out);

/**
 * # Safety
 * `estimate` must come from [`qtmle_estimate`] and not be used afterwards.
 */
void qtmle_estimate_free(struct QtmleEstimate *estimate);

/**
 * # Safety
 * `estimate` must be live and `value` writable.
 */
enum QtmleStatus qtmle_estimate_value(const struct QtmleEstimate *estimate, double *value);

/**
 * Standard error and Wald interval; `NotAvailable` for point estimators.
 *
 * # Safety
 * `estimate` must be live and the outputs writable.
 */
enum QtmleStatus qtmle_estimate_interval(const struct QtmleEstimate *estimate,
                                         double *se,
                                         double *lower,
                                         double *upper);

/**
 * Two-sided Wald p-value for a zero parameter.
 *
 * # Safety
 * `estimate` must be live and `p_value` writable.
 */
enum QtmleStatus qtmle_estimate_p_value(const struct QtmleEstimate *estimate, double *p_value);

/**
 * Targeting diagnostics of a single-arm TMLE fit.
 *
 * # Safety
 * `estimate` must be live and the outputs writable.
 */
enum QtmleStatus qtmle_estimate_diagnostics(const struct QtmleEstimate *estimate,
                                            size_t *iterations,
                                            double *final_epsilon,
                                            double *score_residual,
                                            bool *converged);

struct QtmleSimulationOptions qtmle_simulation_options_default(void);

/**
 * Runs the Kang-Schafer study. Output is identical for any thread count.
 *
 * # Safety
 * `options` must be live and `out` writable.
 */
enum QtmleStatus qtmle_simulate(const struct QtmleSimulationOptions *options,
                                struct QtmleSimulation **out);

/**
 * # Safety
 * `sim` must come from [`qtmle_simulate`] and not be used afterwards.
 */
void qtmle_simulation_free(struct QtmleSimulation *sim);

/**
 * Number of summary rows, or 0 for a null handle.
 *
 * # Safety
 * `sim` must be null or a live handle.
 */
size_t qtmle_simulation_row_count(const struct QtmleSimulation *sim);

/**
 * Replications with at least one failed estimator, or 0 for a null handle.
 *
 * # Safety
 * `sim` must be null or a live handle.
 */
size_t qtmle_simulation_failed_replications(const struct QtmleSimulation *sim);

/**
 * # Safety
 * `sim` must be live and `row` writable.
 */
enum QtmleStatus qtmle_simulation_row(const struct QtmleSimulation *sim,
                                      size_t index,
                                      struct QtmleSummaryRow *row);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QTMLE_H */
