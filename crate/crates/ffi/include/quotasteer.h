/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef QUOTASTEER_H
#define QUOTASTEER_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. 2-4 match the command-line exit codes.
 */
typedef enum QsStatus {
  QS_STATUS_OK = 0,
  QS_STATUS_NULL_POINTER = 1,
  QS_STATUS_CONFIG_ERROR = 2,
  QS_STATUS_NOT_CONVERGED = 3,
  QS_STATUS_BACKEND_FAILURE = 4,
  QS_STATUS_INVALID_ARGUMENT = 5,
  QS_STATUS_BUFFER_TOO_SMALL = 6,
  QS_STATUS_PANIC = 7,
} QsStatus;

/**
 * Ground distance for [`qs_emd`].
 */
typedef enum QsGround {
  /**
   * 1 between distinct bins.
   */
  QS_GROUND_UNIT = 0,
  /**
   * `|i - j|`, for ordered bins.
   */
  QS_GROUND_LINEAR = 1,
} QsGround;

/**
 * An experiment loaded from TOML. Opaque.
 */
typedef struct QsExperiment QsExperiment;

/**
 * The outcome of a run. Opaque.
 */
typedef struct QsReport QsReport;

/**
 * Closed-form coverage of uniform `b`-of-`k` batches over `trials` batches.
 * The per-batch probability is `p_numer / p_denom` in lowest terms.
 */
typedef struct QsCoverage {
  uint64_t p_numer;
  uint64_t p_denom;
  double expected;
  double sigma;
} QsCoverage;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *qs_last_error(void);

/**
 * Release a string returned by this library. NULL is ignored.
 */
void qs_string_free(char *s);

/**
 * Library version as a static string.
 */
const char *qs_version(void);

/**
 * Jensen-Shannon divergence, log base 2, of two probability vectors.
 */
enum QsStatus qs_js_divergence(const double *p, const double *q, size_t len, double *result);

/**
 * Earth mover's distance under a preset ground distance.
 */
enum QsStatus qs_emd(const double *p,
                     const double *q,
                     size_t len,
                     enum QsGround ground,
                     double *result);

/**
 * Earth mover's distance under a caller-supplied `len * len` row-major
 * ground distance matrix.
 */
enum QsStatus qs_emd_matrix(const double *p,
                            const double *q,
                            size_t len,
                            const double *matrix,
                            double *result);

enum QsStatus qs_total_variation(const double *p, const double *q, size_t len, double *result);

/**
 * Largest-remainder apportionment of `n` over `weights` into `counts`
 * (both `len` long).
 */
enum QsStatus qs_quantize_target(const double *weights, size_t len, uint64_t n, uint64_t *counts);

enum QsStatus qs_coverage_analysis(uint64_t k,
                                   uint64_t b,
                                   uint64_t trials,
                                   struct QsCoverage *result);

/**
 * Cohen's kappa for two coders' category codes (`0..categories`) over the
 * same `len` items.
 */
enum QsStatus qs_cohen_kappa(const uint32_t *a,
                             const uint32_t *b,
                             size_t len,
                             uint32_t categories,
                             double *result);

enum QsStatus qs_percent_agreement(const uint32_t *a,
                                   const uint32_t *b,
                                   size_t len,
                                   uint32_t categories,
                                   double *result);

/**
 * Nearest Monk skin-tone swatch (1-10) for an sRGB color.
 */
uint8_t qs_monk_quantize(uint8_t r, uint8_t g, uint8_t b);

/**
 * Codebook group of a Monk index: 0 Light, 1 Medium, 2 Dark.
 */
enum QsStatus qs_monk_group(uint8_t index, uint8_t *group);

/**
 * Parse an experiment from TOML. Relative paths inside it resolve against
 * `base_dir`, which may be NULL for the current directory.
 */
enum QsStatus qs_experiment_from_toml(const char *toml,
                                      const char *base_dir,
                                      struct QsExperiment **experiment);

enum QsStatus qs_experiment_set_seed(struct QsExperiment *experiment, uint64_t seed);

void qs_experiment_free(struct QsExperiment *experiment);

/**
 * Run an experiment in memory; nothing is written to disk. With `ablation`
 * set, quota tracking is off. A report is produced for `QS_STATUS_OK`,
 * `QS_STATUS_NOT_CONVERGED`, and for `QS_STATUS_BACKEND_FAILURE` when some
 * generations completed; otherwise `*report` is set to NULL.
 */
enum QsStatus qs_experiment_run(const struct QsExperiment *experiment,
                                bool ablation,
                                struct QsReport **report);

void qs_report_free(struct QsReport *report);

bool qs_report_converged(const struct QsReport *report);

/**
 * Number of bins in the report's attribute.
 */
size_t qs_report_bins(const struct QsReport *report);

/**
 * Label of bin `index` as a caller-owned string, or NULL when out of range.
 */
char *qs_report_label(const struct QsReport *report, size_t index);

/**
 * Realized per-bin counts; `len` must be at least [`qs_report_bins`].
 */
enum QsStatus qs_report_final_counts(const struct QsReport *report, uint64_t *counts, size_t len);

/**
 * Quantized target counts; `len` must be at least [`qs_report_bins`].
 */
enum QsStatus qs_report_target_counts(const struct QsReport *report, uint64_t *counts, size_t len);

/**
 * JS divergence, EMD and total variation of the realized histogram against
 * the target. Fails when no generation was accepted.
 */
enum QsStatus qs_report_metrics(const struct QsReport *report,
                                double *js_div,
                                double *emd,
                                double *tv);

/**
 * Pretty-printed report JSON as a caller-owned string.
 */
char *qs_report_to_json(const struct QsReport *report);

/**
 * The JSON-lines trace journal as a caller-owned string.
 */
char *qs_report_trace(const struct QsReport *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QUOTASTEER_H */
