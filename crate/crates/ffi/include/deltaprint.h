#ifndef DELTAPRINT_H
#define DELTAPRINT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define DP_OK 0

/**
 * A panic was caught at the boundary.
 */
#define DP_INTERNAL 1

#define DP_ERR_FORMAT 10

#define DP_ERR_PAIRING 11

#define DP_ERR_SHAPE 12

#define DP_ERR_NUMERIC 13

#define DP_ERR_SCHEMA 14

#define DP_ERR_PARAMETER 15

#define DP_ERR_POPULATION 16

#define DP_ERR_CLASS 17

#define DP_ERR_DEGENERATE 18

#define DP_ERR_OPTIMIZATION 19

#define DP_ERR_STRATIFICATION 20

#define DP_ERR_COVERAGE 21

#define DP_ERR_PARSE 22

#define DP_ERR_DEPENDENCY 23

#define DP_ERR_IO 24

#define DP_SCALE_UNIT 0

#define DP_SCALE_ALPHA_OVER_RANK 1

/**
 * Healthy centroid built from the detection training split.
 */
typedef struct DpCentroid DpCentroid;

/**
 * Healthy-vs-drifted logistic-regression detector.
 */
typedef struct DpClassifier DpClassifier;

/**
 * Spectral features, one row per adapter.
 */
typedef struct DpFeatureMatrix DpFeatureMatrix;

/**
 * Reconstructed adapter deltas with their labels.
 */
typedef struct DpPopulation DpPopulation;

/**
 * Output of the evaluation battery.
 */
typedef struct DpReport DpReport;

/**
 * Split and solver settings shared by centroid, training and evaluation.
 */
typedef struct DpEvalOptions {
  double lambda;
  double ratio;
  uint64_t seed;
  size_t n_bootstrap;
} DpEvalOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failing call on this thread, or NULL. The pointer is
 * valid until the next failing call on this thread.
 */
const char *dp_last_error(void);

/**
 * Static name of a status code ("ok", "format", ... "io", "internal").
 */
const char *dp_status_name(int32_t status);

/**
 * Defaults: lambda 1, ratio 0.7, seed 0, 1000 bootstrap resamples.
 */
struct DpEvalOptions dp_eval_options_default(void);

/**
 * Loads every adapter listed in a manifest file.
 *
 * # Safety
 * `manifest_path` is a NUL-terminated path; `out` is writable.
 */
int32_t dp_population_load(const char *manifest_path, int32_t scale, struct DpPopulation **out);

/**
 * Generates the default synthetic population in memory.
 *
 * # Safety
 * `out` is writable.
 */
int32_t dp_population_synthetic(uint64_t seed, struct DpPopulation **out);

/**
 * Number of adapters, or 0 for NULL.
 *
 * # Safety
 * `pop` is NULL or a live population handle.
 */
size_t dp_population_len(const struct DpPopulation *pop);

/**
 * # Safety
 * `pop` is NULL or a handle not yet freed.
 */
void dp_population_free(struct DpPopulation *pop);

/**
 * Centroid of the healthy adapters in the detection training split.
 *
 * # Safety
 * `pop` is a live population handle; `opts` and `out` are valid pointers.
 */
int32_t dp_centroid_build(const struct DpPopulation *pop,
                          const struct DpEvalOptions *opts,
                          size_t k,
                          struct DpCentroid **out);

/**
 * # Safety
 * `c` is NULL or a handle not yet freed.
 */
void dp_centroid_free(struct DpCentroid *c);

/**
 * Feature matrix; `centroid` may be NULL, which omits direction features.
 *
 * # Safety
 * `pop` is a live handle, `centroid` is NULL or a live handle, `out` is writable.
 */
int32_t dp_features_extract(const struct DpPopulation *pop,
                            const struct DpCentroid *centroid,
                            size_t k,
                            struct DpFeatureMatrix **out);

/**
 * # Safety
 * `m` is a live handle; `rows` and `cols` are writable.
 */
int32_t dp_features_shape(const struct DpFeatureMatrix *m, size_t *rows, size_t *cols);

/**
 * Copies the values row-major into `buf`, which holds `len` doubles and
 * must be exactly rows * cols long.
 *
 * # Safety
 * `m` is a live handle; `buf` points to `len` writable doubles.
 */
int32_t dp_features_copy(const struct DpFeatureMatrix *m, double *buf, size_t len);

/**
 * Name of column `index` as a new string; release it with `dp_string_free`.
 *
 * # Safety
 * `m` is a live handle; `out` is writable.
 */
int32_t dp_features_column_name(const struct DpFeatureMatrix *m, size_t index, char **out);

/**
 * # Safety
 * `m` is NULL or a handle not yet freed.
 */
void dp_features_free(struct DpFeatureMatrix *m);

/**
 * Fits healthy vs drifted on the training rows of the detection split.
 *
 * # Safety
 * `m` is a live handle; `opts` and `out` are valid pointers.
 */
int32_t dp_classifier_train(const struct DpFeatureMatrix *m,
                            const struct DpEvalOptions *opts,
                            struct DpClassifier **out);

/**
 * Drift probability for every row of `m`, in row order, into `probs`
 * (`len` must equal the row count).
 *
 * # Safety
 * `clf` and `m` are live handles; `probs` points to `len` writable doubles.
 */
int32_t dp_classifier_predict(const struct DpClassifier *clf,
                              const struct DpFeatureMatrix *m,
                              double *probs,
                              size_t len);

/**
 * # Safety
 * `clf` is NULL or a handle not yet freed.
 */
void dp_classifier_free(struct DpClassifier *clf);

/**
 * Runs the full evaluation battery on `m`.
 *
 * # Safety
 * `m` is a live handle; `opts` and `out` are valid pointers.
 */
int32_t dp_evaluate(const struct DpFeatureMatrix *m,
                    const struct DpEvalOptions *opts,
                    struct DpReport **out);

/**
 * Held-out AUC and interval of the binary detector on every feature.
 *
 * # Safety
 * `r` is a live handle; the three outputs are writable.
 */
int32_t dp_report_binary_auc(const struct DpReport *r,
                             double *auc,
                             double *ci_low,
                             double *ci_high);

/**
 * The report as JSON; release it with `dp_string_free`.
 *
 * # Safety
 * `r` is a live handle; `out` is writable.
 */
int32_t dp_report_to_json(const struct DpReport *r, char **out);

/**
 * # Safety
 * `r` is NULL or a handle not yet freed.
 */
void dp_report_free(struct DpReport *r);

/**
 * Singular values, descending, of a row-major `rows` x `cols` matrix.
 * `out` must hold min(rows, cols) doubles.
 *
 * # Safety
 * `data` points to rows * cols doubles; `out` to `out_len` writable doubles.
 */
int32_t dp_singular_values(const double *data,
                           size_t rows,
                           size_t cols,
                           double *out,
                           size_t out_len);

/**
 * AUC of `scores` against 0/1 `labels`, ties counted half.
 *
 * # Safety
 * `scores` and `labels` point to `n` values; `out` is writable.
 */
int32_t dp_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * # Safety
 * `s` is NULL or a string returned by this library and not yet freed.
 */
void dp_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DELTAPRINT_H */
