#ifndef ECHELON_H
#define ECHELON_H

#include <stddef.h>
#include <stdint.h>

/**
 * Kind of a decoded protocol frame.
 */
typedef enum EchMessageKind {
  ECH_MESSAGE_KIND_CALL = 0,
  ECH_MESSAGE_KIND_RESPONSE = 1,
  ECH_MESSAGE_KIND_DECLINE = 2,
} EchMessageKind;

typedef enum EchStatus {
  ECH_STATUS_OK = 0,
  ECH_STATUS_NULL_POINTER = 1,
  ECH_STATUS_INVALID_INPUT = 2,
  ECH_STATUS_DOMAIN = 3,
  ECH_STATUS_SHAPE_MISMATCH = 4,
  ECH_STATUS_DECODE = 5,
  ECH_STATUS_IO = 6,
  ECH_STATUS_TRAINING = 7,
  ECH_STATUS_UTF8 = 8,
  ECH_STATUS_INTERNAL = 9,
  ECH_STATUS_PANIC = 10,
} EchStatus;

/**
 * Opaque trained ensemble.
 */
typedef struct EchEnsemble EchEnsemble;

/**
 * Per-row summary of an ensemble prediction, in target units.
 */
typedef struct EchPrediction {
  double mean;
  double knowledge_variance;
  double data_variance;
  double total_variance;
} EchPrediction;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length in bytes
 * without the terminator, or 0 if there is none.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t ech_last_error(char *buf, size_t len);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must be null or a pointer obtained from this library, freed once.
 */
void ech_string_free(char *s);

/**
 * Quality KPI of one observation. `actuals` and `setpoints` hold
 * `parts * types` values, part-major.
 *
 * # Safety
 * Array arguments must be valid for `parts * types` values; `out` must be
 * writable.
 */
enum EchStatus ech_aggregate_quality(size_t parts,
                                     size_t types,
                                     const double *actuals,
                                     const double *setpoints,
                                     double *out);

/**
 * Per-sample Gaussian negative log-likelihood without the constant term.
 */
double ech_nll_loss(double mu, double log_var, double y);

/**
 * Combines `n` member means and variances into one predictive summary.
 *
 * # Safety
 * `mus` and `variances` must be valid for `n` values; `out` writable.
 */
enum EchStatus ech_summarise(const double *mus,
                             const double *variances,
                             size_t n,
                             struct EchPrediction *out);

/**
 * Kendall tau-b between two score vectors of length `n`.
 *
 * # Safety
 * `a` and `b` must be valid for `n` values; `out` writable.
 */
enum EchStatus ech_kendall_tau(const double *a, const double *b, size_t n, double *out);

/**
 * Spearman rank correlation with average ranks for ties.
 *
 * # Safety
 * `a` and `b` must be valid for `n` values; `out` writable.
 */
enum EchStatus ech_spearman_rho(const double *a, const double *b, size_t n, double *out);

/**
 * Trains an ensemble on a row-major `rows x width` feature matrix. Rows are
 * identified by their index. `member_count` and `max_epochs` override the
 * defaults when non-zero.
 *
 * # Safety
 * `features` must be valid for `rows * width` values, `targets` for `rows`
 * values; `out` must be writable. The handle must be released with
 * [`ech_ensemble_free`].
 */
enum EchStatus ech_ensemble_train(const double *features,
                                  size_t rows,
                                  size_t width,
                                  const double *targets,
                                  size_t member_count,
                                  size_t max_epochs,
                                  uint64_t seed,
                                  struct EchEnsemble **out);

/**
 * Restores an ensemble from checkpoint JSON.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` writable.
 */
enum EchStatus ech_ensemble_from_checkpoint(const char *json, struct EchEnsemble **out);

/**
 * Serialises an ensemble as checkpoint JSON; free with [`ech_string_free`].
 *
 * # Safety
 * `handle` must be a live ensemble handle; `out` writable.
 */
enum EchStatus ech_ensemble_to_checkpoint(const struct EchEnsemble *handle, char **out);

/**
 * Number of input features the ensemble expects, or 0 for a null handle.
 *
 * # Safety
 * `handle` must be null or a live ensemble handle.
 */
size_t ech_ensemble_width(const struct EchEnsemble *handle);

/**
 * Predicts one raw feature row of length `width`.
 *
 * # Safety
 * `handle` must be a live ensemble handle, `x` valid for `width` values and
 * `out` writable.
 */
enum EchStatus ech_ensemble_predict(const struct EchEnsemble *handle,
                                    const double *x,
                                    size_t width,
                                    struct EchPrediction *out);

/**
 * Releases an ensemble handle.
 *
 * # Safety
 * `handle` must be null or a handle from this library, freed once.
 */
void ech_ensemble_free(struct EchEnsemble *handle);

/**
 * Encodes an uncertainty response frame (newline terminated); free with
 * [`ech_string_free`].
 *
 * # Safety
 * String arguments must be NUL-terminated; `out` writable.
 */
enum EchStatus ech_encode_response(const char *actor_id,
                                   const char *call_id,
                                   double total_uncertainty,
                                   char **out);

/**
 * Decodes one frame of `len` bytes and reports its kind and call id (free
 * with [`ech_string_free`]). For responses `total_uncertainty` receives the
 * scalar; it is left untouched otherwise. Optional outputs may be null.
 *
 * # Safety
 * `frame` must be valid for `len` bytes; non-null outputs writable.
 */
enum EchStatus ech_decode_message(const uint8_t *frame,
                                  size_t len,
                                  enum EchMessageKind *kind,
                                  char **call_id,
                                  double *total_uncertainty);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ECHELON_H */
