#ifndef LAWREG_H
#define LAWREG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes.
 */
typedef enum {
  LAWREG_STATUS_OK = 0,
  LAWREG_STATUS_NULL_POINTER = 1,
  LAWREG_STATUS_INVALID_ARGUMENT = 2,
  LAWREG_STATUS_INVALID_UTF8 = 3,
  LAWREG_STATUS_BUFFER_TOO_SMALL = 4,
  LAWREG_STATUS_INVALID_GRID = 5,
  LAWREG_STATUS_GRID_TOO_COARSE = 6,
  LAWREG_STATUS_DIMENSION_MISMATCH = 7,
  LAWREG_STATUS_NOT_YOUNG = 8,
  LAWREG_STATUS_NON_INTEGRABLE = 9,
  LAWREG_STATUS_CURVE_TOO_SHORT = 10,
  LAWREG_STATUS_SINGULAR_COVARIANCE = 11,
  LAWREG_STATUS_UNSTABLE_GRID = 12,
  LAWREG_STATUS_POINTS_TOO_CLOSE = 13,
  LAWREG_STATUS_CONFIG_ERROR = 14,
  /**
   * Any other numerical failure of the core library.
   */
  LAWREG_STATUS_NUMERICAL = 15,
  LAWREG_STATUS_PANIC = 16,
} LawregStatus;

/**
 * Verdict codes of a finished run.
 */
typedef enum {
  /**
   * The run was a check suite without a balance verdict.
   */
  LAWREG_VERDICT_NONE = 0,
  LAWREG_VERDICT_REGULAR = 1,
  LAWREG_VERDICT_INCONCLUSIVE = 2,
} LawregVerdict;

/**
 * Function sampled on a regular lattice.
 */
typedef struct LawregGrid LawregGrid;

/**
 * Weighted particle measure.
 */
typedef struct LawregMeasure LawregMeasure;

/**
 * Result of a config-driven experiment.
 */
typedef struct LawregReport LawregReport;

/**
 * Young function handle.
 */
typedef struct LawregYoung LawregYoung;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message.
 *
 * # Safety
 * `buf` must hold `cap` bytes (or be null with `cap == 0`); `needed` may be null.
 */
LawregStatus lawreg_last_error(char *buf, size_t cap, size_t *needed);

/**
 * Library version as a static NUL-terminated string.
 */
const char *lawreg_version(void);

/**
 * Normalized Hermite function `h_n(t)`.
 */
double lawreg_hermite_h(size_t n, double t);

/**
 * Neumann heat kernel `G_t(x, y)` on `[0, 1]` (NaN for `t <= 0`).
 */
double lawreg_neumann_kernel(double t, double x, double y);

/**
 * `e(t) = (1 + |t|) ln(1 + |t|)`.
 *
 * # Safety
 * `out` must be valid for writes.
 */
LawregStatus lawreg_young_log_entropy(LawregYoung **out);

/**
 * `e(t) = t^p`, `p > 1`.
 *
 * # Safety
 * `out` must be valid for writes.
 */
LawregStatus lawreg_young_power(double p, LawregYoung **out);

/**
 * Evaluates `e(t)`.
 *
 * # Safety
 * `e` must be a live handle; `out` valid for writes.
 */
LawregStatus lawreg_young_eval(const LawregYoung *e, double t, double *out);

/**
 * `beta_e(t)`.
 *
 * # Safety
 * `e` must be a live handle; `out` valid for writes.
 */
LawregStatus lawreg_young_beta(const LawregYoung *e, double t, double *out);

/**
 * # Safety
 * `e` must come from a `lawreg_young_*` constructor and not be used afterwards.
 */
void lawreg_young_free(LawregYoung *e);

/**
 * Lattice function: `dim` axes, axis `a` spanning `[lo[a], hi[a]]` with `n[a]` nodes,
 * `values` row-major with the last axis fastest.
 *
 * # Safety
 * `lo`, `hi`, `n` hold `dim` entries; `values` holds `prod n` entries; `out` valid for writes.
 */
LawregStatus lawreg_grid_new(size_t dim,
                             const double *lo,
                             const double *hi,
                             const size_t *n,
                             const double *values,
                             LawregGrid **out);

/**
 * Number of lattice nodes.
 *
 * # Safety
 * `g` must be a live handle.
 */
size_t lawreg_grid_len(const LawregGrid *g);

/**
 * Luxembourg norm `||g||_(e)`.
 *
 * # Safety
 * Handles must be live; `out` valid for writes.
 */
LawregStatus lawreg_luxembourg_norm(const LawregGrid *g, const LawregYoung *e, double *out);

/**
 * `sum_{|alpha| <= k} ||d^alpha g||_(e)`.
 *
 * # Safety
 * Handles must be live; `out` valid for writes.
 */
LawregStatus lawreg_sobolev_orlicz_norm(const LawregGrid *g,
                                        size_t k,
                                        const LawregYoung *e,
                                        double *out);

/**
 * # Safety
 * `g` must come from [`lawreg_grid_new`] and not be used afterwards.
 */
void lawreg_grid_free(LawregGrid *g);

/**
 * Weighted particles; `positions` row-major (`dim` per particle).
 * `weights` may be null for the empirical measure.
 *
 * # Safety
 * `positions` holds `dim * n` entries, `weights` (if non-null) `n`; `out` valid for writes.
 */
LawregStatus lawreg_measure_new(size_t dim,
                                size_t n,
                                const double *positions,
                                const double *weights,
                                LawregMeasure **out);

/**
 * Certified lower bound on `d_k(mu, nu)` from the standard dictionary centred at
 * `center` (`dim` entries) with length scale `scale`.
 *
 * # Safety
 * Handles must be live; `center` holds `dim` entries; `out` valid for writes.
 */
LawregStatus lawreg_dk_lower(const LawregMeasure *mu,
                             const LawregMeasure *nu,
                             size_t k,
                             const double *center,
                             double scale,
                             double *out);

/**
 * # Safety
 * `m` must come from [`lawreg_measure_new`] and not be used afterwards.
 */
void lawreg_measure_free(LawregMeasure *m);

/**
 * Runs a JSON experiment config (the CLI format) in the global thread pool.
 * Config errors return `LAWREG_STATUS_CONFIG_ERROR` with a `line:column: message` error.
 *
 * # Safety
 * `config` must be a NUL-terminated string; `out` valid for writes.
 */
LawregStatus lawreg_run(const char *config, LawregReport **out);

/**
 * Whether the run passed (regular verdict or all checks met).
 *
 * # Safety
 * `r` must be a live handle.
 */
bool lawreg_report_pass(const LawregReport *r);

/**
 * # Safety
 * `r` must be a live handle.
 */
LawregVerdict lawreg_report_verdict(const LawregReport *r);

/**
 * Copies the `report.json` document.
 *
 * # Safety
 * `r` must be a live handle; `buf` holds `cap` bytes (or is null with `cap == 0`).
 */
LawregStatus lawreg_report_json(const LawregReport *r, char *buf, size_t cap, size_t *needed);

/**
 * # Safety
 * `r` must come from [`lawreg_run`] and not be used afterwards.
 */
void lawreg_report_free(LawregReport *r);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LAWREG_H */
