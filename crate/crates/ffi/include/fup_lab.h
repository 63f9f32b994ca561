#ifndef FUP_LAB_H
#define FUP_LAB_H

#include <stddef.h>
#include <stdint.h>

/**
 * Result codes. Values 1 to 4 agree with the exit codes of the `fup-lab` binary.
 */
typedef enum FupStatus {
  FUP_STATUS_OK = 0,
  FUP_STATUS_INVARIANT = 1,
  FUP_STATUS_INVALID_INPUT = 2,
  FUP_STATUS_BUDGET = 3,
  FUP_STATUS_NON_CONVERGENCE = 4,
  FUP_STATUS_IO = 5,
  FUP_STATUS_NULL_POINTER = 6,
  FUP_STATUS_PANIC = 7,
} FupStatus;

/**
 * A finite weighted point set.
 */
typedef struct FupMeasure FupMeasure;

/**
 * A Schottky group with its defining disks.
 */
typedef struct FupSchottky FupSchottky;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *fup_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fup_version(void);

/**
 * Uniform measure on the level-`k` Cantor set with base `m` and digit set `digits`.
 *
 * # Safety
 * `digits` must point to `n_digits` values and `result` must be writable.
 */
enum FupStatus fup_measure_cantor(uint32_t m,
                                  const uint32_t *digits,
                                  size_t n_digits,
                                  uint32_t k,
                                  struct FupMeasure **result);

/**
 * `count` uniform random points in `[0,1]^dim`.
 *
 * # Safety
 * `result` must be writable.
 */
enum FupStatus fup_measure_cloud(size_t dim,
                                 size_t count,
                                 double scale_floor,
                                 uint64_t seed,
                                 struct FupMeasure **result);

/**
 * # Safety
 * `mu` must come from a `fup_measure_*` constructor, or be null.
 */
void fup_measure_free(struct FupMeasure *mu);

/**
 * Number of atoms, or 0 for a null handle.
 *
 * # Safety
 * `mu` must be a live handle or null.
 */
size_t fup_measure_len(const struct FupMeasure *mu);

/**
 * Ambient dimension, or 0 for a null handle.
 *
 * # Safety
 * `mu` must be a live handle or null.
 */
size_t fup_measure_dim(const struct FupMeasure *mu);

/**
 * Copies atom coordinates (row-major, `len * dim` values) and weights
 * (`len` values) into caller buffers. Either buffer may be null to skip it.
 *
 * # Safety
 * Non-null buffers must hold at least the stated number of values.
 */
enum FupStatus fup_measure_copy(const struct FupMeasure *mu, double *coords, double *weights);

/**
 * Norm of the Cantor DFT submatrix `1_{C_k} F_N 1_{C_k'}` for `N = m^k`.
 *
 * # Safety
 * Digit pointers must hold the stated counts; `norm` must be writable.
 */
enum FupStatus fup_cantor_norm(uint32_t m,
                               const uint32_t *a,
                               size_t n_a,
                               const uint32_t *b,
                               size_t n_b,
                               uint32_t k,
                               double *norm);

/**
 * Upper regularity constant of `mu` with exponent `delta` over dyadic scales in `[alpha, beta]`.
 *
 * # Safety
 * `mu` must be a live handle and `value` writable.
 */
enum FupStatus fup_regularity_constant(const struct FupMeasure *mu,
                                       double alpha,
                                       double beta,
                                       double delta,
                                       double *value);

/**
 * Operator norm of `f -> integral exp(-i x.y / h) f(y) dmu_y` from
 * `L^2(mu_y)` to `L^2(mu_x)`.
 *
 * # Safety
 * Both handles must be live; `norm` must be writable.
 */
enum FupStatus fup_fio_norm(const struct FupMeasure *mu_x,
                            const struct FupMeasure *mu_y,
                            double h,
                            double *norm);

/**
 * Schottky group from `n` disks given by centre coordinates and radii.
 * Disk `i` is paired with disk `i + n/2`.
 *
 * # Safety
 * The three arrays must hold `n` values; `result` must be writable.
 */
enum FupStatus fup_schottky_from_disks(const double *cx,
                                       const double *cy,
                                       const double *r,
                                       size_t n,
                                       struct FupSchottky **result);

/**
 * The built-in genus-two configuration of four unit disks.
 *
 * # Safety
 * `result` must be writable.
 */
enum FupStatus fup_schottky_default(struct FupSchottky **result);

/**
 * # Safety
 * `g` must come from a `fup_schottky_*` constructor, or be null.
 */
void fup_schottky_free(struct FupSchottky *g);

/**
 * Genus, or 0 for a null handle.
 *
 * # Safety
 * `g` must be a live handle or null.
 */
size_t fup_schottky_genus(const struct FupSchottky *g);

/**
 * Largest distance by which every line or circle in the plane misses at
 * least one of the four disks (genus two only).
 *
 * # Safety
 * `g` must be live; `margin` writable.
 */
enum FupStatus fup_schottky_circle_margin(const struct FupSchottky *g, double *margin);

/**
 * Limit set sampled by one point per reduced word of length `depth`, as a
 * uniform measure in the unit square.
 *
 * # Safety
 * `g` must be live; `result` writable.
 */
enum FupStatus fup_schottky_limit_set(const struct FupSchottky *g,
                                      size_t depth,
                                      struct FupMeasure **result);

/**
 * Runs an experiment config (the JSON accepted by `fup-lab run`). A
 * non-null `output_dir` replaces the directory named in the config.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string; `output_dir` likewise or null.
 */
enum FupStatus fup_run_config(const char *config_json, const char *output_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FUP_LAB_H */
