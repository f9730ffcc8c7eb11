#ifndef REVODE_H
#define REVODE_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

enum RevodeStatus
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : int32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  REVODE_STATUS_OK = 0,
  REVODE_STATUS_NULL_POINTER = 1,
  REVODE_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The noise predictor failed (callback error, unknown condition, ...).
   */
  REVODE_STATUS_FIELD = 3,
  /**
   * Non-finite or exploding state.
   */
  REVODE_STATUS_DIVERGED = 4,
  REVODE_STATUS_END_OF_GRID = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  REVODE_STATUS_PANIC = 6,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum RevodeStatus RevodeStatus;
#else
typedef int32_t RevodeStatus;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

typedef enum RevodeScheduleKind {
  REVODE_SCHEDULE_KIND_LINEAR_BETA = 0,
  REVODE_SCHEDULE_KIND_COSINE = 1,
} RevodeScheduleKind;

typedef enum RevodeVariable {
  /**
   * The solver's own default grid variable.
   */
  REVODE_VARIABLE_SOLVER_DEFAULT = 0,
  REVODE_VARIABLE_T = 1,
  REVODE_VARIABLE_LAMBDA = 2,
  REVODE_VARIABLE_RATIO = 3,
} RevodeVariable;

typedef enum RevodeDirection {
  /**
   * Data towards noise.
   */
  REVODE_DIRECTION_INVERSION = 0,
  /**
   * Noise towards data.
   */
  REVODE_DIRECTION_SAMPLING = 1,
} RevodeDirection;

/**
 * Noise-predictor handle.
 */
typedef struct RevodeField RevodeField;

/**
 * Solver state handle.
 */
typedef struct RevodeSession RevodeSession;

typedef struct RevodeSchedule {
  enum RevodeScheduleKind kind;
  double beta_min;
  double beta_max;
  double cosine_offset;
  double horizon;
  /**
   * Values <= 0 select the default `1e-3 · horizon`.
   */
  double t_min;
} RevodeSchedule;

/**
 * Host noise predictor. Receives the state and the noise level (as `t`, `λ`
 * and the `α`, `σ` the native kernels use); writes `dim` values to `eps_out`
 * and returns 0, or returns non-zero to abort the solve.
 */
typedef int32_t (*RevodeEpsCallback)(void *user_data,
                                     const double *x,
                                     size_t dim,
                                     double t,
                                     double lambda,
                                     double alpha,
                                     double sigma,
                                     const char *condition,
                                     double *eps_out);

typedef struct RevodeGrid {
  enum RevodeVariable variable;
  size_t steps;
  /**
   * Fraction of the horizon traversed, in (0, 1].
   */
  double strength;
} RevodeGrid;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Fills `out` with the standard linear-β schedule (β from 0.1 to 20, T = 1).
 *
 * # Safety
 * `out` must be null or point to writable memory for one `RevodeSchedule`.
 */
RevodeStatus revode_schedule_default(struct RevodeSchedule *out);

/**
 * Wraps a host callback as a noise predictor of dimension `dim` that
 * accepts the `n_conditions` condition ids in `conditions`.
 *
 * # Safety
 * `conditions` must point to `n_conditions` NUL-terminated strings and `out`
 * to writable memory for one pointer. `callback` must be safe to call with
 * `user_data` for as long as the returned handle lives.
 */
RevodeStatus revode_field_callback_new(size_t dim,
                                       RevodeEpsCallback callback,
                                       void *user_data,
                                       const char *const *conditions,
                                       size_t n_conditions,
                                       struct RevodeField **out);

/**
 * Analytic Gaussian predictor: data `N(means[k], spread² I)` under condition
 * `ids[k]`, each mean of length `dim`.
 *
 * # Safety
 * `ids` must point to `n_conditions` strings, `means` to `n_conditions · dim`
 * doubles and `out` to writable memory for one pointer.
 */
RevodeStatus revode_field_gaussian_new(size_t dim,
                                       const char *const *ids,
                                       const double *means,
                                       size_t n_conditions,
                                       double spread,
                                       struct RevodeField **out);

/**
 * Host callbacks made through this handle so far (0 for analytic fields).
 *
 * # Safety
 * `field` must be null or a live handle.
 */
size_t revode_field_callback_count(const struct RevodeField *field);

/**
 * # Safety
 * `field` must be null or a handle not yet freed.
 */
void revode_field_free(struct RevodeField *field);

/**
 * Integrates `x0` across a fresh grid in `direction` with solver `solver`
 * (`name` or `name:key=value,...`). Any output pointer may be null.
 * `grid_values_out` receives `steps + 1` node values and `states_out`
 * `(steps + 1) · dim` states, in the order visited; on failure the entries
 * reached before the error are written.
 *
 * # Safety
 * Strings must be NUL-terminated, `x0` must hold `dim` doubles and every
 * non-null output must be large enough for what is written to it.
 */
RevodeStatus revode_run(const char *solver,
                        const char *formulation,
                        const struct RevodeSchedule *schedule,
                        const struct RevodeGrid *grid,
                        enum RevodeDirection dir,
                        const struct RevodeField *field,
                        const char *condition,
                        double guidance_scale,
                        const double *x0,
                        size_t dim,
                        double *grid_values_out,
                        double *states_out,
                        double *terminal_out,
                        size_t *nfe_out);

/**
 * Creates a session positioned at the start of its grid for `dir`.
 *
 * # Safety
 * As for [`revode_run`]; `out` must point to writable memory for one pointer.
 */
RevodeStatus revode_session_new(const char *solver,
                                const char *formulation,
                                const struct RevodeSchedule *schedule,
                                const struct RevodeGrid *grid,
                                enum RevodeDirection dir,
                                const double *x0,
                                size_t dim,
                                struct RevodeSession **out);

/**
 * Takes one step in `dir`; either direction may follow the other.
 *
 * # Safety
 * `session` and `field` must be live handles and `condition` a NUL-terminated string.
 */
RevodeStatus revode_session_step(struct RevodeSession *session,
                                 const struct RevodeField *field,
                                 const char *condition,
                                 double guidance_scale,
                                 enum RevodeDirection dir);

/**
 * Copies the current primary state (`dim` doubles) into `out`.
 *
 * # Safety
 * `session` must be a live handle and `out` writable for `dim` doubles.
 */
RevodeStatus revode_session_state(const struct RevodeSession *session, double *out, size_t dim);

/**
 * Current grid index (0 = low-noise end), or `SIZE_MAX` for a null handle.
 *
 * # Safety
 * `session` must be null or a live handle.
 */
size_t revode_session_position(const struct RevodeSession *session);

/**
 * Predictor evaluations made by the session so far.
 *
 * # Safety
 * `session` must be null or a live handle.
 */
size_t revode_session_nfe(const struct RevodeSession *session);

/**
 * # Safety
 * `session` must be null or a handle not yet freed.
 */
void revode_session_free(struct RevodeSession *session);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `cap > 0`) and returns its full length in bytes.
 *
 * # Safety
 * `buf` must be null or writable for `cap` bytes.
 */
size_t revode_last_error_message(char *buf, size_t cap);

/**
 * Solver step (0-based count of completed steps) at which the last error
 * occurred, or -1 if it was not raised inside a step.
 */
int64_t revode_last_error_step(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REVODE_H */
