/* C interface to the spinecho pulsed-magnetic-resonance toolkit.
* Regenerated by the crate build script; do not edit by hand. */

#ifndef SPINECHO_H
#define SPINECHO_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible interface call.
 */
enum SeStatus
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : int32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  SeStatus_Ok = 0,
  SeStatus_NullPointer = 1,
  SeStatus_InvalidArgument = 2,
  SeStatus_ParseError = 3,
  SeStatus_FitFailed = 4,
  SeStatus_BufferTooSmall = 5,
  SeStatus_InternalPanic = 6,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum SeStatus SeStatus;
#else
typedef int32_t SeStatus;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

/**
 * Termination state of a fit, mirrored as plain integers.
 */
enum SeFitStatus
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : int32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  SeFitStatus_Converged = 0,
  SeFitStatus_MaxIter = 1,
  SeFitStatus_Singular = 2,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum SeFitStatus SeFitStatus;
#else
typedef int32_t SeFitStatus;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

/**
 * Opaque echo-train handle.
 */
typedef struct SeEchoTrain SeEchoTrain;

/**
 * Opaque fit-result handle.
 */
typedef struct SeFitResult SeFitResult;

/**
 * Opaque time-series handle.
 */
typedef struct SeTimeSeries SeTimeSeries;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread; never free it.
 */
const char *se_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *se_version(void);

/**
 * Carr-Purcell echo magnitude after the `n`th refocusing pulse for a
 * Gaussian per-pulse flip error `Normal(delta0, sigma)`. `out_warning`
 * (optional) becomes nonzero when the requested point lies outside the
 * validated numerical domain.
 *
 * # Safety
 * `out_value` must be valid for a write; `out_warning` may be null.
 */
SeStatus se_cp_echo_amplitude(uint32_t n,
                              double delta0,
                              double sigma,
                              double *out_value,
                              int32_t *out_warning);

/**
 * Gaussian small-error approximation `exp(-sigma^2 n^2 / 4)`.
 *
 * # Safety
 * `out_value` must be valid for a write.
 */
SeStatus se_cp_echo_amplitude_approx(uint32_t n, double sigma, double *out_value);

/**
 * Carr-Purcell decay including transverse relaxation.
 *
 * # Safety
 * `out_value` must be valid for a write; `out_warning` may be null.
 */
SeStatus se_cp_decay_model(uint32_t n,
                           double tau_us,
                           double delta0,
                           double sigma,
                           double t2_us,
                           double *out_value,
                           int32_t *out_warning);

/**
 * CPMG echo decay `exp(-2 n tau / t2)`.
 *
 * # Safety
 * `out_value` must be valid for a write.
 */
SeStatus se_cpmg_decay_model(uint32_t n, double tau_us, double t2_us, double *out_value);

/**
 * Phase-error-amplification echo pair after `m_cycles` full cycles.
 *
 * # Safety
 * `out_in_phase` and `out_quadrature` must be valid for writes.
 */
SeStatus se_spam_echo_model(uint32_t m_cycles,
                            double tau_us,
                            double delta,
                            double t2_us,
                            double *out_in_phase,
                            double *out_quadrature);

/**
 * Quadrature-detector free-induction-decay channels.
 *
 * # Safety
 * `out_in_phase` and `out_quadrature` must be valid for writes.
 */
SeStatus se_fid_quadrature_model(double t_us,
                                 double detuning_rad_per_us,
                                 double skew,
                                 double t2star_us,
                                 double phase0,
                                 double *out_in_phase,
                                 double *out_quadrature);

/**
 * Damped nutation signal for a Gaussian drive-amplitude spread.
 *
 * # Safety
 * `out_value` must be valid for a write.
 */
SeStatus se_rabi_envelope_model(double t_us,
                                double omega_rad_per_us,
                                double sigma_scale,
                                double *out_value);

/**
 * Rotation angle (rad) of a hard pulse of field `b1_tesla` and duration
 * `duration_s`, for electron g-factor `g` (pass 0 for the default 2.003).
 *
 * # Safety
 * `out_value` must be valid for a write.
 */
SeStatus se_pulse_flip_angle(double b1_tesla, double duration_s, double g, double *out_value);

/**
 * Run an echo-sequence manifest (JSON, same schema as the CLI) and return
 * an owned echo-train handle. Additive channel noise from the manifest's
 * `noise_std` is applied.
 *
 * # Safety
 * `json` must be NUL-terminated; `out` must be valid for a write. The
 * returned handle must be released with [`se_echo_train_free`].
 */
SeStatus se_simulate_echo_train(const char *json, struct SeEchoTrain **out);

/**
 * Run a time-domain manifest (Rabi or FID) and return an owned handle.
 *
 * # Safety
 * `json` must be NUL-terminated; `out` must be valid for a write. The
 * returned handle must be released with [`se_time_series_free`].
 */
SeStatus se_simulate_time_series(const char *json, struct SeTimeSeries **out);

/**
 * Number of recorded echoes.
 *
 * # Safety
 * `train` must be a live handle from this library (or null, giving 0).
 */
uintptr_t se_echo_train_len(const struct SeEchoTrain *train);

/**
 * Copy one echo row. Output pointers may individually be null to skip a
 * column.
 *
 * # Safety
 * `train` must be a live handle; non-null outputs must be valid for writes.
 */
SeStatus se_echo_train_row(const struct SeEchoTrain *train,
                           uintptr_t index,
                           uint32_t *out_n,
                           double *out_time_us,
                           double *out_in_phase,
                           double *out_quadrature);

/**
 * Release an echo-train handle. Null is ignored.
 *
 * # Safety
 * `train` must be a handle returned by this library, not yet freed.
 */
void se_echo_train_free(struct SeEchoTrain *train);

/**
 * Number of recorded samples.
 *
 * # Safety
 * `series` must be a live handle from this library (or null, giving 0).
 */
uintptr_t se_time_series_len(const struct SeTimeSeries *series);

/**
 * Copy one sample row; output pointers may individually be null.
 *
 * # Safety
 * `series` must be a live handle; non-null outputs must be valid for writes.
 */
SeStatus se_time_series_row(const struct SeTimeSeries *series,
                            uintptr_t index,
                            double *out_t_us,
                            double *out_in_phase,
                            double *out_quadrature);

/**
 * Release a time-series handle. Null is ignored.
 *
 * # Safety
 * `series` must be a handle returned by this library, not yet freed.
 */
void se_time_series_free(struct SeTimeSeries *series);

/**
 * Fit a CPMG train to an exponential decay; free `(amplitude, t2)`.
 *
 * # Safety
 * `train` must be a live handle; `out` must be valid for a write. The
 * returned handle must be released with [`se_fit_result_free`].
 */
SeStatus se_fit_cpmg_t2(const struct SeEchoTrain *train, struct SeFitResult **out);

/**
 * Fit a Carr-Purcell train to the closed-form flip-error decay with the
 * relaxation time pinned; free `(amplitude, delta0, sigma)`.
 *
 * # Safety
 * `train` must be a live handle; `out` must be valid for a write. The
 * returned handle must be released with [`se_fit_result_free`].
 */
SeStatus se_fit_cp_errors(const struct SeEchoTrain *train, double t2_us, struct SeFitResult **out);

/**
 * Fit a phase-error-amplification train; free `(amplitude, delta)`.
 * `all_echoes` nonzero fits every echo, zero only cycle-end echoes.
 *
 * # Safety
 * `train` must be a live handle; `out` must be valid for a write. The
 * returned handle must be released with [`se_fit_result_free`].
 */
SeStatus se_fit_spam_phase(const struct SeEchoTrain *train,
                           double t2_us,
                           int32_t all_echoes,
                           struct SeFitResult **out);

/**
 * Fit both channels of a free-induction decay to the quadrature-detector
 * model; free `(amplitude, detuning, phase0, skew, t2star)`.
 *
 * # Safety
 * `series` must be a live handle; `out` must be valid for a write. The
 * returned handle must be released with [`se_fit_result_free`].
 */
SeStatus se_fit_detector_skew(const struct SeTimeSeries *series, struct SeFitResult **out);

/**
 * Termination state of a fit (`SeFitStatus` values; `Converged` on null).
 *
 * # Safety
 * `result` must be a live handle or null.
 */
SeFitStatus se_fit_result_status(const struct SeFitResult *result);

/**
 * Number of reported parameters (fitted plus derived).
 *
 * # Safety
 * `result` must be a live handle or null (giving 0).
 */
uintptr_t se_fit_result_len(const struct SeFitResult *result);

/**
 * Copy one parameter: NUL-terminated name into `name_buf` (capacity
 * `name_capacity`), value and 1-sigma uncertainty into the out pointers.
 *
 * # Safety
 * `result` must be a live handle; `name_buf` must have the stated capacity;
 * non-null outputs must be valid for writes.
 */
SeStatus se_fit_result_param(const struct SeFitResult *result,
                             uintptr_t index,
                             char *name_buf,
                             uintptr_t name_capacity,
                             double *out_value,
                             double *out_sigma);

/**
 * Look up a parameter by name (fitted or derived).
 *
 * # Safety
 * `result` must be a live handle; `name` NUL-terminated; non-null outputs
 * valid for writes.
 */
SeStatus se_fit_result_lookup(const struct SeFitResult *result,
                              const char *name,
                              double *out_value,
                              double *out_sigma);

/**
 * Euclidean norm of the residual vector at the solution.
 *
 * # Safety
 * `result` must be a live handle or null (giving NaN).
 */
double se_fit_result_residual_norm(const struct SeFitResult *result);

/**
 * Render the full fit result as a JSON string; free it with
 * [`se_string_free`].
 *
 * # Safety
 * `result` must be a live handle.
 */
char *se_fit_result_to_json(const struct SeFitResult *result);

/**
 * Release a fit-result handle. Null is ignored.
 *
 * # Safety
 * `result` must be a handle returned by this library, not yet freed.
 */
void se_fit_result_free(struct SeFitResult *result);

/**
 * Release a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must be a string returned by this library, not yet freed.
 */
void se_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPINECHO_H */
