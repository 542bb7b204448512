//! C ABI for the spinecho toolkit.
//!
//! Simulation results and fit results are exposed as opaque handles with
//! accessor functions; every fallible call returns an [`SeStatus`] code and
//! leaves a human-readable message for [`se_last_error_message`]. All
//! functions catch panics at the boundary. Angles are radians, times
//! microseconds unless a name says otherwise.

use spinecho::fit::{self, EchoSelection, FitResult, FitStatus};
use spinecho::io;
use spinecho::models;
use spinecho::sequence::{run_sequence, EchoTrain, SimOutput, TimeSeries};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

/// Result code of every fallible interface call.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ParseError = 3,
    FitFailed = 4,
    BufferTooSmall = 5,
    InternalPanic = 6,
}

/// Termination state of a fit, mirrored as plain integers.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeFitStatus {
    Converged = 0,
    MaxIter = 1,
    Singular = 2,
}

/// Opaque echo-train handle.
pub struct SeEchoTrain(EchoTrain);

/// Opaque time-series handle.
pub struct SeTimeSeries(TimeSeries);

/// Opaque fit-result handle.
pub struct SeFitResult(FitResult);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: impl AsRef<str>) {
    let sanitized = message.as_ref().replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread; never free it.
#[no_mangle]
pub extern "C" fn se_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn se_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

fn guard<F: FnOnce() -> SeStatus>(body: F) -> SeStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            SeStatus::InternalPanic
        }
    }
}

/// # Safety
/// `out` must be valid for a single write.
unsafe fn write_out<T>(out: *mut T, value: T) -> SeStatus {
    if out.is_null() {
        set_error("output pointer is null");
        return SeStatus::NullPointer;
    }
    unsafe { out.write(value) };
    SeStatus::Ok
}

// ---------------------------------------------------------------------------
// Closed-form models

/// Carr-Purcell echo magnitude after the `n`th refocusing pulse for a
/// Gaussian per-pulse flip error `Normal(delta0, sigma)`. `out_warning`
/// (optional) becomes nonzero when the requested point lies outside the
/// validated numerical domain.
///
/// # Safety
/// `out_value` must be valid for a write; `out_warning` may be null.
#[no_mangle]
pub unsafe extern "C" fn se_cp_echo_amplitude(
    n: u32,
    delta0: f64,
    sigma: f64,
    out_value: *mut f64,
    out_warning: *mut i32,
) -> SeStatus {
    guard(|| match models::cp_echo_amplitude(n as usize, delta0, sigma) {
        Ok(amp) => {
            if !out_warning.is_null() {
                unsafe { out_warning.write(amp.warning.is_some() as i32) };
            }
            unsafe { write_out(out_value, amp.value) }
        }
        Err(e) => {
            set_error(e.to_string());
            SeStatus::InvalidArgument
        }
    })
}

/// Gaussian small-error approximation `exp(-sigma^2 n^2 / 4)`.
///
/// # Safety
/// `out_value` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn se_cp_echo_amplitude_approx(
    n: u32,
    sigma: f64,
    out_value: *mut f64,
) -> SeStatus {
    guard(|| match models::cp_echo_amplitude_approx(n as usize, sigma) {
        Ok(v) => unsafe { write_out(out_value, v) },
        Err(e) => {
            set_error(e.to_string());
            SeStatus::InvalidArgument
        }
    })
}

/// Carr-Purcell decay including transverse relaxation.
///
/// # Safety
/// `out_value` must be valid for a write; `out_warning` may be null.
#[no_mangle]
pub unsafe extern "C" fn se_cp_decay_model(
    n: u32,
    tau_us: f64,
    delta0: f64,
    sigma: f64,
    t2_us: f64,
    out_value: *mut f64,
    out_warning: *mut i32,
) -> SeStatus {
    guard(
        || match models::cp_decay_model(n as usize, tau_us, delta0, sigma, t2_us) {
            Ok(amp) => {
                if !out_warning.is_null() {
                    unsafe { out_warning.write(amp.warning.is_some() as i32) };
                }
                unsafe { write_out(out_value, amp.value) }
            }
            Err(e) => {
                set_error(e.to_string());
                SeStatus::InvalidArgument
            }
        },
    )
}

/// CPMG echo decay `exp(-2 n tau / t2)`.
///
/// # Safety
/// `out_value` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn se_cpmg_decay_model(
    n: u32,
    tau_us: f64,
    t2_us: f64,
    out_value: *mut f64,
) -> SeStatus {
    guard(|| unsafe { write_out(out_value, models::cpmg_decay_model(n as usize, tau_us, t2_us)) })
}

/// Phase-error-amplification echo pair after `m_cycles` full cycles.
///
/// # Safety
/// `out_in_phase` and `out_quadrature` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn se_spam_echo_model(
    m_cycles: u32,
    tau_us: f64,
    delta: f64,
    t2_us: f64,
    out_in_phase: *mut f64,
    out_quadrature: *mut f64,
) -> SeStatus {
    guard(|| {
        let (i, q) = models::spam_echo_model(m_cycles as usize, tau_us, delta, t2_us);
        let status = unsafe { write_out(out_in_phase, i) };
        if status != SeStatus::Ok {
            return status;
        }
        unsafe { write_out(out_quadrature, q) }
    })
}

/// Quadrature-detector free-induction-decay channels.
///
/// # Safety
/// `out_in_phase` and `out_quadrature` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn se_fid_quadrature_model(
    t_us: f64,
    detuning_rad_per_us: f64,
    skew: f64,
    t2star_us: f64,
    phase0: f64,
    out_in_phase: *mut f64,
    out_quadrature: *mut f64,
) -> SeStatus {
    guard(|| {
        let (i, q) =
            models::fid_quadrature_model(t_us, detuning_rad_per_us, skew, t2star_us, phase0);
        let status = unsafe { write_out(out_in_phase, i) };
        if status != SeStatus::Ok {
            return status;
        }
        unsafe { write_out(out_quadrature, q) }
    })
}

/// Damped nutation signal for a Gaussian drive-amplitude spread.
///
/// # Safety
/// `out_value` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn se_rabi_envelope_model(
    t_us: f64,
    omega_rad_per_us: f64,
    sigma_scale: f64,
    out_value: *mut f64,
) -> SeStatus {
    guard(|| unsafe {
        write_out(
            out_value,
            models::rabi_envelope_model(t_us, omega_rad_per_us, sigma_scale),
        )
    })
}

/// Rotation angle (rad) of a hard pulse of field `b1_tesla` and duration
/// `duration_s`, for electron g-factor `g` (pass 0 for the default 2.003).
///
/// # Safety
/// `out_value` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn se_pulse_flip_angle(
    b1_tesla: f64,
    duration_s: f64,
    g: f64,
    out_value: *mut f64,
) -> SeStatus {
    guard(|| {
        let mut constants = models::CalibrationConstants::default();
        if g != 0.0 {
            constants.g = g;
        }
        match models::pulse_flip_angle(b1_tesla, duration_s, &constants) {
            Ok(v) => unsafe { write_out(out_value, v) },
            Err(e) => {
                set_error(e.to_string());
                SeStatus::InvalidArgument
            }
        }
    })
}

// ---------------------------------------------------------------------------
// Simulation

/// # Safety
/// `json` must be a NUL-terminated string.
unsafe fn manifest_from_ptr(json: *const c_char) -> Result<io::Manifest, SeStatus> {
    if json.is_null() {
        set_error("manifest pointer is null");
        return Err(SeStatus::NullPointer);
    }
    let text = match unsafe { CStr::from_ptr(json) }.to_str() {
        Ok(t) => t,
        Err(_) => {
            set_error("manifest is not valid UTF-8");
            return Err(SeStatus::ParseError);
        }
    };
    io::parse_manifest(text, Path::new("<manifest>")).map_err(|e| {
        set_error(e.to_string());
        SeStatus::ParseError
    })
}

/// Run an echo-sequence manifest (JSON, same schema as the CLI) and return
/// an owned echo-train handle. Additive channel noise from the manifest's
/// `noise_std` is applied.
///
/// # Safety
/// `json` must be NUL-terminated; `out` must be valid for a write. The
/// returned handle must be released with [`se_echo_train_free`].
#[no_mangle]
pub unsafe extern "C" fn se_simulate_echo_train(
    json: *const c_char,
    out: *mut *mut SeEchoTrain,
) -> SeStatus {
    guard(|| {
        let manifest = match unsafe { manifest_from_ptr(json) } {
            Ok(m) => m,
            Err(status) => return status,
        };
        match run_sequence(&manifest.sequence, &manifest.ensemble) {
            Ok(SimOutput::Echoes(mut train)) => {
                io::add_channel_noise_train(&mut train, manifest.noise_std, manifest.ensemble.seed);
                let handle = Box::into_raw(Box::new(SeEchoTrain(train)));
                unsafe { write_out(out, handle) }
            }
            Ok(SimOutput::Series(_)) => {
                set_error("manifest describes a time-series sequence; use se_simulate_time_series");
                SeStatus::InvalidArgument
            }
            Err(e) => {
                set_error(e.to_string());
                SeStatus::InvalidArgument
            }
        }
    })
}

/// Run a time-domain manifest (Rabi or FID) and return an owned handle.
///
/// # Safety
/// `json` must be NUL-terminated; `out` must be valid for a write. The
/// returned handle must be released with [`se_time_series_free`].
#[no_mangle]
pub unsafe extern "C" fn se_simulate_time_series(
    json: *const c_char,
    out: *mut *mut SeTimeSeries,
) -> SeStatus {
    guard(|| {
        let manifest = match unsafe { manifest_from_ptr(json) } {
            Ok(m) => m,
            Err(status) => return status,
        };
        match run_sequence(&manifest.sequence, &manifest.ensemble) {
            Ok(SimOutput::Series(mut series)) => {
                io::add_channel_noise_series(
                    &mut series,
                    manifest.noise_std,
                    manifest.ensemble.seed,
                );
                let handle = Box::into_raw(Box::new(SeTimeSeries(series)));
                unsafe { write_out(out, handle) }
            }
            Ok(SimOutput::Echoes(_)) => {
                set_error("manifest describes an echo sequence; use se_simulate_echo_train");
                SeStatus::InvalidArgument
            }
            Err(e) => {
                set_error(e.to_string());
                SeStatus::InvalidArgument
            }
        }
    })
}

/// Number of recorded echoes.
///
/// # Safety
/// `train` must be a live handle from this library (or null, giving 0).
#[no_mangle]
pub unsafe extern "C" fn se_echo_train_len(train: *const SeEchoTrain) -> usize {
    if train.is_null() {
        return 0;
    }
    unsafe { &*train }.0.entries.len()
}

/// Copy one echo row. Output pointers may individually be null to skip a
/// column.
///
/// # Safety
/// `train` must be a live handle; non-null outputs must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn se_echo_train_row(
    train: *const SeEchoTrain,
    index: usize,
    out_n: *mut u32,
    out_time_us: *mut f64,
    out_in_phase: *mut f64,
    out_quadrature: *mut f64,
) -> SeStatus {
    guard(|| {
        if train.is_null() {
            set_error("echo-train handle is null");
            return SeStatus::NullPointer;
        }
        let entries = &unsafe { &*train }.0.entries;
        let Some(e) = entries.get(index) else {
            set_error(format!(
                "echo index {index} out of range ({} rows)",
                entries.len()
            ));
            return SeStatus::InvalidArgument;
        };
        unsafe {
            if !out_n.is_null() {
                out_n.write(e.n as u32);
            }
            if !out_time_us.is_null() {
                out_time_us.write(e.time_us);
            }
            if !out_in_phase.is_null() {
                out_in_phase.write(e.in_phase);
            }
            if !out_quadrature.is_null() {
                out_quadrature.write(e.quadrature);
            }
        }
        SeStatus::Ok
    })
}

/// Release an echo-train handle. Null is ignored.
///
/// # Safety
/// `train` must be a handle returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn se_echo_train_free(train: *mut SeEchoTrain) {
    if !train.is_null() {
        drop(unsafe { Box::from_raw(train) });
    }
}

/// Number of recorded samples.
///
/// # Safety
/// `series` must be a live handle from this library (or null, giving 0).
#[no_mangle]
pub unsafe extern "C" fn se_time_series_len(series: *const SeTimeSeries) -> usize {
    if series.is_null() {
        return 0;
    }
    unsafe { &*series }.0.samples.len()
}

/// Copy one sample row; output pointers may individually be null.
///
/// # Safety
/// `series` must be a live handle; non-null outputs must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn se_time_series_row(
    series: *const SeTimeSeries,
    index: usize,
    out_t_us: *mut f64,
    out_in_phase: *mut f64,
    out_quadrature: *mut f64,
) -> SeStatus {
    guard(|| {
        if series.is_null() {
            set_error("time-series handle is null");
            return SeStatus::NullPointer;
        }
        let samples = &unsafe { &*series }.0.samples;
        let Some(s) = samples.get(index) else {
            set_error(format!(
                "sample index {index} out of range ({} rows)",
                samples.len()
            ));
            return SeStatus::InvalidArgument;
        };
        unsafe {
            if !out_t_us.is_null() {
                out_t_us.write(s.t_us);
            }
            if !out_in_phase.is_null() {
                out_in_phase.write(s.in_phase);
            }
            if !out_quadrature.is_null() {
                out_quadrature.write(s.quadrature);
            }
        }
        SeStatus::Ok
    })
}

/// Release a time-series handle. Null is ignored.
///
/// # Safety
/// `series` must be a handle returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn se_time_series_free(series: *mut SeTimeSeries) {
    if !series.is_null() {
        drop(unsafe { Box::from_raw(series) });
    }
}

// ---------------------------------------------------------------------------
// Fits

fn fit_to_handle(
    result: Result<FitResult, fit::FitError>,
    out: *mut *mut SeFitResult,
) -> SeStatus {
    match result {
        Ok(r) => {
            let handle = Box::into_raw(Box::new(SeFitResult(r)));
            unsafe { write_out(out, handle) }
        }
        Err(e) => {
            set_error(e.to_string());
            SeStatus::InvalidArgument
        }
    }
}

/// Fit a CPMG train to an exponential decay; free `(amplitude, t2)`.
///
/// # Safety
/// `train` must be a live handle; `out` must be valid for a write. The
/// returned handle must be released with [`se_fit_result_free`].
#[no_mangle]
pub unsafe extern "C" fn se_fit_cpmg_t2(
    train: *const SeEchoTrain,
    out: *mut *mut SeFitResult,
) -> SeStatus {
    guard(|| {
        if train.is_null() {
            set_error("echo-train handle is null");
            return SeStatus::NullPointer;
        }
        fit_to_handle(fit::fit_cpmg_t2(&unsafe { &*train }.0), out)
    })
}

/// Fit a Carr-Purcell train to the closed-form flip-error decay with the
/// relaxation time pinned; free `(amplitude, delta0, sigma)`.
///
/// # Safety
/// `train` must be a live handle; `out` must be valid for a write. The
/// returned handle must be released with [`se_fit_result_free`].
#[no_mangle]
pub unsafe extern "C" fn se_fit_cp_errors(
    train: *const SeEchoTrain,
    t2_us: f64,
    out: *mut *mut SeFitResult,
) -> SeStatus {
    guard(|| {
        if train.is_null() {
            set_error("echo-train handle is null");
            return SeStatus::NullPointer;
        }
        fit_to_handle(fit::fit_cp_errors(&unsafe { &*train }.0, t2_us), out)
    })
}

/// Fit a phase-error-amplification train; free `(amplitude, delta)`.
/// `all_echoes` nonzero fits every echo, zero only cycle-end echoes.
///
/// # Safety
/// `train` must be a live handle; `out` must be valid for a write. The
/// returned handle must be released with [`se_fit_result_free`].
#[no_mangle]
pub unsafe extern "C" fn se_fit_spam_phase(
    train: *const SeEchoTrain,
    t2_us: f64,
    all_echoes: i32,
    out: *mut *mut SeFitResult,
) -> SeStatus {
    guard(|| {
        if train.is_null() {
            set_error("echo-train handle is null");
            return SeStatus::NullPointer;
        }
        let selection = if all_echoes != 0 {
            EchoSelection::All
        } else {
            EchoSelection::CycleEnd
        };
        fit_to_handle(
            fit::fit_spam_phase(&unsafe { &*train }.0, t2_us, selection),
            out,
        )
    })
}

/// Fit both channels of a free-induction decay to the quadrature-detector
/// model; free `(amplitude, detuning, phase0, skew, t2star)`.
///
/// # Safety
/// `series` must be a live handle; `out` must be valid for a write. The
/// returned handle must be released with [`se_fit_result_free`].
#[no_mangle]
pub unsafe extern "C" fn se_fit_detector_skew(
    series: *const SeTimeSeries,
    out: *mut *mut SeFitResult,
) -> SeStatus {
    guard(|| {
        if series.is_null() {
            set_error("time-series handle is null");
            return SeStatus::NullPointer;
        }
        fit_to_handle(fit::fit_detector_skew(&unsafe { &*series }.0), out)
    })
}

/// Termination state of a fit (`SeFitStatus` values; `Converged` on null).
///
/// # Safety
/// `result` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn se_fit_result_status(result: *const SeFitResult) -> SeFitStatus {
    if result.is_null() {
        return SeFitStatus::Converged;
    }
    match unsafe { &*result }.0.status {
        FitStatus::Converged => SeFitStatus::Converged,
        FitStatus::MaxIter => SeFitStatus::MaxIter,
        FitStatus::Singular => SeFitStatus::Singular,
    }
}

/// Number of reported parameters (fitted plus derived).
///
/// # Safety
/// `result` must be a live handle or null (giving 0).
#[no_mangle]
pub unsafe extern "C" fn se_fit_result_len(result: *const SeFitResult) -> usize {
    if result.is_null() {
        return 0;
    }
    let r = &unsafe { &*result }.0;
    r.params.len() + r.derived.len()
}

/// Copy one parameter: NUL-terminated name into `name_buf` (capacity
/// `name_capacity`), value and 1-sigma uncertainty into the out pointers.
///
/// # Safety
/// `result` must be a live handle; `name_buf` must have the stated capacity;
/// non-null outputs must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn se_fit_result_param(
    result: *const SeFitResult,
    index: usize,
    name_buf: *mut c_char,
    name_capacity: usize,
    out_value: *mut f64,
    out_sigma: *mut f64,
) -> SeStatus {
    guard(|| {
        if result.is_null() {
            set_error("fit-result handle is null");
            return SeStatus::NullPointer;
        }
        let r = &unsafe { &*result }.0;
        let Some(p) = r.params.iter().chain(r.derived.iter()).nth(index) else {
            set_error(format!("parameter index {index} out of range"));
            return SeStatus::InvalidArgument;
        };
        if !name_buf.is_null() {
            let bytes = p.name.as_bytes();
            if name_capacity < bytes.len() + 1 {
                set_error(format!(
                    "name buffer too small: need {} bytes",
                    bytes.len() + 1
                ));
                return SeStatus::BufferTooSmall;
            }
            unsafe {
                std::ptr::copy_nonoverlapping(bytes.as_ptr(), name_buf as *mut u8, bytes.len());
                name_buf.add(bytes.len()).write(0);
            }
        }
        unsafe {
            if !out_value.is_null() {
                out_value.write(p.value);
            }
            if !out_sigma.is_null() {
                out_sigma.write(p.sigma);
            }
        }
        SeStatus::Ok
    })
}

/// Look up a parameter by name (fitted or derived).
///
/// # Safety
/// `result` must be a live handle; `name` NUL-terminated; non-null outputs
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn se_fit_result_lookup(
    result: *const SeFitResult,
    name: *const c_char,
    out_value: *mut f64,
    out_sigma: *mut f64,
) -> SeStatus {
    guard(|| {
        if result.is_null() || name.is_null() {
            set_error("null pointer");
            return SeStatus::NullPointer;
        }
        let Ok(name) = unsafe { CStr::from_ptr(name) }.to_str() else {
            set_error("parameter name is not valid UTF-8");
            return SeStatus::InvalidArgument;
        };
        let r = &unsafe { &*result }.0;
        let Some(p) = r.param(name) else {
            set_error(format!("no parameter named `{name}`"));
            return SeStatus::InvalidArgument;
        };
        unsafe {
            if !out_value.is_null() {
                out_value.write(p.value);
            }
            if !out_sigma.is_null() {
                out_sigma.write(p.sigma);
            }
        }
        SeStatus::Ok
    })
}

/// Euclidean norm of the residual vector at the solution.
///
/// # Safety
/// `result` must be a live handle or null (giving NaN).
#[no_mangle]
pub unsafe extern "C" fn se_fit_result_residual_norm(result: *const SeFitResult) -> f64 {
    if result.is_null() {
        return f64::NAN;
    }
    unsafe { &*result }.0.residual_norm
}

/// Render the full fit result as a JSON string; free it with
/// [`se_string_free`].
///
/// # Safety
/// `result` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn se_fit_result_to_json(result: *const SeFitResult) -> *mut c_char {
    if result.is_null() {
        return std::ptr::null_mut();
    }
    let json = serde_json::to_string(&unsafe { &*result }.0).unwrap_or_default();
    CString::new(json).map(CString::into_raw).unwrap_or(std::ptr::null_mut())
}

/// Release a fit-result handle. Null is ignored.
///
/// # Safety
/// `result` must be a handle returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn se_fit_result_free(result: *mut SeFitResult) {
    if !result.is_null() {
        drop(unsafe { Box::from_raw(result) });
    }
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn se_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}
