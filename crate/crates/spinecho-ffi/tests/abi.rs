//! Exercise the C interface through the exported symbols, the way a foreign
//! binding would: manifest JSON in, handles and accessors out.

use spinecho_ffi::*;
use std::ffi::{CStr, CString};
use std::ptr;

fn last_error() -> String {
    unsafe { CStr::from_ptr(se_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

const SPAM_MANIFEST: &str = r#"{
    "sequence": {"kind": "spam", "tau_us": 10.0, "n_cycles": 12, "phase_error_deg": 10.3},
    "ensemble": {"n_packets": 20000, "sigma_rad": 0.05,
                 "error_mode": "b1_scale_all_pulses", "t2_us": 190.0, "seed": 9}
}"#;

#[test]
fn scalar_models_match_the_core_library() {
    unsafe {
        let mut value = 0.0;
        let mut warning = -1;
        assert_eq!(
            se_cp_echo_amplitude(1, 60.0f64.to_radians(), 0.0, &mut value, &mut warning),
            SeStatus::Ok
        );
        assert!((value - 0.75).abs() < 1e-12);
        assert_eq!(warning, 0);

        assert_eq!(
            se_cp_echo_amplitude(10, 0.0, 0.3, &mut value, &mut warning),
            SeStatus::Ok
        );
        assert_eq!(warning, 1, "n*sigma = 3 is outside the validated domain");

        assert_eq!(
            se_cp_echo_amplitude(0, 0.0, 0.0, &mut value, ptr::null_mut()),
            SeStatus::InvalidArgument
        );
        assert!(last_error().contains("n must be"), "{}", last_error());

        assert_eq!(se_cp_echo_amplitude_approx(5, 0.1, &mut value), SeStatus::Ok);
        assert!((value - (-0.0625f64).exp()).abs() < 1e-15);

        assert_eq!(se_cpmg_decay_model(10, 9.5, 190.0, &mut value), SeStatus::Ok);
        assert!((value - (-1.0f64).exp()).abs() < 1e-15);

        let (mut i, mut q) = (0.0, 0.0);
        assert_eq!(
            se_spam_echo_model(4, 10.0, 10.3f64.to_radians(), f64::INFINITY, &mut i, &mut q),
            SeStatus::Ok
        );
        assert!((i - 82.4f64.to_radians().cos()).abs() < 1e-14);
        assert!((q - 82.4f64.to_radians().sin()).abs() < 1e-14);

        assert_eq!(
            se_fid_quadrature_model(0.5, 3.0, 0.01, 4.0, 0.2, &mut i, &mut q),
            SeStatus::Ok
        );
        assert_eq!(
            se_rabi_envelope_model(1.0, 2.0 * std::f64::consts::PI, 0.03, &mut value),
            SeStatus::Ok
        );

        assert_eq!(se_pulse_flip_angle(5.58e-4, 32e-9, 0.0, &mut value), SeStatus::Ok);
        assert!((value / std::f64::consts::PI - 1.0).abs() < 0.005);
        assert_eq!(
            se_pulse_flip_angle(-1.0, 32e-9, 0.0, &mut value),
            SeStatus::InvalidArgument
        );
    }
}

#[test]
fn simulate_fit_pipeline_through_handles() {
    unsafe {
        let manifest = CString::new(SPAM_MANIFEST).unwrap();
        let mut train: *mut SeEchoTrain = ptr::null_mut();
        assert_eq!(
            se_simulate_echo_train(manifest.as_ptr(), &mut train),
            SeStatus::Ok,
            "{}",
            last_error()
        );
        assert_eq!(se_echo_train_len(train), 24);

        let (mut n, mut t, mut i, mut q) = (0u32, 0.0, 0.0, 0.0);
        assert_eq!(
            se_echo_train_row(train, 0, &mut n, &mut t, &mut i, &mut q),
            SeStatus::Ok
        );
        assert_eq!(n, 1);
        assert!((t - 20.0).abs() < 1e-12);
        assert!(i.abs() <= 1.0 && q.abs() <= 1.0);
        assert_eq!(
            se_echo_train_row(train, 24, &mut n, &mut t, &mut i, &mut q),
            SeStatus::InvalidArgument
        );

        let mut fit: *mut SeFitResult = ptr::null_mut();
        assert_eq!(
            se_fit_spam_phase(train, 190.0, 0, &mut fit),
            SeStatus::Ok,
            "{}",
            last_error()
        );
        assert_eq!(se_fit_result_status(fit), SeFitStatus::Converged);

        let (mut delta, mut sigma) = (0.0, 0.0);
        let name = CString::new("delta_deg").unwrap();
        assert_eq!(
            se_fit_result_lookup(fit, name.as_ptr(), &mut delta, &mut sigma),
            SeStatus::Ok
        );
        assert!((delta - 10.3).abs() < 0.5, "delta = {delta}");
        assert!(sigma > 0.0);

        // Enumerate parameters and find the amplitude.
        let count = se_fit_result_len(fit);
        assert!(count >= 3);
        let mut found_amplitude = false;
        for idx in 0..count {
            let mut buf = [0i8; 64];
            let (mut v, mut s) = (0.0, 0.0);
            assert_eq!(
                se_fit_result_param(fit, idx, buf.as_mut_ptr(), buf.len(), &mut v, &mut s),
                SeStatus::Ok
            );
            let name = CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned();
            if name == "amplitude" {
                found_amplitude = true;
                assert!((v - 1.0).abs() < 0.05, "amplitude = {v}");
            }
        }
        assert!(found_amplitude);

        // Tiny name buffer is reported, not overrun.
        let mut buf = [0i8; 2];
        assert_eq!(
            se_fit_result_param(fit, 0, buf.as_mut_ptr(), buf.len(), ptr::null_mut(), ptr::null_mut()),
            SeStatus::BufferTooSmall
        );

        assert!(se_fit_result_residual_norm(fit).is_finite());
        let json = se_fit_result_to_json(fit);
        assert!(!json.is_null());
        let parsed: serde_json::Value =
            serde_json::from_str(&CStr::from_ptr(json).to_string_lossy()).unwrap();
        assert_eq!(parsed["status"], "converged");
        se_string_free(json);

        se_fit_result_free(fit);
        se_echo_train_free(train);
    }
}

#[test]
fn time_series_simulation_and_skew_fit() {
    let manifest = CString::new(
        r#"{
            "sequence": {"kind": "fid", "detuning_rad_per_us": 6.283, "detector_skew_deg": -0.7,
                         "t_max_us": 10.0, "dt_us": 0.01},
            "ensemble": {"n_packets": 64, "t2_us": 3.0, "seed": 2}
        }"#,
    )
    .unwrap();
    unsafe {
        let mut series: *mut SeTimeSeries = ptr::null_mut();
        assert_eq!(
            se_simulate_time_series(manifest.as_ptr(), &mut series),
            SeStatus::Ok,
            "{}",
            last_error()
        );
        assert_eq!(se_time_series_len(series), 1001);

        let mut fit: *mut SeFitResult = ptr::null_mut();
        assert_eq!(se_fit_detector_skew(series, &mut fit), SeStatus::Ok);
        let mut angle = 0.0;
        let name = CString::new("inter_channel_angle_deg").unwrap();
        assert_eq!(
            se_fit_result_lookup(fit, name.as_ptr(), &mut angle, ptr::null_mut()),
            SeStatus::Ok
        );
        assert!((angle - 89.3).abs() < 0.05, "angle = {angle}");

        se_fit_result_free(fit);
        se_time_series_free(series);

        // Kind mismatch is diagnosed.
        let spam = CString::new(SPAM_MANIFEST).unwrap();
        let mut wrong: *mut SeTimeSeries = ptr::null_mut();
        assert_eq!(
            se_simulate_time_series(spam.as_ptr(), &mut wrong),
            SeStatus::InvalidArgument
        );
        assert!(last_error().contains("echo"), "{}", last_error());
    }
}

#[test]
fn error_paths_set_messages_and_codes() {
    unsafe {
        let mut train: *mut SeEchoTrain = ptr::null_mut();
        assert_eq!(
            se_simulate_echo_train(ptr::null(), &mut train),
            SeStatus::NullPointer
        );

        let bad = CString::new(r#"{"sequence": {"kind": "cp"}}"#).unwrap();
        assert_eq!(
            se_simulate_echo_train(bad.as_ptr(), &mut train),
            SeStatus::ParseError
        );
        assert!(!last_error().is_empty());

        assert_eq!(se_echo_train_len(ptr::null()), 0);
        se_echo_train_free(ptr::null_mut()); // must be a no-op

        assert!(!se_version().is_null());
        let version = CStr::from_ptr(se_version()).to_string_lossy().into_owned();
        assert!(version.contains('.'));
    }
}
