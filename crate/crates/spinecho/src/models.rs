//! Closed-form analytic models for echo decay and pulse calibration.
//!
//! The Carr-Purcell echo-magnitude model is a finite double sum whose
//! combinatorial coefficients alternate in sign and grow rapidly with the
//! echo number. The raw form cancels catastrophically as the error spread
//! goes to zero, so the coefficients are kept as exact big-integer rationals,
//! regrouped exactly per cosine harmonic, and only the final products are
//! evaluated in floating point with compensated summation.

use num::bigint::Sign;
use num::{BigInt, BigRational, BigUint, One, Signed, ToPrimitive, Zero};
use std::collections::HashMap;
use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::sync::{Arc, Mutex, OnceLock};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

fn invalid(msg: impl Into<String>) -> ModelError {
    ModelError::InvalidArgument(msg.into())
}

/// Largest supported echo number for the Carr-Purcell coefficient tables.
pub const CP_N_MAX: usize = 64;

/// Echo number beyond which the floating-point evaluation of the
/// Carr-Purcell model is no longer validated.
pub const CP_N_VALIDATED: usize = 32;

/// Largest validated `n * sigma` product for the Carr-Purcell model.
pub const CP_N_SIGMA_VALIDATED: f64 = 2.0;

/// Bohr magneton (J/T), CODATA 2018.
pub const BOHR_MAGNETON_J_PER_T: f64 = 9.274_010_078_3e-24;

/// Reduced Planck constant (J s), CODATA 2018.
pub const HBAR_J_S: f64 = 1.054_571_817e-34;

/// Physical constants for converting pulse field and duration to a rotation
/// angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationConstants {
    /// Electron g-factor.
    pub g: f64,
    /// Bohr magneton (J/T).
    pub mu_b: f64,
    /// Reduced Planck constant (J s).
    pub hbar: f64,
}

impl Default for CalibrationConstants {
    fn default() -> Self {
        Self {
            g: 2.003,
            mu_b: BOHR_MAGNETON_J_PER_T,
            hbar: HBAR_J_S,
        }
    }
}

/// Rotation angle `g * mu_B * B1 * t / hbar` (rad) imparted by a hard pulse
/// of field `b1` (tesla) and duration `duration` (seconds).
pub fn pulse_flip_angle(
    b1: f64,
    duration: f64,
    c: &CalibrationConstants,
) -> Result<f64, ModelError> {
    if !(b1 >= 0.0) || !b1.is_finite() {
        return Err(invalid("pulse_flip_angle: b1 must be finite and >= 0"));
    }
    if !(duration >= 0.0) || !duration.is_finite() {
        return Err(invalid("pulse_flip_angle: duration must be finite and >= 0"));
    }
    if !(c.g > 0.0) || !(c.mu_b > 0.0) || !(c.hbar > 0.0) {
        return Err(invalid("pulse_flip_angle: constants must be positive"));
    }
    Ok(c.g * c.mu_b * b1 * duration / c.hbar)
}

/// One `m`-block of the Carr-Purcell coefficient table.
#[derive(Debug, Clone, PartialEq)]
pub struct CpBlock {
    pub m: usize,
    pub a: BigRational,
    /// `b[k-1]` for `k = 1..=m`.
    pub b: Vec<BigRational>,
}

impl CpBlock {
    /// `a_m + sum_k b_k`; zero exactly for every block.
    pub fn identity_residual(&self) -> BigRational {
        let mut sum = self.a.clone();
        for b in &self.b {
            sum += b;
        }
        sum
    }
}

/// Exact-rational coefficient table for the Carr-Purcell echo-magnitude
/// model at a given echo number `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct CpCoefficients {
    n: usize,
    blocks: Vec<CpBlock>,
}

impl CpCoefficients {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn blocks(&self) -> &[CpBlock] {
        &self.blocks
    }

    pub fn a(&self, m: usize) -> &BigRational {
        &self.blocks[m - 1].a
    }

    pub fn b(&self, m: usize, k: usize) -> &BigRational {
        &self.blocks[m - 1].b[k - 1]
    }

    /// Per-harmonic coefficients `B_k = sum_{m>=k} b_k(m)`, computed in
    /// exact arithmetic. Regrouping the double sum this way performs all
    /// coefficient cancellation before any floating-point rounding.
    pub fn collapsed(&self) -> Vec<BigRational> {
        let mut out = vec![BigRational::zero(); self.n];
        for block in &self.blocks {
            for (k_idx, b) in block.b.iter().enumerate() {
                out[k_idx] += b;
            }
        }
        out
    }
}

/// Ordinary binomial coefficient as a big integer.
fn binomial(n: usize, k: usize) -> BigInt {
    if k > n {
        return BigInt::zero();
    }
    let k = k.min(n - k);
    let mut res = BigInt::one();
    for i in 0..k {
        res = res * BigInt::from(n - i) / BigInt::from(i + 1);
    }
    res
}

/// Generalized binomial `(1/2 choose m)` by exact rational recurrence:
/// `C(1/2, m) = C(1/2, m-1) * (3 - 2m) / (2m)`.
fn half_binomial(m: usize) -> BigRational {
    let mut c = BigRational::one();
    for j in 1..=m {
        c *= BigRational::new(BigInt::from(3i64 - 2 * j as i64), BigInt::from(2 * j as i64));
    }
    c
}

/// Exact coefficient table for echo number `n` (`1 <= n <= CP_N_MAX`).
pub fn cp_coefficients(n: usize) -> Result<CpCoefficients, ModelError> {
    if n == 0 || n > CP_N_MAX {
        return Err(invalid(format!(
            "cp_coefficients: n must be in 1..={CP_N_MAX}, got {n}"
        )));
    }
    let mut blocks = Vec::with_capacity(n);
    for m in 1..=n {
        // Common factor C(n+m-1, 2m-1) * C(1/2, m) * n * (2m-1).
        let common = BigRational::from(binomial(n + m - 1, 2 * m - 1))
            * half_binomial(m)
            * BigRational::from(BigInt::from(n * (2 * m - 1)));
        let a = &common * BigRational::new(binomial(2 * m, m), BigInt::from(2 * m));
        let mut b = Vec::with_capacity(m);
        for k in 1..=m {
            let sign = if k % 2 == 0 {
                BigInt::one()
            } else {
                -BigInt::one()
            };
            b.push(&common * BigRational::new(sign * binomial(2 * m, m - k), BigInt::from(m)));
        }
        blocks.push(CpBlock { m, a, b });
    }
    Ok(CpCoefficients { n, blocks })
}

/// Convert a big rational to `f64` without overflowing on huge numerators
/// or denominators: shift so the integer quotient carries ~64 bits, convert,
/// then scale back.
fn ratio_to_f64(r: &BigRational) -> f64 {
    if r.is_zero() {
        return 0.0;
    }
    let sign = if r.numer().sign() == Sign::Minus {
        -1.0
    } else {
        1.0
    };
    let num: BigUint = r.numer().abs().to_biguint().expect("abs is non-negative");
    let den: BigUint = r.denom().abs().to_biguint().expect("denominator positive");
    let shift = 64i64 - (num.bits() as i64 - den.bits() as i64);
    let q = if shift >= 0 {
        (num << shift as u64) / den
    } else {
        num / (den << (-shift) as u64)
    };
    let q = q.to_f64().unwrap_or(f64::INFINITY);
    sign * q * (-(shift as f64)).exp2()
}

fn collapsed_coefficients(n: usize) -> Result<Arc<Vec<f64>>, ModelError> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Vec<f64>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(hit) = cache.lock().expect("cp coefficient cache").get(&n) {
        return Ok(hit.clone());
    }
    let table = cp_coefficients(n)?;
    let collapsed: Arc<Vec<f64>> = Arc::new(table.collapsed().iter().map(ratio_to_f64).collect());
    cache
        .lock()
        .expect("cp coefficient cache")
        .insert(n, collapsed.clone());
    Ok(collapsed)
}

/// Issued when a closed-form value is requested outside the domain where
/// its floating-point evaluation has been validated.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityWarning {
    pub n: usize,
    pub n_sigma: f64,
}

impl fmt::Display for StabilityWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "closed-form CP amplitude outside validated domain \
             (n = {}, n*sigma = {:.3}; validated for n <= {} and n*sigma <= {}); \
             the value may have reduced precision",
            self.n, self.n_sigma, CP_N_VALIDATED, CP_N_SIGMA_VALIDATED
        )
    }
}

/// A closed-form amplitude together with an optional numerical-stability
/// warning.
#[derive(Debug, Clone, PartialEq)]
pub struct CpAmplitude {
    pub value: f64,
    pub warning: Option<StabilityWarning>,
}

/// Neumaier variant of Kahan compensated summation.
#[derive(Default)]
struct NeumaierSum {
    s: f64,
    c: f64,
}

impl NeumaierSum {
    fn add(&mut self, x: f64) {
        let t = self.s + x;
        if self.s.abs() >= x.abs() {
            self.c += (self.s - t) + x;
        } else {
            self.c += (x - t) + self.s;
        }
        self.s = t;
    }

    fn total(&self) -> f64 {
        self.s + self.c
    }
}

fn stability_warning(n: usize, sigma: f64) -> Option<StabilityWarning> {
    let n_sigma = n as f64 * sigma;
    if n > CP_N_VALIDATED || n_sigma > CP_N_SIGMA_VALIDATED {
        Some(StabilityWarning { n, n_sigma })
    } else {
        None
    }
}

/// Carr-Purcell echo magnitude after the `n`th refocusing pulse, for a
/// static per-spin flip-angle error `~ Normal(delta0, sigma)` on the `pi`
/// pulses and fully dephased free evolution.
///
/// Evaluates `1 - sum_k B_k * (exp(-sigma^2 k^2 / 2) cos(k delta0) - 1)`
/// with the `B_k` combined in exact rational arithmetic, which is the
/// cancellation-stable regrouping of the raw double sum (the block identity
/// `a_m = -sum_k b_k` removes the constant part exactly).
pub fn cp_echo_amplitude(n: usize, delta0: f64, sigma: f64) -> Result<CpAmplitude, ModelError> {
    if n == 0 || n > CP_N_MAX {
        return Err(invalid(format!(
            "cp_echo_amplitude: n must be in 1..={CP_N_MAX}, got {n}"
        )));
    }
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(invalid("cp_echo_amplitude: sigma must be finite and >= 0"));
    }
    if !delta0.is_finite() {
        return Err(invalid("cp_echo_amplitude: delta0 must be finite"));
    }
    let coeffs = collapsed_coefficients(n)?;
    let mut sum = NeumaierSum::default();
    for (idx, b) in coeffs.iter().enumerate() {
        let k = (idx + 1) as f64;
        // f_k - 1 = expm1(-s^2 k^2/2) cos(k d0) - 2 sin^2(k d0 / 2),
        // exact at sigma = delta0 = 0.
        let damp = (-0.5 * sigma * sigma * k * k).exp_m1();
        let half_sin = (0.5 * k * delta0).sin();
        let g = damp * (k * delta0).cos() - 2.0 * half_sin * half_sin;
        sum.add(b * g);
    }
    Ok(CpAmplitude {
        value: 1.0 - sum.total(),
        warning: stability_warning(n, sigma),
    })
}

/// Small-error Gaussian approximation `exp(-sigma^2 n^2 / 4)` to
/// [`cp_echo_amplitude`], valid for `n * sigma < 1` and `delta0 = 0`.
pub fn cp_echo_amplitude_approx(n: usize, sigma: f64) -> Result<f64, ModelError> {
    if n == 0 {
        return Err(invalid("cp_echo_amplitude_approx: n must be >= 1"));
    }
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(invalid(
            "cp_echo_amplitude_approx: sigma must be finite and >= 0",
        ));
    }
    let ns = n as f64 * sigma;
    Ok((-ns * ns / 4.0).exp())
}

/// Carr-Purcell decay: flip-error attenuation times transverse relaxation,
/// `A_CP(n) * exp(-2 n tau / t2)` (echo `n` occurs at `t = 2 n tau`).
pub fn cp_decay_model(
    n: usize,
    tau: f64,
    delta0: f64,
    sigma: f64,
    t2: f64,
) -> Result<CpAmplitude, ModelError> {
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(invalid("cp_decay_model: tau must be finite and >= 0"));
    }
    if !(t2 > 0.0) {
        return Err(invalid("cp_decay_model: t2 must be > 0"));
    }
    let amp = cp_echo_amplitude(n, delta0, sigma)?;
    Ok(CpAmplitude {
        value: amp.value * (-2.0 * n as f64 * tau / t2).exp(),
        warning: amp.warning,
    })
}

/// CPMG echo decay `exp(-2 n tau / t2)`: pure transverse relaxation, since
/// the sequence refocuses flip-angle errors to first order.
pub fn cpmg_decay_model(n: usize, tau: f64, t2: f64) -> f64 {
    (-2.0 * n as f64 * tau / t2).exp()
}

/// Phase-error-amplification echo pair after `m_cycles` full cycles:
/// `(cos(2 m delta), sin(2 m delta)) * exp(-4 m tau / t2)`. Each cycle
/// comprises two refocusing pulses and rotates the echo by `2 delta`.
pub fn spam_echo_model(m_cycles: usize, tau: f64, delta: f64, t2: f64) -> (f64, f64) {
    let envelope = (-4.0 * m_cycles as f64 * tau / t2).exp();
    let phase = 2.0 * m_cycles as f64 * delta;
    (phase.cos() * envelope, phase.sin() * envelope)
}

/// Free-induction-decay channels of a quadrature detector whose second
/// channel sits `90 degrees + skew` away from the first:
/// in-phase `cos(detuning t + phase0) exp(-t/t2star)` and quadrature
/// `cos(detuning t + phase0 - (pi/2 + skew)) exp(-t/t2star)`.
pub fn fid_quadrature_model(
    t: f64,
    detuning: f64,
    skew: f64,
    t2star: f64,
    phase0: f64,
) -> (f64, f64) {
    let envelope = (-t / t2star).exp();
    let arg = detuning * t + phase0;
    (
        arg.cos() * envelope,
        (arg - (FRAC_PI_2 + skew)).cos() * envelope,
    )
}

/// Ensemble-averaged nutation signal `exp(-(sigma_scale w t)^2 / 2) cos(w t)`
/// — the Gaussian average of `cos(lambda w t)` over a drive-amplitude
/// distribution `lambda ~ Normal(1, sigma_scale)`.
pub fn rabi_envelope_model(t: f64, omega: f64, sigma_scale: f64) -> f64 {
    let damp = sigma_scale * omega * t;
    (-0.5 * damp * damp).exp() * (omega * t).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use num::FromPrimitive;
    use std::f64::consts::PI;

    /// Independent route: plain factorial arithmetic instead of the
    /// multiplicative/recurrence construction used in production.
    fn factorial(n: usize) -> BigInt {
        (1..=n).fold(BigInt::one(), |acc, i| acc * BigInt::from(i))
    }

    fn binomial_oracle(n: usize, k: usize) -> BigRational {
        BigRational::from(factorial(n) / (factorial(k) * factorial(n - k)))
    }

    fn half_binomial_oracle(m: usize) -> BigRational {
        // prod_{j=0..m-1} (1 - 2j) / (2^m m!)
        let mut num = BigInt::one();
        for j in 0..m {
            num *= BigInt::from(1i64 - 2 * j as i64);
        }
        BigRational::new(num, BigInt::from(2u64).pow(m as u32) * factorial(m))
    }

    fn a_oracle(n: usize, m: usize) -> BigRational {
        binomial_oracle(2 * m, m)
            * binomial_oracle(n + m - 1, 2 * m - 1)
            * half_binomial_oracle(m)
            * BigRational::from_usize(n * (2 * m - 1)).unwrap()
            / BigRational::from_usize(2 * m).unwrap()
    }

    fn b_oracle(n: usize, m: usize, k: usize) -> BigRational {
        let sign = BigRational::from_i64(if k.is_multiple_of(2) { 1 } else { -1 }).unwrap();
        sign * binomial_oracle(2 * m, m - k)
            * binomial_oracle(n + m - 1, 2 * m - 1)
            * half_binomial_oracle(m)
            * BigRational::from_usize(n * (2 * m - 1)).unwrap()
            / BigRational::from_usize(m).unwrap()
    }

    fn rational(num: i64, den: i64) -> BigRational {
        BigRational::new(BigInt::from(num), BigInt::from(den))
    }

    #[test]
    fn first_block_is_one_half() {
        let c = cp_coefficients(1).unwrap();
        assert_eq!(c.a(1), &rational(1, 2));
        assert_eq!(c.b(1, 1), &rational(-1, 2));
    }

    #[test]
    fn n2_blocks_match_hand_evaluation() {
        let c = cp_coefficients(2).unwrap();
        assert_eq!(c.a(1), &rational(2, 1));
        assert_eq!(c.b(1, 1), &rational(-2, 1));
        assert_eq!(c.a(2), &rational(-9, 8));
        assert_eq!(c.b(2, 1), &rational(3, 2));
        assert_eq!(c.b(2, 2), &rational(-3, 8));
    }

    #[test]
    fn coefficients_match_factorial_oracle() {
        for n in [1usize, 2, 3, 5, 8, 13] {
            let c = cp_coefficients(n).unwrap();
            for m in 1..=n {
                assert_eq!(c.a(m), &a_oracle(n, m), "a mismatch at n={n} m={m}");
                for k in 1..=m {
                    assert_eq!(
                        c.b(m, k),
                        &b_oracle(n, m, k),
                        "b mismatch at n={n} m={m} k={k}"
                    );
                }
            }
        }
    }

    #[test]
    fn block_identity_holds_exactly() {
        for n in [1usize, 2, 3, 7, 16, 32] {
            let c = cp_coefficients(n).unwrap();
            for block in c.blocks() {
                assert!(
                    block.identity_residual().is_zero(),
                    "block m={} of n={n} violates a_m + sum b_k = 0",
                    block.m
                );
            }
        }
    }

    #[test]
    fn coefficients_reject_out_of_range() {
        assert!(cp_coefficients(0).is_err());
        assert!(cp_coefficients(CP_N_MAX + 1).is_err());
    }

    #[test]
    fn ratio_to_f64_handles_huge_components() {
        let huge = BigInt::from(10u8).pow(400);
        let r = BigRational::new(huge.clone() * BigInt::from(3), huge * BigInt::from(2));
        assert_abs_diff_eq!(ratio_to_f64(&r), 1.5, epsilon = 1e-15);
        assert_eq!(ratio_to_f64(&BigRational::zero()), 0.0);
        assert_abs_diff_eq!(ratio_to_f64(&rational(-7, 16)), -0.4375, epsilon = 0.0);
    }

    #[test]
    fn error_free_amplitude_is_exactly_one() {
        for n in [1usize, 4, 12, 32] {
            assert_eq!(cp_echo_amplitude(n, 0.0, 0.0).unwrap().value, 1.0);
        }
    }

    #[test]
    fn single_echo_with_mean_error_only() {
        // One refocusing pulse with a fixed error d0 leaves (1 + cos d0)/2.
        let a = cp_echo_amplitude(1, 60.0f64.to_radians(), 0.0).unwrap();
        assert_abs_diff_eq!(a.value, 0.75, epsilon = 1e-15);
    }

    #[test]
    fn two_echo_amplitude_matches_direct_ensemble_average() {
        // Direct average of the two-pulse sequence over uniform dephasing
        // and the static flip error e gives -1/4 + <cos e>/2 + 3<cos^2 e>/4,
        // i.e. 1/8 + f1/2 + 3 f2/8 with f_k = exp(-s^2 k^2/2) cos(k d0).
        for (delta0, sigma) in [(0.0f64, 0.1f64), (0.3, 0.0), (0.2, 0.25)] {
            let f1 = (-0.5f64 * sigma * sigma).exp() * delta0.cos();
            let f2 = (-2.0f64 * sigma * sigma).exp() * (2.0 * delta0).cos();
            let expected = 0.125 + 0.5 * f1 + 0.375 * f2;
            let a = cp_echo_amplitude(2, delta0, sigma).unwrap();
            assert_abs_diff_eq!(a.value, expected, epsilon = 1e-13);
        }
    }

    #[test]
    fn amplitude_is_even_in_delta0() {
        for n in [1usize, 3, 9] {
            for delta0 in [0.05, 0.2, 0.33] {
                let plus = cp_echo_amplitude(n, delta0, 0.12).unwrap().value;
                let minus = cp_echo_amplitude(n, -delta0, 0.12).unwrap().value;
                assert_eq!(plus, minus);
            }
        }
    }

    #[test]
    fn approximation_close_in_small_error_region() {
        // Gaussian approximation within 0.01 wherever n*sigma <= 0.5.
        let mut max_gap = 0.0f64;
        for n in 1..=CP_N_VALIDATED {
            for i in 0..=20 {
                let sigma = 0.5 * i as f64 / 20.0 / n as f64;
                let exact = cp_echo_amplitude(n, 0.0, sigma).unwrap().value;
                let approx = cp_echo_amplitude_approx(n, sigma).unwrap();
                max_gap = max_gap.max((exact - approx).abs());
            }
        }
        assert!(max_gap <= 0.01, "max gap {max_gap} exceeds 0.01");
    }

    #[test]
    fn approx_matches_stated_form() {
        assert_eq!(cp_echo_amplitude_approx(5, 0.0).unwrap(), 1.0);
        assert_abs_diff_eq!(
            cp_echo_amplitude_approx(5, 0.1).unwrap(),
            (-0.0625f64).exp(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn warnings_flag_unvalidated_domain() {
        assert!(cp_echo_amplitude(10, 0.0, 0.1).unwrap().warning.is_none());
        let w = cp_echo_amplitude(33, 0.0, 0.0).unwrap().warning;
        assert!(w.is_some());
        let w = cp_echo_amplitude(10, 0.0, 0.25).unwrap().warning.unwrap();
        assert!(w.to_string().contains("n*sigma"));
    }

    #[test]
    fn decay_models_compose_amplitude_and_relaxation() {
        // t2 = infinity reduces to the bare amplitude.
        let bare = cp_echo_amplitude(4, 0.1, 0.2).unwrap().value;
        let with_t2 = cp_decay_model(4, 10.0, 0.1, 0.2, f64::INFINITY)
            .unwrap()
            .value;
        assert_eq!(bare, with_t2);
        // Pure exponential when error-free.
        let d = cp_decay_model(1, 10.0, 0.0, 0.0, 190.0).unwrap().value;
        assert_abs_diff_eq!(d, (-20.0f64 / 190.0).exp(), epsilon = 1e-15);

        assert_eq!(cpmg_decay_model(0, 10.0, 190.0), 1.0);
        assert_abs_diff_eq!(
            cpmg_decay_model(10, 9.5, 190.0),
            (-1.0f64).exp(),
            epsilon = 1e-15
        );
        let decreasing = (1..20)
            .all(|n| cpmg_decay_model(n + 1, 10.0, 190.0) < cpmg_decay_model(n, 10.0, 190.0));
        assert!(decreasing);
    }

    #[test]
    fn spam_model_phase_and_magnitude() {
        let delta = 10.3f64.to_radians();
        let (ip, q) = spam_echo_model(4, 10.0, delta, f64::INFINITY);
        assert_abs_diff_eq!(ip, 82.4f64.to_radians().cos(), epsilon = 1e-15);
        assert_abs_diff_eq!(q, 82.4f64.to_radians().sin(), epsilon = 1e-15);

        let (ip0, q0) = spam_echo_model(3, 12.0, 0.0, 150.0);
        assert_abs_diff_eq!(ip0, (-4.0f64 * 3.0 * 12.0 / 150.0).exp(), epsilon = 1e-15);
        assert_eq!(q0, 0.0);

        // Complex magnitude equals the envelope, independent of delta.
        for m in 1..=6 {
            let (i, q) = spam_echo_model(m, 7.0, 0.4, 120.0);
            let envelope = (-4.0 * m as f64 * 7.0 / 120.0).exp();
            assert_abs_diff_eq!((i * i + q * q).sqrt(), envelope, epsilon = 1e-14);
        }

        // Phase is exactly linear in the cycle count.
        let delta = 0.9f64.to_radians();
        for m in 1..=10 {
            let (i, q) = spam_echo_model(m, 5.0, delta, 200.0);
            let (ip, qp) = spam_echo_model(m - 1, 5.0, delta, 200.0);
            let step = q.atan2(i) - qp.atan2(ip);
            assert_abs_diff_eq!(step, 2.0 * delta, epsilon = 1e-12);
        }
    }

    #[test]
    fn fid_model_channel_separation() {
        let (i0, q0) = fid_quadrature_model(0.3, 2.0, 0.0, f64::INFINITY, 0.7);
        // Zero skew: channels exactly 90 degrees apart.
        assert_abs_diff_eq!(q0, (2.0 * 0.3 + 0.7 - FRAC_PI_2).cos(), epsilon = 1e-15);
        assert_abs_diff_eq!(i0, (2.0f64 * 0.3 + 0.7).cos(), epsilon = 1e-15);

        // Zero detuning: both channels are constants times the envelope.
        let (i1, q1) = fid_quadrature_model(1.0, 0.0, 0.1, 5.0, 0.2);
        let (i2, q2) = fid_quadrature_model(2.0, 0.0, 0.1, 5.0, 0.2);
        assert_abs_diff_eq!(i1 / (-0.2f64).exp(), i2 / (-0.4f64).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(q1 / (-0.2f64).exp(), q2 / (-0.4f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn rabi_model_matches_quadrature_of_gaussian_average() {
        // Independent route: Simpson integration of cos(l w t) against the
        // Normal(1, s) density over +-10 s.
        fn gaussian_average(t: f64, omega: f64, s: f64) -> f64 {
            let lo = 1.0 - 10.0 * s;
            let hi = 1.0 + 10.0 * s;
            let n = 40_000usize; // even
            let h = (hi - lo) / n as f64;
            let density =
                |l: f64| (-(l - 1.0) * (l - 1.0) / (2.0 * s * s)).exp() / (s * (2.0 * PI).sqrt());
            let f = |l: f64| (l * omega * t).cos() * density(l);
            let mut acc = f(lo) + f(hi);
            for i in 1..n {
                let w = if i % 2 == 0 { 2.0 } else { 4.0 };
                acc += w * f(lo + i as f64 * h);
            }
            acc * h / 3.0
        }

        let omega = 2.0 * PI;
        let sigma = 0.03;
        for t in [0.0, 1.3, 5.0, 11.7, 20.0] {
            let model = rabi_envelope_model(t, omega, sigma);
            let oracle = gaussian_average(t, omega, sigma);
            assert_abs_diff_eq!(model, oracle, epsilon = 1e-6);
        }
        assert_eq!(rabi_envelope_model(0.0, omega, sigma), 1.0);
        assert_abs_diff_eq!(
            rabi_envelope_model(0.25, 2.0 * PI, 0.0),
            0.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn flip_angle_linear_in_field_and_duration() {
        let c = CalibrationConstants::default();
        assert_eq!(pulse_flip_angle(0.0, 32e-9, &c).unwrap(), 0.0);
        let one = pulse_flip_angle(1e-4, 32e-9, &c).unwrap();
        let two = pulse_flip_angle(1e-4, 64e-9, &c).unwrap();
        assert_abs_diff_eq!(two, 2.0 * one, epsilon = 1e-15);
        // A 32 ns pulse at ~0.558 mT is a pi rotation to within 0.5%.
        let theta = pulse_flip_angle(5.58e-4, 32e-9, &c).unwrap();
        assert!((theta / PI - 1.0).abs() < 0.005, "theta = {theta}");
        assert!(pulse_flip_angle(-1.0, 1.0, &c).is_err());
        assert!(pulse_flip_angle(1.0, -1.0, &c).is_err());
    }
}
