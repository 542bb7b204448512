//! Bloch-vector kinematics in the rotating frame.
//!
//! Conventions used throughout the crate:
//!
//! * Rotations are right-handed and active. A `pi/2` pulse about `+x` maps
//!   `+z` to `-y`; a positive free-precession phase rotates `+x` toward `+y`.
//! * Pulses are hard: instantaneous rotations with no relaxation or
//!   dephasing while they act.
//! * Times are microseconds, angles are radians.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BlochError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

fn invalid(msg: impl Into<String>) -> BlochError {
    BlochError::InvalidArgument(msg.into())
}

/// Magnetization of one spin packet in the rotating frame, components
/// dimensionless in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlochVector {
    pub mx: f64,
    pub my: f64,
    pub mz: f64,
}

impl BlochVector {
    /// Thermal equilibrium: full polarization along `+z`.
    pub const EQUILIBRIUM: BlochVector = BlochVector {
        mx: 0.0,
        my: 0.0,
        mz: 1.0,
    };

    pub fn new(mx: f64, my: f64, mz: f64) -> Self {
        Self { mx, my, mz }
    }

    pub fn norm(&self) -> f64 {
        (self.mx * self.mx + self.my * self.my + self.mz * self.mz).sqrt()
    }

    /// Norm of the in-plane (x, y) part.
    pub fn transverse_norm(&self) -> f64 {
        (self.mx * self.mx + self.my * self.my).sqrt()
    }

    fn is_finite(&self) -> bool {
        self.mx.is_finite() && self.my.is_finite() && self.mz.is_finite()
    }
}

/// How a pulse's flip angle deviates from nominal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipErrorMode {
    /// Flip angle is exactly nominal.
    None,
    /// Flip angle is nominal plus a fixed offset (radians), identical for
    /// every packet. Useful for deliberately miscalibrated pulses.
    FixedOffset { offset_rad: f64 },
    /// Flip angle is nominal times the packet's `b1_scale`. This is the
    /// physical field-inhomogeneity model.
    B1Scale,
}

/// One hard pulse: a rotation about an axis in the transverse plane.
///
/// Rotation-axis errors are in-plane phase errors only; the axis never
/// acquires a z-component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseSpec {
    /// Intended rotation angle (rad), `>= 0`.
    #[serde(rename = "nominal_flip_rad")]
    pub nominal_flip: f64,
    /// Intended axis direction, measured from the x-axis in the transverse
    /// plane (rad).
    #[serde(rename = "axis_phase_rad")]
    pub axis_phase: f64,
    /// Deviation of the actual axis from the intended one (rad).
    #[serde(rename = "axis_phase_error_rad", default)]
    pub axis_phase_error: f64,
    #[serde(default = "FlipErrorMode::default_none")]
    pub flip_error_mode: FlipErrorMode,
}

impl FlipErrorMode {
    fn default_none() -> Self {
        FlipErrorMode::None
    }
}

impl PulseSpec {
    pub fn new(nominal_flip: f64, axis_phase: f64) -> Self {
        Self {
            nominal_flip,
            axis_phase,
            axis_phase_error: 0.0,
            flip_error_mode: FlipErrorMode::None,
        }
    }

    pub fn with_phase_error(mut self, error: f64) -> Self {
        self.axis_phase_error = error;
        self
    }

    pub fn with_flip_error(mut self, mode: FlipErrorMode) -> Self {
        self.flip_error_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<(), BlochError> {
        if !self.nominal_flip.is_finite() || self.nominal_flip < 0.0 {
            return Err(invalid("pulse nominal_flip must be finite and >= 0"));
        }
        if !self.axis_phase.is_finite() || !self.axis_phase_error.is_finite() {
            return Err(invalid("pulse axis phase must be finite"));
        }
        if let FlipErrorMode::FixedOffset { offset_rad } = self.flip_error_mode {
            if !offset_rad.is_finite() {
                return Err(invalid("pulse flip offset must be finite"));
            }
        }
        Ok(())
    }

    /// Flip angle actually applied to a packet with the given `b1_scale`.
    pub fn effective_flip(&self, b1_scale: f64) -> f64 {
        match self.flip_error_mode {
            FlipErrorMode::None => self.nominal_flip,
            FlipErrorMode::FixedOffset { offset_rad } => self.nominal_flip + offset_rad,
            FlipErrorMode::B1Scale => self.nominal_flip * b1_scale,
        }
    }

    /// Axis direction actually applied.
    pub fn effective_phase(&self) -> f64 {
        self.axis_phase + self.axis_phase_error
    }
}

/// One member of the simulated ensemble.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpinPacket {
    pub state: BlochVector,
    /// Factor multiplying every flip angle for this packet (`> 0`).
    pub b1_scale: f64,
    /// Static z-phase (rad) this packet accrues per free-evolution interval
    /// `tau`, in `[0, 2*pi)`.
    pub dephase_per_tau: f64,
}

/// Which pulses the sampled flip-angle error applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMode {
    /// Only refocusing `pi` pulses are imperfect; excitation pulses are
    /// ideal. This is the scope of the closed-form Carr-Purcell model.
    PiPulsesOnly,
    /// Every pulse's flip angle scales with the packet's `b1_scale` — the
    /// physical field-inhomogeneity picture.
    B1ScaleAllPulses,
}

/// Static dephasing model for free evolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DephasingModel {
    /// Each packet gets a fixed per-`tau` phase drawn uniformly from
    /// `[0, 2*pi)`, accumulating linearly across intervals. Models the
    /// fully-dephased regime `tau >> T2*` while preserving refocusing
    /// correlations.
    UniformPerTau,
    None,
}

/// Distributions and bookkeeping for one simulated ensemble.
///
/// `t2`/`t1` of `None` mean no relaxation on that channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub n_packets: usize,
    /// Mean flip-angle error per nominal `pi` pulse (rad).
    #[serde(rename = "delta0_rad", default)]
    pub delta0: f64,
    /// Standard deviation of the flip-angle error per nominal `pi` pulse
    /// (rad).
    #[serde(rename = "sigma_rad", default)]
    pub sigma: f64,
    pub error_mode: ErrorMode,
    #[serde(rename = "t2_us", default)]
    pub t2: Option<f64>,
    #[serde(rename = "t1_us", default)]
    pub t1: Option<f64>,
    pub dephasing: DephasingModel,
    #[serde(default)]
    pub seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            n_packets: 10_000,
            delta0: 0.0,
            sigma: 0.0,
            error_mode: ErrorMode::PiPulsesOnly,
            t2: None,
            t1: None,
            dephasing: DephasingModel::UniformPerTau,
            seed: 0,
        }
    }
}

impl EnsembleConfig {
    /// Transverse relaxation time as a plain `f64`, `INFINITY` when absent.
    pub fn t2_value(&self) -> f64 {
        self.t2.unwrap_or(f64::INFINITY)
    }

    /// Longitudinal relaxation time as a plain `f64`, `INFINITY` when absent.
    pub fn t1_value(&self) -> f64 {
        self.t1.unwrap_or(f64::INFINITY)
    }

    pub fn validate(&self) -> Result<(), BlochError> {
        if self.n_packets == 0 {
            return Err(invalid("ensemble.n_packets must be >= 1"));
        }
        if !self.delta0.is_finite() {
            return Err(invalid("ensemble.delta0_rad must be finite"));
        }
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return Err(invalid("ensemble.sigma_rad must be finite and >= 0"));
        }
        if self.t2_value() <= 0.0 {
            return Err(invalid("ensemble.t2_us must be > 0"));
        }
        if self.t1_value() <= 0.0 {
            return Err(invalid("ensemble.t1_us must be > 0"));
        }
        Ok(())
    }
}

/// Right-handed active rotation of `v` by `flip` about the in-plane unit
/// axis `(cos axis_phase, sin axis_phase, 0)`.
pub fn rotate(v: BlochVector, flip: f64, axis_phase: f64) -> Result<BlochVector, BlochError> {
    if !v.is_finite() || !flip.is_finite() || !axis_phase.is_finite() {
        return Err(invalid("rotate: inputs must be finite"));
    }
    Ok(rotate_unchecked(v, flip, axis_phase))
}

/// Rodrigues rotation, no validation. Norm-preserving to ~1e-16 per call.
pub(crate) fn rotate_unchecked(v: BlochVector, flip: f64, axis_phase: f64) -> BlochVector {
    let (sin_a, cos_a) = flip.sin_cos();
    let (ny, nx) = axis_phase.sin_cos();
    // n = (nx, ny, 0); v' = v cos(a) + (n x v) sin(a) + n (n.v)(1 - cos(a))
    let dot = nx * v.mx + ny * v.my;
    let cross_x = ny * v.mz;
    let cross_y = -nx * v.mz;
    let cross_z = nx * v.my - ny * v.mx;
    let k = dot * (1.0 - cos_a);
    BlochVector {
        mx: v.mx * cos_a + cross_x * sin_a + nx * k,
        my: v.my * cos_a + cross_y * sin_a + ny * k,
        mz: v.mz * cos_a + cross_z * sin_a,
    }
}

/// Free evolution: rotate about `z` by `phase`, damp the transverse
/// components with time constant `t2`, and relax `mz` toward its
/// equilibrium value `+1` with time constant `t1`.
///
/// Relaxation times may be `INFINITY` (no decay) but must be positive.
pub fn free_evolve(
    v: BlochVector,
    phase: f64,
    duration: f64,
    t2: f64,
    t1: f64,
) -> Result<BlochVector, BlochError> {
    if !v.is_finite() || !phase.is_finite() {
        return Err(invalid("free_evolve: inputs must be finite"));
    }
    if !(duration >= 0.0) || duration.is_nan() {
        return Err(invalid("free_evolve: duration must be >= 0"));
    }
    if !(t2 > 0.0) {
        return Err(invalid("free_evolve: t2 must be > 0"));
    }
    if !(t1 > 0.0) {
        return Err(invalid("free_evolve: t1 must be > 0"));
    }
    Ok(free_evolve_unchecked(v, phase, duration, t2, t1))
}

pub(crate) fn free_evolve_unchecked(
    v: BlochVector,
    phase: f64,
    duration: f64,
    t2: f64,
    t1: f64,
) -> BlochVector {
    let (s, c) = phase.sin_cos();
    let e2 = (-duration / t2).exp();
    let e1 = (-duration / t1).exp();
    // mz form is exact at e1 = 1 (no decay) and e1 = 0 (full recovery).
    BlochVector {
        mx: (v.mx * c - v.my * s) * e2,
        my: (v.mx * s + v.my * c) * e2,
        mz: v.mz + (1.0 - e1) * (1.0 - v.mz),
    }
}

/// Draw `cfg.n_packets` spin packets, all initialized to equilibrium.
///
/// The per-packet `b1_scale` is `1 + eps/pi` with `eps ~ Normal(delta0,
/// sigma)`, so a nominal `pi` pulse acquires error `eps` under either
/// [`ErrorMode`]; `dephase_per_tau ~ Uniform[0, 2*pi)` when dephasing is
/// enabled. Sampling is sequential from a ChaCha8 stream, so identical
/// `(config, seed)` yields bit-identical ensembles regardless of how the
/// packets are later processed.
pub fn sample_ensemble(cfg: &EnsembleConfig) -> Result<Vec<SpinPacket>, BlochError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let flip_err = Normal::new(cfg.delta0, cfg.sigma)
        .map_err(|e| invalid(format!("ensemble flip-error distribution: {e}")))?;
    let phase = Uniform::new(0.0, TAU)
        .map_err(|e| invalid(format!("ensemble dephasing distribution: {e}")))?;

    let mut packets = Vec::with_capacity(cfg.n_packets);
    for _ in 0..cfg.n_packets {
        // Reject scales <= 0 (possible only for sigma of order pi); the
        // retry consumes draws deterministically.
        let b1_scale = loop {
            let eps = flip_err.sample(&mut rng);
            let scale = 1.0 + eps / PI;
            if scale > 0.0 {
                break scale;
            }
        };
        let dephase_per_tau = match cfg.dephasing {
            DephasingModel::UniformPerTau => phase.sample(&mut rng),
            DephasingModel::None => 0.0,
        };
        packets.push(SpinPacket {
            state: BlochVector::EQUILIBRIUM,
            b1_scale,
            dephase_per_tau,
        });
    }
    Ok(packets)
}
