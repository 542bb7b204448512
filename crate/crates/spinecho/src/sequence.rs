//! Pulse-sequence definitions and the ensemble execution engine.
//!
//! Echo sequences expand to a flat event list (pulses, delays, acquisitions)
//! that is propagated independently for every spin packet. Ensemble averages
//! are accumulated in fixed-size batches that are merged in batch order, so
//! results are bit-identical for any number of worker threads.
//!
//! Detection convention: the in-phase channel is the y-axis projection, the
//! quadrature channel the x-axis projection; a nonzero `detector_skew`
//! rotates the quadrature measurement axis so that the two channels sit
//! `90 degrees + skew` apart. The receiver reference sign follows the
//! error-free echo (consecutive echoes of a refocusing train alternate
//! orientation; the recorded sign convention makes the nominal echo
//! positive in-phase, as a phase-cycled receiver would).

use crate::bloch::{
    free_evolve_unchecked, rotate_unchecked, sample_ensemble, BlochError, DephasingModel,
    EnsembleConfig, ErrorMode, FlipErrorMode, PulseSpec, SpinPacket,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SequenceError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Bloch(#[from] BlochError),
}

fn invalid(msg: impl Into<String>) -> SequenceError {
    SequenceError::InvalidArgument(msg.into())
}

/// Batch size for the deterministic parallel reduction. Fixed so that the
/// summation order is independent of the worker count.
const REDUCTION_BATCH: usize = 8192;

/// Which component a Rabi run records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RabiDetection {
    /// Record `<m_z>` (inversion-style readout). The in-phase channel holds
    /// the signal; the quadrature channel is zero.
    #[default]
    Longitudinal,
    /// Record the transverse projections like an echo measurement.
    Transverse,
}

/// One element of an expanded (or custom) pulse sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceEvent {
    Pulse(PulseSpec),
    Delay { duration_us: f64 },
    Acquire,
}

/// A declarative pulse sequence.
///
/// Times are microseconds, angles radians. `n_cycles` counts refocusing
/// blocks: CP and CPMG record one echo per cycle, the phase-error
/// amplification sequence records two.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SequenceSpec {
    /// Continuous nutation under a resonant drive.
    Rabi {
        #[serde(rename = "omega_rad_per_us")]
        omega: f64,
        #[serde(default)]
        b1_scale_sigma: f64,
        #[serde(rename = "t_max_us")]
        t_max: f64,
        #[serde(rename = "dt_us")]
        dt: f64,
        #[serde(default)]
        detection: RabiDetection,
    },
    /// `pi/2_x` excitation followed by free precession at a detuning.
    Fid {
        #[serde(rename = "detuning_rad_per_us")]
        detuning: f64,
        #[serde(rename = "detector_skew_rad", default)]
        detector_skew: f64,
        #[serde(rename = "t_max_us")]
        t_max: f64,
        #[serde(rename = "dt_us")]
        dt: f64,
    },
    /// Carr-Purcell: `pi/2_x - (tau - pi_x - tau)^n`.
    Cp {
        #[serde(rename = "tau_us")]
        tau: f64,
        n_cycles: usize,
        #[serde(rename = "detector_skew_rad", default)]
        detector_skew: f64,
    },
    /// CPMG: `pi/2_x - (tau - pi_y - tau)^n`.
    Cpmg {
        #[serde(rename = "tau_us")]
        tau: f64,
        n_cycles: usize,
        #[serde(rename = "detector_skew_rad", default)]
        detector_skew: f64,
    },
    /// Phase-error amplification:
    /// `pi/2_x - (tau - pi_y' - tau - tau - pi_x - tau)^n`, where the
    /// nominal-y pulse axis is offset by `phase_error`.
    Spam {
        #[serde(rename = "tau_us")]
        tau: f64,
        n_cycles: usize,
        #[serde(rename = "phase_error_rad", default)]
        phase_error: f64,
        #[serde(rename = "detector_skew_rad", default)]
        detector_skew: f64,
    },
    /// Explicit event list. Pulses keep their own flip-error modes;
    /// `tau_ref` sets the delay length that accrues one `dephase_per_tau`.
    Custom {
        events: Vec<SequenceEvent>,
        #[serde(rename = "tau_ref_us")]
        tau_ref: f64,
        #[serde(rename = "detector_skew_rad", default)]
        detector_skew: f64,
    },
}

impl SequenceSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            SequenceSpec::Rabi { .. } => "rabi",
            SequenceSpec::Fid { .. } => "fid",
            SequenceSpec::Cp { .. } => "cp",
            SequenceSpec::Cpmg { .. } => "cpmg",
            SequenceSpec::Spam { .. } => "spam",
            SequenceSpec::Custom { .. } => "custom",
        }
    }

    pub fn is_echo_sequence(&self) -> bool {
        matches!(
            self,
            SequenceSpec::Cp { .. }
                | SequenceSpec::Cpmg { .. }
                | SequenceSpec::Spam { .. }
                | SequenceSpec::Custom { .. }
        )
    }

    pub fn detector_skew(&self) -> f64 {
        match self {
            SequenceSpec::Rabi { .. } => 0.0,
            SequenceSpec::Fid { detector_skew, .. }
            | SequenceSpec::Cp { detector_skew, .. }
            | SequenceSpec::Cpmg { detector_skew, .. }
            | SequenceSpec::Spam { detector_skew, .. }
            | SequenceSpec::Custom { detector_skew, .. } => *detector_skew,
        }
    }

    pub fn validate(&self) -> Result<(), SequenceError> {
        let finite = |x: f64, what: &str| {
            if x.is_finite() {
                Ok(())
            } else {
                Err(invalid(format!("sequence.{what} must be finite")))
            }
        };
        match self {
            SequenceSpec::Rabi {
                omega,
                b1_scale_sigma,
                t_max,
                dt,
                ..
            } => {
                finite(*omega, "omega_rad_per_us")?;
                finite(*t_max, "t_max_us")?;
                finite(*dt, "dt_us")?;
                if !(*omega > 0.0) {
                    return Err(invalid("sequence.omega_rad_per_us must be > 0"));
                }
                if !(*dt > 0.0) {
                    return Err(invalid("sequence.dt_us must be > 0"));
                }
                if *t_max < *dt {
                    return Err(invalid("sequence.t_max_us must be >= dt_us"));
                }
                if !(*b1_scale_sigma >= 0.0) || !b1_scale_sigma.is_finite() {
                    return Err(invalid("sequence.b1_scale_sigma must be finite and >= 0"));
                }
            }
            SequenceSpec::Fid {
                detuning,
                detector_skew,
                t_max,
                dt,
            } => {
                finite(*detuning, "detuning_rad_per_us")?;
                finite(*detector_skew, "detector_skew_rad")?;
                finite(*t_max, "t_max_us")?;
                finite(*dt, "dt_us")?;
                if !(*dt > 0.0) {
                    return Err(invalid("sequence.dt_us must be > 0"));
                }
                if *t_max < *dt {
                    return Err(invalid("sequence.t_max_us must be >= dt_us"));
                }
            }
            SequenceSpec::Cp {
                tau,
                n_cycles,
                detector_skew,
            }
            | SequenceSpec::Cpmg {
                tau,
                n_cycles,
                detector_skew,
            } => {
                finite(*tau, "tau_us")?;
                finite(*detector_skew, "detector_skew_rad")?;
                if !(*tau > 0.0) {
                    return Err(invalid("sequence.tau_us must be > 0"));
                }
                if *n_cycles == 0 {
                    return Err(invalid("sequence.n_cycles must be >= 1"));
                }
            }
            SequenceSpec::Spam {
                tau,
                n_cycles,
                phase_error,
                detector_skew,
            } => {
                finite(*tau, "tau_us")?;
                finite(*phase_error, "phase_error_rad")?;
                finite(*detector_skew, "detector_skew_rad")?;
                if !(*tau > 0.0) {
                    return Err(invalid("sequence.tau_us must be > 0"));
                }
                if *n_cycles == 0 {
                    return Err(invalid("sequence.n_cycles must be >= 1"));
                }
            }
            SequenceSpec::Custom {
                events,
                tau_ref,
                detector_skew,
            } => {
                finite(*tau_ref, "tau_ref_us")?;
                finite(*detector_skew, "detector_skew_rad")?;
                if !(*tau_ref > 0.0) {
                    return Err(invalid("sequence.tau_ref_us must be > 0"));
                }
                let mut acquires = 0usize;
                for (i, ev) in events.iter().enumerate() {
                    match ev {
                        SequenceEvent::Pulse(p) => {
                            p.validate().map_err(|e| {
                                invalid(format!("sequence.events[{i}]: {e}"))
                            })?;
                        }
                        SequenceEvent::Delay { duration_us } => {
                            if !(*duration_us > 0.0) || !duration_us.is_finite() {
                                return Err(invalid(format!(
                                    "sequence.events[{i}]: delay must be > 0"
                                )));
                            }
                        }
                        SequenceEvent::Acquire => acquires += 1,
                    }
                }
                if acquires == 0 {
                    return Err(invalid("sequence.events must contain an acquire"));
                }
            }
        }
        Ok(())
    }

    /// Expand an echo sequence to its event list, tagging pulses with the
    /// flip-error mode implied by the ensemble error model: refocusing `pi`
    /// pulses always pick up the sampled error; the excitation pulse only
    /// under [`ErrorMode::B1ScaleAllPulses`]. Custom events pass through
    /// unchanged.
    pub fn expand(&self, error_mode: ErrorMode) -> Result<Vec<SequenceEvent>, SequenceError> {
        let excitation_mode = match error_mode {
            ErrorMode::PiPulsesOnly => FlipErrorMode::None,
            ErrorMode::B1ScaleAllPulses => FlipErrorMode::B1Scale,
        };
        let refocus_mode = FlipErrorMode::B1Scale;

        let excitation = SequenceEvent::Pulse(
            PulseSpec::new(FRAC_PI_2, 0.0).with_flip_error(excitation_mode),
        );
        let delay = |tau: f64| SequenceEvent::Delay { duration_us: tau };

        let events = match self {
            SequenceSpec::Cp { tau, n_cycles, .. } => {
                let refocus = PulseSpec::new(PI, 0.0).with_flip_error(refocus_mode);
                let mut ev = vec![excitation];
                for _ in 0..*n_cycles {
                    ev.push(delay(*tau));
                    ev.push(SequenceEvent::Pulse(refocus));
                    ev.push(delay(*tau));
                    ev.push(SequenceEvent::Acquire);
                }
                ev
            }
            SequenceSpec::Cpmg { tau, n_cycles, .. } => {
                let refocus = PulseSpec::new(PI, FRAC_PI_2).with_flip_error(refocus_mode);
                let mut ev = vec![excitation];
                for _ in 0..*n_cycles {
                    ev.push(delay(*tau));
                    ev.push(SequenceEvent::Pulse(refocus));
                    ev.push(delay(*tau));
                    ev.push(SequenceEvent::Acquire);
                }
                ev
            }
            SequenceSpec::Spam {
                tau,
                n_cycles,
                phase_error,
                ..
            } => {
                let refocus_y = PulseSpec::new(PI, FRAC_PI_2)
                    .with_phase_error(*phase_error)
                    .with_flip_error(refocus_mode);
                let refocus_x = PulseSpec::new(PI, 0.0).with_flip_error(refocus_mode);
                let mut ev = vec![excitation];
                for _ in 0..*n_cycles {
                    ev.push(delay(*tau));
                    ev.push(SequenceEvent::Pulse(refocus_y));
                    ev.push(delay(*tau));
                    ev.push(SequenceEvent::Acquire);
                    ev.push(delay(*tau));
                    ev.push(SequenceEvent::Pulse(refocus_x));
                    ev.push(delay(*tau));
                    ev.push(SequenceEvent::Acquire);
                }
                ev
            }
            SequenceSpec::Custom { events, .. } => events.clone(),
            _ => return Err(invalid("expand: not an echo sequence")),
        };
        Ok(events)
    }

    fn tau_ref(&self) -> f64 {
        match self {
            SequenceSpec::Cp { tau, .. }
            | SequenceSpec::Cpmg { tau, .. }
            | SequenceSpec::Spam { tau, .. } => *tau,
            SequenceSpec::Custom { tau_ref, .. } => *tau_ref,
            _ => 1.0,
        }
    }
}

/// Simulation settings echoed into results and data files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetadata {
    pub sequence: SequenceSpec,
    pub ensemble: EnsembleConfig,
}

/// One recorded echo.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EchoPoint {
    /// Echo index, 1-based.
    pub n: usize,
    pub time_us: f64,
    pub in_phase: f64,
    pub quadrature: f64,
}

/// Ordered echo amplitudes with timing metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EchoTrain {
    pub entries: Vec<EchoPoint>,
    pub metadata: Option<TrainMetadata>,
}

/// Monte-Carlo standard errors of the recorded echo means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EchoStandardError {
    pub in_phase: f64,
    pub quadrature: f64,
}

/// One sampled instant of a time-domain signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeSample {
    pub t_us: f64,
    pub in_phase: f64,
    pub quadrature: f64,
}

/// Ordered time-domain samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub samples: Vec<TimeSample>,
    pub metadata: Option<TrainMetadata>,
}

/// Output of [`run_sequence`].
#[derive(Debug, Clone, PartialEq)]
pub enum SimOutput {
    Echoes(EchoTrain),
    Series(TimeSeries),
}

struct ChannelAccumulator {
    // Per recorded point: [sum_i, sum_q, sum_i_sq, sum_q_sq].
    sums: Vec<[f64; 4]>,
}

impl ChannelAccumulator {
    fn new(len: usize) -> Self {
        Self {
            sums: vec![[0.0; 4]; len],
        }
    }

    fn record(&mut self, idx: usize, in_phase: f64, quadrature: f64) {
        let s = &mut self.sums[idx];
        s[0] += in_phase;
        s[1] += quadrature;
        s[2] += in_phase * in_phase;
        s[3] += quadrature * quadrature;
    }

    fn merge(mut self, other: &ChannelAccumulator) -> Self {
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            for i in 0..4 {
                a[i] += b[i];
            }
        }
        self
    }

    fn mean(&self, idx: usize, n: usize) -> (f64, f64) {
        (self.sums[idx][0] / n as f64, self.sums[idx][1] / n as f64)
    }

    fn standard_error(&self, idx: usize, n: usize) -> (f64, f64) {
        if n < 2 {
            return (0.0, 0.0);
        }
        let nf = n as f64;
        let se = |sum: f64, sum_sq: f64| {
            let var = ((sum_sq - sum * sum / nf) / (nf - 1.0)).max(0.0);
            (var / nf).sqrt()
        };
        (
            se(self.sums[idx][0], self.sums[idx][2]),
            se(self.sums[idx][1], self.sums[idx][3]),
        )
    }
}

/// Accumulate per-packet channel samples over the ensemble in fixed-size,
/// order-stable batches.
fn accumulate_ensemble<F>(packets: &[SpinPacket], n_points: usize, per_packet: F) -> ChannelAccumulator
where
    F: Fn(&SpinPacket, &mut dyn FnMut(usize, f64, f64)) + Sync,
{
    packets
        .par_chunks(REDUCTION_BATCH)
        .map(|chunk| {
            let mut acc = ChannelAccumulator::new(n_points);
            for packet in chunk {
                per_packet(packet, &mut |idx, i, q| acc.record(idx, i, q));
            }
            acc
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(ChannelAccumulator::new(n_points), |a, b| a.merge(&b))
}

fn propagate<F>(
    events: &[SequenceEvent],
    packet: &SpinPacket,
    tau_ref: f64,
    t2: f64,
    t1: f64,
    mut on_acquire: F,
) where
    F: FnMut(usize, crate::bloch::BlochVector),
{
    let mut state = packet.state;
    let mut echo_idx = 0usize;
    for ev in events {
        match ev {
            SequenceEvent::Pulse(p) => {
                state =
                    rotate_unchecked(state, p.effective_flip(packet.b1_scale), p.effective_phase());
            }
            SequenceEvent::Delay { duration_us } => {
                let phase = packet.dephase_per_tau * (duration_us / tau_ref);
                state = free_evolve_unchecked(state, phase, *duration_us, t2, t1);
            }
            SequenceEvent::Acquire => {
                on_acquire(echo_idx, state);
                echo_idx += 1;
            }
        }
    }
}

/// Echo times (relative to the end of the excitation pulse) and count.
fn acquire_times(events: &[SequenceEvent]) -> Vec<f64> {
    let mut t = 0.0;
    let mut times = Vec::new();
    for ev in events {
        match ev {
            SequenceEvent::Delay { duration_us } => t += duration_us,
            SequenceEvent::Acquire => times.push(t),
            SequenceEvent::Pulse(_) => {}
        }
    }
    times
}

/// Receiver reference signs: the sign of the in-phase projection of the
/// error-free echo. Both recorded channels are multiplied by this sign, so
/// the nominal echo reads `+1` in-phase regardless of how the refocusing
/// train flips its orientation.
fn receiver_signs(events: &[SequenceEvent], tau_ref: f64, n_echoes: usize) -> Vec<f64> {
    let ideal_events: Vec<SequenceEvent> = events
        .iter()
        .map(|ev| match ev {
            SequenceEvent::Pulse(p) => {
                SequenceEvent::Pulse(PulseSpec::new(p.nominal_flip, p.axis_phase))
            }
            other => other.clone(),
        })
        .collect();
    let ideal_packet = SpinPacket {
        state: crate::bloch::BlochVector::EQUILIBRIUM,
        b1_scale: 1.0,
        dephase_per_tau: 0.0,
    };
    let mut signs = vec![1.0; n_echoes];
    propagate(
        &ideal_events,
        &ideal_packet,
        tau_ref,
        f64::INFINITY,
        f64::INFINITY,
        |idx, state| {
            let dominant = if state.my.abs() >= state.mx.abs() {
                state.my
            } else {
                state.mx
            };
            if dominant.abs() > 1e-9 {
                signs[idx] = dominant.signum();
            }
        },
    );
    signs
}

/// Execute an echo sequence over a sampled ensemble and record the
/// ensemble-mean echo projections.
pub fn run_echo_sequence(
    seq: &SequenceSpec,
    cfg: &EnsembleConfig,
) -> Result<EchoTrain, SequenceError> {
    run_echo_sequence_with_stats(seq, cfg).map(|(train, _)| train)
}

/// Like [`run_echo_sequence`], additionally returning the Monte-Carlo
/// standard error of each recorded mean.
pub fn run_echo_sequence_with_stats(
    seq: &SequenceSpec,
    cfg: &EnsembleConfig,
) -> Result<(EchoTrain, Vec<EchoStandardError>), SequenceError> {
    if !seq.is_echo_sequence() {
        return Err(invalid(format!(
            "run_echo_sequence: `{}` is not an echo sequence",
            seq.kind_name()
        )));
    }
    seq.validate()?;
    cfg.validate()?;

    let events = seq.expand(cfg.error_mode)?;
    let times = acquire_times(&events);
    let n_echoes = times.len();
    let tau_ref = seq.tau_ref();
    let signs = receiver_signs(&events, tau_ref, n_echoes);
    let (skew_sin, skew_cos) = seq.detector_skew().sin_cos();

    let packets = sample_ensemble(cfg)?;
    let t2 = cfg.t2_value();
    let t1 = cfg.t1_value();

    let acc = accumulate_ensemble(&packets, n_echoes, |packet, record| {
        propagate(&events, packet, tau_ref, t2, t1, |idx, state| {
            let in_phase = state.my;
            let quadrature = state.mx * skew_cos - state.my * skew_sin;
            record(idx, in_phase, quadrature);
        });
    });

    let n = packets.len();
    let mut entries = Vec::with_capacity(n_echoes);
    let mut errors = Vec::with_capacity(n_echoes);
    for idx in 0..n_echoes {
        let (mi, mq) = acc.mean(idx, n);
        let (si, sq) = acc.standard_error(idx, n);
        entries.push(EchoPoint {
            n: idx + 1,
            time_us: times[idx],
            in_phase: signs[idx] * mi,
            quadrature: signs[idx] * mq,
        });
        errors.push(EchoStandardError {
            in_phase: si,
            quadrature: sq,
        });
    }

    Ok((
        EchoTrain {
            entries,
            metadata: Some(TrainMetadata {
                sequence: seq.clone(),
                ensemble: cfg.clone(),
            }),
        },
        errors,
    ))
}

fn sample_times(t_max: f64, dt: f64) -> Vec<f64> {
    let n_steps = (t_max / dt + 1e-9).floor() as usize;
    (0..=n_steps).map(|k| k as f64 * dt).collect()
}

/// Continuous nutation of the ensemble at `lambda * omega` per packet, with
/// the drive-amplitude spread `lambda ~ Normal(1, b1_scale_sigma)`.
///
/// No relaxation or static dephasing acts during the drive; the observed
/// decay comes entirely from the amplitude spread.
pub fn run_rabi(
    b1_scale_sigma: f64,
    omega: f64,
    t_max: f64,
    dt: f64,
    cfg: &EnsembleConfig,
    detection: RabiDetection,
) -> Result<TimeSeries, SequenceError> {
    let seq = SequenceSpec::Rabi {
        omega,
        b1_scale_sigma,
        t_max,
        dt,
        detection,
    };
    seq.validate()?;
    // The packet b1_scale is 1 + eps/pi, so sigma = b1_scale_sigma * pi
    // yields the requested scale spread.
    let cfg_eff = EnsembleConfig {
        delta0: 0.0,
        sigma: b1_scale_sigma * PI,
        error_mode: ErrorMode::B1ScaleAllPulses,
        dephasing: DephasingModel::None,
        ..cfg.clone()
    };
    cfg_eff.validate()?;
    let packets = sample_ensemble(&cfg_eff)?;
    let times = sample_times(t_max, dt);

    let acc = accumulate_ensemble(&packets, times.len(), |packet, record| {
        for (idx, &t) in times.iter().enumerate() {
            let state = rotate_unchecked(
                crate::bloch::BlochVector::EQUILIBRIUM,
                packet.b1_scale * omega * t,
                0.0,
            );
            match detection {
                RabiDetection::Longitudinal => record(idx, state.mz, 0.0),
                RabiDetection::Transverse => record(idx, state.my, state.mx),
            }
        }
    });

    let n = packets.len();
    let samples = times
        .iter()
        .enumerate()
        .map(|(idx, &t)| {
            let (i, q) = acc.mean(idx, n);
            TimeSample {
                t_us: t,
                in_phase: i,
                quadrature: q,
            }
        })
        .collect();
    Ok(TimeSeries {
        samples,
        metadata: Some(TrainMetadata {
            sequence: seq,
            ensemble: cfg.clone(),
        }),
    })
}

/// `pi/2_x` excitation followed by free precession at `detuning`, recording
/// both detector channels.
///
/// The per-packet uniform dephasing model targets echo sequences and is not
/// applied here; envelope decay is carried by the ensemble `t2` acting as an
/// apparent (T2*) decay time.
pub fn run_fid(
    detuning: f64,
    detector_skew: f64,
    cfg: &EnsembleConfig,
    t_max: f64,
    dt: f64,
) -> Result<TimeSeries, SequenceError> {
    let seq = SequenceSpec::Fid {
        detuning,
        detector_skew,
        t_max,
        dt,
    };
    seq.validate()?;
    cfg.validate()?;
    let packets = sample_ensemble(cfg)?;
    let times = sample_times(t_max, dt);
    let (skew_sin, skew_cos) = detector_skew.sin_cos();
    let t2 = cfg.t2_value();
    let t1 = cfg.t1_value();
    let excitation_scaled = cfg.error_mode == ErrorMode::B1ScaleAllPulses;

    let acc = accumulate_ensemble(&packets, times.len(), |packet, record| {
        let flip = if excitation_scaled {
            FRAC_PI_2 * packet.b1_scale
        } else {
            FRAC_PI_2
        };
        let excited = rotate_unchecked(crate::bloch::BlochVector::EQUILIBRIUM, flip, 0.0);
        for (idx, &t) in times.iter().enumerate() {
            let state = free_evolve_unchecked(excited, detuning * t, t, t2, t1);
            let in_phase = state.my;
            let quadrature = state.mx * skew_cos - state.my * skew_sin;
            record(idx, in_phase, quadrature);
        }
    });

    let n = packets.len();
    let samples = times
        .iter()
        .enumerate()
        .map(|(idx, &t)| {
            let (i, q) = acc.mean(idx, n);
            TimeSample {
                t_us: t,
                in_phase: i,
                quadrature: q,
            }
        })
        .collect();
    Ok(TimeSeries {
        samples,
        metadata: Some(TrainMetadata {
            sequence: seq,
            ensemble: cfg.clone(),
        }),
    })
}

/// Run any sequence kind, dispatching to the echo engine or the
/// time-domain engines.
pub fn run_sequence(seq: &SequenceSpec, cfg: &EnsembleConfig) -> Result<SimOutput, SequenceError> {
    match seq {
        SequenceSpec::Rabi {
            omega,
            b1_scale_sigma,
            t_max,
            dt,
            detection,
        } => run_rabi(*b1_scale_sigma, *omega, *t_max, *dt, cfg, *detection).map(SimOutput::Series),
        SequenceSpec::Fid {
            detuning,
            detector_skew,
            t_max,
            dt,
        } => run_fid(*detuning, *detector_skew, cfg, *t_max, *dt).map(SimOutput::Series),
        _ => run_echo_sequence(seq, cfg).map(SimOutput::Echoes),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models;
    use approx::assert_abs_diff_eq;

    fn quiet_ensemble(n_packets: usize) -> EnsembleConfig {
        EnsembleConfig {
            n_packets,
            seed: 42,
            ..EnsembleConfig::default()
        }
    }

    #[test]
    fn spam_without_errors_refocuses_fully() {
        let seq = SequenceSpec::Spam {
            tau: 10.0,
            n_cycles: 6,
            phase_error: 0.0,
            detector_skew: 0.0,
        };
        let train = run_echo_sequence(&seq, &quiet_ensemble(200)).unwrap();
        assert_eq!(train.entries.len(), 12);
        for e in &train.entries {
            assert_abs_diff_eq!(e.in_phase, 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(e.quadrature, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn spam_echo_phase_accumulates_two_delta_per_cycle() {
        let delta = 1.0f64.to_radians();
        let seq = SequenceSpec::Spam {
            tau: 5.0,
            n_cycles: 8,
            phase_error: delta,
            detector_skew: 0.0,
        };
        let train = run_echo_sequence(&seq, &quiet_ensemble(100)).unwrap();
        for m in 1..=8usize {
            let e = &train.entries[2 * m - 1]; // cycle-end echo
            assert_eq!(e.n, 2 * m);
            let arg = e.quadrature.atan2(e.in_phase);
            assert_abs_diff_eq!(arg, 2.0 * m as f64 * delta, epsilon = 1e-6);
            // Mid-cycle echo mirrors the quadrature leakage.
            let mid = &train.entries[2 * m - 2];
            let expected = 2.0 * m as f64 * delta;
            assert_abs_diff_eq!(mid.in_phase, expected.cos(), epsilon = 1e-9);
            assert_abs_diff_eq!(mid.quadrature, -expected.sin(), epsilon = 1e-9);
        }
    }

    #[test]
    fn spam_matches_model_with_relaxation() {
        let delta = 10.3f64.to_radians();
        let tau = 10.0;
        let seq = SequenceSpec::Spam {
            tau,
            n_cycles: 6,
            phase_error: delta,
            detector_skew: 0.0,
        };
        let cfg = EnsembleConfig {
            t2: Some(190.0),
            ..quiet_ensemble(500)
        };
        let train = run_echo_sequence(&seq, &cfg).unwrap();
        for m in 1..=6usize {
            let e = &train.entries[2 * m - 1];
            assert_abs_diff_eq!(e.time_us, 4.0 * m as f64 * tau, epsilon = 1e-9);
            let (mi, mq) = models::spam_echo_model(m, tau, delta, 190.0);
            assert_abs_diff_eq!(e.in_phase, mi, epsilon = 1e-10);
            assert_abs_diff_eq!(e.quadrature, mq, epsilon = 1e-10);
        }
    }

    #[test]
    fn cp_monte_carlo_matches_closed_form() {
        let sigma = 0.314;
        let seq = SequenceSpec::Cp {
            tau: 10.0,
            n_cycles: 10,
            detector_skew: 0.0,
        };
        let cfg = EnsembleConfig {
            n_packets: 200_000,
            sigma,
            seed: 3,
            ..EnsembleConfig::default()
        };
        let (train, se) = run_echo_sequence_with_stats(&seq, &cfg).unwrap();
        for (e, s) in train.entries.iter().zip(&se) {
            let exact = models::cp_echo_amplitude(e.n, 0.0, sigma).unwrap().value;
            let tol = (3.0 * s.in_phase).max(1e-12);
            assert!(
                (e.in_phase - exact).abs() <= tol,
                "echo {}: mc {} vs model {} (tol {})",
                e.n,
                e.in_phase,
                exact,
                tol
            );
        }
    }

    #[test]
    fn cpmg_even_echoes_resist_flip_errors() {
        let cfg = EnsembleConfig {
            n_packets: 100_000,
            sigma: 0.2,
            seed: 5,
            ..EnsembleConfig::default()
        };
        let cpmg = SequenceSpec::Cpmg {
            tau: 10.0,
            n_cycles: 10,
            detector_skew: 0.0,
        };
        let train = run_echo_sequence(&cpmg, &cfg).unwrap();
        for e in train.entries.iter().filter(|e| e.n % 2 == 0) {
            assert!(
                e.in_phase >= 0.99,
                "even echo {} dipped to {}",
                e.n,
                e.in_phase
            );
        }

        // Same errors through a CP train decay much faster.
        let cp = SequenceSpec::Cp {
            tau: 10.0,
            n_cycles: 10,
            detector_skew: 0.0,
        };
        let cp_train = run_echo_sequence(&cp, &cfg).unwrap();
        let cp10 = cp_train.entries[9].in_phase;
        let cpmg10 = train.entries[9].in_phase;
        assert!(
            cp10 < cpmg10,
            "cp echo 10 ({cp10}) not below cpmg echo 10 ({cpmg10})"
        );
    }

    #[test]
    fn error_free_train_keeps_unit_echoes_with_exact_times() {
        let seq = SequenceSpec::Cpmg {
            tau: 7.5,
            n_cycles: 5,
            detector_skew: 0.0,
        };
        let train = run_echo_sequence(&seq, &quiet_ensemble(1000)).unwrap();
        for (i, e) in train.entries.iter().enumerate() {
            assert_eq!(e.n, i + 1);
            assert_abs_diff_eq!(e.time_us, 2.0 * (i + 1) as f64 * 7.5, epsilon = 1e-9);
            assert_abs_diff_eq!(e.in_phase, 1.0, epsilon = 1e-12);
            assert!(e.in_phase.abs() <= 1.0 + 1e-12);
            assert!(e.quadrature.abs() <= 1.0 + 1e-12);
        }
        let increasing = train
            .entries
            .windows(2)
            .all(|w| w[0].time_us < w[1].time_us);
        assert!(increasing);
    }

    #[test]
    fn echo_train_is_identical_across_worker_counts() {
        let seq = SequenceSpec::Cp {
            tau: 10.0,
            n_cycles: 8,
            detector_skew: 0.0,
        };
        let cfg = EnsembleConfig {
            n_packets: 20_000,
            sigma: 0.25,
            seed: 9,
            ..EnsembleConfig::default()
        };
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| run_echo_sequence(&seq, &cfg).unwrap());
        let multi = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(|| run_echo_sequence(&seq, &cfg).unwrap());
        for (a, b) in single.entries.iter().zip(&multi.entries) {
            assert_eq!(a.in_phase.to_bits(), b.in_phase.to_bits());
            assert_eq!(a.quadrature.to_bits(), b.quadrature.to_bits());
        }
    }

    #[test]
    fn rabi_without_spread_is_pure_cosine() {
        let omega = 2.0 * PI;
        let series = run_rabi(
            0.0,
            omega,
            5.0,
            0.05,
            &quiet_ensemble(10),
            RabiDetection::Longitudinal,
        )
        .unwrap();
        for s in &series.samples {
            assert_abs_diff_eq!(s.in_phase, (omega * s.t_us).cos(), epsilon = 1e-12);
            assert_eq!(s.quadrature, 0.0);
        }
    }

    #[test]
    fn rabi_envelope_matches_gaussian_average() {
        let omega = 2.0 * PI;
        let sigma_scale = 0.03;
        let series = run_rabi(
            sigma_scale,
            omega,
            20.0,
            0.05,
            &quiet_ensemble(50_000),
            RabiDetection::Longitudinal,
        )
        .unwrap();
        let max_dev = series
            .samples
            .iter()
            .map(|s| (s.in_phase - models::rabi_envelope_model(s.t_us, omega, sigma_scale)).abs())
            .fold(0.0f64, f64::max);
        assert!(max_dev < 0.02, "max deviation {max_dev}");
    }

    #[test]
    fn fid_channels_are_ninety_degrees_apart_without_skew() {
        let detuning = 2.0 * PI; // one cycle per microsecond
        let series = run_fid(detuning, 0.0, &quiet_ensemble(10), 3.0, 0.01).unwrap();
        for s in &series.samples {
            assert_abs_diff_eq!(s.in_phase, -(detuning * s.t_us).cos(), epsilon = 1e-12);
            assert_abs_diff_eq!(s.quadrature, (detuning * s.t_us).sin(), epsilon = 1e-12);
        }
    }

    #[test]
    fn fid_skew_rotates_quadrature_channel() {
        let detuning = 2.0 * PI;
        let skew = -0.7f64.to_radians();
        let series = run_fid(detuning, skew, &quiet_ensemble(10), 3.0, 0.01).unwrap();
        for s in &series.samples {
            assert_abs_diff_eq!(
                s.quadrature,
                (detuning * s.t_us + skew).sin(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn fid_without_detuning_or_skew_is_constant() {
        let series = run_fid(0.0, 0.0, &quiet_ensemble(10), 2.0, 0.1).unwrap();
        for s in &series.samples {
            assert_abs_diff_eq!(s.in_phase, -1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(s.quadrature, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn invalid_requests_are_rejected() {
        let bad_tau = SequenceSpec::Cp {
            tau: 0.0,
            n_cycles: 3,
            detector_skew: 0.0,
        };
        assert!(run_echo_sequence(&bad_tau, &quiet_ensemble(10)).is_err());

        let empty = EnsembleConfig {
            n_packets: 0,
            ..EnsembleConfig::default()
        };
        let seq = SequenceSpec::Cp {
            tau: 1.0,
            n_cycles: 1,
            detector_skew: 0.0,
        };
        assert!(run_echo_sequence(&seq, &empty).is_err());

        let bad_delay = SequenceSpec::Custom {
            events: vec![
                SequenceEvent::Delay { duration_us: -1.0 },
                SequenceEvent::Acquire,
            ],
            tau_ref: 1.0,
            detector_skew: 0.0,
        };
        assert!(run_echo_sequence(&bad_delay, &quiet_ensemble(10)).is_err());

        let no_acquire = SequenceSpec::Custom {
            events: vec![SequenceEvent::Delay { duration_us: 1.0 }],
            tau_ref: 1.0,
            detector_skew: 0.0,
        };
        assert!(run_echo_sequence(&no_acquire, &quiet_ensemble(10)).is_err());

        assert!(run_rabi(
            0.0,
            1.0,
            0.5,
            1.0,
            &quiet_ensemble(10),
            RabiDetection::Longitudinal
        )
        .is_err());

        assert!(run_echo_sequence(
            &SequenceSpec::Fid {
                detuning: 1.0,
                detector_skew: 0.0,
                t_max: 1.0,
                dt: 0.1
            },
            &quiet_ensemble(10)
        )
        .is_err());
    }

    #[test]
    fn custom_sequence_reproduces_cpmg() {
        let tau = 4.0;
        let mut events = vec![SequenceEvent::Pulse(PulseSpec::new(FRAC_PI_2, 0.0))];
        for _ in 0..3 {
            events.push(SequenceEvent::Delay { duration_us: tau });
            events.push(SequenceEvent::Pulse(
                PulseSpec::new(PI, FRAC_PI_2).with_flip_error(FlipErrorMode::B1Scale),
            ));
            events.push(SequenceEvent::Delay { duration_us: tau });
            events.push(SequenceEvent::Acquire);
        }
        let custom = SequenceSpec::Custom {
            events,
            tau_ref: tau,
            detector_skew: 0.0,
        };
        let named = SequenceSpec::Cpmg {
            tau,
            n_cycles: 3,
            detector_skew: 0.0,
        };
        let cfg = EnsembleConfig {
            n_packets: 5000,
            sigma: 0.2,
            seed: 17,
            ..EnsembleConfig::default()
        };
        let a = run_echo_sequence(&custom, &cfg).unwrap();
        let b = run_echo_sequence(&named, &cfg).unwrap();
        for (x, y) in a.entries.iter().zip(&b.entries) {
            assert_eq!(x.in_phase.to_bits(), y.in_phase.to_bits());
            assert_eq!(x.quadrature.to_bits(), y.quadrature.to_bits());
        }
    }
}
