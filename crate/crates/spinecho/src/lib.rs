//! Pulsed magnetic resonance error-metrology toolkit.
//!
//! Simulates electron-spin qubit rotations in the rotating frame under
//! realistic pulse-error models, evaluates closed-form echo-decay models for
//! the Carr-Purcell family of sequences, and fits echo-train or time-series
//! data to extract rotation-angle and rotation-axis error parameters.
//!
//! The crate is organised around the experiment pipeline:
//!
//! * [`bloch`] — Bloch-vector kinematics, pulse specifications, and
//!   reproducible ensemble sampling.
//! * [`sequence`] — declarative pulse sequences (Rabi, FID, CP, CPMG, SPAM,
//!   custom) and the Monte-Carlo execution engine.
//! * [`models`] — closed-form decay models, including the exact-rational
//!   Carr-Purcell coefficient tables.
//! * [`fit`] — damped Gauss-Newton least-squares fitting with linearized
//!   uncertainties.
//! * [`io`] — experiment manifests, CSV echo-train/time-series files, and
//!   plot-data emission.
//! * [`cli`] — the `spinecho` command-line surface.

// Validation guards use the `!(x > 0.0)` form on purpose: unlike `x <= 0.0`
// it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bloch;
pub mod cli;
pub mod fit;
pub mod io;
pub mod models;
pub mod sequence;
