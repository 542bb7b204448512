//! Experiment manifests, data files, and plot-data emission.
//!
//! Data files are CSV with a JSON sidecar of the same basename carrying the
//! format version and an echo of the simulation settings. Values are written
//! with 17 significant digits so a write/read cycle is lossless for `f64`.
//! Manifests accept angle fields with an explicit `_deg` or `_rad` suffix;
//! files and in-memory types are always microseconds and radians.

use crate::bloch::{DephasingModel, EnsembleConfig, ErrorMode};
use crate::sequence::{
    EchoPoint, EchoTrain, RabiDetection, SequenceEvent, SequenceSpec, TimeSample, TimeSeries,
    TrainMetadata,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

fn parse_err(path: &Path, message: impl Into<String>) -> IoError {
    IoError::Parse {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

// ---------------------------------------------------------------------------
// Manifests

/// A validated experiment description: what to run and how to record it.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub sequence: SequenceSpec,
    pub ensemble: EnsembleConfig,
    /// Std of additive Gaussian noise applied to both recorded channels.
    pub noise_std: f64,
    pub output: Option<PathBuf>,
}

fn angle_field(
    field: &str,
    deg: Option<f64>,
    rad: Option<f64>,
    default: f64,
) -> Result<f64, IoError> {
    match (deg, rad) {
        (None, None) => Ok(default),
        (Some(d), None) => Ok(d.to_radians()),
        (None, Some(r)) => Ok(r),
        (Some(_), Some(_)) => Err(IoError::Invalid(format!(
            "field `{field}`: give `{field}_deg` or `{field}_rad`, not both"
        ))),
    }
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum SequenceDoc {
    Rabi {
        omega_rad_per_us: f64,
        #[serde(default)]
        b1_scale_sigma: f64,
        t_max_us: f64,
        dt_us: f64,
        #[serde(default)]
        detection: RabiDetection,
    },
    Fid {
        detuning_rad_per_us: f64,
        detector_skew_deg: Option<f64>,
        detector_skew_rad: Option<f64>,
        t_max_us: f64,
        dt_us: f64,
    },
    Cp {
        tau_us: f64,
        n_cycles: usize,
        detector_skew_deg: Option<f64>,
        detector_skew_rad: Option<f64>,
    },
    Cpmg {
        tau_us: f64,
        n_cycles: usize,
        detector_skew_deg: Option<f64>,
        detector_skew_rad: Option<f64>,
    },
    Spam {
        tau_us: f64,
        n_cycles: usize,
        phase_error_deg: Option<f64>,
        phase_error_rad: Option<f64>,
        detector_skew_deg: Option<f64>,
        detector_skew_rad: Option<f64>,
    },
    Custom {
        events: Vec<SequenceEvent>,
        tau_ref_us: f64,
        detector_skew_deg: Option<f64>,
        detector_skew_rad: Option<f64>,
    },
}

impl SequenceDoc {
    fn into_spec(self) -> Result<SequenceSpec, IoError> {
        Ok(match self {
            SequenceDoc::Rabi {
                omega_rad_per_us,
                b1_scale_sigma,
                t_max_us,
                dt_us,
                detection,
            } => SequenceSpec::Rabi {
                omega: omega_rad_per_us,
                b1_scale_sigma,
                t_max: t_max_us,
                dt: dt_us,
                detection,
            },
            SequenceDoc::Fid {
                detuning_rad_per_us,
                detector_skew_deg,
                detector_skew_rad,
                t_max_us,
                dt_us,
            } => SequenceSpec::Fid {
                detuning: detuning_rad_per_us,
                detector_skew: angle_field(
                    "sequence.detector_skew",
                    detector_skew_deg,
                    detector_skew_rad,
                    0.0,
                )?,
                t_max: t_max_us,
                dt: dt_us,
            },
            SequenceDoc::Cp {
                tau_us,
                n_cycles,
                detector_skew_deg,
                detector_skew_rad,
            } => SequenceSpec::Cp {
                tau: tau_us,
                n_cycles,
                detector_skew: angle_field(
                    "sequence.detector_skew",
                    detector_skew_deg,
                    detector_skew_rad,
                    0.0,
                )?,
            },
            SequenceDoc::Cpmg {
                tau_us,
                n_cycles,
                detector_skew_deg,
                detector_skew_rad,
            } => SequenceSpec::Cpmg {
                tau: tau_us,
                n_cycles,
                detector_skew: angle_field(
                    "sequence.detector_skew",
                    detector_skew_deg,
                    detector_skew_rad,
                    0.0,
                )?,
            },
            SequenceDoc::Spam {
                tau_us,
                n_cycles,
                phase_error_deg,
                phase_error_rad,
                detector_skew_deg,
                detector_skew_rad,
            } => SequenceSpec::Spam {
                tau: tau_us,
                n_cycles,
                phase_error: angle_field(
                    "sequence.phase_error",
                    phase_error_deg,
                    phase_error_rad,
                    0.0,
                )?,
                detector_skew: angle_field(
                    "sequence.detector_skew",
                    detector_skew_deg,
                    detector_skew_rad,
                    0.0,
                )?,
            },
            SequenceDoc::Custom {
                events,
                tau_ref_us,
                detector_skew_deg,
                detector_skew_rad,
            } => SequenceSpec::Custom {
                events,
                tau_ref: tau_ref_us,
                detector_skew: angle_field(
                    "sequence.detector_skew",
                    detector_skew_deg,
                    detector_skew_rad,
                    0.0,
                )?,
            },
        })
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EnsembleDoc {
    n_packets: usize,
    delta0_deg: Option<f64>,
    delta0_rad: Option<f64>,
    sigma_deg: Option<f64>,
    sigma_rad: Option<f64>,
    #[serde(default = "default_error_mode")]
    error_mode: ErrorMode,
    t2_us: Option<f64>,
    t1_us: Option<f64>,
    #[serde(default = "default_dephasing")]
    dephasing: DephasingModel,
    #[serde(default)]
    seed: u64,
}

fn default_error_mode() -> ErrorMode {
    ErrorMode::PiPulsesOnly
}

fn default_dephasing() -> DephasingModel {
    DephasingModel::UniformPerTau
}

impl EnsembleDoc {
    fn into_config(self) -> Result<EnsembleConfig, IoError> {
        Ok(EnsembleConfig {
            n_packets: self.n_packets,
            delta0: angle_field("ensemble.delta0", self.delta0_deg, self.delta0_rad, 0.0)?,
            sigma: angle_field("ensemble.sigma", self.sigma_deg, self.sigma_rad, 0.0)?,
            error_mode: self.error_mode,
            t2: self.t2_us,
            t1: self.t1_us,
            dephasing: self.dephasing,
            seed: self.seed,
        })
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDoc {
    sequence: SequenceDoc,
    ensemble: EnsembleDoc,
    #[serde(default)]
    noise_std: f64,
    output: Option<PathBuf>,
}

/// Parse and validate a manifest from JSON text.
pub fn parse_manifest(text: &str, origin: &Path) -> Result<Manifest, IoError> {
    let doc: ManifestDoc =
        serde_json::from_str(text).map_err(|e| parse_err(origin, e.to_string()))?;
    let manifest = Manifest {
        sequence: doc.sequence.into_spec()?,
        ensemble: doc.ensemble.into_config()?,
        noise_std: doc.noise_std,
        output: doc.output,
    };
    manifest
        .sequence
        .validate()
        .map_err(|e| IoError::Invalid(e.to_string()))?;
    manifest
        .ensemble
        .validate()
        .map_err(|e| IoError::Invalid(e.to_string()))?;
    if !(manifest.noise_std >= 0.0) || !manifest.noise_std.is_finite() {
        return Err(IoError::Invalid(
            "field `noise_std`: must be finite and >= 0".into(),
        ));
    }
    Ok(manifest)
}

pub fn load_manifest(path: &Path) -> Result<Manifest, IoError> {
    let text = fs::read_to_string(path).map_err(|source| IoError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_manifest(&text, path)
}

// ---------------------------------------------------------------------------
// Noise injection

/// Additive Gaussian receiver noise on both channels, drawn from a stream
/// separate from the one used for ensemble sampling.
fn noise_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

pub fn add_channel_noise_train(train: &mut EchoTrain, std: f64, seed: u64) {
    if std <= 0.0 {
        return;
    }
    let mut rng = noise_rng(seed);
    let noise = Normal::new(0.0, std).expect("noise std validated non-negative");
    for e in &mut train.entries {
        e.in_phase += noise.sample(&mut rng);
        e.quadrature += noise.sample(&mut rng);
    }
}

pub fn add_channel_noise_series(series: &mut TimeSeries, std: f64, seed: u64) {
    if std <= 0.0 {
        return;
    }
    let mut rng = noise_rng(seed);
    let noise = Normal::new(0.0, std).expect("noise std validated non-negative");
    for s in &mut series.samples {
        s.in_phase += noise.sample(&mut rng);
        s.quadrature += noise.sample(&mut rng);
    }
}

// ---------------------------------------------------------------------------
// Data files

pub const ECHO_HEADER: &str = "n,echo_time_us,in_phase,quadrature";
pub const SERIES_HEADER: &str = "t_us,in_phase,quadrature";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileKind {
    EchoTrain,
    TimeSeries,
}

/// JSON sidecar schema written next to each CSV data file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub format_version: u32,
    pub kind: FileKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sequence: Option<SequenceSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleConfig>,
    #[serde(default)]
    pub noise_std: f64,
    pub n_rows: usize,
}

/// 17 significant digits: enough for a lossless `f64` round trip.
fn format_value(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn write_file(path: &Path, contents: &str) -> Result<(), IoError> {
    fs::write(path, contents).map_err(|source| IoError::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Write a text artifact (fit JSON, plot output) with path context on error.
pub fn write_text(path: &Path, contents: &str) -> Result<(), IoError> {
    write_file(path, contents)
}

fn write_sidecar(path: &Path, sidecar: &Sidecar) -> Result<(), IoError> {
    let json = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
    write_file(&sidecar_path(path), &(json + "\n"))
}

pub fn write_echo_train(path: &Path, train: &EchoTrain, noise_std: f64) -> Result<(), IoError> {
    let mut csv = String::with_capacity(64 * (train.entries.len() + 1));
    csv.push_str(ECHO_HEADER);
    csv.push('\n');
    for e in &train.entries {
        writeln!(
            csv,
            "{},{},{},{}",
            e.n,
            format_value(e.time_us),
            format_value(e.in_phase),
            format_value(e.quadrature)
        )
        .expect("string write");
    }
    write_file(path, &csv)?;
    write_sidecar(
        path,
        &Sidecar {
            format_version: FORMAT_VERSION,
            kind: FileKind::EchoTrain,
            sequence: train.metadata.as_ref().map(|m| m.sequence.clone()),
            ensemble: train.metadata.as_ref().map(|m| m.ensemble.clone()),
            noise_std,
            n_rows: train.entries.len(),
        },
    )
}

pub fn write_time_series(path: &Path, series: &TimeSeries, noise_std: f64) -> Result<(), IoError> {
    let mut csv = String::with_capacity(48 * (series.samples.len() + 1));
    csv.push_str(SERIES_HEADER);
    csv.push('\n');
    for s in &series.samples {
        writeln!(
            csv,
            "{},{},{}",
            format_value(s.t_us),
            format_value(s.in_phase),
            format_value(s.quadrature)
        )
        .expect("string write");
    }
    write_file(path, &csv)?;
    write_sidecar(
        path,
        &Sidecar {
            format_version: FORMAT_VERSION,
            kind: FileKind::TimeSeries,
            sequence: series.metadata.as_ref().map(|m| m.sequence.clone()),
            ensemble: series.metadata.as_ref().map(|m| m.ensemble.clone()),
            noise_std,
            n_rows: series.samples.len(),
        },
    )
}

fn read_sidecar(path: &Path) -> Option<Sidecar> {
    let text = fs::read_to_string(sidecar_path(path)).ok()?;
    serde_json::from_str(&text).ok()
}

fn metadata_from_sidecar(sidecar: Option<&Sidecar>) -> Option<TrainMetadata> {
    let sidecar = sidecar?;
    Some(TrainMetadata {
        sequence: sidecar.sequence.clone()?,
        ensemble: sidecar.ensemble.clone()?,
    })
}

struct CsvRows<'a> {
    path: &'a Path,
    header: &'static str,
    n_columns: usize,
}

impl CsvRows<'_> {
    fn parse(&self, text: &str) -> Result<Vec<Vec<f64>>, IoError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, first)) if first.trim_end() == self.header => {}
            Some((_, first)) => {
                return Err(parse_err(
                    self.path,
                    format!("line 1: expected header `{}`, found `{first}`", self.header),
                ))
            }
            None => return Err(parse_err(self.path, "empty file")),
        }
        let mut rows = Vec::new();
        for (idx, line) in lines {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != self.n_columns {
                return Err(parse_err(
                    self.path,
                    format!(
                        "line {}: expected {} comma-separated fields, found {}",
                        idx + 1,
                        self.n_columns,
                        fields.len()
                    ),
                ));
            }
            let mut row = Vec::with_capacity(self.n_columns);
            for (col, field) in fields.iter().enumerate() {
                let value: f64 = field.trim().parse().map_err(|_| {
                    parse_err(
                        self.path,
                        format!(
                            "line {}: field `{}`: `{field}` is not a number",
                            idx + 1,
                            self.header.split(',').nth(col).unwrap_or("?")
                        ),
                    )
                })?;
                row.push(value);
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(parse_err(self.path, "no data rows"));
        }
        Ok(rows)
    }
}

pub fn read_echo_train(path: &Path) -> Result<EchoTrain, IoError> {
    let text = fs::read_to_string(path).map_err(|source| IoError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let rows = CsvRows {
        path,
        header: ECHO_HEADER,
        n_columns: 4,
    }
    .parse(&text)?;
    let mut entries = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        if row[0] < 1.0 || row[0].fract() != 0.0 {
            return Err(parse_err(
                path,
                format!("line {}: field `n`: expected a positive integer", i + 2),
            ));
        }
        if let Some(prev) = entries.last() {
            let prev: &EchoPoint = prev;
            if row[1] <= prev.time_us {
                return Err(parse_err(
                    path,
                    format!("line {}: field `echo_time_us`: must be strictly increasing", i + 2),
                ));
            }
        }
        entries.push(EchoPoint {
            n: row[0] as usize,
            time_us: row[1],
            in_phase: row[2],
            quadrature: row[3],
        });
    }
    Ok(EchoTrain {
        entries,
        metadata: metadata_from_sidecar(read_sidecar(path).as_ref()),
    })
}

pub fn read_time_series(path: &Path) -> Result<TimeSeries, IoError> {
    let text = fs::read_to_string(path).map_err(|source| IoError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let rows = CsvRows {
        path,
        header: SERIES_HEADER,
        n_columns: 3,
    }
    .parse(&text)?;
    let mut samples = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        if let Some(prev) = samples.last() {
            let prev: &TimeSample = prev;
            if row[0] <= prev.t_us {
                return Err(parse_err(
                    path,
                    format!("line {}: field `t_us`: must be strictly increasing", i + 2),
                ));
            }
        }
        samples.push(TimeSample {
            t_us: row[0],
            in_phase: row[1],
            quadrature: row[2],
        });
    }
    Ok(TimeSeries {
        samples,
        metadata: metadata_from_sidecar(read_sidecar(path).as_ref()),
    })
}

/// Data loaded from disk, either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum SimData {
    Echoes(EchoTrain),
    Series(TimeSeries),
}

/// Read a data file, deciding its kind from the sidecar when present and
/// from the CSV header otherwise.
pub fn read_any(path: &Path) -> Result<SimData, IoError> {
    let kind = match read_sidecar(path).map(|s| s.kind) {
        Some(kind) => kind,
        None => {
            let text = fs::read_to_string(path).map_err(|source| IoError::Read {
                path: path.to_path_buf(),
                source,
            })?;
            match text.lines().next().map(str::trim_end) {
                Some(ECHO_HEADER) => FileKind::EchoTrain,
                Some(SERIES_HEADER) => FileKind::TimeSeries,
                _ => {
                    return Err(parse_err(
                        path,
                        format!(
                            "line 1: expected header `{ECHO_HEADER}` or `{SERIES_HEADER}`"
                        ),
                    ))
                }
            }
        }
    };
    match kind {
        FileKind::EchoTrain => read_echo_train(path).map(SimData::Echoes),
        FileKind::TimeSeries => read_time_series(path).map(SimData::Series),
    }
}

// ---------------------------------------------------------------------------
// Plot data

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PlotStyle {
    #[default]
    Csv,
    Svg,
}

const PLOT_MAX_POINTS: usize = 2000;

fn plot_points(data: &SimData) -> Vec<(f64, f64, f64)> {
    let all: Vec<(f64, f64, f64)> = match data {
        SimData::Echoes(train) => train
            .entries
            .iter()
            .map(|e| (e.time_us, e.in_phase, e.quadrature))
            .collect(),
        SimData::Series(series) => series
            .samples
            .iter()
            .map(|s| (s.t_us, s.in_phase, s.quadrature))
            .collect(),
    };
    let stride = all.len().div_ceil(PLOT_MAX_POINTS).max(1);
    all.into_iter().step_by(stride).collect()
}

/// Render a decimated two-series view of a data file.
pub fn plot_data(data: &SimData, style: PlotStyle) -> String {
    let points = plot_points(data);
    match style {
        PlotStyle::Csv => {
            let mut out = String::from("t_us,in_phase,quadrature\n");
            for (t, i, q) in &points {
                writeln!(out, "{t},{i},{q}").expect("string write");
            }
            out
        }
        PlotStyle::Svg => plot_svg(&points),
    }
}

fn plot_svg(points: &[(f64, f64, f64)]) -> String {
    const W: f64 = 800.0;
    const H: f64 = 480.0;
    const MARGIN: f64 = 50.0;
    let (t0, t1) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.0), hi.max(p.0))
        });
    let y_max = points
        .iter()
        .flat_map(|p| [p.1.abs(), p.2.abs()])
        .fold(1e-12f64, f64::max);
    let t_span = (t1 - t0).max(1e-12);
    let x = |t: f64| MARGIN + (t - t0) / t_span * (W - 2.0 * MARGIN);
    let y = |v: f64| H / 2.0 - v / y_max * (H / 2.0 - MARGIN);

    let polyline = |color: &str, pick: &dyn Fn(&(f64, f64, f64)) -> f64| {
        let coords: Vec<String> = points
            .iter()
            .map(|p| format!("{:.2},{:.2}", x(p.0), y(pick(p))))
            .collect();
        format!(
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            coords.join(" ")
        )
    };

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <line x1=\"{m}\" y1=\"{mid}\" x2=\"{xe}\" y2=\"{mid}\" stroke=\"#999\"/>\n\
         <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{ye}\" stroke=\"#999\"/>\n",
        m = MARGIN,
        mid = H / 2.0,
        xe = W - MARGIN,
        ye = H - MARGIN,
    );
    svg.push_str(&polyline("#1f77b4", &|p| p.1));
    svg.push_str(&polyline("#d62728", &|p| p.2));
    let _ = write!(
        svg,
        "  <text x=\"{m}\" y=\"{yt}\" font-size=\"12\" fill=\"#333\">t = {t0:.3} us</text>\n\
         <text x=\"{xr}\" y=\"{yt}\" font-size=\"12\" fill=\"#333\" text-anchor=\"end\">t = {t1:.3} us</text>\n\
         <text x=\"{m}\" y=\"{ya}\" font-size=\"12\" fill=\"#1f77b4\">in-phase</text>\n\
         <text x=\"{m}\" y=\"{yb}\" font-size=\"12\" fill=\"#d62728\">quadrature</text>\n</svg>\n",
        m = MARGIN,
        yt = H - MARGIN / 2.0,
        xr = W - MARGIN,
        ya = MARGIN / 2.0,
        yb = MARGIN / 2.0 + 14.0,
    );
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequence::run_echo_sequence;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn example_manifest() -> &'static str {
        r#"{
            "sequence": {"kind": "spam", "tau_us": 10.0, "n_cycles": 3, "phase_error_deg": 10.3},
            "ensemble": {"n_packets": 50, "t2_us": 190.0, "seed": 7},
            "noise_std": 0.0,
            "output": "train.csv"
        }"#
    }

    #[test]
    fn manifest_parses_and_converts_units() {
        let m = parse_manifest(example_manifest(), Path::new("test.json")).unwrap();
        match m.sequence {
            SequenceSpec::Spam { phase_error, .. } => {
                assert!((phase_error - 10.3f64.to_radians()).abs() < 1e-12);
            }
            other => panic!("wrong kind: {other:?}"),
        }
        assert_eq!(m.ensemble.t2, Some(190.0));
        assert_eq!(m.ensemble.seed, 7);
    }

    #[test]
    fn manifest_rejects_unknown_and_conflicting_fields() {
        let bad = r#"{"sequence": {"kind": "cp", "tau_us": 1.0, "n_cycles": 2, "frobnicate": 1},
                      "ensemble": {"n_packets": 10}}"#;
        let err = parse_manifest(bad, Path::new("bad.json")).unwrap_err();
        assert!(err.to_string().contains("frobnicate"), "{err}");

        let both = r#"{"sequence": {"kind": "spam", "tau_us": 1.0, "n_cycles": 2,
                       "phase_error_deg": 1.0, "phase_error_rad": 0.01},
                      "ensemble": {"n_packets": 10}}"#;
        let err = parse_manifest(both, Path::new("both.json")).unwrap_err();
        assert!(err.to_string().contains("phase_error"), "{err}");

        let invalid = r#"{"sequence": {"kind": "cp", "tau_us": -1.0, "n_cycles": 2},
                          "ensemble": {"n_packets": 10}}"#;
        let err = parse_manifest(invalid, Path::new("invalid.json")).unwrap_err();
        assert!(err.to_string().contains("tau_us"), "{err}");
    }

    #[test]
    fn echo_train_file_round_trips_value_identically() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("train.csv");
        let seq = SequenceSpec::Spam {
            tau: 10.0,
            n_cycles: 4,
            phase_error: 0.17,
            detector_skew: 0.0,
        };
        let cfg = EnsembleConfig {
            n_packets: 500,
            sigma: 0.2,
            t2: Some(190.0),
            seed: 3,
            ..EnsembleConfig::default()
        };
        let train = run_echo_sequence(&seq, &cfg).unwrap();
        write_echo_train(&path, &train, 0.0).unwrap();
        let back = read_echo_train(&path).unwrap();
        assert_eq!(train.entries.len(), back.entries.len());
        for (a, b) in train.entries.iter().zip(&back.entries) {
            assert_eq!(a.n, b.n);
            assert_eq!(a.time_us.to_bits(), b.time_us.to_bits());
            assert_eq!(a.in_phase.to_bits(), b.in_phase.to_bits());
            assert_eq!(a.quadrature.to_bits(), b.quadrature.to_bits());
        }
        let meta = back.metadata.expect("sidecar metadata");
        assert_eq!(meta.sequence, seq);
        assert_eq!(meta.ensemble, cfg);

        match read_any(&path).unwrap() {
            SimData::Echoes(t) => assert_eq!(t.entries.len(), 8),
            SimData::Series(_) => panic!("sniffed the wrong kind"),
        }
    }

    #[test]
    fn truncated_and_malformed_files_are_diagnosed() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");

        std::fs::write(&path, "n,echo_time_us,in_phase\n1,2,3\n").unwrap();
        let err = read_echo_train(&path).unwrap_err();
        assert!(err.to_string().contains("expected header"), "{err}");

        std::fs::write(&path, format!("{ECHO_HEADER}\n1,20.0,0.5\n")).unwrap();
        let err = read_echo_train(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");

        std::fs::write(&path, format!("{ECHO_HEADER}\n1,20.0,0.5,xyz\n")).unwrap();
        let err = read_echo_train(&path).unwrap_err();
        assert!(err.to_string().contains("quadrature"), "{err}");

        std::fs::write(&path, format!("{ECHO_HEADER}\n")).unwrap();
        let err = read_echo_train(&path).unwrap_err();
        assert!(err.to_string().contains("no data rows"), "{err}");

        std::fs::write(
            &path,
            format!("{ECHO_HEADER}\n1,20.0,0.5,0.0\n2,20.0,0.4,0.0\n"),
        )
        .unwrap();
        let err = read_echo_train(&path).unwrap_err();
        assert!(err.to_string().contains("strictly increasing"), "{err}");
    }

    #[test]
    fn noise_is_seeded_and_stream_separated() {
        let entries = vec![
            EchoPoint {
                n: 1,
                time_us: 1.0,
                in_phase: 0.5,
                quadrature: 0.0,
            };
            4
        ];
        let train = EchoTrain {
            entries,
            metadata: None,
        };
        let mut a = train.clone();
        let mut b = train.clone();
        add_channel_noise_train(&mut a, 0.01, 9);
        add_channel_noise_train(&mut b, 0.01, 9);
        assert_eq!(a, b);
        let mut c = train.clone();
        add_channel_noise_train(&mut c, 0.01, 10);
        assert_ne!(a, c);
        let mut d = train.clone();
        add_channel_noise_train(&mut d, 0.0, 9);
        assert_eq!(d, train);
    }

    #[test]
    fn plot_outputs_are_deterministic() {
        let series = TimeSeries {
            samples: (0..5000)
                .map(|k| TimeSample {
                    t_us: k as f64 * 0.01,
                    in_phase: (k as f64 * 0.02).sin(),
                    quadrature: (k as f64 * 0.02).cos(),
                })
                .collect(),
            metadata: None,
        };
        let data = SimData::Series(series);
        let csv1 = plot_data(&data, PlotStyle::Csv);
        let csv2 = plot_data(&data, PlotStyle::Csv);
        assert_eq!(csv1, csv2);
        // Decimation caps the row count.
        assert!(csv1.lines().count() <= PLOT_MAX_POINTS + 1);
        let svg = plot_data(&data, PlotStyle::Svg);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<polyline").count(), 2);
    }

    proptest! {
        #[test]
        fn csv_float_format_round_trips(x in -1.0f64..1.0) {
            let s = format_value(x);
            let back: f64 = s.parse().unwrap();
            prop_assert_eq!(back.to_bits(), x.to_bits());
        }
    }
}
