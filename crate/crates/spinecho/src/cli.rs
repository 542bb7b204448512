//! The `spinecho` command-line interface.
//!
//! Exit codes: 0 success, 2 usage or parse errors, 3 fit failures.
//! Angles on the command line accept explicit `deg`/`rad` suffixes
//! (`--delta 10.3deg`); bare values are interpreted per `--units`
//! (degrees by default). Times are microseconds.

use crate::fit::{self, EchoSelection, FitResult, FitStatus};
use crate::io::{self, IoError, PlotStyle, SimData};
use crate::models;
use crate::sequence::{run_sequence, SimOutput};
use clap::{Parser, Subcommand, ValueEnum};
use std::fmt::Write as _;
use std::path::PathBuf;

/// Environment variable consulted for the default worker-thread count.
pub const THREADS_ENV: &str = "SPINECHO_THREADS";

#[derive(Parser)]
#[command(
    name = "spinecho",
    version,
    about = "Pulsed magnetic resonance echo-train simulation, decay models, and error fitting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Override the manifest RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread count (default: SPINECHO_THREADS or all cores).
    /// Changes speed only, never numerical output.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Unit for bare angle values and human-readable angle output.
    #[arg(long, global = true, value_enum, default_value_t = UnitMode::Deg)]
    units: UnitMode,
    /// Output path (simulate: data file; fit: result JSON; plotdata: artifact).
    #[arg(long, global = true)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum UnitMode {
    Deg,
    Rad,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON manifest and write a data file.
    Simulate {
        /// Manifest path; see the project README for the schema.
        manifest: PathBuf,
    },
    /// Evaluate closed-form models over a parameter grid (CSV on stdout).
    Model {
        #[command(subcommand)]
        which: ModelCommand,
    },
    /// Fit a data file and print parameter estimates with uncertainties.
    Fit {
        data: PathBuf,
        /// Model to fit: cpmg | cp | spam | fid.
        #[arg(long, value_enum)]
        model: FitModel,
        /// Pin a parameter, e.g. --fix t2=190 (microseconds).
        #[arg(long = "fix", value_name = "NAME=VALUE")]
        fixed: Vec<String>,
        /// Which echoes a SPAM fit consumes.
        #[arg(long, value_enum, default_value_t = EchoChoice::CycleEnd)]
        echoes: EchoChoice,
        /// Print the result as JSON instead of the human summary.
        #[arg(long)]
        json: bool,
    },
    /// Emit plot-ready CSV or a minimal SVG from a data file.
    Plotdata {
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Style::Csv)]
        style: Style,
    },
}

#[derive(Subcommand)]
enum ModelCommand {
    /// Carr-Purcell echo amplitudes under Gaussian flip-angle errors.
    Cp {
        /// Largest echo number.
        #[arg(long, default_value_t = 12)]
        n: usize,
        /// Flip-error spread per pi pulse (angle).
        #[arg(long, default_value = "0")]
        sigma: String,
        /// Mean flip error per pi pulse (angle).
        #[arg(long, default_value = "0")]
        delta0: String,
        /// Echo spacing tau (us); adds a relaxation-decay column with --t2.
        #[arg(long)]
        tau: Option<f64>,
        /// Transverse relaxation time (us).
        #[arg(long)]
        t2: Option<f64>,
        /// Add the Gaussian approximation and its gap as columns.
        #[arg(long)]
        compare_approx: bool,
    },
    /// Exponential CPMG echo decay.
    Cpmg {
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long)]
        tau: f64,
        #[arg(long)]
        t2: f64,
    },
    /// Phase-error-amplification echo pairs.
    Spam {
        #[arg(long, default_value_t = 12)]
        cycles: usize,
        #[arg(long)]
        tau: f64,
        /// Rotation-axis error of the nominal-y pulses (angle).
        #[arg(long)]
        delta: String,
        /// Transverse relaxation time (us); omit for no decay.
        #[arg(long)]
        t2: Option<f64>,
    },
    /// Damped nutation signal under a Gaussian drive-amplitude spread.
    Rabi {
        /// Nutation frequency (rad/us).
        #[arg(long)]
        omega: f64,
        #[arg(long)]
        sigma_scale: f64,
        #[arg(long)]
        t_max: f64,
        #[arg(long)]
        dt: f64,
    },
    /// Quadrature-detector free-induction-decay channels.
    Fid {
        /// Detuning (rad/us).
        #[arg(long)]
        detuning: f64,
        /// Quadrature-channel skew from orthogonality (angle).
        #[arg(long, default_value = "0")]
        skew: String,
        /// Apparent dephasing time (us).
        #[arg(long)]
        t2star: f64,
        /// Excitation phase (angle).
        #[arg(long, default_value = "0")]
        phase0: String,
        #[arg(long)]
        t_max: f64,
        #[arg(long)]
        dt: f64,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FitModel {
    Cpmg,
    Cp,
    Spam,
    Fid,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EchoChoice {
    CycleEnd,
    All,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Style {
    Csv,
    Svg,
}

/// Errors mapped onto process exit codes.
enum CliError {
    /// Exit 2: bad usage, bad manifest, bad data file.
    Usage(String),
    /// Exit 3: the fit did not converge.
    FitFailure(String),
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<crate::sequence::SequenceError> for CliError {
    fn from(e: crate::sequence::SequenceError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<crate::fit::FitError> for CliError {
    fn from(e: crate::fit::FitError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<models::ModelError> for CliError {
    fn from(e: models::ModelError) -> Self {
        CliError::Usage(e.to_string())
    }
}

/// Run the CLI with the given arguments; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    init_threads(cli.threads);
    match dispatch(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::FitFailure(msg)) => {
            eprintln!("error: {msg}");
            3
        }
    }
}

fn init_threads(requested: Option<usize>) {
    let n = requested.or_else(|| {
        std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = n {
        if n > 0 {
            // Ignore failure: the global pool can only be built once.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
        }
    }
}

fn parse_angle(text: &str, units: UnitMode, what: &str) -> Result<f64, CliError> {
    let text = text.trim();
    let (number, explicit) = if let Some(stripped) = text.strip_suffix("deg") {
        (stripped, Some(UnitMode::Deg))
    } else if let Some(stripped) = text.strip_suffix("rad") {
        (stripped, Some(UnitMode::Rad))
    } else {
        (text, None)
    };
    let value: f64 = number
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("{what}: `{text}` is not an angle")))?;
    Ok(match explicit.unwrap_or(units) {
        UnitMode::Deg => value.to_radians(),
        UnitMode::Rad => value,
    })
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { ref manifest } => cmd_simulate(&cli, manifest.clone()),
        Command::Model { ref which } => cmd_model(&cli, which),
        Command::Fit {
            ref data,
            model,
            ref fixed,
            echoes,
            json,
        } => cmd_fit(&cli, data.clone(), model, fixed, echoes, json),
        Command::Plotdata { ref data, style } => cmd_plotdata(&cli, data.clone(), style),
    }
}

fn cmd_simulate(cli: &Cli, manifest_path: PathBuf) -> Result<(), CliError> {
    let mut manifest = io::load_manifest(&manifest_path)?;
    if let Some(seed) = cli.seed {
        manifest.ensemble.seed = seed;
    }
    let out_path = cli
        .output
        .clone()
        .or(manifest.output.clone())
        .ok_or_else(|| {
            CliError::Usage("no output path: set `output` in the manifest or pass --output".into())
        })?;

    match run_sequence(&manifest.sequence, &manifest.ensemble)? {
        SimOutput::Echoes(mut train) => {
            io::add_channel_noise_train(&mut train, manifest.noise_std, manifest.ensemble.seed);
            io::write_echo_train(&out_path, &train, manifest.noise_std)?;
            println!(
                "wrote {} echoes to {} (sidecar {})",
                train.entries.len(),
                out_path.display(),
                io::sidecar_path(&out_path).display()
            );
        }
        SimOutput::Series(mut series) => {
            io::add_channel_noise_series(&mut series, manifest.noise_std, manifest.ensemble.seed);
            io::write_time_series(&out_path, &series, manifest.noise_std)?;
            println!(
                "wrote {} samples to {} (sidecar {})",
                series.samples.len(),
                out_path.display(),
                io::sidecar_path(&out_path).display()
            );
        }
    }
    Ok(())
}

fn cmd_model(cli: &Cli, which: &ModelCommand) -> Result<(), CliError> {
    let mut warnings: Vec<String> = Vec::new();
    match which {
        ModelCommand::Cp {
            n,
            sigma,
            delta0,
            tau,
            t2,
            compare_approx,
        } => {
            let sigma = parse_angle(sigma, cli.units, "--sigma")?;
            let delta0 = parse_angle(delta0, cli.units, "--delta0")?;
            let decay = match (tau, t2) {
                (Some(tau), Some(t2)) => Some((*tau, *t2)),
                (None, None) => None,
                _ => {
                    return Err(CliError::Usage(
                        "--tau and --t2 must be given together".into(),
                    ))
                }
            };
            let mut header = String::from("n,amplitude");
            if *compare_approx {
                header.push_str(",approx,abs_gap");
            }
            if decay.is_some() {
                header.push_str(",t_us,decay");
            }
            println!("{header}");
            for echo in 1..=*n {
                let amp = models::cp_echo_amplitude(echo, delta0, sigma)?;
                if let Some(w) = &amp.warning {
                    let text = w.to_string();
                    if !warnings.contains(&text) {
                        warnings.push(text);
                    }
                }
                let mut line = format!("{echo},{}", amp.value);
                if *compare_approx {
                    let approx = models::cp_echo_amplitude_approx(echo, sigma)?;
                    let _ = write!(line, ",{approx},{}", (amp.value - approx).abs());
                }
                if let Some((tau, t2)) = decay {
                    let t = 2.0 * echo as f64 * tau;
                    let _ = write!(line, ",{t},{}", amp.value * (-t / t2).exp());
                }
                println!("{line}");
            }
        }
        ModelCommand::Cpmg { n, tau, t2 } => {
            println!("n,t_us,amplitude");
            for echo in 1..=*n {
                let t = 2.0 * echo as f64 * tau;
                println!("{echo},{t},{}", models::cpmg_decay_model(echo, *tau, *t2));
            }
        }
        ModelCommand::Spam {
            cycles,
            tau,
            delta,
            t2,
        } => {
            let delta = parse_angle(delta, cli.units, "--delta")?;
            let t2 = t2.unwrap_or(f64::INFINITY);
            println!("m,t_us,in_phase,quadrature,phase_rad");
            for m in 1..=*cycles {
                let (i, q) = models::spam_echo_model(m, *tau, delta, t2);
                let t = 4.0 * m as f64 * tau;
                println!("{m},{t},{i},{q},{}", 2.0 * m as f64 * delta);
            }
        }
        ModelCommand::Rabi {
            omega,
            sigma_scale,
            t_max,
            dt,
        } => {
            if *dt <= 0.0 || *t_max < *dt {
                return Err(CliError::Usage("need 0 < --dt <= --t-max".into()));
            }
            println!("t_us,signal,envelope");
            let steps = (t_max / dt + 1e-9).floor() as usize;
            for k in 0..=steps {
                let t = k as f64 * dt;
                let signal = models::rabi_envelope_model(t, *omega, *sigma_scale);
                let envelope = (-0.5 * (sigma_scale * omega * t).powi(2)).exp();
                println!("{t},{signal},{envelope}");
            }
        }
        ModelCommand::Fid {
            detuning,
            skew,
            t2star,
            phase0,
            t_max,
            dt,
        } => {
            if *dt <= 0.0 || *t_max < *dt {
                return Err(CliError::Usage("need 0 < --dt <= --t-max".into()));
            }
            let skew = parse_angle(skew, cli.units, "--skew")?;
            let phase0 = parse_angle(phase0, cli.units, "--phase0")?;
            println!("t_us,in_phase,quadrature");
            let steps = (t_max / dt + 1e-9).floor() as usize;
            for k in 0..=steps {
                let t = k as f64 * dt;
                let (i, q) = models::fid_quadrature_model(t, *detuning, skew, *t2star, phase0);
                println!("{t},{i},{q}");
            }
        }
    }
    for w in warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn parse_fixed(fixed: &[String]) -> Result<Vec<(String, f64)>, CliError> {
    fixed
        .iter()
        .map(|raw| {
            let (name, value) = raw.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("--fix `{raw}`: expected NAME=VALUE"))
            })?;
            let value = value.trim().trim_end_matches("us").trim();
            let value: f64 = value.parse().map_err(|_| {
                CliError::Usage(format!("--fix `{raw}`: `{value}` is not a number"))
            })?;
            Ok((name.trim().to_string(), value))
        })
        .collect()
}

fn require_t2(fixed: &[(String, f64)], model: &str) -> Result<f64, CliError> {
    let mut t2 = None;
    for (name, value) in fixed {
        match name.as_str() {
            "t2" | "t2_us" => t2 = Some(*value),
            other => {
                return Err(CliError::Usage(format!(
                    "--fix `{other}`: the {model} fit only accepts --fix t2=<us>"
                )))
            }
        }
    }
    t2.ok_or_else(|| {
        CliError::Usage(format!(
            "the {model} fit needs the relaxation time pinned: pass --fix t2=<us>"
        ))
    })
}

fn forbid_fixed(fixed: &[(String, f64)], model: &str) -> Result<(), CliError> {
    if let Some((name, _)) = fixed.first() {
        return Err(CliError::Usage(format!(
            "--fix `{name}`: the {model} fit has no pinnable parameters"
        )));
    }
    Ok(())
}

fn cmd_fit(
    cli: &Cli,
    data_path: PathBuf,
    model: FitModel,
    fixed: &[String],
    echoes: EchoChoice,
    json: bool,
) -> Result<(), CliError> {
    let fixed = parse_fixed(fixed)?;
    let data = io::read_any(&data_path)?;

    let need_train = |data: &SimData| match data {
        SimData::Echoes(train) => Ok(train.clone()),
        SimData::Series(_) => Err(CliError::Usage(
            "this fit needs an echo-train file, got a time series".into(),
        )),
    };

    let result = match model {
        FitModel::Cpmg => {
            forbid_fixed(&fixed, "cpmg")?;
            fit::fit_cpmg_t2(&need_train(&data)?)?
        }
        FitModel::Cp => {
            let t2 = require_t2(&fixed, "cp")?;
            let train = need_train(&data)?;
            let result = fit::fit_cp_errors(&train, t2)?;
            surface_cp_warnings(&train, &result);
            result
        }
        FitModel::Spam => {
            let t2 = require_t2(&fixed, "spam")?;
            let selection = match echoes {
                EchoChoice::CycleEnd => EchoSelection::CycleEnd,
                EchoChoice::All => EchoSelection::All,
            };
            fit::fit_spam_phase(&need_train(&data)?, t2, selection)?
        }
        FitModel::Fid => {
            forbid_fixed(&fixed, "fid")?;
            match &data {
                SimData::Series(series) => fit::fit_detector_skew(series)?,
                SimData::Echoes(_) => {
                    return Err(CliError::Usage(
                        "the fid fit needs a time-series file, got an echo train".into(),
                    ))
                }
            }
        }
    };

    let rendered_json = serde_json::to_string_pretty(&result).expect("fit result serializes");
    if json {
        println!("{rendered_json}");
    } else {
        print!("{}", human_summary(&result, cli.units));
    }
    if let Some(path) = &cli.output {
        io::write_text(path, &(rendered_json + "\n"))?;
    }

    match result.status {
        FitStatus::Converged => Ok(()),
        FitStatus::MaxIter => Err(CliError::FitFailure(
            "fit stopped at the iteration limit without converging".into(),
        )),
        FitStatus::Singular => Err(CliError::FitFailure(
            "fit is singular: at least one parameter is unidentifiable from the data".into(),
        )),
    }
}

/// Print stability notes for a converged Carr-Purcell fit, evaluated at the
/// fitted parameters over the echo numbers present in the data.
fn surface_cp_warnings(train: &crate::sequence::EchoTrain, result: &FitResult) {
    let (Some(delta0), Some(sigma)) = (result.value("delta0_rad"), result.value("sigma_rad"))
    else {
        return;
    };
    let mut seen = Vec::new();
    for e in &train.entries {
        if let Ok(amp) = models::cp_echo_amplitude(e.n, delta0, sigma) {
            if let Some(w) = amp.warning {
                let text = w.to_string();
                if !seen.contains(&text) {
                    seen.push(text);
                }
            }
        }
    }
    for w in seen {
        eprintln!("warning: {w}");
    }
}

fn human_summary(result: &FitResult, units: UnitMode) -> String {
    let status = match result.status {
        FitStatus::Converged => "converged",
        FitStatus::MaxIter => "max-iterations",
        FitStatus::Singular => "singular",
    };
    let mut out = format!(
        "status: {status} ({} iterations, residual norm {:.3e})\n",
        result.n_iterations, result.residual_norm
    );
    let mut shown: Vec<String> = Vec::new();
    for p in result.params.iter().chain(result.derived.iter()) {
        let (name, value, sigma, unit) = display_value(&p.name, p.value, p.sigma, units);
        if shown.contains(&name) {
            continue;
        }
        let _ = writeln!(
            out,
            "  {:<22} = {:>14.8} +- {:<12.6} {}",
            name, value, sigma, unit
        );
        shown.push(name);
    }
    out
}

/// Strip the unit suffix from a parameter name and convert radians per the
/// unit mode; the unit moves to its own column.
fn display_value(
    name: &str,
    value: f64,
    sigma: f64,
    units: UnitMode,
) -> (String, f64, f64, &'static str) {
    if let Some(bare) = name.strip_suffix("_rad_per_us") {
        return (bare.into(), value, sigma, "rad/us");
    }
    if let Some(bare) = name.strip_suffix("_rad") {
        return match units {
            UnitMode::Deg => (bare.into(), value.to_degrees(), sigma.to_degrees(), "deg"),
            UnitMode::Rad => (bare.into(), value, sigma, "rad"),
        };
    }
    if let Some(bare) = name.strip_suffix("_us") {
        return (bare.into(), value, sigma, "us");
    }
    if let Some(bare) = name.strip_suffix("_deg") {
        return (bare.into(), value, sigma, "deg");
    }
    (name.into(), value, sigma, "")
}

fn cmd_plotdata(cli: &Cli, data_path: PathBuf, style: Style) -> Result<(), CliError> {
    let data = io::read_any(&data_path)?;
    let style = match style {
        Style::Csv => PlotStyle::Csv,
        Style::Svg => PlotStyle::Svg,
    };
    let rendered = io::plot_data(&data, style);
    match &cli.output {
        Some(path) => io::write_text(path, &rendered)?,
        None => print!("{rendered}"),
    }
    Ok(())
}
