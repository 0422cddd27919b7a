//! `sqz`: noise budgets, squeezing chains, synthetic spectra, line SNR and
//! spectrum fits from the command line.
//!
//! Exit codes: 0 success, 2 input or configuration error, 3 model
//! singularity, 4 analysis failure.

mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sqz_core::fitting::{fit, FitParam, FitProblem, ModelParams};
use sqz_core::gaussian_state::SqueezeLevel;
use sqz_core::loss_chain::{forward_report, inverse_report};
use sqz_core::noise_model::{budget_for, summarize, FrequencyGrid, Squeezing};
use sqz_core::params::{from_json_str, ChainPreset, Config, SHIPPED_CONFIG_JSON};
use sqz_core::spectra::{line_snr, synthesize, welch_asd, Line, LineMeasurement, Spectrum, SynthSettings, Window};
use sqz_core::Error;

use output::{with_suffix, write_atomic, write_json, RunManifest};

#[derive(Parser)]
#[command(name = "sqz", version, about = "Squeezed-light interferometer noise tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Noise budget on a frequency grid, with a JSON summary.
    Budget(BudgetArgs),
    /// Squeezing through the injection or monitor efficiency chain.
    Chain(ChainArgs),
    /// Synthetic time series and its averaged ASD.
    Synth(SynthArgs),
    /// Fit model parameters to a spectrum.
    Fit(FitArgs),
    /// Compare a calibration line between two spectra.
    Snr(SnrArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// Configuration JSON; the shipped configuration when omitted.
    #[arg(long, env = "SQZ_CONFIG")]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct BudgetArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, default_value_t = 1e3)]
    fmin: f64,
    #[arg(long, default_value_t = 1e5)]
    fmax: f64,
    #[arg(long, default_value_t = 2000)]
    points: usize,
    #[arg(long, value_enum, default_value_t = Spacing::Log)]
    spacing: Spacing,
    /// off, on (configured source through the injection chain), or an
    /// effective squeeze factor.
    #[arg(long, default_value = "off")]
    squeezing: SqueezingArg,
    /// Output prefix: writes PREFIX.csv, PREFIX.summary.json and
    /// PREFIX.manifest.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Spacing {
    Log,
    Linear,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Injection,
    Monitor,
}

impl From<PresetArg> for ChainPreset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Injection => ChainPreset::Injection,
            PresetArg::Monitor => ChainPreset::Monitor,
        }
    }
}

#[derive(Args)]
struct ChainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, value_enum)]
    preset: PresetArg,
    /// Measured squeezing, dB. Infers the source level through the chain
    /// instead of propagating the configured source.
    #[arg(long)]
    measured_db: Option<f64>,
    /// Level to report the residual against. Defaults to the configured
    /// source level when inferring.
    #[arg(long)]
    reference_db: Option<f64>,
    /// Report path; printed to standard output when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Sample rate, Hz.
    #[arg(long, default_value_t = 256e3)]
    rate: f64,
    /// Seconds.
    #[arg(long, default_value_t = 4.0)]
    duration: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Calibration line as `f0_hz,amplitude_m`.
    #[arg(long)]
    line: Option<Pair>,
    #[arg(long, default_value = "off")]
    squeezing: SqueezingArg,
    /// Band realized in the time series, `lo_hz,hi_hz`.
    #[arg(long, default_value = "8e3,1e5")]
    band: Pair,
    #[arg(long, default_value_t = 8192)]
    segment: usize,
    #[arg(long, default_value_t = 0.5)]
    overlap: f64,
    #[arg(long, default_value = "hann")]
    window: Window,
    /// Output prefix: writes PREFIX.bin, PREFIX.bin.json,
    /// PREFIX.spectrum.csv and PREFIX.manifest.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// Spectrum CSV (`f_hz,asd_m_per_sqrthz`).
    #[arg(long)]
    spectrum: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
    /// Comma-separated free parameters: P, phi, eta, amp, slope, r_eff.
    #[arg(long, default_value = "P,phi")]
    free: String,
    /// Starting values as `name=value,...`; configured values otherwise.
    #[arg(long)]
    init: Option<String>,
    /// Fit band, `lo_hz,hi_hz`.
    #[arg(long, default_value = "1e4,1e5")]
    band: Pair,
    /// Extra line frequencies to mask, comma-separated Hz.
    #[arg(long)]
    mask: Option<String>,
    /// Squeezing held in the model when r_eff is not free.
    #[arg(long, default_value = "off")]
    squeezing: SqueezingArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SnrArgs {
    /// Reference spectrum, e.g. squeezing off.
    #[arg(long)]
    spectrum_a: PathBuf,
    /// Compared spectrum, e.g. squeezing on. Ratios are b / a.
    #[arg(long)]
    spectrum_b: PathBuf,
    #[arg(long)]
    f0: f64,
    /// Floor band, `lo_hz,hi_hz`.
    #[arg(long)]
    floor_band: Pair,
    /// Report path; printed to standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Two comma-separated numbers.
#[derive(Clone, Copy, Debug)]
struct Pair(f64, f64);

impl FromStr for Pair {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let v = parse_list(s)?;
        match v[..] {
            [a, b] => Ok(Pair(a, b)),
            _ => Err(format!("expected two comma-separated numbers, got {s:?}")),
        }
    }
}

fn parse_list(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}")))
        .collect()
}

#[derive(Clone, Copy, Debug)]
struct SqueezingArg(Squeezing);

impl FromStr for SqueezingArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "off" => Ok(Self(Squeezing::Off)),
            "on" | "chain" => Ok(Self(Squeezing::Chain)),
            _ => s
                .parse::<f64>()
                .ok()
                .filter(|r| *r >= 0.0 && r.is_finite())
                .map(|r| Self(Squeezing::Factor(r)))
                .ok_or_else(|| format!("expected off, on or a squeeze factor >= 0, got {s:?}")),
        }
    }
}

/// Configuration with the bytes it came from.
struct LoadedConfig {
    config: Config,
    label: String,
    sha256: String,
}

impl ConfigArg {
    fn load(&self) -> Result<LoadedConfig> {
        let (label, text) = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|source| Error::Io {
                    path: path.clone(),
                    source,
                })?;
                (path.display().to_string(), text)
            }
            None => ("builtin:shipped".to_string(), SHIPPED_CONFIG_JSON.to_string()),
        };
        Ok(LoadedConfig {
            config: from_json_str(&text)?,
            sha256: output::sha256_hex(text.as_bytes()),
            label,
        })
    }
}

impl LoadedConfig {
    fn manifest(&self) -> RunManifest {
        RunManifest::new(self.label.clone(), self.sha256.clone())
    }
}

/// Errors in the command line itself, reported with exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Three significant figures for human-readable summaries.
fn sig3(x: f64) -> String {
    format!("{x:.2e}")
}

fn read_spectrum(path: &Path, manifest: &mut RunManifest) -> Result<Spectrum> {
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    manifest.input(path, &bytes);
    Ok(Spectrum::read_csv(bytes.as_slice())?)
}

fn cmd_budget(args: &BudgetArgs) -> Result<()> {
    let loaded = args.config.load()?;
    let mut manifest = loaded.manifest();
    let grid = match args.spacing {
        Spacing::Log => FrequencyGrid::log(args.fmin, args.fmax, args.points)?,
        Spacing::Linear => FrequencyGrid::linear(args.fmin, args.fmax, args.points)?,
    };
    let budget = budget_for(&loaded.config, args.squeezing.0, &grid)?;
    let summary = summarize(&loaded.config, &budget)?;

    let csv = with_suffix(&args.out, ".csv");
    write_atomic(&csv, |out| budget.write_csv(out))?;
    manifest.output(&csv);
    let json = with_suffix(&args.out, ".summary.json");
    write_json(&json, &summary)?;
    manifest.output(&json);
    manifest.finish(&with_suffix(&args.out, ".manifest.json"))?;

    println!(
        "shot floor        {} m/rtHz (unsqueezed {})",
        sig3(summary.floor_m_per_rthz),
        sig3(summary.unsqueezed_floor_m_per_rthz)
    );
    println!("r_eff             {}", sig3(summary.r_eff));
    match (summary.crossover_hz, summary.shot_limited_above_hz) {
        (Some(c), Some(s)) => println!("classical = shot  {} Hz; shot >= 90% above {} Hz", sig3(c), sig3(s)),
        _ => println!("classical floor never reaches the shot floor"),
    }
    println!(
        "SNR gain          x{} (rate x{})",
        sig3(summary.snr_gain.snr_ratio),
        sig3(summary.snr_gain.detection_rate_ratio)
    );
    match summary.dark_port_measured_w {
        Some(m) => println!(
            "dark port         model {} W, measured {} W (uncalibrated model)",
            sig3(summary.dark_port_model_w),
            sig3(m)
        ),
        None => println!(
            "dark port         model {} W (uncalibrated model)",
            sig3(summary.dark_port_model_w)
        ),
    }
    Ok(())
}

fn cmd_chain(args: &ChainArgs) -> Result<()> {
    let loaded = args.config.load()?;
    let config = &loaded.config;
    let preset = ChainPreset::from(args.preset);
    let chain = config.chain(preset)?;
    let report = match args.measured_db {
        Some(db) => {
            let reference = args.reference_db.or(Some(config.squeezer.source_sqz_db));
            inverse_report(preset, SqueezeLevel::new(db), &chain, reference)?
        }
        None => forward_report(preset, &config.squeezer, &chain, args.reference_db)?,
    };
    match &args.report {
        Some(path) => {
            let mut manifest = loaded.manifest();
            write_json(path, &report)?;
            manifest.output(path);
            manifest.finish(&with_suffix(path, ".manifest.json"))?;
            for s in &report.stages {
                println!(
                    "{:<24} eta {:<9} cumulative {} dB",
                    s.name,
                    sig3(s.eta),
                    sig3(s.cumulative_db)
                );
            }
            println!(
                "source {} dB -> detected {} dB",
                sig3(report.input_db),
                sig3(report.detected_db)
            );
            if let Some(r) = report.residual_db {
                println!("residual vs reference {} dB", sig3(r));
            }
        }
        None => print_json(&report)?,
    }
    Ok(())
}

/// Pretty JSON on standard output. A closed reader (`| head`) is not an error.
fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let loaded = args.config.load()?;
    let mut manifest = loaded.manifest();
    manifest.seeds.push(args.seed);
    let Pair(lo, hi) = args.band;
    if !(lo > 0.0 && hi > lo) {
        return Err(usage(format!("--band needs 0 < lo < hi, got {lo},{hi}")));
    }
    let nyquist = args.rate / 2.0;
    if hi > nyquist {
        return Err(Error::Aliasing { frequency: hi, nyquist }.into());
    }
    let grid = FrequencyGrid::log(lo, hi, 2000)?;
    let budget = budget_for(&loaded.config, args.squeezing.0, &grid)?;
    let settings = SynthSettings {
        sample_rate: args.rate,
        duration: args.duration,
        seed: args.seed,
        band: Some((lo, hi)),
    };
    let line = args.line.map(|Pair(f0, amplitude)| Line { f0, amplitude });
    let ts = synthesize(&budget, &settings, line)?;
    let spec = welch_asd(&ts, args.segment, args.overlap, args.window)?;

    let bin = with_suffix(&args.out, ".bin");
    write_atomic(&bin, |out| ts.write_binary(out))?;
    manifest.output(&bin);
    let sidecar = with_suffix(&args.out, ".bin.json");
    write_json(&sidecar, &ts.sidecar())?;
    manifest.output(&sidecar);
    let csv = with_suffix(&args.out, ".spectrum.csv");
    write_atomic(&csv, |out| spec.write_csv(out))?;
    manifest.output(&csv);
    manifest.finish(&with_suffix(&args.out, ".manifest.json"))?;

    println!(
        "{} samples at {} Hz, {} averages, resolution {} Hz",
        ts.len(),
        sig3(args.rate),
        spec.n_averages,
        sig3(spec.resolution)
    );
    Ok(())
}

fn parse_free(list: &str) -> Result<Vec<FitParam>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.parse::<FitParam>().map_err(anyhow::Error::from))
        .collect()
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let loaded = args.config.load()?;
    let mut manifest = loaded.manifest();
    let spectrum = read_spectrum(&args.spectrum, &mut manifest)?;
    let free = parse_free(&args.free)?;
    let r_eff = args.squeezing.0.r_eff(&loaded.config)?;
    let model = ModelParams::from_config(&loaded.config, r_eff);
    let mut problem = FitProblem::with_defaults(spectrum, model, &free);
    problem.fit_band = (args.band.0, args.band.1);
    if let Some(mask) = &args.mask {
        problem.mask_lines.extend(parse_list(mask).map_err(usage)?);
    }
    if let Some(init) = &args.init {
        for item in init.split(',').filter(|s| !s.trim().is_empty()) {
            let (name, value) = item
                .split_once('=')
                .ok_or_else(|| usage(format!("--init entries look like name=value, got {item:?}")))?;
            let param: FitParam = name.parse()?;
            let value: f64 = value.trim().parse().map_err(|e| usage(format!("--init {name}: {e}")))?;
            let fp = problem
                .free
                .iter_mut()
                .find(|fp| fp.param == param)
                .ok_or_else(|| usage(format!("--init names {param}, which is not free")))?;
            fp.init = value;
        }
    }
    let result = fit(&problem)?;
    write_json(&args.out, &result)?;
    manifest.output(&args.out);
    manifest.finish(&with_suffix(&args.out, ".manifest.json"))?;

    for e in &result.estimates {
        let sigma = e.uncertainty.map(|s| format!(" +/- {}", sig3(s))).unwrap_or_default();
        println!("{:<10} {}{} {}", e.name, sig3(e.value), sigma, e.unit);
    }
    println!(
        "residual rms {} (log10), {} evaluations, converged: {}",
        sig3(result.residual_rms),
        result.n_evals,
        result.converged
    );
    for note in &result.notes {
        println!("note: {note}");
    }
    Ok(())
}

#[derive(Serialize)]
struct SnrReport {
    f0_hz: f64,
    floor_band_hz: (f64, f64),
    a: LineMeasurement,
    b: LineMeasurement,
    floor_ratio: f64,
    amplitude_ratio: f64,
    snr_ratio: f64,
    implied_r_eff: f64,
    rate_gain: f64,
}

fn cmd_snr(args: &SnrArgs) -> Result<()> {
    let mut manifest = RunManifest::new("none".into(), String::new());
    let a_spec = read_spectrum(&args.spectrum_a, &mut manifest)?;
    let b_spec = read_spectrum(&args.spectrum_b, &mut manifest)?;
    let band = (args.floor_band.0, args.floor_band.1);
    let a = line_snr(&a_spec, args.f0, band)?;
    let b = line_snr(&b_spec, args.f0, band)?;
    let snr_ratio = b.snr / a.snr;
    let report = SnrReport {
        f0_hz: args.f0,
        floor_band_hz: band,
        floor_ratio: b.floor / a.floor,
        amplitude_ratio: b.amplitude / a.amplitude,
        snr_ratio,
        implied_r_eff: snr_ratio.ln(),
        rate_gain: snr_ratio.powi(3),
        a,
        b,
    };
    match &args.out {
        Some(path) => {
            write_json(path, &report)?;
            manifest.output(path);
            manifest.finish(&with_suffix(path, ".manifest.json"))?;
            println!("floor ratio     {}", sig3(report.floor_ratio));
            println!("amplitude ratio {}", sig3(report.amplitude_ratio));
            println!(
                "SNR ratio       {} (implied r_eff {}, rate x{})",
                sig3(snr_ratio),
                sig3(report.implied_r_eff),
                sig3(report.rate_gain)
            );
        }
        None => print_json(&report)?,
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<Error>() {
        return match e {
            Error::Singularity { .. } => 3,
            Error::EmptyBand { .. } | Error::LineNotFound { .. } | Error::DegenerateData(_) => 4,
            _ => 2,
        };
    }
    2
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Budget(a) => cmd_budget(a),
        Command::Chain(a) => cmd_chain(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Snr(a) => cmd_snr(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
