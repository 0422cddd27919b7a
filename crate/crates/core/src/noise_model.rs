//! Displacement noise model of the signal-recycled Michelson.
//!
//! All amplitude spectral densities are one-sided, in m/√Hz. Squeezing only
//! enters the shot-noise component; radiation pressure is kept in the budget
//! as a model-only curve.

use std::f64::consts::PI;
use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{domain, Error, Result};
use crate::loss_chain;
use crate::params::{ChainPreset, ClassicalNoiseConfig, Config, DetectorConfig, PhysicalConstants};

const SINGULAR_DENOMINATOR: f64 = 1e-12;

/// Flag attached to budgets: radiation pressure is never observed, only modeled.
pub const FLAG_RADIATION_PRESSURE_MODEL_ONLY: &str = "radiation_pressure: model-only";
/// Flag attached to budgets computed away from the fitted resonance.
pub const FLAG_DETUNED_EXTRAPOLATION: &str = "detuning: nonzero, extrapolated beyond the fitted operating point";

/// Shot-noise ASD of a simple Michelson on a dark fringe.
pub fn shot_noise_asd(power: f64, wavelength: f64) -> Result<f64> {
    if !(power > 0.0 && wavelength > 0.0) {
        return Err(domain(format!(
            "shot noise needs positive power and wavelength, got P = {power}, lambda = {wavelength}"
        )));
    }
    let k = PhysicalConstants::CODATA;
    Ok((k.hbar * k.c * wavelength / (PI * power)).sqrt())
}

/// Quantum radiation-pressure ASD of a simple Michelson.
pub fn radiation_pressure_asd(power: f64, wavelength: f64, mass: f64, f: f64) -> Result<f64> {
    if !(power > 0.0 && wavelength > 0.0 && mass > 0.0 && f > 0.0) {
        return Err(domain(format!(
            "radiation pressure needs positive inputs, got P = {power}, lambda = {wavelength}, m = {mass}, f = {f}"
        )));
    }
    let k = PhysicalConstants::CODATA;
    let f2 = f * f;
    Ok((k.hbar * power / (PI.powi(3) * k.c * wavelength)).sqrt() / (mass * f2))
}

/// `1 - r_s r_m e^{-2iφ}`, the signal-recycling cavity round-trip denominator.
pub(crate) fn cavity_denominator(r_s: f64, r_m: f64, phi: f64) -> Result<Complex64> {
    let d = Complex64::new(1.0, 0.0) - r_s * r_m * Complex64::from_polar(1.0, -2.0 * phi);
    if d.norm() < SINGULAR_DENOMINATOR {
        return Err(Error::Singularity { denominator: d.norm() });
    }
    Ok(d)
}

/// Power build-up of the signal sidebands in the signal-recycling cavity,
/// `|t_s / (1 - r_s r_m e^{-2iφ})|²` with a lossless mirror.
pub fn recycling_gain(r_s: f64, r_m: f64, phi: f64) -> Result<f64> {
    if !((0.0..1.0).contains(&r_s) && (0.0..=1.0).contains(&r_m)) {
        return Err(domain(format!(
            "recycling gain needs 0 <= r_s < 1 and 0 <= r_m <= 1, got r_s = {r_s}, r_m = {r_m}"
        )));
    }
    let d = cavity_denominator(r_s, r_m, phi)?;
    Ok((1.0 - r_s * r_s) / d.norm_sqr())
}

/// Shot-noise-limited displacement sensitivity of the signal-recycled
/// Michelson with effective squeeze factor `r_eff` at the readout.
pub fn srmi_shot_asd(detector: &DetectorConfig, r_eff: f64) -> Result<f64> {
    if !(r_eff >= 0.0) {
        return Err(domain(format!("effective squeeze factor {r_eff} must be >= 0")));
    }
    let gain = recycling_gain(detector.r_s, detector.r_m, detector.detuning)?;
    let bare = shot_noise_asd(detector.eta_det * detector.power_bs, detector.wavelength)?;
    Ok(bare / gain.sqrt() * (-r_eff).exp())
}

/// Power-law part of the classical floor, `amp_1hz · f^-slope`.
pub fn power_law_asd(cfg: &ClassicalNoiseConfig, f: f64) -> f64 {
    if cfg.amp_1hz == 0.0 {
        return 0.0;
    }
    cfg.amp_1hz * f.powf(-cfg.slope)
}

/// Quadrature sum of the registered Lorentzian lines at `f`.
pub fn lines_asd(cfg: &ClassicalNoiseConfig, f: f64) -> f64 {
    cfg.lines
        .iter()
        .map(|l| {
            let x = (f - l.frequency) / l.width;
            l.amplitude * l.amplitude / (1.0 + x * x)
        })
        .sum::<f64>()
        .sqrt()
}

/// Classical floor with its narrow lines added in quadrature.
pub fn classical_floor_asd(cfg: &ClassicalNoiseConfig, f: f64) -> f64 {
    power_law_asd(cfg, f).hypot(lines_asd(cfg, f))
}

/// Frequency where the power-law floor equals `level`.
pub fn power_law_crossing(cfg: &ClassicalNoiseConfig, level: f64) -> Option<f64> {
    (cfg.amp_1hz > 0.0 && level > 0.0).then(|| (cfg.amp_1hz / level).powf(1.0 / cfg.slope))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyGrid(Vec<f64>);

impl FrequencyGrid {
    pub fn new(frequencies: Vec<f64>) -> Result<Self> {
        if frequencies.is_empty() {
            return Err(domain("frequency grid is empty"));
        }
        if frequencies.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
            return Err(domain("grid frequencies must be positive and finite"));
        }
        if frequencies.windows(2).any(|w| w[1] <= w[0]) {
            return Err(domain("grid frequencies must be strictly increasing"));
        }
        Ok(Self(frequencies))
    }

    /// `points` logarithmically spaced frequencies from `f_min` to `f_max`.
    pub fn log(f_min: f64, f_max: f64, points: usize) -> Result<Self> {
        Self::spaced(f_min, f_max, points, true)
    }

    pub fn linear(f_min: f64, f_max: f64, points: usize) -> Result<Self> {
        Self::spaced(f_min, f_max, points, false)
    }

    fn spaced(f_min: f64, f_max: f64, points: usize, log: bool) -> Result<Self> {
        if points == 0 {
            return Err(domain("frequency grid needs at least one point"));
        }
        if points == 1 {
            return Self::new(vec![f_min]);
        }
        if !(f_min > 0.0 && f_max > f_min) {
            return Err(domain(format!("need 0 < f_min < f_max, got {f_min}, {f_max}")));
        }
        let n = (points - 1) as f64;
        let grid = (0..points)
            .map(|i| {
                let x = i as f64 / n;
                if i == points - 1 {
                    f_max
                } else if log {
                    f_min * (f_max / f_min).powf(x)
                } else {
                    f_min + (f_max - f_min) * x
                }
            })
            .collect();
        Self::new(grid)
    }

    /// 1 kHz to 100 kHz, 2000 logarithmic points.
    pub fn default_log() -> Self {
        Self::log(1e3, 1e5, 2000).expect("default grid is valid")
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// How squeezing is applied to a budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Squeezing {
    Off,
    /// Propagate the configured source through the injection chain.
    Chain,
    /// Use an explicit effective squeeze factor at the readout.
    Factor(f64),
}

impl Squeezing {
    /// Effective squeeze factor at the readout.
    pub fn r_eff(self, config: &Config) -> Result<f64> {
        match self {
            Squeezing::Off => Ok(0.0),
            Squeezing::Factor(r) if r >= 0.0 => Ok(r),
            Squeezing::Factor(r) => Err(domain(format!("squeeze factor {r} must be >= 0"))),
            Squeezing::Chain => {
                let chain = config.chain(ChainPreset::Injection)?;
                let p = loss_chain::propagate(&config.squeezer, &chain, config.squeezer.phase_jitter_rms)?;
                Ok(p.r_eff)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseBudget {
    pub frequencies: Vec<f64>,
    pub shot: Vec<f64>,
    pub radiation_pressure: Vec<f64>,
    /// Power-law classical floor.
    pub classical: Vec<f64>,
    /// Narrow classical lines.
    pub lines: Vec<f64>,
    pub total: Vec<f64>,
    pub r_eff: f64,
    pub flags: Vec<String>,
}

impl NoiseBudget {
    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    /// Classical floor and lines combined, as exported.
    pub fn classical_with_lines(&self) -> impl Iterator<Item = f64> + '_ {
        self.classical.iter().zip(&self.lines).map(|(c, l)| c.hypot(*l))
    }

    /// Writes `f_hz,shot,rad_pressure,classical,total` with 17 significant
    /// digits per value.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "f_hz,shot,rad_pressure,classical,total")?;
        for (i, classical) in self.classical_with_lines().enumerate() {
            writeln!(
                out,
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                self.frequencies[i], self.shot[i], self.radiation_pressure[i], classical, self.total[i]
            )?;
        }
        Ok(())
    }
}

/// Evaluates every component on the grid; `total` is their quadrature sum.
pub fn assemble_budget(
    detector: &DetectorConfig,
    classical: &ClassicalNoiseConfig,
    r_eff: f64,
    grid: &FrequencyGrid,
) -> Result<NoiseBudget> {
    let shot = srmi_shot_asd(detector, r_eff)?;
    let points = grid
        .as_slice()
        .par_iter()
        .map(|&f| {
            let rad = radiation_pressure_asd(detector.power_bs, detector.wavelength, detector.mirror_mass, f)?;
            let floor = power_law_asd(classical, f);
            let lines = lines_asd(classical, f);
            let total = (shot * shot + rad * rad + floor * floor + lines * lines).sqrt();
            Ok((rad, floor, lines, total))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut flags = vec![FLAG_RADIATION_PRESSURE_MODEL_ONLY.to_string()];
    if detector.detuning != 0.0 {
        flags.push(FLAG_DETUNED_EXTRAPOLATION.to_string());
    }
    let n = points.len();
    let mut budget = NoiseBudget {
        frequencies: grid.as_slice().to_vec(),
        shot: vec![shot; n],
        radiation_pressure: Vec::with_capacity(n),
        classical: Vec::with_capacity(n),
        lines: Vec::with_capacity(n),
        total: Vec::with_capacity(n),
        r_eff,
        flags,
    };
    for (rad, floor, lines, total) in points {
        budget.radiation_pressure.push(rad);
        budget.classical.push(floor);
        budget.lines.push(lines);
        budget.total.push(total);
    }
    Ok(budget)
}

/// Budget for a full configuration with the requested squeezing.
pub fn budget_for(config: &Config, squeezing: Squeezing, grid: &FrequencyGrid) -> Result<NoiseBudget> {
    let r_eff = squeezing.r_eff(config)?;
    let mut budget = assemble_budget(&config.detector, &config.classical, r_eff, grid)?;
    if squeezing == Squeezing::Chain && config.squeezer.antisqz_from_purity {
        budget.flags.push(loss_chain::FLAG_ANTISQZ_FROM_PURITY.to_string());
    }
    Ok(budget)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SnrGain {
    pub snr_ratio: f64,
    pub detection_rate_ratio: f64,
}

/// SNR improvement from squeezing, and the matching rate gain for sources
/// distributed uniformly in volume.
pub fn snr_gain(r_eff: f64) -> Result<SnrGain> {
    if !(r_eff >= 0.0) {
        return Err(domain(format!("effective squeeze factor {r_eff} must be >= 0")));
    }
    let snr_ratio = r_eff.exp();
    Ok(SnrGain {
        snr_ratio,
        detection_rate_ratio: snr_ratio.powi(3),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetSummary {
    /// Shot-noise floor, m/√Hz.
    pub floor_m_per_rthz: f64,
    /// Unsqueezed shot-noise floor, m/√Hz.
    pub unsqueezed_floor_m_per_rthz: f64,
    /// Frequency where the power-law classical floor equals the shot floor.
    pub crossover_hz: Option<f64>,
    /// Frequency above which shot noise carries at least 90% of the power.
    pub shot_limited_above_hz: Option<f64>,
    pub r_eff: f64,
    pub snr_gain: SnrGain,
    /// Dark-port power from the static offset, W. A model, not a calibration.
    pub dark_port_model_w: f64,
    /// Measured output power from the configuration, W.
    pub dark_port_measured_w: Option<f64>,
    pub flags: Vec<String>,
}

pub fn summarize(config: &Config, budget: &NoiseBudget) -> Result<BudgetSummary> {
    let unsqueezed = srmi_shot_asd(&config.detector, 0.0)?;
    let floor = budget
        .shot
        .first()
        .copied()
        .unwrap_or(unsqueezed * (-budget.r_eff).exp());
    let d = &config.detector;
    let dark_port = crate::loss_chain::dark_port_power(
        d.power_bs,
        d.michelson_offset,
        d.offset_convention,
        d.r_s,
        d.r_m,
        d.detuning,
    )?;
    let mut flags = budget.flags.clone();
    if !flags.iter().any(|f| f == crate::loss_chain::FLAG_DARK_PORT_MODEL) {
        flags.push(crate::loss_chain::FLAG_DARK_PORT_MODEL.to_string());
    }
    Ok(BudgetSummary {
        floor_m_per_rthz: floor,
        unsqueezed_floor_m_per_rthz: unsqueezed,
        crossover_hz: power_law_crossing(&config.classical, floor),
        // 90% shot power: classical power is a ninth of shot power.
        shot_limited_above_hz: power_law_crossing(&config.classical, floor / 3.0),
        r_eff: budget.r_eff,
        snr_gain: snr_gain(budget.r_eff)?,
        dark_port_model_w: dark_port,
        dark_port_measured_w: d.measured_output_power,
        flags,
    })
}
