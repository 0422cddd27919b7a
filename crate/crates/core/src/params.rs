//! Physical constants, the validated configuration model, and config file I/O.
//!
//! Configuration files are UTF-8 JSON with unit suffixes in key names.
//! Unknown keys are rejected. A minimal file looks like
//!
//! ```json
//! {
//!   "detector": {
//!     "wavelength_m": 1.064e-6,
//!     "power_bs_w": 0.057,
//!     "R_s_power": 0.925,
//!     "R_m_power": 0.995,
//!     "eta_det": 0.825,
//!     "mirror_mass_kg": 0.25
//!   },
//!   "squeezer": { "source_sqz_db": 9.3 },
//!   "chains": { "injection": [], "monitor": [] }
//! }
//! ```
//!
//! Mirror reflectivities may be given either as amplitudes (`r_s_amplitude`,
//! `r_m_amplitude`) or as powers (`R_s_power`, `R_m_power`), never both. They
//! are stored as amplitudes and always written back as amplitudes.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss_chain::{self, EfficiencyChain, EfficiencyStage};

/// The shipped configuration describing the prototype detector.
pub const SHIPPED_CONFIG_JSON: &str = include_str!("../data/shipped.json");

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalConstants {
    /// Speed of light, m/s.
    pub c: f64,
    /// Reduced Planck constant, J s.
    pub hbar: f64,
}

impl PhysicalConstants {
    pub const CODATA: PhysicalConstants = PhysicalConstants {
        c: 299_792_458.0,
        hbar: 1.054_571_817e-34,
    };
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        Self::CODATA
    }
}

/// How the static Michelson offset is interpreted.
///
/// `Phase` treats the offset as the differential phase δ: the dark port
/// leaks `sin²δ` of the power and the Michelson reflectivity seen by the
/// signal-recycling cavity is reduced to `r_m cos 2δ`. `Fringe` treats the
/// offset as a full fringe phase, i.e. δ = offset / 2.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OffsetConvention {
    #[default]
    Phase,
    Fringe,
}

impl OffsetConvention {
    /// Differential phase δ implied by a configured offset.
    pub fn differential_phase(self, offset: f64) -> f64 {
        match self {
            OffsetConvention::Phase => offset,
            OffsetConvention::Fringe => 0.5 * offset,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    /// Laser wavelength, m.
    pub wavelength: f64,
    /// Optical power on the beamsplitter, W.
    pub power_bs: f64,
    /// Amplitude reflectivity of the signal-recycling mirror.
    pub r_s: f64,
    /// Amplitude reflectivity of the Michelson.
    pub r_m: f64,
    /// Signal-recycling cavity detuning, rad.
    pub detuning: f64,
    /// Static differential Michelson offset, rad.
    pub michelson_offset: f64,
    pub offset_convention: OffsetConvention,
    /// Power transmission from the signal-recycling mirror to photocurrent.
    pub eta_det: f64,
    /// Reduced mirror mass, kg.
    pub mirror_mass: f64,
    /// Measured interferometer output power, W, reported next to the
    /// dark-port model.
    pub measured_output_power: Option<f64>,
}

impl DetectorConfig {
    /// Amplitude transmissivity of a lossless signal-recycling mirror.
    pub fn t_s(&self) -> f64 {
        (1.0 - self.r_s * self.r_s).max(0.0).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SqueezerConfig {
    /// Squeezing at the OPO output, dB below shot noise.
    pub source_sqz_db: f64,
    /// Anti-squeezing at the OPO output, dB above shot noise.
    pub source_antisqz_db: f64,
    /// RMS squeeze-phase jitter, rad.
    pub phase_jitter_rms: f64,
    /// Readout electronic noise, dB below shot noise. `None` leaves it out
    /// of the chain arithmetic.
    pub electronic_noise_db: Option<f64>,
    /// True when `source_antisqz_db` was not given and was filled in with the
    /// pure-state value.
    pub antisqz_from_purity: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassicalLine {
    #[serde(rename = "frequency_hz")]
    pub frequency: f64,
    #[serde(rename = "amplitude_m_per_rthz")]
    pub amplitude: f64,
    /// Lorentzian half width at half maximum of the power profile, Hz.
    #[serde(rename = "width_hz", default = "default_line_width")]
    pub width: f64,
}

fn default_line_width() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassicalNoiseConfig {
    /// Power-law floor amplitude at 1 Hz, m/√Hz.
    pub amp_1hz: f64,
    /// Power-law exponent: the floor falls as f^-slope.
    pub slope: f64,
    pub lines: Vec<ClassicalLine>,
}

impl Default for ClassicalNoiseConfig {
    fn default() -> Self {
        Self {
            amp_1hz: 0.0,
            slope: 1.0,
            lines: Vec::new(),
        }
    }
}

/// Efficiencies derived from the detector rather than given as numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivedStage {
    /// Reflection of the squeezed field off the signal-recycling cavity.
    SrcReflection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StageSpec {
    Fixed { name: String, eta: f64 },
    Derived { name: String, derive: DerivedStage },
}

impl StageSpec {
    pub fn name(&self) -> &str {
        match self {
            StageSpec::Fixed { name, .. } | StageSpec::Derived { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainPreset {
    Injection,
    Monitor,
}

impl ChainPreset {
    pub fn as_str(self) -> &'static str {
        match self {
            ChainPreset::Injection => "injection",
            ChainPreset::Monitor => "monitor",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainPresets {
    /// OPO output to photocurrent through the interferometer.
    #[serde(default)]
    pub injection: Vec<StageSpec>,
    /// OPO output to the monitor homodyne detector.
    #[serde(default)]
    pub monitor: Vec<StageSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub detector: DetectorConfig,
    pub squeezer: SqueezerConfig,
    pub classical: ClassicalNoiseConfig,
    pub chains: ChainPresets,
}

impl Config {
    /// The shipped prototype configuration.
    pub fn shipped() -> Self {
        from_json_str(SHIPPED_CONFIG_JSON).expect("shipped configuration is valid")
    }

    pub fn stage_specs(&self, preset: ChainPreset) -> &[StageSpec] {
        match preset {
            ChainPreset::Injection => &self.chains.injection,
            ChainPreset::Monitor => &self.chains.monitor,
        }
    }

    /// Resolves a preset into numeric efficiencies, evaluating derived stages
    /// against the detector.
    pub fn chain(&self, preset: ChainPreset) -> Result<EfficiencyChain> {
        let d = &self.detector;
        let stages = self
            .stage_specs(preset)
            .iter()
            .map(|spec| {
                let eta = match spec {
                    StageSpec::Fixed { eta, .. } => *eta,
                    StageSpec::Derived {
                        derive: DerivedStage::SrcReflection,
                        ..
                    } => loss_chain::src_reflection_efficiency(
                        d.r_s,
                        d.r_m,
                        d.detuning,
                        d.offset_convention.differential_phase(d.michelson_offset),
                    )?,
                };
                EfficiencyStage::new(spec.name(), eta)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EfficiencyChain::new(stages))
    }
}

/// One violated invariant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub field: String,
    pub value: f64,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} = {} violates {}", self.field, self.value, self.rule)
    }
}

struct Checker(Vec<Violation>);

impl Checker {
    fn check(&mut self, ok: bool, field: impl Into<String>, value: f64, rule: &str) {
        if !ok || value.is_nan() {
            self.0.push(Violation {
                field: field.into(),
                value,
                rule: rule.to_string(),
            });
        }
    }
}

/// Lists every violated invariant; empty iff the configuration is valid.
pub fn validate(config: &Config) -> Vec<Violation> {
    let mut c = Checker(Vec::new());
    let d = &config.detector;
    c.check(
        d.wavelength > 0.0 && d.wavelength.is_finite(),
        "wavelength",
        d.wavelength,
        "0 < wavelength",
    );
    c.check(
        d.power_bs > 0.0 && d.power_bs.is_finite(),
        "power_bs",
        d.power_bs,
        "0 < power_bs",
    );
    c.check(d.r_s > 0.0 && d.r_s < 1.0, "r_s", d.r_s, "0 < r_s < 1");
    c.check(d.r_m > 0.0 && d.r_m <= 1.0, "r_m", d.r_m, "0 < r_m <= 1");
    c.check(d.detuning.is_finite(), "detuning", d.detuning, "finite");
    c.check(
        d.michelson_offset.is_finite(),
        "michelson_offset",
        d.michelson_offset,
        "finite",
    );
    c.check(
        d.eta_det > 0.0 && d.eta_det <= 1.0,
        "eta_det",
        d.eta_det,
        "0 < eta_det <= 1",
    );
    c.check(
        d.mirror_mass > 0.0 && d.mirror_mass.is_finite(),
        "mirror_mass",
        d.mirror_mass,
        "0 < mirror_mass",
    );
    if let Some(p) = d.measured_output_power {
        c.check(
            p >= 0.0 && p.is_finite(),
            "measured_output_power",
            p,
            "0 <= measured_output_power",
        );
    }

    let s = &config.squeezer;
    c.check(
        s.source_sqz_db >= 0.0 && s.source_sqz_db.is_finite(),
        "source_sqz_db",
        s.source_sqz_db,
        "0 <= source_sqz_db",
    );
    c.check(
        s.source_antisqz_db >= s.source_sqz_db && s.source_antisqz_db.is_finite(),
        "source_antisqz_db",
        s.source_antisqz_db,
        "source_antisqz_db >= source_sqz_db",
    );
    c.check(
        s.phase_jitter_rms >= 0.0 && s.phase_jitter_rms.is_finite(),
        "phase_jitter_rms",
        s.phase_jitter_rms,
        "0 <= phase_jitter_rms",
    );
    if let Some(e) = s.electronic_noise_db {
        c.check(e.is_finite(), "electronic_noise_db", e, "finite");
    }

    let k = &config.classical;
    c.check(
        k.amp_1hz >= 0.0 && k.amp_1hz.is_finite(),
        "amp_1hz",
        k.amp_1hz,
        "0 <= amp_1hz",
    );
    c.check(k.slope > 0.0 && k.slope.is_finite(), "slope", k.slope, "0 < slope");
    for (i, line) in k.lines.iter().enumerate() {
        c.check(
            line.frequency > 0.0 && line.frequency.is_finite(),
            format!("lines[{i}].frequency"),
            line.frequency,
            "0 < frequency",
        );
        c.check(
            line.amplitude >= 0.0 && line.amplitude.is_finite(),
            format!("lines[{i}].amplitude"),
            line.amplitude,
            "0 <= amplitude",
        );
        c.check(
            line.width > 0.0 && line.width.is_finite(),
            format!("lines[{i}].width"),
            line.width,
            "0 < width",
        );
        if k.lines[..i].iter().any(|other| other.frequency == line.frequency) {
            c.check(
                false,
                format!("lines[{i}].frequency"),
                line.frequency,
                "line frequencies distinct",
            );
        }
    }

    for (preset, specs) in [
        ("injection", &config.chains.injection),
        ("monitor", &config.chains.monitor),
    ] {
        for (i, spec) in specs.iter().enumerate() {
            if let StageSpec::Fixed { eta, .. } = spec {
                c.check(
                    *eta > 0.0 && *eta <= 1.0,
                    format!("chains.{preset}[{i}].eta"),
                    *eta,
                    "0 < eta <= 1",
                );
            }
        }
    }
    c.0
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    detector: RawDetector,
    squeezer: RawSqueezer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    classical: Option<RawClassical>,
    #[serde(default)]
    chains: ChainPresets,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDetector {
    wavelength_m: f64,
    power_bs_w: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r_s_amplitude: Option<f64>,
    #[serde(rename = "R_s_power", default, skip_serializing_if = "Option::is_none")]
    r_s_power: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r_m_amplitude: Option<f64>,
    #[serde(rename = "R_m_power", default, skip_serializing_if = "Option::is_none")]
    r_m_power: Option<f64>,
    #[serde(default)]
    detuning_rad: f64,
    #[serde(default)]
    offset_rad: f64,
    #[serde(default)]
    offset_convention: OffsetConvention,
    eta_det: f64,
    mirror_mass_kg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    measured_output_power_w: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSqueezer {
    source_sqz_db: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_antisqz_db: Option<f64>,
    #[serde(default)]
    phase_jitter_rms_rad: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    electronic_noise_db: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawClassical {
    amp_1hz_m_per_rthz: f64,
    slope: f64,
    #[serde(default)]
    lines: Vec<ClassicalLine>,
}

fn reflectivity(field: &str, amplitude: Option<f64>, power: Option<f64>, violations: &mut Vec<Violation>) -> f64 {
    match (amplitude, power) {
        (Some(a), None) => a,
        // Negative powers fall through as NaN and are reported by validate.
        (None, Some(p)) => p.sqrt(),
        (a, p) => {
            violations.push(Violation {
                field: field.to_string(),
                value: a.or(p).unwrap_or(f64::NAN),
                rule: format!("exactly one of {field}_amplitude or {}_power", field.to_uppercase()),
            });
            f64::NAN
        }
    }
}

impl RawConfig {
    fn into_config(self) -> Result<Config> {
        let mut violations = Vec::new();
        let d = self.detector;
        let r_s = reflectivity("r_s", d.r_s_amplitude, d.r_s_power, &mut violations);
        let r_m = reflectivity("r_m", d.r_m_amplitude, d.r_m_power, &mut violations);
        let s = self.squeezer;
        let config = Config {
            detector: DetectorConfig {
                wavelength: d.wavelength_m,
                power_bs: d.power_bs_w,
                r_s,
                r_m,
                detuning: d.detuning_rad,
                michelson_offset: d.offset_rad,
                offset_convention: d.offset_convention,
                eta_det: d.eta_det,
                mirror_mass: d.mirror_mass_kg,
                measured_output_power: d.measured_output_power_w,
            },
            squeezer: SqueezerConfig {
                source_sqz_db: s.source_sqz_db,
                source_antisqz_db: s.source_antisqz_db.unwrap_or(s.source_sqz_db),
                phase_jitter_rms: s.phase_jitter_rms_rad,
                electronic_noise_db: s.electronic_noise_db,
                antisqz_from_purity: s.source_antisqz_db.is_none(),
            },
            classical: self
                .classical
                .map(|k| ClassicalNoiseConfig {
                    amp_1hz: k.amp_1hz_m_per_rthz,
                    slope: k.slope,
                    lines: k.lines,
                })
                .unwrap_or_default(),
            chains: self.chains,
        };
        // Reflectivity key errors already produced NaN placeholders; drop
        // the duplicate range reports for those fields.
        let reported: Vec<String> = violations.iter().map(|v| v.field.clone()).collect();
        violations.extend(validate(&config).into_iter().filter(|v| !reported.contains(&v.field)));
        if violations.is_empty() {
            Ok(config)
        } else {
            Err(Error::Validation(violations))
        }
    }

    fn from_config(config: &Config) -> Self {
        let d = &config.detector;
        let s = &config.squeezer;
        RawConfig {
            detector: RawDetector {
                wavelength_m: d.wavelength,
                power_bs_w: d.power_bs,
                r_s_amplitude: Some(d.r_s),
                r_s_power: None,
                r_m_amplitude: Some(d.r_m),
                r_m_power: None,
                detuning_rad: d.detuning,
                offset_rad: d.michelson_offset,
                offset_convention: d.offset_convention,
                eta_det: d.eta_det,
                mirror_mass_kg: d.mirror_mass,
                measured_output_power_w: d.measured_output_power,
            },
            squeezer: RawSqueezer {
                source_sqz_db: s.source_sqz_db,
                source_antisqz_db: (!s.antisqz_from_purity).then_some(s.source_antisqz_db),
                phase_jitter_rms_rad: s.phase_jitter_rms,
                electronic_noise_db: s.electronic_noise_db,
            },
            classical: Some(RawClassical {
                amp_1hz_m_per_rthz: config.classical.amp_1hz,
                slope: config.classical.slope,
                lines: config.classical.lines.clone(),
            }),
            chains: config.chains.clone(),
        }
    }
}

/// Parses and validates a configuration from JSON text.
pub fn from_json_str(text: &str) -> Result<Config> {
    let raw: RawConfig = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    raw.into_config()
}

/// Serializes a configuration in the file schema, amplitudes normalized.
pub fn to_json_string(config: &Config) -> String {
    serde_json::to_string_pretty(&RawConfig::from_config(config)).expect("config serializes")
}

pub fn load_config(path: impl AsRef<Path>) -> Result<Config> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_json_str(&text)
}
