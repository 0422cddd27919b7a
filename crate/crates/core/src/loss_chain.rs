//! Efficiency chains between the OPO and the photocurrent.
//!
//! Each stage mixes the squeezed field with vacuum, `V' = ηV + (1 − η)`, so a
//! chain acts as a single stage with the product efficiency. The reflection
//! of the squeezed field off the signal-recycling cavity is booked as one
//! more stage.

use serde::Serialize;

use crate::error::{domain, Error, Result};
use crate::gaussian_state::{db_to_variance, QuadratureState, SqueezeLevel};
use crate::noise_model::cavity_denominator;
use crate::params::{ChainPreset, OffsetConvention, SqueezerConfig};

pub const FLAG_ANTISQZ_FROM_PURITY: &str = "source_antisqz_db: not configured, pure-state value assumed";
pub const FLAG_ELECTRONIC_NOISE: &str = "electronic noise floor included in detected squeezing";
pub const FLAG_NO_ELECTRONIC_NOISE: &str = "electronic noise floor not included";
pub const FLAG_DARK_PORT_MODEL: &str = "dark_port_power: uncalibrated model, compare against the measured output power";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficiencyStage {
    name: String,
    eta: f64,
}

impl EfficiencyStage {
    pub fn new(name: impl Into<String>, eta: f64) -> Result<Self> {
        let name = name.into();
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(domain(format!("stage {name}: efficiency {eta} outside (0, 1]")));
        }
        Ok(Self { name, eta })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EfficiencyChain {
    stages: Vec<EfficiencyStage>,
}

impl EfficiencyChain {
    pub fn new(stages: Vec<EfficiencyStage>) -> Self {
        Self { stages }
    }

    /// Builds a chain from bare efficiencies, naming stages by position.
    pub fn from_etas(etas: &[f64]) -> Result<Self> {
        etas.iter()
            .enumerate()
            .map(|(i, &eta)| EfficiencyStage::new(format!("stage{i}"), eta))
            .collect::<Result<Vec<_>>>()
            .map(Self::new)
    }

    pub fn stages(&self) -> &[EfficiencyStage] {
        &self.stages
    }

    pub fn push(&mut self, stage: EfficiencyStage) {
        self.stages.push(stage);
    }

    /// Product of the stage efficiencies.
    pub fn composite(&self) -> Result<f64> {
        if self.stages.is_empty() {
            return Err(Error::EmptyChain);
        }
        Ok(self.stages.iter().map(|s| s.eta).product())
    }
}

/// Power reflectivity of the signal-recycling cavity seen by the injected
/// field, `|(r_m' e^{-2iφ} − r_s) / (1 − r_s r_m' e^{-2iφ})|²`, where the
/// Michelson offset δ (differential phase) lowers the carrier reflectivity to
/// `r_m' = r_m cos 2δ`.
pub fn src_reflection_efficiency(r_s: f64, r_m: f64, phi: f64, differential_offset: f64) -> Result<f64> {
    if !((0.0..1.0).contains(&r_s) && (0.0..=1.0).contains(&r_m)) {
        return Err(domain(format!(
            "cavity reflection needs 0 <= r_s < 1 and 0 <= r_m <= 1, got r_s = {r_s}, r_m = {r_m}"
        )));
    }
    let r_m = r_m * (2.0 * differential_offset).cos();
    let den = cavity_denominator(r_s, r_m, phi)?;
    let num = r_m * num_complex::Complex64::from_polar(1.0, -2.0 * phi) - r_s;
    Ok(num.norm_sqr() / den.norm_sqr())
}

/// Carrier power leaking out of the dark port through the signal-recycling
/// cavity, `P sin²δ · t_s² / |1 − r_s r_m e^{-2iφ}|²`.
pub fn dark_port_power(
    power: f64,
    offset: f64,
    convention: OffsetConvention,
    r_s: f64,
    r_m: f64,
    phi: f64,
) -> Result<f64> {
    if !(power >= 0.0) {
        return Err(domain(format!("power {power} must be >= 0")));
    }
    let transmission = crate::noise_model::recycling_gain(r_s, r_m, phi)?;
    let delta = convention.differential_phase(offset);
    Ok(power * delta.sin().powi(2) * transmission)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Propagation {
    pub source: SqueezeLevel,
    pub detected: SqueezeLevel,
    /// State after the chain and phase jitter, before any electronic noise.
    pub state: QuadratureState,
    /// Effective squeeze factor at the readout, `-ln(V) / 2`.
    pub r_eff: f64,
    pub composite: f64,
}

/// Variance floor of readout electronics sitting `db` below shot noise.
pub fn electronic_noise_variance(db: f64) -> f64 {
    db_to_variance(db)
}

/// Squeezed source state described by a squeezer configuration.
pub fn source_state(squeezer: &SqueezerConfig) -> Result<QuadratureState> {
    QuadratureState::new(
        db_to_variance(squeezer.source_sqz_db),
        db_to_variance(-squeezer.source_antisqz_db),
        0.0,
    )
}

/// Sends the configured source through `chain`, then averages over phase
/// jitter `jitter_sigma`.
pub fn propagate(squeezer: &SqueezerConfig, chain: &EfficiencyChain, jitter_sigma: f64) -> Result<Propagation> {
    let composite = chain.composite()?;
    let state = source_state(squeezer)?.apply_loss(composite)?.dephase(jitter_sigma)?;
    let mut v = state.measured_variance(0.0);
    if let Some(db) = squeezer.electronic_noise_db {
        // Noise floor adds to both the squeezed and the shot-noise reference.
        let e = electronic_noise_variance(db);
        v = (v + e) / (1.0 + e);
    }
    Ok(Propagation {
        source: SqueezeLevel::new(squeezer.source_sqz_db),
        detected: SqueezeLevel::from_variance(v)?,
        state,
        r_eff: -0.5 * v.ln(),
        composite,
    })
}

/// Source squeezing that explains `measured` after `monitor_chain`.
pub fn infer_source(measured: SqueezeLevel, monitor_chain: &EfficiencyChain) -> Result<SqueezeLevel> {
    let eta = monitor_chain.composite()?;
    let source_variance = (measured.variance() - (1.0 - eta)) / eta;
    if !(source_variance > 0.0) {
        return Err(Error::InfeasibleMeasurement {
            measured_db: measured.db,
            eta,
            source_variance,
        });
    }
    SqueezeLevel::from_variance(source_variance)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub name: String,
    pub eta: f64,
    pub cumulative_eta: f64,
    /// Squeezing after this stage.
    pub cumulative_db: f64,
}

/// Exported chain report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainReport {
    pub preset: String,
    pub stages: Vec<StageReport>,
    pub composite_eta: f64,
    pub input_db: f64,
    pub detected_db: f64,
    pub r_eff: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub residual_db: Option<f64>,
    pub flags: Vec<String>,
}

fn stage_reports(source: QuadratureState, chain: &EfficiencyChain) -> Result<Vec<StageReport>> {
    let mut state = source;
    let mut cumulative = 1.0;
    chain
        .stages()
        .iter()
        .map(|s| {
            state = state.apply_loss(s.eta)?;
            cumulative *= s.eta;
            Ok(StageReport {
                name: s.name.clone(),
                eta: s.eta,
                cumulative_eta: cumulative,
                cumulative_db: state.squeeze_level().db,
            })
        })
        .collect()
}

fn squeezer_flags(squeezer: &SqueezerConfig) -> Vec<String> {
    let mut flags = Vec::new();
    if squeezer.antisqz_from_purity {
        flags.push(FLAG_ANTISQZ_FROM_PURITY.to_string());
    }
    flags.push(
        if squeezer.electronic_noise_db.is_some() {
            FLAG_ELECTRONIC_NOISE
        } else {
            FLAG_NO_ELECTRONIC_NOISE
        }
        .to_string(),
    );
    flags
}

/// Forward report: source squeezing propagated through the chain.
pub fn forward_report(
    preset: ChainPreset,
    squeezer: &SqueezerConfig,
    chain: &EfficiencyChain,
    reference_db: Option<f64>,
) -> Result<ChainReport> {
    let p = propagate(squeezer, chain, squeezer.phase_jitter_rms)?;
    Ok(ChainReport {
        preset: preset.as_str().to_string(),
        stages: stage_reports(source_state(squeezer)?, chain)?,
        composite_eta: p.composite,
        input_db: p.source.db,
        detected_db: p.detected.db,
        r_eff: p.r_eff,
        reference_db,
        residual_db: reference_db.map(|r| p.detected.db - r),
        flags: squeezer_flags(squeezer),
    })
}

/// Inverse report: source squeezing inferred from a monitored level.
/// `detected_db` is the measurement and `input_db` the inferred source.
pub fn inverse_report(
    preset: ChainPreset,
    measured: SqueezeLevel,
    chain: &EfficiencyChain,
    reference_db: Option<f64>,
) -> Result<ChainReport> {
    let inferred = infer_source(measured, chain)?;
    let source = QuadratureState::new(inferred.variance(), 1.0 / inferred.variance(), 0.0)?;
    Ok(ChainReport {
        preset: preset.as_str().to_string(),
        stages: stage_reports(source, chain)?,
        composite_eta: chain.composite()?,
        input_db: inferred.db,
        detected_db: measured.db,
        r_eff: -0.5 * measured.variance().ln(),
        reference_db,
        residual_db: reference_db.map(|r| inferred.db - r),
        flags: vec![FLAG_ANTISQZ_FROM_PURITY.to_string()],
    })
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    use super::*;
    use crate::params::Config;

    fn pure(db: f64) -> SqueezerConfig {
        SqueezerConfig {
            source_sqz_db: db,
            source_antisqz_db: db,
            phase_jitter_rms: 0.0,
            electronic_noise_db: None,
            antisqz_from_purity: true,
        }
    }

    fn shipped_src() -> f64 {
        src_reflection_efficiency(0.925f64.sqrt(), 0.995f64.sqrt(), 0.0, 0.0).unwrap()
    }

    #[test]
    fn composite_products() {
        let c = EfficiencyChain::from_etas(&[0.775, 0.960, 0.93]).unwrap();
        assert_relative_eq!(c.composite().unwrap(), 0.69192, max_relative = 1e-14);
        assert_eq!(EfficiencyChain::from_etas(&[0.4]).unwrap().composite().unwrap(), 0.4);
        let with_unit = EfficiencyChain::from_etas(&[0.775, 1.0, 0.960, 0.93]).unwrap();
        assert_eq!(with_unit.composite().unwrap(), c.composite().unwrap());
        assert!(matches!(EfficiencyChain::default().composite(), Err(Error::EmptyChain)));
        assert!(EfficiencyStage::new("x", 0.0).is_err());
        assert!(EfficiencyStage::new("x", 1.01).is_err());
    }

    #[test]
    fn cavity_reflection() {
        // (r_m - r_s)^2 / (1 - r_s r_m)^2
        let (rs, rm) = (0.925f64.sqrt(), 0.995f64.sqrt());
        let direct = ((rm - rs) / (1.0 - rs * rm)).powi(2);
        assert_relative_eq!(shipped_src(), direct, max_relative = 1e-12);
        assert_relative_eq!(shipped_src(), 0.772_929_019, max_relative = 1e-8);
        assert!(src_reflection_efficiency(0.6, 0.6, 0.0, 0.0).unwrap() < 1e-30);
        assert_relative_eq!(
            src_reflection_efficiency(0.0, rm, 0.0, 0.0).unwrap(),
            0.995,
            max_relative = 1e-14
        );
        // cos(2 pi/238) lowers r_m by 0.035%, which the steep cavity response
        // turns into a few percent of reflectivity.
        let with_offset = src_reflection_efficiency(rs, rm, 0.0, std::f64::consts::PI / 238.0).unwrap();
        assert_relative_eq!(with_offset, 0.745_644_818_6, max_relative = 1e-8);
    }

    #[test]
    fn shipped_injection_chain_reaches_about_three_db() {
        let chain = EfficiencyChain::from_etas(&[0.775, 0.960, 0.93, shipped_src()]).unwrap();
        let p = propagate(&pure(9.3), &chain, 0.0).unwrap();
        assert_relative_eq!(p.composite, 0.534_805_047, max_relative = 1e-8);
        // V' = eta 10^-0.93 + (1 - eta)
        assert_relative_eq!(p.detected.db, 2.773_421_695, epsilon = 1e-8);
        assert!((p.detected.db - 3.0).abs() <= 0.5);
        assert_relative_eq!(p.r_eff, 0.319_301_973, epsilon = 1e-8);
    }

    #[test]
    fn vacuum_and_lossless_identities() {
        let chain = EfficiencyChain::from_etas(&[0.3, 0.5]).unwrap();
        assert_eq!(propagate(&pure(0.0), &chain, 0.0).unwrap().detected.db, 0.0);
        let unit = EfficiencyChain::from_etas(&[1.0, 1.0]).unwrap();
        assert_relative_eq!(
            propagate(&pure(9.3), &unit, 0.0).unwrap().detected.db,
            9.3,
            epsilon = 1e-12
        );
    }

    #[test]
    fn monitor_inference() {
        let monitor = EfficiencyChain::from_etas(&[0.93, 0.992]).unwrap();
        let inferred = infer_source(SqueezeLevel::new(7.4), &monitor).unwrap();
        // (10^-0.74 - (1 - 0.92256)) / 0.92256
        assert_relative_eq!(inferred.db, 9.457_533_136, epsilon = 1e-8);
        assert!((inferred.db - 9.3).abs() <= 0.3);
        assert_eq!(infer_source(SqueezeLevel::new(0.0), &monitor).unwrap().db, 0.0);
        let lossy = EfficiencyChain::from_etas(&[0.9]).unwrap();
        assert!(matches!(
            infer_source(SqueezeLevel::new(11.0), &lossy),
            Err(Error::InfeasibleMeasurement { .. })
        ));
    }

    #[test]
    fn dark_port_model() {
        let (rs, rm) = (0.925f64.sqrt(), 0.995f64.sqrt());
        let conv = OffsetConvention::Phase;
        assert_eq!(dark_port_power(0.057, 0.0, conv, rs, rm, 0.0).unwrap(), 0.0);
        assert_relative_eq!(
            dark_port_power(0.057, std::f64::consts::FRAC_PI_2, conv, 0.0, 0.3, 0.0).unwrap(),
            0.057,
            max_relative = 1e-14
        );
        let offset = std::f64::consts::PI / 238.0;
        let p = dark_port_power(0.057, offset, conv, rs, rm, 0.0).unwrap();
        assert_relative_eq!(p, 4.510_109_588e-4, max_relative = 1e-8);
        let fringe = dark_port_power(0.057, offset, OffsetConvention::Fringe, rs, rm, 0.0).unwrap();
        assert_relative_eq!(fringe, 1.127_576_513e-4, max_relative = 1e-8);
    }

    #[test]
    fn electronic_noise_reduces_detected_squeezing() {
        let chain = EfficiencyChain::from_etas(&[0.8]).unwrap();
        let mut s = pure(6.0);
        let clean = propagate(&s, &chain, 0.0).unwrap();
        s.electronic_noise_db = Some(6.0);
        let noisy = propagate(&s, &chain, 0.0).unwrap();
        assert!(noisy.detected.db < clean.detected.db);
        assert_relative_eq!(electronic_noise_variance(6.0), 0.251_188_643, max_relative = 1e-8);
    }

    #[test]
    fn reports() {
        let config = Config::shipped();
        let chain = config.chain(ChainPreset::Injection).unwrap();
        let r = forward_report(ChainPreset::Injection, &config.squeezer, &chain, Some(3.0)).unwrap();
        assert_eq!(r.stages.len(), 4);
        assert_relative_eq!(r.stages.last().unwrap().cumulative_db, r.detected_db, epsilon = 1e-12);
        assert!(r.stages.windows(2).all(|w| w[1].cumulative_db < w[0].cumulative_db));
        assert!(r.flags.iter().any(|f| f == FLAG_ANTISQZ_FROM_PURITY));

        let monitor = config.chain(ChainPreset::Monitor).unwrap();
        let inv = inverse_report(ChainPreset::Monitor, SqueezeLevel::new(7.4), &monitor, Some(9.3)).unwrap();
        assert_relative_eq!(inv.stages.last().unwrap().cumulative_db, 7.4, epsilon = 1e-9);
        assert_relative_eq!(inv.residual_db.unwrap(), 0.1575, epsilon = 1e-3);
    }

    proptest! {
        #[test]
        fn reflection_is_a_valid_efficiency(rs in 0.0..0.999f64, rm in 0.0..=1.0f64, phi in -3.2..3.2f64, off in -0.05..0.05f64) {
            prop_assume!((rs - rm).abs() > 1e-6);
            let eta = src_reflection_efficiency(rs, rm, phi, off).unwrap();
            prop_assert!(eta > 0.0 && eta <= 1.0 + 1e-12, "{}", eta);
        }

        #[test]
        fn composite_ignores_order(etas in proptest::collection::vec(0.01..=1.0f64, 1..8)) {
            let a = EfficiencyChain::from_etas(&etas).unwrap().composite().unwrap();
            let mut rev = etas.clone();
            rev.reverse();
            let b = EfficiencyChain::from_etas(&rev).unwrap().composite().unwrap();
            prop_assert!((a - b).abs() <= 4.0 * f64::EPSILON * a);
        }

        #[test]
        fn detected_is_monotone(db in 0.5..15.0f64, eta in 0.05..0.95f64, d_eta in 0.001..0.05f64, sigma in 0.0..0.3f64, d_sigma in 0.001..0.1f64) {
            let s = pure(db);
            let lo = EfficiencyChain::from_etas(&[eta]).unwrap();
            let hi = EfficiencyChain::from_etas(&[eta + d_eta]).unwrap();
            let base = propagate(&s, &lo, sigma).unwrap().detected.db;
            // Once jitter leaks enough anti-squeezing to push the state above
            // shot noise, extra efficiency only adds excess noise.
            prop_assume!(base > 0.0);
            prop_assert!(propagate(&s, &hi, sigma).unwrap().detected.db > base);
            prop_assert!(propagate(&s, &lo, sigma + d_sigma).unwrap().detected.db < base);
            prop_assert!(base < db);
        }
    }
}
