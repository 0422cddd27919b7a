//! Single-mode Gaussian quadrature states at one sideband frequency.
//!
//! States are kept in principal-axis form: the variance of the squeezed
//! quadrature, the variance of the conjugate quadrature, and the angle of the
//! squeezed quadrature relative to the readout quadrature. Variances are in
//! shot-noise units, so vacuum has unit variance in every quadrature.
//!
//! Squeeze factors follow the amplitude convention: a squeeze factor `r`
//! scales the shot-noise ASD by `e^-r`, the variance by `e^-2r`, and
//! corresponds to `20 r log10(e) ≈ 8.686 r` dB.

use std::f64::consts::{LOG10_E, PI};

use serde::Serialize;

use crate::error::{domain, Result};

/// Relative slack when checking `v_min * v_max >= 1` on construction.
const HEISENBERG_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuadratureState {
    v_min: f64,
    v_max: f64,
    theta: f64,
}

/// Squeezing depth in dB, positive below shot noise.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize)]
pub struct SqueezeLevel {
    pub db: f64,
}

impl SqueezeLevel {
    pub fn new(db: f64) -> Self {
        Self { db }
    }

    pub fn from_variance(v: f64) -> Result<Self> {
        variance_to_db(v).map(Self::new)
    }

    pub fn variance(self) -> f64 {
        db_to_variance(self.db)
    }
}

fn wrap_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(PI);
    // rem_euclid can round up to exactly PI for tiny negative inputs.
    if t >= PI {
        0.0
    } else {
        t
    }
}

impl QuadratureState {
    /// Builds a state from principal variances. If `v_min > v_max` the axes
    /// are swapped and the angle rotated by π/2.
    pub fn new(v_min: f64, v_max: f64, theta: f64) -> Result<Self> {
        if !(v_min > 0.0 && v_max > 0.0 && v_min.is_finite() && v_max.is_finite()) {
            return Err(domain(format!(
                "quadrature variances must be positive and finite, got ({v_min}, {v_max})"
            )));
        }
        if !theta.is_finite() {
            return Err(domain("quadrature angle must be finite"));
        }
        let (v_min, v_max, theta) = if v_min <= v_max {
            (v_min, v_max, theta)
        } else {
            (v_max, v_min, theta + 0.5 * PI)
        };
        if v_min * v_max < 1.0 - HEISENBERG_SLACK {
            return Err(domain(format!(
                "v_min * v_max = {} violates the uncertainty bound",
                v_min * v_max
            )));
        }
        Ok(Self {
            v_min,
            v_max,
            theta: wrap_angle(theta),
        })
    }

    pub fn v_min(&self) -> f64 {
        self.v_min
    }

    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    /// Orientation of the squeezed quadrature, in [0, π).
    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Squeezing of the principal squeezed quadrature.
    pub fn squeeze_level(&self) -> SqueezeLevel {
        SqueezeLevel::new(-10.0 * self.v_min.log10())
    }

    /// Effective squeeze factor `-ln(v_min) / 2`.
    pub fn squeeze_factor(&self) -> f64 {
        -0.5 * self.v_min.ln()
    }

    pub fn rotate(&self, phi: f64) -> Self {
        Self {
            theta: wrap_angle(self.theta + phi),
            ..*self
        }
    }

    /// Mixes the state with vacuum through a beamsplitter of power
    /// transmission `eta`.
    pub fn apply_loss(&self, eta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(domain(format!("loss efficiency {eta} outside [0, 1]")));
        }
        let mix = |v: f64| eta * v + (1.0 - eta);
        Ok(Self {
            v_min: mix(self.v_min),
            v_max: mix(self.v_max),
            theta: self.theta,
        })
    }

    /// Averages the state over zero-mean Gaussian jitter of the quadrature
    /// angle with RMS `sigma`.
    pub fn dephase(&self, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) {
            return Err(domain(format!("phase jitter {sigma} must be >= 0")));
        }
        // E[sin²θ] for θ ~ N(0, σ²).
        let leak = 0.5 * (-(2.0 * sigma * sigma)).exp_m1().abs();
        let shift = (self.v_max - self.v_min) * leak;
        Ok(Self {
            v_min: self.v_min + shift,
            v_max: self.v_max - shift,
            theta: self.theta,
        })
    }

    /// Variance seen by a homodyne readout of quadrature angle `theta_lo`.
    pub fn measured_variance(&self, theta_lo: f64) -> f64 {
        let (s, c) = (theta_lo - self.theta).sin_cos();
        let v = self.v_min * c * c + self.v_max * s * s;
        v.clamp(self.v_min, self.v_max)
    }
}

pub fn vacuum() -> QuadratureState {
    QuadratureState {
        v_min: 1.0,
        v_max: 1.0,
        theta: 0.0,
    }
}

/// Squeezed state with `v_min = e^-2r` and `v_max = e^+2 r_anti`.
pub fn squeezed(r: f64, r_anti: f64, theta: f64) -> Result<QuadratureState> {
    if !(r >= 0.0 && r_anti >= r) {
        return Err(domain(format!(
            "squeeze factors must satisfy r_anti >= r >= 0, got r = {r}, r_anti = {r_anti}"
        )));
    }
    QuadratureState::new((-2.0 * r).exp(), (2.0 * r_anti).exp(), theta)
}

pub fn db_to_variance(db: f64) -> f64 {
    10f64.powf(-db / 10.0)
}

pub fn variance_to_db(v: f64) -> Result<f64> {
    if !(v > 0.0) {
        return Err(domain(format!("variance {v} must be positive")));
    }
    Ok(-10.0 * v.log10())
}

pub fn r_to_db(r: f64) -> f64 {
    20.0 * r * LOG10_E
}

pub fn db_to_r(db: f64) -> f64 {
    db / (20.0 * LOG10_E)
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    use super::*;

    #[test]
    fn vacuum_is_isotropic_and_loss_fixed() {
        let v = vacuum();
        assert_eq!((v.v_min(), v.v_max(), v.theta()), (1.0, 1.0, 0.0));
        for theta in [0.0, 0.3, 1.2, -2.0] {
            assert_eq!(v.measured_variance(theta), 1.0);
        }
        assert_eq!(v.apply_loss(0.5).unwrap(), v);
    }

    #[test]
    fn squeezed_uses_amplitude_convention() {
        let s = squeezed(0.36, 0.36, 0.0).unwrap();
        assert_relative_eq!(s.v_min(), (-0.72f64).exp(), max_relative = 1e-15);
        assert_relative_eq!(s.v_min(), 0.486752, max_relative = 1e-5);
        assert_eq!(squeezed(0.0, 0.0, 0.7).unwrap().v_min(), 1.0);
    }

    #[test]
    fn nine_point_three_db() {
        let r = 9.3 / (20.0 * LOG10_E);
        assert_relative_eq!(r, 1.0707, max_relative = 1e-4);
        let s = squeezed(r, r, 0.0).unwrap();
        // 10^-0.93
        assert_relative_eq!(s.v_min(), 0.117_489_755_5, max_relative = 1e-9);
        assert_relative_eq!(s.squeeze_level().db, 9.3, epsilon = 1e-12);
    }

    #[test]
    fn squeezed_rejects_sub_heisenberg_factors() {
        assert!(squeezed(0.5, 0.4, 0.0).is_err());
        assert!(squeezed(-0.1, 0.0, 0.0).is_err());
    }

    #[test]
    fn rotation() {
        let s = squeezed(0.5, 0.7, 0.2).unwrap();
        assert_eq!(s.rotate(0.0), s);
        let back = s.rotate(1.1).rotate(-1.1);
        assert_relative_eq!(back.theta(), s.theta(), epsilon = 1e-15);
        let r = 0.4;
        let swapped = squeezed(r, r, 0.0).unwrap().rotate(0.5 * PI);
        assert_relative_eq!(swapped.measured_variance(0.0), (2.0 * r).exp(), max_relative = 1e-14);
    }

    #[test]
    fn loss_limits() {
        let s = squeezed(0.9, 1.3, 0.4).unwrap();
        assert_eq!(s.apply_loss(1.0).unwrap(), s);
        let dead = s.apply_loss(0.0).unwrap();
        assert_eq!((dead.v_min(), dead.v_max()), (1.0, 1.0));
        assert!(s.apply_loss(1.1).is_err());
        assert!(s.apply_loss(-0.1).is_err());
    }

    #[test]
    fn loss_takes_nine_point_three_to_three_db() {
        let s = QuadratureState::new(0.11749, 1.0 / 0.11749, 0.0).unwrap();
        let out = s.apply_loss(0.5655).unwrap();
        // 0.5655 * 0.11749 + 0.4345
        assert_relative_eq!(out.v_min(), 0.500_940_595, max_relative = 1e-9);
        assert_relative_eq!(out.squeeze_level().db, 3.0, epsilon = 0.01);
    }

    #[test]
    fn dephase_limits() {
        let s = QuadratureState::new(0.5, 2.0, 0.0).unwrap();
        assert_eq!(s.dephase(0.0).unwrap(), s);
        let full = s.dephase(50.0).unwrap();
        assert_relative_eq!(full.v_min(), 1.25, max_relative = 1e-15);
        assert_relative_eq!(full.v_max(), 1.25, max_relative = 1e-15);
        assert!(s.dephase(-1.0).is_err());
    }

    #[test]
    fn dephase_matches_monte_carlo() {
        // Independent route: average the projection over sampled angles.
        let (v_min, v_max, sigma) = (0.5, 2.0, 0.1);
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(7);
        let normal = Normal::new(0.0, sigma).unwrap();
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let t: f64 = normal.sample(&mut rng);
            acc += v_min * t.cos().powi(2) + v_max * t.sin().powi(2);
        }
        let mc = acc / n as f64;
        let closed = QuadratureState::new(v_min, v_max, 0.0)
            .unwrap()
            .dephase(sigma)
            .unwrap()
            .v_min();
        assert_relative_eq!(mc, 0.5149, max_relative = 5e-4);
        assert_relative_eq!(closed, mc, max_relative = 5e-4);
    }

    #[test]
    fn projection_at_forty_five_degrees() {
        let s = QuadratureState::new(0.25, 4.0, 0.0).unwrap();
        assert_relative_eq!(s.measured_variance(PI / 4.0), 2.125, max_relative = 1e-14);
        let sq = squeezed(0.3, 0.3, 0.0).unwrap();
        assert_eq!(sq.measured_variance(0.0), (-0.6f64).exp());
    }

    #[test]
    fn db_conversions() {
        assert_eq!(db_to_variance(0.0), 1.0);
        assert_relative_eq!(db_to_variance(9.3), 0.117_489_755_5, max_relative = 1e-9);
        assert_relative_eq!(r_to_db(0.36), 3.1269, epsilon = 1e-4);
        assert!(variance_to_db(0.0).is_err());
        assert!(variance_to_db(-1.0).is_err());
        let r: f64 = 0.83;
        assert_relative_eq!(variance_to_db((-2.0 * r).exp()).unwrap(), r_to_db(r), epsilon = 1e-12);
        assert_relative_eq!(db_to_r(r_to_db(r)), r, epsilon = 1e-15);
    }

    #[test]
    fn constructor_normalizes_axes() {
        let s = QuadratureState::new(2.0, 0.5, 0.0).unwrap();
        assert_eq!((s.v_min(), s.v_max()), (0.5, 2.0));
        assert_relative_eq!(s.theta(), 0.5 * PI);
        assert!(QuadratureState::new(0.5, 1.5, 0.0).is_err());
        assert!(QuadratureState::new(0.0, 1.5, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn loss_contracts_toward_vacuum(r in 0.0..3.0f64, extra in 0.0..2.0f64, eta in 0.0..=1.0f64) {
            let s = squeezed(r, r + extra, 0.0).unwrap();
            let out = s.apply_loss(eta).unwrap();
            prop_assert!(((out.v_min() - 1.0).abs() - eta * (s.v_min() - 1.0).abs()).abs() <= 1e-14);
            prop_assert!(((out.v_max() - 1.0).abs() - eta * (s.v_max() - 1.0).abs()).abs() <= 1e-12 * s.v_max());
        }

        #[test]
        fn dephase_moves_variances_inward(v in 0.05..1.0f64, excess in 1.0..20.0f64, sigma in 0.0..3.0f64) {
            let s = QuadratureState::new(v, excess / v, 1.0).unwrap();
            let d = s.dephase(sigma).unwrap();
            prop_assert!(d.v_min() >= s.v_min());
            prop_assert!(d.v_max() <= s.v_max());
            prop_assert!(d.v_min() <= d.v_max());
            prop_assert!((d.v_min() + d.v_max() - (s.v_min() + s.v_max())).abs() <= 4.0 * f64::EPSILON * (s.v_min() + s.v_max()));
        }

        #[test]
        fn projection_spans_principal_variances(v in 0.05..1.0f64, excess in 1.0..20.0f64, theta in -4.0..4.0f64, lo in -4.0..4.0f64) {
            let s = QuadratureState::new(v, excess / v, theta).unwrap();
            let m = s.measured_variance(lo);
            prop_assert!(m >= s.v_min() && m <= s.v_max());
            prop_assert!((s.measured_variance(s.theta()) - s.v_min()).abs() <= 1e-12);
            prop_assert!((s.measured_variance(s.theta() + 0.5 * PI) - s.v_max()).abs() <= 1e-12 * s.v_max());
        }

        #[test]
        fn db_round_trip(d in -40.0..40.0f64) {
            prop_assert!((variance_to_db(db_to_variance(d)).unwrap() - d).abs() <= 1e-12);
        }
    }
}
