//! Quantum-noise modeling for a squeezed-light-enhanced signal-recycled
//! Michelson interferometer.
//!
//! - [`params`]: constants, configuration model and JSON config files.
//! - [`gaussian_state`]: single-mode Gaussian quadrature states.
//! - [`noise_model`]: displacement noise components and budgets.
//! - [`loss_chain`]: efficiency chains, squeezing propagation and inference.
//! - [`spectra`]: time-series synthesis and averaged-periodogram ASDs.
//! - [`fitting`]: least-squares fits of the model to spectra.

// `!(x > 0.0)` is used on purpose so NaN inputs are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fitting;
pub mod gaussian_state;
pub mod loss_chain;
pub mod noise_model;
pub mod params;
pub mod spectra;

pub use error::{Error, Result};
