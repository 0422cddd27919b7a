use std::path::PathBuf;

use crate::params::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed input: {0}")]
    Parse(String),

    #[error("invalid configuration: {}", format_violations(.0))]
    Validation(Vec<Violation>),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("cavity singularity: |1 - r_s r_m e^(-2i phi)| = {denominator:e} is below 1e-12")]
    Singularity { denominator: f64 },

    #[error("efficiency chain is empty")]
    EmptyChain,

    #[error(
        "infeasible measurement: {measured_db} dB cannot be explained by efficiency {eta} \
         (inferred source variance {source_variance:e} <= 0)"
    )]
    InfeasibleMeasurement {
        measured_db: f64,
        eta: f64,
        source_variance: f64,
    },

    #[error("aliasing: {frequency} Hz is at or above the Nyquist frequency {nyquist} Hz")]
    Aliasing { frequency: f64, nyquist: f64 },

    #[error("budget grid [{grid_lo}, {grid_hi}] Hz does not span the requested band [{lo}, {hi}] Hz")]
    GridCoverage {
        lo: f64,
        hi: f64,
        grid_lo: f64,
        grid_hi: f64,
    },

    #[error("degenerate segmentation: {0}")]
    DegenerateSegment(String),

    #[error("band [{lo}, {hi}] Hz holds {bins} bins, need at least {needed}")]
    EmptyBand {
        lo: f64,
        hi: f64,
        bins: usize,
        needed: usize,
    },

    #[error("no line at {f0} Hz: peak {peak:e} is below twice the floor {floor:e}")]
    LineNotFound { f0: f64, peak: f64, floor: f64 },

    #[error("degenerate data: {0}")]
    DegenerateData(String),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
