//! Synthetic detector time series and averaged-periodogram ASD estimates.
//!
//! # Synthesis
//!
//! White Gaussian samples `w[n]` (unit variance) are transformed, each bin is
//! scaled by `sqrt(S(f_k) fs / 2)` where `S` is the one-sided target PSD
//! (linearly interpolated in log frequency onto the bin frequency), and the
//! result is transformed back and divided by `N`. Bins outside the synthesis
//! band are zeroed. The scaling is real and symmetric in `k ↔ N − k`, so the
//! spectrum stays Hermitian and the output is real. An optional calibration
//! line `A sin(2π f0 t)` is then added in the time domain.
//!
//! Random numbers come from ChaCha20 seeded with `seed_from_u64(seed)`, mapped
//! to normals by `rand_distr::StandardNormal` (see [`RNG_ALGORITHM`]).
//!
//! # Estimation
//!
//! [`welch_asd`] splits the series into segments of `L` samples with step
//! `L − round(overlap · L)`, applies the window `w`, and computes
//!
//! ```text
//! P[k] = c_k |Σ_n w[n] x[n] e^{-2πikn/L}|² / (fs Σ_n w[n]²)
//! ```
//!
//! with `c_k = 2` for `0 < k < L/2` and `c_k = 1` for the DC and Nyquist bins.
//! Segment periodograms are averaged with pairwise summation and the ASD is
//! `sqrt(P)`. The periodic Hann window is `w[n] = 0.5 − 0.5 cos(2πn/L)`.
//! No detrending is applied.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::noise_model::NoiseBudget;

pub const RNG_ALGORITHM: &str = "chacha20/seed_from_u64+rand_distr::StandardNormal";

/// Minimum number of synthesized samples.
pub const MIN_SYNTH_SAMPLES: usize = 1 << 12;

/// Half width, in bins, of the region treated as belonging to a line.
pub const LINE_HALF_WIDTH_BINS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub sample_rate: f64,
    /// Displacement, m.
    pub samples: Vec<f64>,
    pub seed: u64,
}

/// Sidecar metadata for the binary time-series export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesSidecar {
    pub format: String,
    pub sample_rate_hz: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub rng: String,
    pub units: String,
}

impl TimeSeries {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }

    pub fn variance(&self) -> f64 {
        let n = self.samples.len() as f64;
        let mean = pairwise_sum(&self.samples) / n;
        let sq: Vec<f64> = self.samples.iter().map(|x| (x - mean).powi(2)).collect();
        pairwise_sum(&sq) / n
    }

    /// Little-endian IEEE-754 f64 samples, no header.
    pub fn write_binary<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for x in &self.samples {
            out.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(bytes: &[u8], sidecar: &TimeSeriesSidecar) -> Result<Self> {
        if !bytes.len().is_multiple_of(8) || bytes.len() / 8 != sidecar.n_samples {
            return Err(Error::Parse(format!(
                "time series holds {} bytes, sidecar promises {} samples",
                bytes.len(),
                sidecar.n_samples
            )));
        }
        Ok(Self {
            sample_rate: sidecar.sample_rate_hz,
            samples: bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
            seed: sidecar.seed,
        })
    }

    pub fn sidecar(&self) -> TimeSeriesSidecar {
        TimeSeriesSidecar {
            format: "f64le".to_string(),
            sample_rate_hz: self.sample_rate,
            n_samples: self.samples.len(),
            seed: self.seed,
            rng: RNG_ALGORITHM.to_string(),
            units: "m".to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Rectangular,
    #[default]
    Hann,
}

impl Window {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            Window::Rectangular => vec![1.0; len],
            Window::Hann => (0..len)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
                .collect(),
        }
    }
}

impl std::str::FromStr for Window {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hann" | "hanning" => Ok(Window::Hann),
            "rect" | "rectangular" | "boxcar" => Ok(Window::Rectangular),
            other => Err(Error::Parse(format!("unknown window {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Spectrum {
    /// Bin frequencies, Hz, starting at DC.
    pub frequencies: Vec<f64>,
    /// One-sided ASD, m/√Hz.
    pub asd: Vec<f64>,
    /// Bin spacing, Hz.
    pub resolution: f64,
    pub n_averages: usize,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    /// Index of the bin closest to `f`.
    pub fn nearest_bin(&self, f: f64) -> usize {
        let i = self.frequencies.partition_point(|&x| x < f);
        if i == 0 {
            0
        } else if i == self.len() || f - self.frequencies[i - 1] <= self.frequencies[i] - f {
            i - 1
        } else {
            i
        }
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "f_hz,asd_m_per_sqrthz")?;
        for (f, a) in self.frequencies.iter().zip(&self.asd) {
            writeln!(out, "{f:.16e},{a:.16e}")?;
        }
        Ok(())
    }

    /// Reads the `f_hz,asd_m_per_sqrthz` CSV. Resolution is taken from the
    /// first bin spacing; the averaging count is not stored and reads as 0.
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty spectrum file".into()))?
            .map_err(|e| Error::Parse(e.to_string()))?;
        if header.trim() != "f_hz,asd_m_per_sqrthz" {
            return Err(Error::Parse(format!("unexpected spectrum header {header:?}")));
        }
        let (mut frequencies, mut asd) = (Vec::new(), Vec::new());
        for (row, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::Parse(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut cols = line.split(',');
            let mut next = || -> Result<f64> {
                cols.next()
                    .and_then(|c| c.trim().parse().ok())
                    .ok_or_else(|| Error::Parse(format!("bad spectrum row {}: {line:?}", row + 2)))
            };
            frequencies.push(next()?);
            asd.push(next()?);
        }
        if frequencies.len() < 2 {
            return Err(Error::Parse("spectrum needs at least two bins".into()));
        }
        if frequencies.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Parse("spectrum frequencies must increase".into()));
        }
        Ok(Self {
            resolution: frequencies[1] - frequencies[0],
            frequencies,
            asd,
            n_averages: 0,
        })
    }
}

/// Deterministic pairwise summation.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 8;
    if xs.len() <= LEAF {
        return xs.iter().sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Line {
    /// Frequency, Hz.
    pub f0: f64,
    /// Peak displacement amplitude, m.
    pub amplitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSettings {
    pub sample_rate: f64,
    /// Seconds.
    pub duration: f64,
    pub seed: u64,
    /// Band in which the budget is realized; defaults to the budget grid span
    /// clipped at Nyquist.
    pub band: Option<(f64, f64)>,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            sample_rate: 256e3,
            duration: 4.0,
            seed: 0,
            band: None,
        }
    }
}

/// Piecewise-linear PSD in log frequency, evaluated at sorted `targets`.
fn interpolate_psd(grid: &[f64], psd: &[f64], f: f64) -> f64 {
    if grid.len() == 1 {
        return psd[0];
    }
    let i = grid.partition_point(|&g| g <= f).clamp(1, grid.len() - 1);
    let (f0, f1) = (grid[i - 1], grid[i]);
    let t = ((f / f0).ln() / (f1 / f0).ln()).clamp(0.0, 1.0);
    psd[i - 1] + t * (psd[i] - psd[i - 1])
}

/// Gaussian noise colored to `budget.total`, plus an optional line.
pub fn synthesize(budget: &NoiseBudget, settings: &SynthSettings, line: Option<Line>) -> Result<TimeSeries> {
    let fs = settings.sample_rate;
    if !(fs > 0.0 && fs.is_finite() && settings.duration > 0.0) {
        return Err(domain("sample rate and duration must be positive"));
    }
    let n = (fs * settings.duration).round() as usize;
    if n < MIN_SYNTH_SAMPLES {
        return Err(domain(format!(
            "duration x sample_rate = {n} samples, need at least {MIN_SYNTH_SAMPLES}"
        )));
    }
    if budget.is_empty() {
        return Err(domain("budget is empty"));
    }
    let nyquist = fs / 2.0;
    if let Some(l) = line {
        if !(l.f0 > 0.0 && l.f0 < nyquist) {
            return Err(Error::Aliasing {
                frequency: l.f0,
                nyquist,
            });
        }
    }
    let grid = &budget.frequencies;
    let (grid_lo, grid_hi) = (grid[0], grid[grid.len() - 1]);
    let (lo, hi) = settings.band.unwrap_or((grid_lo, grid_hi.min(nyquist)));
    if hi > nyquist {
        return Err(Error::Aliasing { frequency: hi, nyquist });
    }
    if !(lo <= hi) || lo < grid_lo || hi > grid_hi {
        return Err(Error::GridCoverage {
            lo,
            hi,
            grid_lo,
            grid_hi,
        });
    }

    let mut rng = ChaCha20Rng::seed_from_u64(settings.seed);
    let mut buf: Vec<Complex64> = (0..n)
        .map(|_| Complex64::new(StandardNormal.sample(&mut rng), 0.0))
        .collect();

    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);

    let psd: Vec<f64> = budget.total.iter().map(|a| a * a).collect();
    let df = fs / n as f64;
    for k in 0..=n / 2 {
        let f = k as f64 * df;
        let gain = if k > 0 && f >= lo && f <= hi {
            (interpolate_psd(grid, &psd, f) * fs / 2.0).sqrt()
        } else {
            0.0
        };
        buf[k] *= gain;
        if k != 0 && k != n - k {
            buf[n - k] *= gain;
        }
    }

    planner.plan_fft_inverse(n).process(&mut buf);
    let scale = 1.0 / n as f64;
    let mut samples: Vec<f64> = buf.iter().map(|c| c.re * scale).collect();

    if let Some(l) = line {
        let w = 2.0 * PI * l.f0 / fs;
        for (i, x) in samples.iter_mut().enumerate() {
            *x += l.amplitude * (w * i as f64).sin();
        }
    }

    Ok(TimeSeries {
        sample_rate: fs,
        samples,
        seed: settings.seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WelchSettings {
    pub segment_length: usize,
    pub overlap_fraction: f64,
    pub window: Window,
}

impl Default for WelchSettings {
    fn default() -> Self {
        Self {
            segment_length: 8192,
            overlap_fraction: 0.5,
            window: Window::Hann,
        }
    }
}

/// Averaged-periodogram one-sided ASD. See the module docs for the exact
/// normalization.
pub fn welch_asd(ts: &TimeSeries, segment_length: usize, overlap_fraction: f64, window: Window) -> Result<Spectrum> {
    let len = segment_length;
    if len < 2 {
        return Err(Error::DegenerateSegment(format!("segment length {len} < 2")));
    }
    if len > ts.len() {
        return Err(Error::DegenerateSegment(format!(
            "segment length {len} exceeds series length {}",
            ts.len()
        )));
    }
    if !(0.0..1.0).contains(&overlap_fraction) {
        return Err(Error::DegenerateSegment(format!(
            "overlap fraction {overlap_fraction} outside [0, 1)"
        )));
    }
    if !(ts.sample_rate > 0.0) {
        return Err(domain("sample rate must be positive"));
    }
    let step = (len - (overlap_fraction * len as f64).round() as usize).max(1);
    let n_segments = (ts.len() - len) / step + 1;

    let w = window.coefficients(len);
    let norm = ts.sample_rate * pairwise_sum(&w.iter().map(|x| x * x).collect::<Vec<_>>());
    let n_bins = len / 2 + 1;
    let fft = FftPlanner::new().plan_fft_forward(len);

    let periodograms: Vec<Vec<f64>> = (0..n_segments)
        .into_par_iter()
        .map(|s| {
            let seg = &ts.samples[s * step..s * step + len];
            let mut buf: Vec<Complex64> = seg.iter().zip(&w).map(|(x, w)| Complex64::new(x * w, 0.0)).collect();
            fft.process(&mut buf);
            (0..n_bins)
                .map(|k| {
                    let one_sided = if k == 0 || 2 * k == len { 1.0 } else { 2.0 };
                    one_sided * buf[k].norm_sqr() / norm
                })
                .collect()
        })
        .collect();

    let mut column = vec![0.0; n_segments];
    let asd = (0..n_bins)
        .map(|k| {
            for (c, p) in column.iter_mut().zip(&periodograms) {
                *c = p[k];
            }
            (pairwise_sum(&column) / n_segments as f64).sqrt()
        })
        .collect();

    let resolution = ts.sample_rate / len as f64;
    Ok(Spectrum {
        frequencies: (0..n_bins).map(|k| k as f64 * resolution).collect(),
        asd,
        resolution,
        n_averages: n_segments,
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median ASD over bins with `f_lo <= f <= f_hi`; needs at least five bins.
pub fn band_median(spec: &Spectrum, f_lo: f64, f_hi: f64) -> Result<f64> {
    let mut values: Vec<f64> = spec
        .frequencies
        .iter()
        .zip(&spec.asd)
        .filter(|(f, _)| **f >= f_lo && **f <= f_hi)
        .map(|(_, a)| *a)
        .collect();
    if values.len() < 5 {
        return Err(Error::EmptyBand {
            lo: f_lo,
            hi: f_hi,
            bins: values.len(),
            needed: 5,
        });
    }
    Ok(median(&mut values))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LineMeasurement {
    /// Peak ASD over the floor median.
    pub snr: f64,
    /// Sinusoid amplitude recovered from the line power, m.
    pub amplitude: f64,
    pub peak_asd: f64,
    pub peak_frequency: f64,
    pub floor: f64,
}

/// Measures a line at `f0` against the floor median of `floor_band`.
///
/// The amplitude comes from the floor-subtracted power in `f0 ± 3` bins,
/// `A = sqrt(2 Σ (P_k − floor²) Δf)`; the density normalization of
/// [`welch_asd`] makes this independent of the window.
pub fn line_snr(spec: &Spectrum, f0: f64, floor_band: (f64, f64)) -> Result<LineMeasurement> {
    let n = spec.len();
    if n < 2 || !(f0 >= spec.frequencies[0] && f0 <= spec.frequencies[n - 1]) {
        return Err(domain(format!("line frequency {f0} Hz outside the spectrum")));
    }
    let centre = spec.nearest_bin(f0);
    let guard = LINE_HALF_WIDTH_BINS as f64 * spec.resolution;
    let (lo, hi) = floor_band;
    if lo <= f0 + guard && hi >= f0 - guard {
        return Err(domain(format!(
            "floor band [{lo}, {hi}] Hz overlaps the line region {f0} ± {guard} Hz"
        )));
    }
    let floor = band_median(spec, lo, hi)?;

    let peak_range = centre.saturating_sub(1)..=(centre + 1).min(n - 1);
    let peak_bin = peak_range
        .max_by(|&a, &b| spec.asd[a].total_cmp(&spec.asd[b]))
        .expect("nonempty range");
    let peak = spec.asd[peak_bin];
    if !(peak >= 2.0 * floor) {
        return Err(Error::LineNotFound { f0, peak, floor });
    }

    let lo_bin = centre.saturating_sub(LINE_HALF_WIDTH_BINS);
    let hi_bin = (centre + LINE_HALF_WIDTH_BINS).min(n - 1);
    let excess: Vec<f64> = (lo_bin..=hi_bin)
        .map(|k| (spec.asd[k].powi(2) - floor * floor).max(0.0) * spec.resolution)
        .collect();
    Ok(LineMeasurement {
        snr: peak / floor,
        amplitude: (2.0 * pairwise_sum(&excess)).sqrt(),
        peak_asd: peak,
        peak_frequency: spec.frequencies[peak_bin],
        floor,
    })
}
