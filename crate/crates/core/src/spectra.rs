//! Fourier analysis of correlation traces.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::correlator::check_uniform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Window {
    None,
    Hann,
}

impl std::str::FromStr for Window {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "rect" => Ok(Window::None),
            "hann" => Ok(Window::Hann),
            other => Err(Error::InvalidParameter(format!("unknown window '{other}'"))),
        }
    }
}

/// One-sided DFT magnitude, bins `0 ..= N/2`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Spectrum {
    /// Hz.
    pub frequencies: Vec<f64>,
    pub magnitudes: Vec<f64>,
    pub window: Window,
    /// Length of the transformed trace.
    pub n_samples: usize,
    /// Delay step of the trace, s.
    pub dtau: f64,
}

impl Spectrum {
    pub fn bin_width(&self) -> f64 {
        1.0 / (self.n_samples as f64 * self.dtau)
    }

    /// Σ|X_k|² over all N two-sided bins, reconstructed from the one-sided
    /// half (real input ⇒ |X_k| = |X_{N−k}|).
    pub fn two_sided_power(&self) -> f64 {
        let n = self.n_samples;
        self.magnitudes
            .iter()
            .enumerate()
            .map(|(k, m)| {
                let mult = if k == 0 || (n.is_multiple_of(2) && k == n / 2) {
                    1.0
                } else {
                    2.0
                };
                mult * m * m
            })
            .sum()
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "freq_THz,magnitude")?;
        for (f, m) in self.frequencies.iter().zip(&self.magnitudes) {
            writeln!(w, "{:.9},{:.9e}", f * 1e-12, m)?;
        }
        Ok(())
    }
}

pub const MIN_SPECTRUM_POINTS: usize = 16;

/// |DFT| of `values` sampled on the uniform grid `taus`.
///
/// `demean` removes the average first, which g² traces need so the DC term
/// does not swamp the 2ν₀ component.
pub fn correlation_spectrum(taus: &[f64], values: &[f64], window: Window, demean: bool) -> Result<Spectrum> {
    let n = values.len();
    if n < MIN_SPECTRUM_POINTS || taus.len() != n {
        return Err(Error::InvalidParameter(format!(
            "spectrum needs ≥ {MIN_SPECTRUM_POINTS} points and matching delays (got {n} values, {} delays)",
            taus.len()
        )));
    }
    check_uniform(taus)?;
    let dtau = (taus[n - 1] - taus[0]) / (n - 1) as f64;
    if !(dtau > 0.0) {
        return Err(Error::NonUniformGrid);
    }
    let mean = if demean {
        values.iter().sum::<f64>() / n as f64
    } else {
        0.0
    };
    let mut buf: Vec<Complex64> = values
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let w = match window {
                Window::None => 1.0,
                Window::Hann => 0.5 - 0.5 * (2.0 * PI * k as f64 / (n - 1) as f64).cos(),
            };
            Complex64::new((v - mean) * w, 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let half = n / 2;
    Ok(Spectrum {
        frequencies: (0..=half).map(|k| k as f64 / (n as f64 * dtau)).collect(),
        magnitudes: buf[..=half].iter().map(|c| c.norm()).collect(),
        window,
        n_samples: n,
        dtau,
    })
}

/// Frequency of the largest magnitude in `[lo, hi]`, refined by a parabola
/// through the peak bin and its neighbours.
pub fn peak_frequency(spec: &Spectrum, lo: f64, hi: f64) -> Result<f64> {
    let idx: Vec<usize> = (0..spec.frequencies.len())
        .filter(|&k| spec.frequencies[k] >= lo && spec.frequencies[k] <= hi)
        .collect();
    let Some(&k) = idx
        .iter()
        .max_by(|a, b| spec.magnitudes[**a].total_cmp(&spec.magnitudes[**b]))
    else {
        return Err(Error::EmptyBand { lo, hi });
    };
    let df = spec.bin_width();
    if k == 0 || k + 1 >= spec.magnitudes.len() {
        return Ok(spec.frequencies[k]);
    }
    let (a, b, c) = (spec.magnitudes[k - 1], spec.magnitudes[k], spec.magnitudes[k + 1]);
    let denom = a - 2.0 * b + c;
    let shift = if denom != 0.0 { 0.5 * (a - c) / denom } else { 0.0 };
    Ok(spec.frequencies[k] + shift.clamp(-0.5, 0.5) * df)
}
