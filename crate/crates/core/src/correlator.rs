//! Streaming estimation of g¹(τ) and g²(τ) with ON/OFF noise subtraction.
//!
//! Moment sums are kept per modulation period and per ON/OFF class. Totals
//! are formed with compensated summation over periods, and error bars come
//! from a delete-one-period jackknife.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rayon::prelude::*;
use serde::Serialize;

use crate::eos::{
    modulation_runs, sample_pulse_stream, DetectorParams, Modulation, PairedStream, PulseSampleStream, PulseSampler,
};
use crate::error::{Error, Result};
use crate::model::{derive_seed, FieldTrace, FWHM_PER_SIGMA};
use crate::sources::SourceSpec;

/// Raw power sums of one class over a set of pulses.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MomentSums {
    pub n: u64,
    pub x: f64,
    pub y: f64,
    pub xy: f64,
    pub xx: f64,
    pub yy: f64,
    pub xxyy: f64,
    pub x4: f64,
    pub y4: f64,
}

impl MomentSums {
    #[inline]
    fn add_run(&mut self, samples: &[(f64, f64)]) {
        let (mut sx, mut sy, mut sxy, mut sxx, mut syy, mut sxxyy, mut sx4, mut sy4) =
            (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for &(x, y) in samples {
            let xx = x * x;
            let yy = y * y;
            sx += x;
            sy += y;
            sxy += x * y;
            sxx += xx;
            syy += yy;
            sxxyy += xx * yy;
            sx4 += xx * xx;
            sy4 += yy * yy;
        }
        self.n += samples.len() as u64;
        self.x += sx;
        self.y += sy;
        self.xy += sxy;
        self.xx += sxx;
        self.yy += syy;
        self.xxyy += sxxyy;
        self.x4 += sx4;
        self.y4 += sy4;
    }

    #[inline]
    fn add_pair(&mut self, x: f64, y: f64) {
        let xx = x * x;
        let yy = y * y;
        self.n += 1;
        self.x += x;
        self.y += y;
        self.xy += x * y;
        self.xx += xx;
        self.yy += yy;
        self.xxyy += xx * yy;
        self.x4 += xx * xx;
        self.y4 += yy * yy;
    }

    fn merge(&mut self, o: &MomentSums) {
        self.n += o.n;
        self.x += o.x;
        self.y += o.y;
        self.xy += o.xy;
        self.xx += o.xx;
        self.yy += o.yy;
        self.xxyy += o.xxyy;
        self.x4 += o.x4;
        self.y4 += o.y4;
    }

    fn fields(&self) -> [f64; 8] {
        [self.x, self.y, self.xy, self.xx, self.yy, self.xxyy, self.x4, self.y4]
    }

    fn from_fields(n: u64, f: [f64; 8]) -> Self {
        Self {
            n,
            x: f[0],
            y: f[1],
            xy: f[2],
            xx: f[3],
            yy: f[4],
            xxyy: f[5],
            x4: f[6],
            y4: f[7],
        }
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    #[inline]
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Class means used by the estimators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMoments {
    pub n: u64,
    pub xy: f64,
    pub xx: f64,
    pub yy: f64,
    pub xxyy: f64,
}

impl ClassMoments {
    fn from_sums(s: &MomentSums) -> Self {
        let n = s.n as f64;
        if s.n == 0 {
            return Self {
                n: 0,
                xy: 0.0,
                xx: 0.0,
                yy: 0.0,
                xxyy: 0.0,
            };
        }
        Self {
            n: s.n,
            xy: s.xy / n,
            xx: s.xx / n,
            yy: s.yy / n,
            xxyy: s.xxyy / n,
        }
    }
}

/// Per-class sums keyed by modulation period. Index 0 is ON, 1 is OFF.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SufficientStats {
    blocks: BTreeMap<u64, [MomentSums; 2]>,
}

#[inline]
fn class_index(state: Modulation) -> usize {
    match state {
        Modulation::On => 0,
        Modulation::Off => 1,
    }
}

impl SufficientStats {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add the pulses `first .. first + samples.len()` of a stream.
    pub fn add_samples(&mut self, first: u64, samples: &[(f64, f64)], params: &DetectorParams) {
        for (block, state, a, b) in modulation_runs(first, samples.len() as u64, params) {
            let run = &samples[(a - first) as usize..(b - first) as usize];
            self.blocks.entry(block).or_default()[class_index(state)].add_run(run);
        }
    }

    pub fn add_pair(&mut self, block: u64, state: Modulation, x: f64, y: f64) {
        self.blocks.entry(block).or_default()[class_index(state)].add_pair(x, y);
    }

    pub fn merge(&mut self, other: &SufficientStats) {
        for (k, v) in &other.blocks {
            let e = self.blocks.entry(*k).or_default();
            e[0].merge(&v[0]);
            e[1].merge(&v[1]);
        }
    }

    pub fn merged(mut self, other: &SufficientStats) -> Self {
        self.merge(other);
        self
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Compensated totals of one class, optionally leaving out one period.
    fn class_total(&self, class: usize, skip: Option<u64>) -> MomentSums {
        let mut acc = [CompensatedSum::default(); 8];
        let mut n = 0;
        for (k, v) in &self.blocks {
            if Some(*k) == skip {
                continue;
            }
            n += v[class].n;
            for (a, f) in acc.iter_mut().zip(v[class].fields()) {
                a.add(f);
            }
        }
        MomentSums::from_fields(n, acc.map(|a| a.value()))
    }

    pub fn on_totals(&self) -> MomentSums {
        self.class_total(0, None)
    }

    pub fn off_totals(&self) -> MomentSums {
        self.class_total(1, None)
    }

    pub fn counts(&self) -> (u64, u64) {
        (self.on_totals().n, self.off_totals().n)
    }

    fn moments(&self, skip: Option<u64>) -> (ClassMoments, ClassMoments) {
        (
            ClassMoments::from_sums(&self.class_total(0, skip)),
            ClassMoments::from_sums(&self.class_total(1, skip)),
        )
    }

    /// Point estimate of `f` and its delete-one-period jackknife error.
    ///
    /// With fewer than two periods the error is reported as infinite.
    pub fn jackknife<F>(&self, f: F) -> Result<Estimate>
    where
        F: Fn(&ClassMoments, &ClassMoments) -> Result<f64>,
    {
        let (on, off) = self.moments(None);
        let value = f(&on, &off)?;
        let b = self.blocks.len();
        if b < 2 {
            return Ok(Estimate {
                value,
                stderr: f64::INFINITY,
            });
        }
        let mut reps = Vec::with_capacity(b);
        for k in self.blocks.keys() {
            let (on, off) = self.moments(Some(*k));
            reps.push(f(&on, &off)?);
        }
        let mean = reps.iter().sum::<f64>() / b as f64;
        let ss: f64 = reps.iter().map(|r| (r - mean).powi(2)).sum();
        Ok(Estimate {
            value,
            stderr: ((b as f64 - 1.0) / b as f64 * ss).sqrt(),
        })
    }
}

/// Single-pass accumulation of a pulse stream.
pub fn accumulate(stream: &PulseSampleStream) -> SufficientStats {
    let mut s = SufficientStats::new();
    s.add_samples(stream.first_index, &stream.samples, &stream.params);
    s
}

/// Accumulation of a cross-shot paired stream.
pub fn accumulate_pairs(stream: &PairedStream) -> SufficientStats {
    let mut s = SufficientStats::new();
    for &(block, state, x, y) in &stream.pairs {
        s.add_pair(block, state, x, y);
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

/// Absolute variance floor ε·nef² in (V/m)².
pub fn variance_floor(eps: f64, nef: f64) -> f64 {
    eps * nef * nef
}

pub const DEFAULT_FLOOR_EPS: f64 = 0.01;

fn corrected_variances(on: &ClassMoments, off: &ClassMoments, floor: f64) -> Result<(f64, f64)> {
    if on.n == 0 {
        return Err(Error::InsufficientSignal {
            vx: 0.0,
            vy: 0.0,
            floor,
        });
    }
    let vx = on.xx - off.xx;
    let vy = on.yy - off.yy;
    if !(vx > floor) || !(vy > floor) {
        return Err(Error::InsufficientSignal { vx, vy, floor });
    }
    Ok((vx, vy))
}

/// C_xy / √(V_x V_y) with lock-in corrected moments.
pub fn g1_from_moments(on: &ClassMoments, off: &ClassMoments, floor: f64) -> Result<f64> {
    let (vx, vy) = corrected_variances(on, off, floor)?;
    Ok((on.xy - off.xy) / (vx * vy).sqrt())
}

/// Noise-corrected fourth moment over the product of corrected variances.
pub fn g2_from_moments(on: &ClassMoments, off: &ClassMoments, floor: f64) -> Result<f64> {
    let (vx, vy) = corrected_variances(on, off, floor)?;
    let q = on.xxyy - off.xx * vy - off.yy * vx - off.xxyy;
    Ok(q / (vx * vy))
}

/// ⟨x²y²⟩_ON / (V_x V_y): the fourth moment with no noise subtraction.
pub fn g2_uncorrected_from_moments(on: &ClassMoments, off: &ClassMoments, floor: f64) -> Result<f64> {
    let (vx, vy) = corrected_variances(on, off, floor)?;
    Ok(on.xxyy / (vx * vy))
}

pub fn estimate_g1(stats: &SufficientStats, floor: f64) -> Result<Estimate> {
    stats.jackknife(|on, off| g1_from_moments(on, off, floor))
}

pub fn estimate_g2(stats: &SufficientStats, floor: f64) -> Result<Estimate> {
    stats.jackknife(|on, off| g2_from_moments(on, off, floor))
}

pub fn estimate_g2_uncorrected(stats: &SufficientStats, floor: f64) -> Result<Estimate> {
    stats.jackknife(|on, off| g2_uncorrected_from_moments(on, off, floor))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationTrace {
    /// Delays, s.
    pub taus: Vec<f64>,
    pub g1: Vec<Estimate>,
    pub g2_raw: Vec<Estimate>,
    pub g2_envelope: Vec<Estimate>,
    pub n_pulses: Vec<u64>,
    pub nef: f64,
    pub nu0: f64,
}

impl CorrelationTrace {
    pub fn from_stats(taus: Vec<f64>, stats: &[SufficientStats], floor: f64, nef: f64, nu0: f64) -> Result<Self> {
        let mut g1 = Vec::with_capacity(stats.len());
        let mut g2 = Vec::with_capacity(stats.len());
        let mut n = Vec::with_capacity(stats.len());
        for s in stats {
            g1.push(estimate_g1(s, floor)?);
            g2.push(estimate_g2(s, floor)?);
            let (a, b) = s.counts();
            n.push(a + b);
        }
        Ok(Self {
            taus,
            g1,
            g2_envelope: g2.clone(),
            g2_raw: g2,
            n_pulses: n,
            nef,
            nu0,
        })
    }

    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    /// Index of the delay closest to `tau`.
    pub fn nearest(&self, tau: f64) -> usize {
        let mut best = 0;
        for (i, t) in self.taus.iter().enumerate() {
            if (t - tau).abs() < (self.taus[best] - tau).abs() {
                best = i;
            }
        }
        best
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W, header: &[String]) -> std::io::Result<()> {
        for h in header {
            writeln!(w, "# {h}")?;
        }
        writeln!(w, "tau_fs,g1,g1_err,g2_raw,g2_raw_err,g2_env,g2_env_err")?;
        for i in 0..self.len() {
            writeln!(
                w,
                "{:.6},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
                self.taus[i] * 1e15,
                self.g1[i].value,
                self.g1[i].stderr,
                self.g2_raw[i].value,
                self.g2_raw[i].stderr,
                self.g2_envelope[i].value,
                self.g2_envelope[i].stderr
            )?;
        }
        Ok(())
    }
}

/// Gaussian smoothing of g²(τ) over `n_cycles` optical cycles.
///
/// The window has FWHM `n_cycles / nu0` and is renormalized at the grid
/// edges. Errors add in quadrature (different delays are independent).
pub fn few_cycle_envelope(trace: &CorrelationTrace, nu0: f64, n_cycles: f64) -> Result<Vec<Estimate>> {
    let n = trace.len();
    if !(nu0 > 0.0) || !(n_cycles > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "envelope needs nu0 > 0 and n_cycles > 0 (got {nu0}, {n_cycles})"
        )));
    }
    if n >= 2 {
        let max = 1.0 / (4.0 * nu0);
        let step = (trace.taus[n - 1] - trace.taus[0]).abs() / (n - 1) as f64;
        let worst = trace.taus.windows(2).map(|w| (w[1] - w[0]).abs()).fold(step, f64::max);
        if !(worst < max) {
            return Err(Error::GridTooCoarse { step: worst, max });
        }
    }
    let sigma = n_cycles / nu0 / FWHM_PER_SIGMA;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (mut num, mut den, mut var) = (0.0, 0.0, 0.0);
        for k in 0..n {
            let u = (trace.taus[k] - trace.taus[i]) / sigma;
            let w = (-0.5 * u * u).exp();
            num += w * trace.g2_raw[k].value;
            den += w;
            var += w * w * trace.g2_raw[k].stderr.powi(2);
        }
        out.push(Estimate {
            value: num / den,
            stderr: var.sqrt() / den,
        });
    }
    Ok(out)
}

/// Attenuation of the 2ν₀ ripple by the envelope window, exp(−2(2πν₀σ_w)²).
pub fn envelope_ripple_attenuation(n_cycles: f64) -> f64 {
    let sigma_nu = n_cycles / FWHM_PER_SIGMA;
    (-2.0 * (2.0 * PI * sigma_nu).powi(2)).exp()
}

/// Field model fed to a delay scan.
#[derive(Debug, Clone)]
pub enum ScanSource {
    /// A fresh realization per delay, seeded from the scan seed.
    Synthetic(SourceSpec),
    /// One fixed trace sampled at every delay.
    Trace(FieldTrace),
}

impl ScanSource {
    pub fn nu0(&self) -> f64 {
        match self {
            ScanSource::Synthetic(s) => s.nu0,
            ScanSource::Trace(t) => t.descriptor().nu0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanSettings {
    pub n_pulses: u64,
    pub floor_eps: f64,
    pub envelope_cycles: f64,
}

impl Default for ScanSettings {
    fn default() -> Self {
        Self {
            n_pulses: 1_000_000,
            floor_eps: DEFAULT_FLOOR_EPS,
            envelope_cycles: 2.0,
        }
    }
}

/// Trace and detector sampler for one delay of a scan.
fn scan_point_setup(
    source: &ScanSource,
    tau: f64,
    index: usize,
    n_pulses: u64,
    detector: &DetectorParams,
    seed: u64,
) -> Result<(FieldTrace, u64)> {
    let source_seed = derive_seed(seed, &format!("scan/source/{index}"));
    let noise_seed = derive_seed(seed, &format!("scan/noise/{index}"));
    let dt = detector.pulse_period();
    let trace = match source {
        ScanSource::Synthetic(spec) => {
            let margin = tau.abs() + 1e-9;
            spec.build(-margin, n_pulses as f64 * dt + margin, source_seed)?
        }
        ScanSource::Trace(t) => t.clone(),
    };
    Ok((trace, noise_seed))
}

/// Accumulated statistics for one delay, generated period by period.
pub fn scan_point_stats(
    source: &ScanSource,
    tau: f64,
    index: usize,
    n_pulses: u64,
    detector: &DetectorParams,
    seed: u64,
) -> Result<SufficientStats> {
    let (trace, noise_seed) = scan_point_setup(source, tau, index, n_pulses, detector, seed)?;
    let sampler = PulseSampler::new(&trace, tau, *detector, noise_seed)?;
    let period = detector.mod_period_pulses as u64;
    let mut stats = SufficientStats::new();
    let mut buf = Vec::new();
    let mut first = 0;
    while first < n_pulses {
        let len = period.min(n_pulses - first);
        buf.resize(len as usize, (0.0, 0.0));
        sampler.fill(first, &mut buf)?;
        stats.add_samples(first, &buf, detector);
        first += len;
    }
    Ok(stats)
}

/// The raw pulse stream behind `scan_point_stats` for the same arguments.
pub fn scan_point_stream(
    source: &ScanSource,
    tau: f64,
    index: usize,
    n_pulses: u64,
    detector: &DetectorParams,
    seed: u64,
) -> Result<PulseSampleStream> {
    let (trace, noise_seed) = scan_point_setup(source, tau, index, n_pulses, detector, seed)?;
    sample_pulse_stream(&trace, tau, n_pulses, detector, noise_seed)
}

/// Full delay scan: sample, accumulate and estimate at every delay, then
/// apply the few-cycle envelope.
pub fn correlation_scan(
    source: &ScanSource,
    taus: &[f64],
    settings: &ScanSettings,
    detector: &DetectorParams,
    seed: u64,
) -> Result<CorrelationTrace> {
    check_uniform(taus)?;
    let stats: Vec<SufficientStats> = taus
        .par_iter()
        .enumerate()
        .map(|(i, &tau)| scan_point_stats(source, tau, i, settings.n_pulses, detector, seed))
        .collect::<Result<_>>()?;
    let floor = variance_floor(settings.floor_eps, detector.nef);
    let mut trace = CorrelationTrace::from_stats(taus.to_vec(), &stats, floor, detector.nef, source.nu0())?;
    trace.g2_envelope = few_cycle_envelope(&trace, source.nu0(), settings.envelope_cycles)?;
    Ok(trace)
}

pub fn check_uniform(taus: &[f64]) -> Result<()> {
    if taus.len() < 3 {
        return Ok(());
    }
    let step = (taus[taus.len() - 1] - taus[0]) / (taus.len() - 1) as f64;
    for (k, t) in taus.iter().enumerate() {
        let want = taus[0] + k as f64 * step;
        if (t - want).abs() > 1e-6 * step.abs().max(1e-18) {
            return Err(Error::NonUniformGrid);
        }
    }
    Ok(())
}

/// `n` points from `start` to `stop` inclusive.
pub fn uniform_grid(start: f64, stop: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![start];
    }
    (0..n)
        .map(|k| start + (stop - start) * k as f64 / (n - 1) as f64)
        .collect()
}
