//! Virtual two-probe electro-optic sampling detector.
//!
//! Two probe pulses per laser shot read the field at `t_i` and `t_i + τ`
//! through a Gaussian temporal window. Each channel adds independent Gaussian
//! noise of standard deviation `nef`. The source is gated by a square-wave
//! modulation whose period starts ON at pulse 0.

use std::io::{Read, Write};
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{derive_stream, FieldSampler, FieldTrace, FWHM_PER_SIGMA, PROBE_HALF_WIDTH_SIGMAS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetectorParams {
    /// Probe pulse FWHM, s.
    pub probe_fwhm: f64,
    /// Laser repetition rate, Hz.
    pub f_rep: f64,
    /// Per-pulse noise-equivalent field, V/m.
    pub nef: f64,
    pub mod_period_pulses: u32,
    pub duty_on_pulses: u32,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            probe_fwhm: 146e-15,
            f_rep: 90e6,
            nef: 600.0,
            mod_period_pulses: 18_000,
            duty_on_pulses: 9_000,
        }
    }
}

impl DetectorParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.probe_fwhm > 0.0) {
            return bad(format!("probe_fwhm must be > 0, got {}", self.probe_fwhm));
        }
        if !(self.f_rep > 0.0) {
            return bad(format!("f_rep must be > 0, got {}", self.f_rep));
        }
        if !(self.nef >= 0.0) {
            return bad(format!("nef must be ≥ 0, got {}", self.nef));
        }
        if self.duty_on_pulses == 0 || self.duty_on_pulses > self.mod_period_pulses {
            return bad(format!(
                "need 0 < duty_on_pulses ≤ mod_period_pulses (got {} / {})",
                self.duty_on_pulses, self.mod_period_pulses
            ));
        }
        Ok(())
    }

    pub fn sigma(&self) -> f64 {
        self.probe_fwhm / FWHM_PER_SIGMA
    }

    pub fn pulse_period(&self) -> f64 {
        1.0 / self.f_rep
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Modulation {
    On,
    Off,
}

#[inline]
pub fn modulation_state(i: u64, params: &DetectorParams) -> Modulation {
    if i % (params.mod_period_pulses as u64) < params.duty_on_pulses as u64 {
        Modulation::On
    } else {
        Modulation::Off
    }
}

/// Gaussian-probe reading of `trace` at `t_center`.
pub fn probe_response(trace: &FieldTrace, t_center: f64, probe_fwhm: f64) -> Result<f64> {
    let sigma = probe_fwhm / FWHM_PER_SIGMA;
    check_window(trace, t_center, sigma)?;
    Ok(trace.sampler().probe_average(t_center, sigma))
}

fn check_window(trace: &FieldTrace, t: f64, sigma: f64) -> Result<()> {
    let w = PROBE_HALF_WIDTH_SIGMAS * sigma;
    trace.check(t - w)?;
    trace.check(t + w)
}

/// Two-channel per-pulse samples for one delay.
#[derive(Debug, Clone, PartialEq)]
pub struct PulseSampleStream {
    /// Channel-2 delay, s.
    pub tau: f64,
    /// Index of the first pulse, which fixes the modulation phase.
    pub first_index: u64,
    pub samples: Vec<(f64, f64)>,
    pub params: DetectorParams,
    pub seed: u64,
}

impl PulseSampleStream {
    pub fn n_pulses(&self) -> u64 {
        self.samples.len() as u64
    }

    pub fn state(&self, k: usize) -> Modulation {
        modulation_state(self.first_index + k as u64, &self.params)
    }

    /// Split into `[0, k)` and `[k, n)`, keeping absolute pulse indices.
    pub fn split_at(&self, k: usize) -> (Self, Self) {
        let (a, b) = self.samples.split_at(k);
        let head = Self {
            samples: a.to_vec(),
            ..self.clone()
        };
        let tail = Self {
            first_index: self.first_index + k as u64,
            samples: b.to_vec(),
            ..self.clone()
        };
        (head, tail)
    }
}

/// Runs of consecutive pulses sharing a modulation period and state.
///
/// Yields `(period index, state, first pulse, end pulse)` with pulse numbers
/// absolute.
pub fn modulation_runs(
    first_index: u64,
    n_pulses: u64,
    params: &DetectorParams,
) -> impl Iterator<Item = (u64, Modulation, u64, u64)> + '_ {
    let end = first_index + n_pulses;
    let period = params.mod_period_pulses as u64;
    let duty = params.duty_on_pulses as u64;
    let mut i = first_index;
    std::iter::from_fn(move || {
        if i >= end {
            return None;
        }
        let block = i / period;
        let base = block * period;
        let (state, run_end) = if i - base < duty {
            (Modulation::On, base + duty)
        } else {
            (Modulation::Off, base + period)
        };
        let stop = run_end.min(end);
        let item = (block, state, i, stop);
        i = stop;
        Some(item)
    })
}

/// Pulse-by-pulse simulator that can emit a stream in pieces.
///
/// Noise for modulation period `k` comes from its own derived stream, so
/// output does not depend on how the pulse range is chunked, provided chunks
/// start on period boundaries.
#[derive(Debug, Clone)]
pub struct PulseSampler<'a> {
    trace: &'a FieldTrace,
    tau: f64,
    params: DetectorParams,
    seed: u64,
}

impl<'a> PulseSampler<'a> {
    pub fn new(trace: &'a FieldTrace, tau: f64, params: DetectorParams, seed: u64) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            trace,
            tau,
            params,
            seed,
        })
    }

    /// Fill `out` with the samples of pulses `[first, first + out.len())`.
    pub fn fill(&self, first: u64, out: &mut [(f64, f64)]) -> Result<()> {
        let n = out.len() as u64;
        let dt = self.params.pulse_period();
        let sigma = self.params.sigma();
        let mut bx = Vec::new();
        let mut by = Vec::new();
        for (_, state, a, b) in modulation_runs(first, n, &self.params) {
            if state == Modulation::On {
                let len = (b - a) as usize;
                let t_first = a as f64 * dt;
                let t_last = (b - 1) as f64 * dt;
                for t in [t_first, t_last] {
                    check_window(self.trace, t, sigma)?;
                    check_window(self.trace, t + self.tau, sigma)?;
                }
                bx.resize(len, 0.0);
                by.resize(len, 0.0);
                let sampler = self.trace.sampler();
                sampler.probe_average_grid(t_first, dt, sigma, &mut bx);
                sampler.probe_average_grid(t_first + self.tau, dt, sigma, &mut by);
                for k in 0..len {
                    out[(a - first) as usize + k] = (bx[k], by[k]);
                }
            } else {
                for k in a..b {
                    out[(k - first) as usize] = (0.0, 0.0);
                }
            }
        }
        if self.params.nef > 0.0 {
            self.add_noise(first, out);
        }
        Ok(())
    }

    fn add_noise(&self, first: u64, out: &mut [(f64, f64)]) {
        let period = self.params.mod_period_pulses as u64;
        let end = first + out.len() as u64;
        let mut i = first;
        while i < end {
            let block = i / period;
            let block_start = block * period;
            let block_end = (block_start + period).min(end);
            let mut rng = derive_stream(self.seed, &format!("eos/noise/period/{block}"));
            // Skip draws of pulses in this period that precede the chunk.
            for _ in block_start..i {
                rng.normal();
                rng.normal();
            }
            for k in i..block_end {
                let s = &mut out[(k - first) as usize];
                s.0 += self.params.nef * rng.normal();
                s.1 += self.params.nef * rng.normal();
            }
            i = block_end;
        }
    }
}

/// Sample `n_pulses` shots of `trace` with channel-2 delay `tau`.
pub fn sample_pulse_stream(
    trace: &FieldTrace,
    tau: f64,
    n_pulses: u64,
    params: &DetectorParams,
    seed: u64,
) -> Result<PulseSampleStream> {
    if n_pulses == 0 {
        return Err(Error::InvalidParameter("n_pulses must be ≥ 1".into()));
    }
    let sampler = PulseSampler::new(trace, tau, *params, seed)?;
    let mut samples = vec![(0.0, 0.0); n_pulses as usize];
    sampler.fill(0, &mut samples)?;
    Ok(PulseSampleStream {
        tau,
        first_index: 0,
        samples,
        params: *params,
        seed,
    })
}

/// Pulse pairs taken from different shots.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedStream {
    /// Effective delay τ + n_offset / f_rep, s.
    pub tau: f64,
    pub n_offset: i64,
    /// `(modulation period of the x pulse, state, x, y)`.
    pub pairs: Vec<(u64, Modulation, f64, f64)>,
}

/// Pair `x_i` of `first` with `y_{i+n_offset}` of `second`.
///
/// Only pairs whose two pulses share a modulation state are kept.
pub fn pair_with_offset(first: &PulseSampleStream, second: &PulseSampleStream, n_offset: i64) -> Result<PairedStream> {
    let n = first.samples.len().min(second.samples.len()) as i64;
    if n_offset.unsigned_abs() >= n as u64 {
        return Err(Error::InvalidParameter(format!(
            "|n_offset| = {} must be below the stream length {n}",
            n_offset.unsigned_abs()
        )));
    }
    let period = first.params.mod_period_pulses as u64;
    let mut pairs = Vec::new();
    for i in 0..n {
        let j = i + n_offset;
        if j < 0 || j >= n {
            continue;
        }
        let si = first.state(i as usize);
        let sj = second.state(j as usize);
        if si != sj {
            continue;
        }
        let x = first.samples[i as usize].0;
        let y = second.samples[j as usize].1;
        pairs.push(((first.first_index + i as u64) / period, si, x, y));
    }
    if pairs.is_empty() {
        return Err(Error::AllPairsMixed);
    }
    Ok(PairedStream {
        tau: second.tau + n_offset as f64 / first.params.f_rep,
        n_offset,
        pairs,
    })
}

/// Maps pulse-train time onto a finite trajectory.
///
/// The time `t` is split into the nearest pulse `i` and an offset `u`; pulse
/// `i` is sent to a trajectory time spread over `[lo, hi]` by a golden-ratio
/// sequence while `u` is kept. A free-running source has no timing relation
/// to the probe laser, so sampling its trajectory in scrambled order
/// preserves every statistic that depends on sub-pulse delays only.
#[derive(Debug)]
pub struct AsynchronousFold {
    inner: Arc<dyn FieldSampler>,
    f_rep: f64,
    lo: f64,
    hi: f64,
}

const GOLDEN_FRACTION: f64 = 0.618_033_988_749_894_9;

impl AsynchronousFold {
    pub fn trace(inner: &FieldTrace, f_rep: f64, n_pulses: u64) -> Result<FieldTrace> {
        let (a, b) = inner.span();
        let margin = 0.5 / f_rep + 1e-12;
        let (lo, hi) = (a + margin, b - margin);
        if !(hi > lo) {
            return Err(Error::InvalidParameter(format!(
                "trajectory span {:e} s too short to fold at f_rep = {f_rep:e} Hz",
                b - a
            )));
        }
        let fold = AsynchronousFold {
            inner: inner.sampler().clone(),
            f_rep,
            lo,
            hi,
        };
        let mut descriptor = inner.descriptor().clone();
        descriptor.kind = format!("{} (asynchronously folded)", descriptor.kind);
        FieldTrace::new(
            Arc::new(fold),
            -0.5 / f_rep,
            (n_pulses as f64 + 0.5) / f_rep,
            descriptor,
        )
    }

    #[inline]
    fn map(&self, t: f64) -> f64 {
        let i = (t * self.f_rep).round();
        let u = t - i / self.f_rep;
        let frac = (i * GOLDEN_FRACTION).fract();
        self.lo + frac * (self.hi - self.lo) + u
    }
}

impl FieldSampler for AsynchronousFold {
    fn field(&self, t: f64) -> f64 {
        self.inner.field(self.map(t))
    }

    fn probe_average(&self, t: f64, sigma: f64) -> f64 {
        self.inner.probe_average(self.map(t), sigma)
    }
}

const EOSC_MAGIC: &[u8; 4] = b"EOSC";
const EOSC_VERSION: u32 = 1;

/// Write a stream in the little-endian "EOSC v1" layout.
pub fn write_eosc<W: Write>(mut w: W, stream: &PulseSampleStream) -> Result<()> {
    if stream.first_index != 0 {
        return Err(Error::InvalidParameter("EOSC streams must start at pulse 0".into()));
    }
    let p = &stream.params;
    let mut header = Vec::with_capacity(40);
    header.extend_from_slice(EOSC_MAGIC);
    header.extend_from_slice(&EOSC_VERSION.to_le_bytes());
    header.extend_from_slice(&p.f_rep.to_le_bytes());
    header.extend_from_slice(&p.mod_period_pulses.to_le_bytes());
    header.extend_from_slice(&p.duty_on_pulses.to_le_bytes());
    header.extend_from_slice(&stream.tau.to_le_bytes());
    header.extend_from_slice(&stream.n_pulses().to_le_bytes());
    w.write_all(&header)?;
    let mut buf = Vec::with_capacity(8 * 4096);
    for chunk in stream.samples.chunks(4096) {
        buf.clear();
        for &(x, y) in chunk {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
            buf.extend_from_slice(&(y as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Read an "EOSC v1" stream. Fields absent from the file (probe width, noise
/// level) are taken from `defaults`.
pub fn read_eosc<R: Read>(mut r: R, defaults: &DetectorParams) -> Result<PulseSampleStream> {
    let mut header = [0u8; 40];
    r.read_exact(&mut header)
        .map_err(|e| Error::Format(format!("EOSC header: {e}")))?;
    if &header[0..4] != EOSC_MAGIC {
        return Err(Error::Format("bad magic, not an EOSC file".into()));
    }
    let le_u32 = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap());
    let le_f64 = |o: usize| f64::from_le_bytes(header[o..o + 8].try_into().unwrap());
    let version = le_u32(4);
    if version != EOSC_VERSION {
        return Err(Error::Format(format!("unsupported EOSC version {version}")));
    }
    let params = DetectorParams {
        f_rep: le_f64(8),
        mod_period_pulses: le_u32(16),
        duty_on_pulses: le_u32(20),
        ..*defaults
    };
    params
        .validate()
        .map_err(|e| Error::Format(format!("EOSC header: {e}")))?;
    let tau = le_f64(24);
    let n = u64::from_le_bytes(header[32..40].try_into().unwrap());
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() as u64 != n * 8 {
        return Err(Error::Format(format!(
            "EOSC body holds {} bytes, header promises {n} pulses",
            body.len()
        )));
    }
    let samples = body
        .chunks_exact(8)
        .map(|c| {
            let x = f32::from_le_bytes(c[0..4].try_into().unwrap()) as f64;
            let y = f32::from_le_bytes(c[4..8].try_into().unwrap()) as f64;
            (x, y)
        })
        .collect();
    Ok(PulseSampleStream {
        tau,
        first_index: 0,
        samples,
        params,
        seed: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sources::SourceSpec;

    fn constant_trace(e0: f64) -> FieldTrace {
        #[derive(Debug)]
        struct Const(f64);
        impl FieldSampler for Const {
            fn field(&self, _t: f64) -> f64 {
                self.0
            }
        }
        FieldTrace::new(
            Arc::new(Const(e0)),
            -1e-9,
            1e-9,
            crate::model::SourceDescriptor {
                kind: "const".into(),
                nu0: 0.0,
                amplitude: e0,
            },
        )
        .unwrap()
    }

    #[test]
    fn modulation_convention() {
        let p = DetectorParams::default();
        assert_eq!(modulation_state(0, &p), Modulation::On);
        assert_eq!(modulation_state(8999, &p), Modulation::On);
        assert_eq!(modulation_state(9000, &p), Modulation::Off);
        assert_eq!(modulation_state(17_999, &p), Modulation::Off);
        assert_eq!(modulation_state(18_000, &p), Modulation::On);
    }

    #[test]
    fn runs_cover_range() {
        let p = DetectorParams::default();
        let runs: Vec<_> = modulation_runs(5000, 30_000, &p).collect();
        assert_eq!(
            runs,
            vec![
                (0, Modulation::On, 5000, 9000),
                (0, Modulation::Off, 9000, 18_000),
                (1, Modulation::On, 18_000, 27_000),
                (1, Modulation::Off, 27_000, 35_000),
            ]
        );
    }

    #[test]
    fn probe_passes_constant_field() {
        let tr = constant_trace(123.0);
        let r = probe_response(&tr, 0.0, 146e-15).unwrap();
        assert!((r - 123.0).abs() < 1e-12);
    }

    #[test]
    fn probe_attenuates_2p3_thz_to_0p669() {
        let spec = SourceSpec::coherent(2.3e12, 1.0);
        let tr = spec.build(0.0, 1e-6, 0).unwrap();
        // Locate a maximum of the unfiltered field and compare amplitudes via quadrature.
        let sigma = 146e-15 / FWHM_PER_SIGMA;
        let q = |t: f64| crate::model::gaussian_quadrature(|s| tr.sampler().field(s), t, sigma);
        let peak = (0..2000).map(|k| q(1e-9 + k as f64 * 1e-15).abs()).fold(0.0, f64::max);
        assert!((peak - 0.669).abs() < 2e-3, "{peak}");
    }

    #[test]
    fn probe_kills_high_frequencies() {
        let spec = SourceSpec::coherent(30e12, 1.0);
        let tr = spec.build(0.0, 1e-6, 0).unwrap();
        let r = probe_response(&tr, 5e-9, 146e-15).unwrap();
        assert!(r.abs() < 1e-6);
    }

    #[test]
    fn probe_window_must_fit() {
        let tr = constant_trace(1.0);
        assert!(probe_response(&tr, 1e-9, 146e-15).is_err());
    }

    #[test]
    fn noise_free_zero_delay_channels_identical() {
        let spec = SourceSpec::coherent(2.3e12, 6000.0);
        let tr = spec.build(-1e-9, 1e-3, 1).unwrap();
        let p = DetectorParams {
            nef: 0.0,
            ..Default::default()
        };
        let s = sample_pulse_stream(&tr, 0.0, 40_000, &p, 2).unwrap();
        assert!(s.samples.iter().all(|(x, y)| x == y));
    }

    #[test]
    fn chunked_sampling_matches_whole() {
        let spec = SourceSpec::coherent(2.3e12, 100.0);
        let tr = spec.build(-1e-9, 1e-3, 1).unwrap();
        let p = DetectorParams::default();
        let whole = sample_pulse_stream(&tr, 50e-15, 40_000, &p, 4).unwrap();
        let sampler = PulseSampler::new(&tr, 50e-15, p, 4).unwrap();
        let mut a = vec![(0.0, 0.0); 12_345];
        let mut b = vec![(0.0, 0.0); 40_000 - 12_345];
        sampler.fill(0, &mut a).unwrap();
        sampler.fill(12_345, &mut b).unwrap();
        a.extend(b);
        assert_eq!(a, whole.samples);
    }

    #[test]
    fn pure_noise_variance_is_nef_squared() {
        let spec = SourceSpec::coherent(2.3e12, 0.0);
        let tr = spec.build(-1e-9, 0.02, 1).unwrap();
        let p = DetectorParams::default();
        let s = sample_pulse_stream(&tr, 0.0, 1_000_000, &p, 3).unwrap();
        let var = s.samples.iter().map(|(x, _)| x * x).sum::<f64>() / 1e6;
        assert!((var / 360_000.0 - 1.0).abs() < 0.01, "{var}");
    }

    #[test]
    fn pairing_rules() {
        let spec = SourceSpec::coherent(2.3e12, 10.0);
        let tr = spec.build(-1e-9, 1e-3, 1).unwrap();
        let p = DetectorParams::default();
        let s = sample_pulse_stream(&tr, 0.0, 36_000, &p, 3).unwrap();
        let id = pair_with_offset(&s, &s, 0).unwrap();
        assert_eq!(id.pairs.len(), 36_000);
        assert!(id.pairs.iter().zip(&s.samples).all(|(p, q)| p.2 == q.0 && p.3 == q.1));
        assert!(matches!(pair_with_offset(&s, &s, 9000), Err(Error::AllPairsMixed)));
        let long = pair_with_offset(&s, &s, 18_000).unwrap();
        assert!((long.tau - 18_000.0 / 90e6).abs() < 1e-15);
        assert!(pair_with_offset(&s, &s, 36_000).is_err());
    }

    #[test]
    fn eosc_rejects_unknown_version() {
        let spec = SourceSpec::coherent(2.3e12, 10.0);
        let tr = spec.build(-1e-9, 1e-3, 1).unwrap();
        let s = sample_pulse_stream(&tr, 1e-13, 100, &DetectorParams::default(), 3).unwrap();
        let mut bytes = Vec::new();
        write_eosc(&mut bytes, &s).unwrap();
        assert_eq!(bytes.len(), 40 + 800);
        assert_eq!(&bytes[0..4], b"EOSC");
        let back = read_eosc(&bytes[..], &DetectorParams::default()).unwrap();
        assert_eq!(back.samples.len(), 100);
        assert_eq!(back.tau, 1e-13);
        assert_eq!(back.samples[7].0, s.samples[7].0 as f32 as f64);
        bytes[4] = 2;
        assert!(matches!(
            read_eosc(&bytes[..], &DetectorParams::default()),
            Err(Error::Format(_))
        ));
        bytes[4] = 1;
        bytes.pop();
        assert!(read_eosc(&bytes[..], &DetectorParams::default()).is_err());
    }
}
