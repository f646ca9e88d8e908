//! Reference field generators with analytically known coherence.
//!
//! Every source is a sum of tones whose phases (and, for the thermal source,
//! frequencies) are redrawn at the start of each phase block. A block is one
//! ON half-period of the detector modulation, which emulates a free-running
//! emitter with no phase relation to the probe laser.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{derive_stream, gaussian_transfer, FieldSampler, FieldTrace, SourceDescriptor};

/// Partition of time into phase-refresh blocks.
///
/// Block `k` covers `[k·duration − guard, (k+1)·duration − guard)`. The guard
/// (half a pulse period by default) keeps a pulse and its delayed partner in
/// the same block for any delay shorter than the guard.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseBlocks {
    pub duration: f64,
    pub guard: f64,
}

impl PhaseBlocks {
    pub fn new(duration: f64, guard: f64) -> Result<Self> {
        if !(duration > 0.0) || !(guard >= 0.0) || guard >= duration {
            return Err(Error::InvalidParameter(format!(
                "phase blocks need duration > guard ≥ 0 (got {duration:e}, {guard:e})"
            )));
        }
        Ok(Self { duration, guard })
    }

    /// `pulses` probe pulses at repetition rate `f_rep`, guard of half a pulse.
    pub fn from_pulses(pulses: u64, f_rep: f64) -> Result<Self> {
        Self::new(pulses as f64 / f_rep, 0.5 / f_rep)
    }

    #[inline]
    pub fn index(&self, t: f64) -> i64 {
        ((t + self.guard) / self.duration).floor() as i64
    }
}

impl Default for PhaseBlocks {
    fn default() -> Self {
        // 9000 pulses at 90 MHz.
        Self::from_pulses(9000, 90e6).expect("valid default")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SourceKind {
    Coherent {
        /// Peak amplitude E₀, V/m.
        amplitude: f64,
    },
    Thermal {
        /// rms field, V/m.
        rms: f64,
        /// 1/e half-width of the Gaussian power spectrum, Hz.
        bandwidth: f64,
        /// Number of spectral components per block.
        n_components: usize,
    },
    Multimode {
        /// Peak amplitude of each mode, V/m, lowest frequency first.
        amplitudes: Vec<f64>,
        /// Mode spacing, Hz. Modes are centered on `nu0`.
        spacing: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceSpec {
    pub kind: SourceKind,
    /// Center frequency, Hz.
    pub nu0: f64,
    pub blocks: PhaseBlocks,
}

pub const MIN_THERMAL_COMPONENTS: usize = 500;

impl SourceSpec {
    pub fn coherent(nu0: f64, amplitude: f64) -> Self {
        Self {
            kind: SourceKind::Coherent { amplitude },
            nu0,
            blocks: PhaseBlocks::default(),
        }
    }

    pub fn thermal(nu0: f64, rms: f64, bandwidth: f64) -> Self {
        Self {
            kind: SourceKind::Thermal {
                rms,
                bandwidth,
                n_components: MIN_THERMAL_COMPONENTS,
            },
            nu0,
            blocks: PhaseBlocks::default(),
        }
    }

    pub fn multimode(nu0: f64, amplitudes: Vec<f64>, spacing: f64) -> Self {
        Self {
            kind: SourceKind::Multimode { amplitudes, spacing },
            nu0,
            blocks: PhaseBlocks::default(),
        }
    }

    pub fn with_blocks(mut self, blocks: PhaseBlocks) -> Self {
        self.blocks = blocks;
        self
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            SourceKind::Coherent { .. } => "coherent",
            SourceKind::Thermal { .. } => "thermal",
            SourceKind::Multimode { .. } => "multimode",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.nu0 > 0.0) {
            return bad(format!("nu0 must be positive, got {}", self.nu0));
        }
        match &self.kind {
            SourceKind::Coherent { amplitude } => {
                if !(*amplitude >= 0.0) {
                    return bad(format!("amplitude must be ≥ 0, got {amplitude}"));
                }
            }
            SourceKind::Thermal {
                rms,
                bandwidth,
                n_components,
            } => {
                if !(*rms >= 0.0) {
                    return bad(format!("rms must be ≥ 0, got {rms}"));
                }
                if !(*bandwidth > 0.0) {
                    return bad(format!("thermal bandwidth must be > 0, got {bandwidth}"));
                }
                if *n_components < MIN_THERMAL_COMPONENTS {
                    return bad(format!(
                        "thermal source needs ≥ {MIN_THERMAL_COMPONENTS} components, got {n_components}"
                    ));
                }
            }
            SourceKind::Multimode { amplitudes, spacing } => {
                if amplitudes.is_empty() {
                    return bad("multimode source needs at least one mode".into());
                }
                if amplitudes.iter().any(|a| !(*a >= 0.0)) {
                    return bad("mode amplitudes must be ≥ 0".into());
                }
                if !(*spacing > 0.0) && amplitudes.len() > 1 {
                    return bad(format!("mode spacing must be > 0, got {spacing}"));
                }
            }
        }
        Ok(())
    }

    /// Realize the source over `[t_start, t_end]`.
    pub fn build(&self, t_start: f64, t_end: f64, seed: u64) -> Result<FieldTrace> {
        self.validate()?;
        let b0 = self.blocks.index(t_start);
        let b1 = self.blocks.index(t_end);
        let kind = self.kind_name();
        let mut blocks = Vec::with_capacity((b1 - b0 + 1) as usize);
        for b in b0..=b1 {
            let mut rng = derive_stream(seed, &format!("source/{kind}/block/{b}"));
            let tones: Vec<Tone> = match &self.kind {
                SourceKind::Coherent { amplitude } => vec![Tone {
                    freq: self.nu0,
                    amp: *amplitude,
                    phase: rng.phase(),
                }],
                SourceKind::Multimode { amplitudes, spacing } => {
                    let center = (amplitudes.len() as f64 - 1.0) / 2.0;
                    amplitudes
                        .iter()
                        .enumerate()
                        .map(|(k, &amp)| Tone {
                            freq: self.nu0 + (k as f64 - center) * spacing,
                            amp,
                            phase: rng.phase(),
                        })
                        .collect()
                }
                SourceKind::Thermal {
                    rms,
                    bandwidth,
                    n_components,
                } => {
                    // Power spectrum ∝ exp(−((ν−ν₀)/B)²) ⇒ frequency std B/√2.
                    let amp = rms * (2.0 / *n_components as f64).sqrt();
                    let sd = bandwidth / std::f64::consts::SQRT_2;
                    (0..*n_components)
                        .map(|_| Tone {
                            freq: self.nu0 + sd * rng.normal(),
                            amp,
                            phase: rng.phase(),
                        })
                        .collect()
                }
            };
            blocks.push(ToneBlock::new(tones));
        }
        let amplitude = match &self.kind {
            SourceKind::Coherent { amplitude } => *amplitude,
            SourceKind::Thermal { rms, .. } => *rms,
            SourceKind::Multimode { amplitudes, .. } => amplitudes.iter().cloned().fold(0.0, f64::max),
        };
        let sampler = ToneSumSampler {
            blocks: self.blocks,
            first_block: b0,
            tones: blocks,
        };
        FieldTrace::new(
            Arc::new(sampler),
            t_start,
            t_end,
            SourceDescriptor {
                kind: kind.to_owned(),
                nu0: self.nu0,
                amplitude,
            },
        )
    }
}

pub fn coherent_source(spec: &SourceSpec, t_start: f64, t_end: f64, seed: u64) -> Result<FieldTrace> {
    expect_kind(spec, "coherent")?;
    spec.build(t_start, t_end, seed)
}

pub fn thermal_source(spec: &SourceSpec, t_start: f64, t_end: f64, seed: u64) -> Result<FieldTrace> {
    expect_kind(spec, "thermal")?;
    spec.build(t_start, t_end, seed)
}

pub fn multimode_source(spec: &SourceSpec, t_start: f64, t_end: f64, seed: u64) -> Result<FieldTrace> {
    expect_kind(spec, "multimode")?;
    spec.build(t_start, t_end, seed)
}

fn expect_kind(spec: &SourceSpec, kind: &str) -> Result<()> {
    if spec.kind_name() != kind {
        return Err(Error::InvalidParameter(format!(
            "expected a {kind} source spec, got {}",
            spec.kind_name()
        )));
    }
    Ok(())
}

/// Envelope g²(0) = ⟨|Σ A_k e^{iφ_k}|⁴⟩ / ⟨|Σ A_k e^{iφ_k}|²⟩² for
/// independent uniform phases: 2 − Σ A⁴ / (Σ A²)².
pub fn multimode_envelope_g2(amplitudes: &[f64]) -> f64 {
    let s2: f64 = amplitudes.iter().map(|a| a * a).sum();
    let s4: f64 = amplitudes.iter().map(|a| a.powi(4)).sum();
    2.0 - s4 / (s2 * s2)
}

/// Envelope of |g¹(τ)| for the thermal source: exp(−(πBτ)²).
pub fn thermal_g1_envelope(bandwidth: f64, tau: f64) -> f64 {
    let x = PI * bandwidth * tau;
    (-x * x).exp()
}

#[derive(Debug, Clone, Copy)]
struct Tone {
    freq: f64,
    amp: f64,
    phase: f64,
}

/// Tones of one block in structure-of-arrays layout.
#[derive(Debug)]
struct ToneBlock {
    freq: Vec<f64>,
    amp: Vec<f64>,
    phase: Vec<f64>,
}

/// Rotations between exact phase evaluations in `render`.
const RESYNC_STEPS: usize = 512;

impl ToneBlock {
    fn new(tones: Vec<Tone>) -> Self {
        Self {
            freq: tones.iter().map(|t| t.freq).collect(),
            amp: tones.iter().map(|t| t.amp).collect(),
            phase: tones.iter().map(|t| t.phase).collect(),
        }
    }

    fn field(&self, t: f64, sigma: Option<f64>) -> f64 {
        let mut e = 0.0;
        for k in 0..self.freq.len() {
            let h = sigma.map_or(1.0, |s| gaussian_transfer(self.freq[k], s));
            e += self.amp[k] * h * (2.0 * PI * self.freq[k] * t + self.phase[k]).cos();
        }
        e
    }

    /// Probe-averaged field on `t0 + j·dt`, via per-tone phasor rotation.
    fn render(&self, t0: f64, dt: f64, sigma: f64, out: &mut [f64]) {
        let n = self.freq.len();
        let mut cre = vec![0.0; n];
        let mut cim = vec![0.0; n];
        let mut rre = vec![0.0; n];
        let mut rim = vec![0.0; n];
        let mut weight = vec![0.0; n];
        for k in 0..n {
            weight[k] = self.amp[k] * gaussian_transfer(self.freq[k], sigma);
            let (s, c) = (2.0 * PI * self.freq[k] * dt).sin_cos();
            rre[k] = c;
            rim[k] = s;
        }
        for (chunk_idx, chunk) in out.chunks_mut(RESYNC_STEPS).enumerate() {
            let ts = t0 + (chunk_idx * RESYNC_STEPS) as f64 * dt;
            for k in 0..n {
                let (s, c) = (2.0 * PI * self.freq[k] * ts + self.phase[k]).sin_cos();
                cre[k] = weight[k] * c;
                cim[k] = weight[k] * s;
            }
            for o in chunk.iter_mut() {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += cre[k];
                    let re = cre[k] * rre[k] - cim[k] * rim[k];
                    let im = cre[k] * rim[k] + cim[k] * rre[k];
                    cre[k] = re;
                    cim[k] = im;
                }
                *o = acc;
            }
        }
    }
}

#[derive(Debug)]
struct ToneSumSampler {
    blocks: PhaseBlocks,
    first_block: i64,
    tones: Vec<ToneBlock>,
}

impl ToneSumSampler {
    fn block(&self, t: f64) -> &ToneBlock {
        let idx = (self.blocks.index(t) - self.first_block).clamp(0, self.tones.len() as i64 - 1);
        &self.tones[idx as usize]
    }
}

impl FieldSampler for ToneSumSampler {
    fn field(&self, t: f64) -> f64 {
        self.block(t).field(t, None)
    }

    fn probe_average(&self, t: f64, sigma: f64) -> f64 {
        self.block(t).field(t, Some(sigma))
    }

    fn probe_average_grid(&self, t0: f64, dt: f64, sigma: f64, out: &mut [f64]) {
        let mut start = 0;
        while start < out.len() {
            let b = self.blocks.index(t0 + start as f64 * dt);
            let mut end = start + 1;
            while end < out.len() && self.blocks.index(t0 + end as f64 * dt) == b {
                end += 1;
            }
            self.block(t0 + start as f64 * dt)
                .render(t0 + start as f64 * dt, dt, sigma, &mut out[start..end]);
            start = end;
        }
    }
}
