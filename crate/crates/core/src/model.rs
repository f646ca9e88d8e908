//! Shared domain types: physical constants, deterministic random streams and
//! continuous-time field traces.
//!
//! Everything is SI internally. Conversions to fs, THz, V/m and μW happen only
//! at the output boundary.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// CODATA 2018 exact / recommended values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalConstants {
    /// Planck constant, J·s.
    pub h: f64,
    /// Reduced Planck constant, J·s.
    pub hbar: f64,
    /// Speed of light in vacuum, m/s.
    pub c: f64,
    /// Vacuum permittivity, F/m.
    pub eps0: f64,
    /// Elementary charge, C.
    pub e_charge: f64,
}

pub const CONSTANTS: PhysicalConstants = PhysicalConstants {
    h: 6.626_070_15e-34,
    hbar: 6.626_070_15e-34 / (2.0 * PI),
    c: 299_792_458.0,
    eps0: 8.854_187_812_8e-12,
    e_charge: 1.602_176_634e-19,
};

/// FWHM of a Gaussian divided by its standard deviation, 2·√(2 ln 2).
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;

/// Amplitude transfer of a unit-area Gaussian window of standard deviation
/// `sigma` at frequency `nu`: exp(−2(πνσ)²).
pub fn gaussian_transfer(nu: f64, sigma: f64) -> f64 {
    let x = PI * nu * sigma;
    (-2.0 * x * x).exp()
}

/// Seeded generator for one named stream of random numbers.
///
/// The 256-bit ChaCha key is the SHA-256 digest of the master seed and the
/// stream label, so workers can draw independent noise without sharing state.
#[derive(Clone)]
pub struct RandomStream {
    master_seed: u64,
    stream_id: String,
    rng: ChaCha12Rng,
}

impl fmt::Debug for RandomStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RandomStream")
            .field("master_seed", &self.master_seed)
            .field("stream_id", &self.stream_id)
            .finish_non_exhaustive()
    }
}

/// Derive the child stream `stream_id` of `master_seed`.
///
/// Labels are slash-separated paths such as `"mb/noise/0"`.
///
/// # Panics
/// If `stream_id` is empty.
pub fn derive_stream(master_seed: u64, stream_id: &str) -> RandomStream {
    assert!(!stream_id.is_empty(), "stream id must be non-empty");
    let mut hasher = Sha256::new();
    hasher.update(b"thz-coherence/stream/v1\0");
    hasher.update(master_seed.to_le_bytes());
    hasher.update((stream_id.len() as u64).to_le_bytes());
    hasher.update(stream_id.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    RandomStream {
        master_seed,
        stream_id: stream_id.to_owned(),
        rng: ChaCha12Rng::from_seed(key),
    }
}

/// Derive a 64-bit seed for a sub-task (e.g. one sweep point).
pub fn derive_seed(master_seed: u64, stream_id: &str) -> u64 {
    derive_stream(master_seed, stream_id).next_u64()
}

impl RandomStream {
    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> &str {
        &self.stream_id
    }

    /// Uniform draw in [0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits.
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw.
    #[inline]
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform phase in [0, 2π).
    #[inline]
    pub fn phase(&mut self) -> f64 {
        2.0 * PI * self.uniform()
    }
}

impl RngCore for RandomStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Metadata attached to a field trace.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SourceDescriptor {
    pub kind: String,
    /// Center frequency, Hz.
    pub nu0: f64,
    /// Nominal amplitude (peak for tones, rms for thermal), V/m.
    pub amplitude: f64,
}

/// Deterministic real field E(t) in V/m.
pub trait FieldSampler: Send + Sync + fmt::Debug {
    fn field(&self, t: f64) -> f64;

    /// Field averaged with a unit-area Gaussian window of standard deviation
    /// `sigma` centered at `t`. Samplers with a closed form override this.
    fn probe_average(&self, t: f64, sigma: f64) -> f64 {
        gaussian_quadrature(|s| self.field(s), t, sigma)
    }

    /// `probe_average` on the grid `t0 + k·dt`, written into `out`.
    fn probe_average_grid(&self, t0: f64, dt: f64, sigma: f64, out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.probe_average(t0 + k as f64 * dt, sigma);
        }
    }
}

/// Half-width of the quadrature window in units of sigma.
pub const PROBE_HALF_WIDTH_SIGMAS: f64 = 4.0;
const QUAD_STEPS_PER_SIGMA: usize = 8;

/// Discrete Gaussian-weighted average of `f` over ±4σ with step σ/8. Weights
/// are renormalized to unit sum, so constants pass through exactly.
pub fn gaussian_quadrature(f: impl Fn(f64) -> f64, t: f64, sigma: f64) -> f64 {
    let half = (PROBE_HALF_WIDTH_SIGMAS as usize) * QUAD_STEPS_PER_SIGMA;
    let h = sigma / QUAD_STEPS_PER_SIGMA as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for k in -(half as i64)..=(half as i64) {
        let u = k as f64 / QUAD_STEPS_PER_SIGMA as f64;
        let w = (-0.5 * u * u).exp();
        num += w * f(t + k as f64 * h);
        den += w;
    }
    num / den
}

/// A field sampler restricted to a time span, plus source metadata.
#[derive(Clone, Debug)]
pub struct FieldTrace {
    sampler: Arc<dyn FieldSampler>,
    t_start: f64,
    t_end: f64,
    descriptor: SourceDescriptor,
}

impl FieldTrace {
    pub fn new(sampler: Arc<dyn FieldSampler>, t_start: f64, t_end: f64, descriptor: SourceDescriptor) -> Result<Self> {
        if !(t_end > t_start) {
            return Err(Error::InvalidParameter(format!(
                "trace span [{t_start:e}, {t_end:e}] is empty"
            )));
        }
        Ok(Self {
            sampler,
            t_start,
            t_end,
            descriptor,
        })
    }

    pub fn eval(&self, t: f64) -> Result<f64> {
        self.check(t)?;
        Ok(self.sampler.field(t))
    }

    pub fn check(&self, t: f64) -> Result<()> {
        if t < self.t_start || t > self.t_end || !t.is_finite() {
            return Err(Error::OutOfRange {
                t,
                start: self.t_start,
                end: self.t_end,
            });
        }
        Ok(())
    }

    pub fn span(&self) -> (f64, f64) {
        (self.t_start, self.t_end)
    }

    pub fn descriptor(&self) -> &SourceDescriptor {
        &self.descriptor
    }

    pub fn sampler(&self) -> &Arc<dyn FieldSampler> {
        &self.sampler
    }
}
