//! Stochastic multimode Maxwell-Bloch model of a Fabry-Pérot THz QCL.
//!
//! The polarization is adiabatically eliminated and the modal equations are
//! kept to third order in the field. For each longitudinal mode `m`:
//!
//! ```text
//! da_m/dt = ½(g_m − κ)·a_m + i·2π·δν_m·a_m
//!         − ½·g_m·Σ_{p,q} β_pq·a_p·a_q*·a_{m−p+q} + F_m(t)
//! ```
//!
//! with a Lorentzian gain `g_m`, GVD detuning `δν_m`, population-pulsation
//! coefficients `β_pq = 1 / (1 + i·2π(ν_p − ν_q)·τ_up)` and complex white
//! noise `⟨F_m F_n*⟩ = 2D·δ_mn·δ(t−t')`, `D = κ·r²/2`, where `r` is the
//! single-photon field in saturation units. Amplitudes are in units of the
//! saturation field, so an empty cavity settles at `⟨|a_m|²⟩ = r²`.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{
    derive_seed, derive_stream, gaussian_transfer, FieldSampler, FieldTrace, RandomStream, SourceDescriptor,
};

/// Amplitude cap, in saturation-field units.
pub const AMPLITUDE_CAP: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MBParams {
    /// Polarization dephasing time, s.
    pub tau_coh: f64,
    /// Upper-state lifetime, s.
    pub tau_up: f64,
    /// Cavity photon lifetime, s.
    pub tau_photon: f64,
    /// Cavity round-trip time, s.
    pub t_roundtrip: f64,
    /// Group velocity dispersion, s²/m.
    pub gvd: f64,
    /// Length of dispersive medium crossed per round trip, m.
    pub dispersive_length_per_rt: f64,
    /// Transition dipole length, m.
    pub z12: f64,
    /// Single-photon field over saturation field.
    pub sp_ratio: f64,
    /// Gain-peak frequency, Hz.
    pub nu0: f64,
    /// Number of simulated modes, 2M + 1.
    pub n_modes: usize,
    /// Pump parameter G, 1/s.
    pub gain: f64,
}

impl Default for MBParams {
    fn default() -> Self {
        Self {
            tau_coh: 0.5e-12,
            tau_up: 5e-12,
            tau_photon: 35e-12,
            t_roundtrip: 4e-12,
            // 6.24e5 fs²/mm
            gvd: 6.24e-22,
            dispersive_length_per_rt: 2e-3,
            z12: 7e-9,
            sp_ratio: 4e-5,
            nu0: 2.3e12,
            n_modes: 7,
            gain: 0.0,
        }
    }
}

impl MBParams {
    pub fn validate(&self) -> Result<()> {
        let times = [
            ("tau_coh", self.tau_coh),
            ("tau_up", self.tau_up),
            ("tau_photon", self.tau_photon),
            ("t_roundtrip", self.t_roundtrip),
        ];
        for (name, v) in times {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if self.n_modes == 0 || self.n_modes.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!(
                "n_modes must be odd and ≥ 1, got {}",
                self.n_modes
            )));
        }
        if !(self.gain >= 0.0) {
            return Err(Error::InvalidParameter(format!("gain must be ≥ 0, got {}", self.gain)));
        }
        if !(self.sp_ratio >= 0.0) || !(self.nu0 > 0.0) || !(self.dispersive_length_per_rt >= 0.0) {
            return Err(Error::InvalidParameter(
                "sp_ratio, nu0 and dispersive length must be non-negative (nu0 positive)".into(),
            ));
        }
        Ok(())
    }

    /// Cavity loss rate κ = 1/τ_photon.
    pub fn kappa(&self) -> f64 {
        1.0 / self.tau_photon
    }

    pub fn fsr(&self) -> f64 {
        1.0 / self.t_roundtrip
    }

    /// Threshold gain of the central mode.
    pub fn threshold_gain(&self) -> f64 {
        self.kappa()
    }

    /// M in 2M + 1.
    pub fn half_modes(&self) -> i64 {
        (self.n_modes as i64 - 1) / 2
    }

    pub fn mode_indices(&self) -> impl Iterator<Item = i64> {
        let m = self.half_modes();
        -m..=m
    }

    /// Round-trip group delay dispersion, s².
    pub fn gdd_roundtrip(&self) -> f64 {
        self.gvd * self.dispersive_length_per_rt
    }

    /// Resonance frequency of mode `m`, Hz.
    pub fn mode_frequency(&self, m: i64) -> f64 {
        self.nu0 + m as f64 * self.fsr() + gvd_detuning(m, self)
    }

    pub fn with_gain(mut self, gain: f64) -> Self {
        self.gain = gain;
        self
    }
}

/// G / (1 + (2π(ν − ν₀)τ_coh)²).
pub fn lorentzian_gain(g: f64, nu_m: f64, params: &MBParams) -> f64 {
    let x = 2.0 * PI * (nu_m - params.nu0) * params.tau_coh;
    g / (1.0 + x * x)
}

/// Dispersive shift of mode `m` from the equidistant comb,
/// δν_m = −GDD·π·(m·FSR)² / t_rt.
pub fn gvd_detuning(m: i64, params: &MBParams) -> f64 {
    let f = m as f64 * params.fsr();
    -params.gdd_roundtrip() * PI * f * f / params.t_roundtrip
}

/// Affine map from pump parameter to drive current, I = I_th·G/G_th.
pub fn map_gain_to_current(g: f64, i_th_ma: f64, g_th: f64) -> f64 {
    i_th_ma * g / g_th
}

pub fn map_current_to_gain(i_ma: f64, i_th_ma: f64, g_th: f64) -> f64 {
    g_th * i_ma / i_th_ma
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalState {
    /// a_m for m = −M..M, saturation-field units.
    pub amplitudes: Vec<Complex64>,
    /// s.
    pub t: f64,
}

impl ModalState {
    pub fn zeros(n_modes: usize) -> Self {
        Self {
            amplitudes: vec![Complex64::new(0.0, 0.0); n_modes],
            t: 0.0,
        }
    }

    pub fn energy(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }

    /// Default starting point: every mode at the single-photon level, the
    /// central mode at its free-running steady state when above threshold.
    pub fn initial(params: &MBParams) -> Self {
        let mut s = Self::zeros(params.n_modes);
        for a in &mut s.amplitudes {
            *a = Complex64::new(params.sp_ratio, 0.0);
        }
        let k = params.kappa();
        if params.gain > k {
            let c = params.half_modes() as usize;
            s.amplitudes[c] = Complex64::new((1.0 - k / params.gain).sqrt(), 0.0);
        }
        s
    }
}

/// Precomputed coefficients of the modal equations.
#[derive(Debug, Clone)]
pub struct ModalModel {
    params: MBParams,
    /// g_m for each mode.
    gain: Vec<f64>,
    /// ½(g_m − κ) + i·2π·δν_m
    linear: Vec<Complex64>,
    /// β_pq, row-major.
    beta: Vec<Complex64>,
    /// Noise diffusion D.
    diffusion: f64,
    scratch: Vec<Complex64>,
    /// exp(linear·dt) for the last step size used.
    prop: Vec<Complex64>,
    prop_nl: Vec<Complex64>,
    prop_dt: f64,
}

impl ModalModel {
    pub fn new(params: &MBParams) -> Result<Self> {
        params.validate()?;
        let n = params.n_modes;
        let k = params.kappa();
        let idx: Vec<i64> = params.mode_indices().collect();
        let gain: Vec<f64> = idx
            .iter()
            .map(|&m| lorentzian_gain(params.gain, params.mode_frequency(m), params))
            .collect();
        let linear = idx
            .iter()
            .zip(&gain)
            .map(|(&m, &g)| Complex64::new(0.5 * (g - k), 2.0 * PI * gvd_detuning(m, params)))
            .collect();
        let mut beta = Vec::with_capacity(n * n);
        for &p in &idx {
            for &q in &idx {
                let dnu = params.mode_frequency(p) - params.mode_frequency(q);
                beta.push(Complex64::new(1.0, 0.0) / Complex64::new(1.0, 2.0 * PI * dnu * params.tau_up));
            }
        }
        Ok(Self {
            params: *params,
            gain,
            linear,
            beta,
            diffusion: 0.5 * k * params.sp_ratio * params.sp_ratio,
            scratch: vec![Complex64::new(0.0, 0.0); n * n],
            prop: Vec::new(),
            prop_nl: Vec::new(),
            prop_dt: f64::NAN,
        })
    }

    pub fn params(&self) -> &MBParams {
        &self.params
    }

    pub fn diffusion(&self) -> f64 {
        self.diffusion
    }

    /// Saturation term −½·g_m·Σ β_pq·a_p·a_q*·a_{m−p+q}.
    fn nonlinear(&mut self, a: &[Complex64], out: &mut [Complex64]) {
        let n = a.len();
        for p in 0..n {
            for q in 0..n {
                self.scratch[p * n + q] = self.beta[p * n + q] * a[p] * a[q].conj();
            }
        }
        for m in 0..n {
            let mut sat = Complex64::new(0.0, 0.0);
            // r = m − p + q must stay inside 0..n.
            for p in 0..n {
                let q_lo = p.saturating_sub(m);
                let q_hi = (n + p - m).min(n);
                for q in q_lo..q_hi {
                    sat += self.scratch[p * n + q] * a[m + q - p];
                }
            }
            out[m] = -0.5 * self.gain[m] * sat;
        }
    }

    /// Deterministic right-hand side.
    pub fn drift(&mut self, a: &[Complex64], out: &mut [Complex64]) {
        self.nonlinear(a, out);
        for ((o, l), x) in out.iter_mut().zip(&self.linear).zip(a) {
            *o += l * x;
        }
    }

    /// One Euler–Maruyama step in place.
    ///
    /// The linear part (net gain and dispersive rotation) is propagated
    /// exactly and the saturation term is held constant over the step
    /// (exponential Euler); the noise increment enters at the start of the
    /// step. Plain Euler would amplify the fast GVD rotation of
    /// the outer modes at every step.
    pub fn step(
        &mut self,
        state: &mut ModalState,
        dt: f64,
        noise: Option<&mut RandomStream>,
        f: &mut [Complex64],
    ) -> Result<()> {
        if self.prop_dt != dt {
            self.prop = self.linear.iter().map(|l| (l * dt).exp()).collect();
            // (e^{L·dt} − 1)/L, which keeps the fixed points of the flow exact.
            self.prop_nl = self
                .linear
                .iter()
                .zip(&self.prop)
                .map(|(l, e)| {
                    if l.norm() * dt < 1e-12 {
                        Complex64::new(dt, 0.0)
                    } else {
                        (e - 1.0) / l
                    }
                })
                .collect();
            self.prop_dt = dt;
        }
        self.nonlinear(&state.amplitudes, f);
        let amp = (self.diffusion * dt).sqrt();
        match noise {
            Some(rng) => {
                for (k, a) in state.amplitudes.iter_mut().enumerate() {
                    let w = Complex64::new(rng.normal(), rng.normal()) * amp;
                    *a = self.prop[k] * (*a + w) + self.prop_nl[k] * f[k];
                }
            }
            None => {
                for (k, a) in state.amplitudes.iter_mut().enumerate() {
                    *a = self.prop[k] * *a + self.prop_nl[k] * f[k];
                }
            }
        }
        state.t += dt;
        let half = self.params.half_modes();
        for (k, a) in state.amplitudes.iter().enumerate() {
            let mag = a.norm();
            if !mag.is_finite() {
                return Err(Error::NotFinite {
                    mode: k as i64 - half,
                    time: state.t,
                });
            }
            if mag > AMPLITUDE_CAP {
                return Err(Error::BlowUp {
                    mode: k as i64 - half,
                    time: state.t,
                    magnitude: mag,
                });
            }
        }
        Ok(())
    }
}

/// Single exponential Euler–Maruyama step of the modal equations.
pub fn step_modes(
    state: &ModalState,
    dt: f64,
    params: &MBParams,
    noise: Option<&mut RandomStream>,
) -> Result<ModalState> {
    if !(dt > 0.0) || dt > params.t_roundtrip {
        return Err(Error::InvalidParameter(format!(
            "dt must lie in (0, t_roundtrip], got {dt:e}"
        )));
    }
    if state.amplitudes.len() != params.n_modes {
        return Err(Error::InvalidParameter("state size differs from n_modes".into()));
    }
    let mut model = ModalModel::new(params)?;
    let mut next = state.clone();
    let mut f = vec![Complex64::new(0.0, 0.0); params.n_modes];
    model.step(&mut next, dt, noise, &mut f)?;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimSettings {
    /// Total integration time including the transient, s.
    pub duration: f64,
    /// Discarded initial interval, s.
    pub transient: f64,
    /// Snapshot spacing, s.
    pub record_dt: f64,
    /// Integrator step, s.
    pub dt: f64,
    pub noise: bool,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            duration: 20e-9 + 200e-9,
            transient: 20e-9,
            record_dt: 1e-12,
            dt: 0.25e-12,
            noise: true,
        }
    }
}

impl SimSettings {
    pub fn validate(&self, params: &MBParams) -> Result<()> {
        if !(self.duration > self.transient) || !(self.transient >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "need duration > transient ≥ 0 (got {:e}, {:e})",
                self.duration, self.transient
            )));
        }
        if !(self.dt > 0.0) || self.dt > params.t_roundtrip {
            return Err(Error::InvalidParameter(format!(
                "dt must lie in (0, t_roundtrip], got {:e}",
                self.dt
            )));
        }
        if !(self.record_dt >= self.dt) {
            return Err(Error::InvalidParameter("record_dt must be ≥ dt".into()));
        }
        Ok(())
    }

    /// Integrator steps between snapshots.
    fn stride(&self) -> usize {
        (self.record_dt / self.dt).round().max(1.0) as usize
    }
}

/// Integrate from `initial`, calling `observe` on every snapshot after the
/// transient.
pub fn integrate<F>(
    params: &MBParams,
    initial: ModalState,
    settings: &SimSettings,
    seed: u64,
    mut observe: F,
) -> Result<ModalState>
where
    F: FnMut(&ModalState),
{
    settings.validate(params)?;
    let mut model = ModalModel::new(params)?;
    let mut rng = settings.noise.then(|| derive_stream(seed, "mb/noise"));
    let mut state = initial;
    state.t = 0.0;
    let mut f = vec![Complex64::new(0.0, 0.0); params.n_modes];
    let n_steps = (settings.duration / settings.dt).round() as usize;
    let n_transient = (settings.transient / settings.dt).round() as usize;
    let stride = settings.stride();
    for k in 1..=n_steps {
        model.step(&mut state, settings.dt, rng.as_mut(), &mut f)?;
        if k >= n_transient && (k - n_transient).is_multiple_of(stride) {
            observe(&state);
        }
    }
    Ok(state)
}

/// Recorded modal amplitudes on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalTrajectory {
    pub t0: f64,
    pub dt: f64,
    pub n_modes: usize,
    /// Snapshot-major amplitudes, `len() = n_snapshots · n_modes`.
    pub amplitudes: Vec<Complex64>,
    pub params: MBParams,
    pub seed: u64,
}

impl ModalTrajectory {
    pub fn len(&self) -> usize {
        self.amplitudes.len() / self.n_modes
    }

    pub fn is_empty(&self) -> bool {
        self.amplitudes.is_empty()
    }

    pub fn snapshot(&self, k: usize) -> &[Complex64] {
        &self.amplitudes[k * self.n_modes..(k + 1) * self.n_modes]
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn span(&self) -> (f64, f64) {
        (self.t0, self.time(self.len().saturating_sub(1)))
    }

    /// Time-averaged |a_m|² per mode.
    pub fn mode_powers(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.n_modes];
        for k in 0..self.len() {
            for (acc, a) in p.iter_mut().zip(self.snapshot(k)) {
                *acc += a.norm_sqr();
            }
        }
        p.iter().map(|v| v / self.len() as f64).collect()
    }

    /// Free-running modes with fixed envelopes: a_m(t) = c_m·e^{i2πδν_m t}.
    pub fn stationary(params: &MBParams, amplitudes: &[Complex64], t0: f64, dt: f64, n: usize) -> Self {
        let detune: Vec<f64> = params.mode_indices().map(|m| gvd_detuning(m, params)).collect();
        assert_eq!(detune.len(), amplitudes.len(), "one amplitude per mode");
        let mut out = Vec::with_capacity(n * amplitudes.len());
        for k in 0..n {
            let t = t0 + k as f64 * dt;
            for (c, d) in amplitudes.iter().zip(&detune) {
                out.push(c * Complex64::from_polar(1.0, 2.0 * PI * d * t));
            }
        }
        Self {
            t0,
            dt,
            n_modes: amplitudes.len(),
            amplitudes: out,
            params: *params,
            seed: 0,
        }
    }

    /// CSV with header `# t_s, re_a_-M, im_a_-M, …`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let half = (self.n_modes as i64 - 1) / 2;
        let mut header = String::from("# t_s");
        for m in -half..=half {
            header.push_str(&format!(", re_a_{m}, im_a_{m}"));
        }
        writeln!(w, "{header}")?;
        let mut line = String::new();
        for k in 0..self.len() {
            line.clear();
            line.push_str(&format!("{:.6e}", self.time(k)));
            for a in self.snapshot(k) {
                line.push_str(&format!(",{:.9e},{:.9e}", a.re, a.im));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Integrate and record a trajectory.
pub fn simulate(params: &MBParams, settings: &SimSettings, seed: u64) -> Result<ModalTrajectory> {
    simulate_from(params, ModalState::initial(params), settings, seed)
}

pub fn simulate_from(
    params: &MBParams,
    initial: ModalState,
    settings: &SimSettings,
    seed: u64,
) -> Result<ModalTrajectory> {
    if initial.amplitudes.len() != params.n_modes {
        return Err(Error::InvalidParameter(
            "initial state size differs from n_modes".into(),
        ));
    }
    let mut amplitudes = Vec::new();
    let mut t0 = None;
    integrate(params, initial, settings, seed, |s| {
        t0.get_or_insert(s.t);
        amplitudes.extend_from_slice(&s.amplitudes);
    })?;
    let traj = ModalTrajectory {
        t0: t0.unwrap_or(settings.transient),
        dt: settings.stride() as f64 * settings.dt,
        n_modes: params.n_modes,
        amplitudes,
        params: *params,
        seed,
    };
    if traj.len() < 2 {
        return Err(Error::InvalidParameter("trajectory shorter than two snapshots".into()));
    }
    Ok(traj)
}

/// Running moments of the envelope intensity.
///
/// For each snapshot the intensity I(t) = |Σ a_m e^{i2πm·FSR·t}|² is averaged
/// over one beat period with frozen amplitudes:
/// ⟨I⟩ = Σ|a_m|², ⟨I²⟩ = Σ_S |Σ_{p+r=S} a_p a_r|².
///
/// Snapshots are also grouped into contiguous blocks of `block_len` for a
/// delete-one-block jackknife error of g²(0).
#[derive(Debug, Clone, Default)]
pub struct IntensityMoments {
    n: u64,
    sum_i: f64,
    sum_i2: f64,
    mode_power: Vec<f64>,
    pair: Vec<Complex64>,
    block_len: u64,
    /// (count, Σ⟨I⟩, Σ⟨I²⟩) per block.
    blocks: Vec<(u64, f64, f64)>,
}

/// Snapshots per jackknife block used by default (10 ns at 1 ps spacing).
pub const DEFAULT_G2_BLOCK: u64 = 10_000;

impl IntensityMoments {
    pub fn new(n_modes: usize) -> Self {
        Self::with_block_len(n_modes, DEFAULT_G2_BLOCK)
    }

    pub fn with_block_len(n_modes: usize, block_len: u64) -> Self {
        Self {
            mode_power: vec![0.0; n_modes],
            pair: vec![Complex64::new(0.0, 0.0); 2 * n_modes - 1],
            block_len: block_len.max(1),
            ..Default::default()
        }
    }

    pub fn push(&mut self, a: &[Complex64]) {
        let n = a.len();
        let mut i1 = 0.0;
        for (acc, x) in self.mode_power.iter_mut().zip(a) {
            let p = x.norm_sqr();
            *acc += p;
            i1 += p;
        }
        self.pair.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        for p in 0..n {
            for r in 0..n {
                self.pair[p + r] += a[p] * a[r];
            }
        }
        let i2: f64 = self.pair.iter().map(|v| v.norm_sqr()).sum();
        if self.n.is_multiple_of(self.block_len) {
            self.blocks.push((0, 0.0, 0.0));
        }
        let b = self.blocks.last_mut().expect("block opened above");
        b.0 += 1;
        b.1 += i1;
        b.2 += i2;
        self.n += 1;
        self.sum_i += i1;
        self.sum_i2 += i2;
    }

    /// g²(0) with a delete-one-block jackknife error (infinite with fewer
    /// than two blocks).
    pub fn g2_estimate(&self) -> Result<(f64, f64)> {
        let value = self.g2()?;
        let nb = self.blocks.len();
        if nb < 2 {
            return Ok((value, f64::INFINITY));
        }
        let reps: Vec<f64> = self
            .blocks
            .iter()
            .map(|&(n, i1, i2)| {
                let rest = (self.n - n) as f64;
                let mean = (self.sum_i - i1) / rest;
                (self.sum_i2 - i2) / rest / (mean * mean)
            })
            .collect();
        let mean = reps.iter().sum::<f64>() / nb as f64;
        let ss: f64 = reps.iter().map(|r| (r - mean).powi(2)).sum();
        Ok((value, ((nb as f64 - 1.0) / nb as f64 * ss).sqrt()))
    }

    pub fn mean_intensity(&self) -> f64 {
        self.sum_i / self.n as f64
    }

    pub fn mode_powers(&self) -> Vec<f64> {
        self.mode_power.iter().map(|p| p / self.n as f64).collect()
    }

    pub fn g2(&self) -> Result<f64> {
        let mean = self.mean_intensity();
        if self.n == 0 || !(mean > 0.0) {
            return Err(Error::NoField);
        }
        Ok(self.sum_i2 / self.n as f64 / (mean * mean))
    }
}

/// Few-cycle-averaged g²(0) of the modal field, ⟨I²⟩/⟨I⟩².
pub fn g2_modal(traj: &ModalTrajectory) -> Result<f64> {
    let mut m = IntensityMoments::new(traj.n_modes);
    for k in 0..traj.len() {
        m.push(traj.snapshot(k));
    }
    m.g2()
}

/// One operating point of a light-current sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LiPoint {
    pub gain: f64,
    /// Σ⟨|a_m|²⟩ in E_sat² units.
    pub total_power: f64,
    pub g2_zero: f64,
    pub g2_err: f64,
    pub mode_powers: Vec<f64>,
}

impl LiPoint {
    pub fn from_moments(gain: f64, m: &IntensityMoments) -> Result<Self> {
        let (g2_zero, g2_err) = m.g2_estimate()?;
        Ok(Self {
            gain,
            total_power: m.mean_intensity(),
            g2_zero,
            g2_err,
            mode_powers: m.mode_powers(),
        })
    }

    /// Reduce a recorded trajectory.
    pub fn from_trajectory(traj: &ModalTrajectory) -> Result<Self> {
        let mut m = IntensityMoments::new(traj.n_modes);
        for k in 0..traj.len() {
            m.push(traj.snapshot(k));
        }
        Self::from_moments(traj.params.gain, &m)
    }

    /// Largest fraction of the total power held by a mode other than the strongest.
    pub fn second_mode_fraction(&self) -> f64 {
        let mut p = self.mode_powers.clone();
        p.sort_by(|a, b| b.total_cmp(a));
        if p.len() < 2 || !(self.total_power > 0.0) {
            return 0.0;
        }
        p[1] / self.total_power
    }
}

/// Simulate one gain and reduce it to power and g²(0) without storing the
/// trajectory.
pub fn li_point(params: &MBParams, settings: &SimSettings, seed: u64) -> Result<LiPoint> {
    let mut m = IntensityMoments::new(params.n_modes);
    integrate(params, ModalState::initial(params), settings, seed, |s| {
        m.push(&s.amplitudes)
    })?;
    LiPoint::from_moments(params.gain, &m)
}

/// L-I sweep over ascending gains; point `k` uses seed stream `mb/gain/k`.
pub fn li_sweep(params: &MBParams, gains: &[f64], settings: &SimSettings, seed: u64) -> Result<Vec<LiPoint>> {
    if gains.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidParameter("gains must be sorted ascending".into()));
    }
    gains
        .par_iter()
        .enumerate()
        .map(|(k, &g)| {
            li_point(
                &params.with_gain(g),
                settings,
                derive_seed(seed, &format!("mb/gain/{k}")),
            )
        })
        .collect()
}

/// Field reconstruction from recorded modal amplitudes.
///
/// Slow amplitudes rotate at the dispersive detuning δν_m; that rotation is
/// removed before linear interpolation and restored afterwards, so the field
/// E(t) = s·Re Σ_m b_m(t)·e^{i2π(ν₀ + m·FSR + δν_m)t} uses the smooth
/// envelopes b_m = a_m·e^{−i2πδν_m t}.
#[derive(Debug)]
struct TrajectorySampler {
    t0: f64,
    dt: f64,
    n_snap: usize,
    n_modes: usize,
    envelopes: Vec<Complex64>,
    freqs: Vec<f64>,
    scale: f64,
}

impl TrajectorySampler {
    fn new(traj: &ModalTrajectory, field_scale: f64) -> Self {
        let p = &traj.params;
        let idx: Vec<i64> = p.mode_indices().collect();
        let detune: Vec<f64> = idx.iter().map(|&m| gvd_detuning(m, p)).collect();
        let mut envelopes = Vec::with_capacity(traj.amplitudes.len());
        for k in 0..traj.len() {
            let t = traj.time(k);
            for (a, d) in traj.snapshot(k).iter().zip(&detune) {
                envelopes.push(a * Complex64::from_polar(1.0, -2.0 * PI * d * t));
            }
        }
        Self {
            t0: traj.t0,
            dt: traj.dt,
            n_snap: traj.len(),
            n_modes: traj.n_modes,
            envelopes,
            freqs: idx.iter().map(|&m| p.mode_frequency(m)).collect(),
            scale: field_scale,
        }
    }

    fn evaluate(&self, t: f64, sigma: Option<f64>) -> f64 {
        let u = ((t - self.t0) / self.dt).clamp(0.0, (self.n_snap - 1) as f64);
        let k = (u.floor() as usize).min(self.n_snap - 2);
        let w = u - k as f64;
        let lo = &self.envelopes[k * self.n_modes..(k + 1) * self.n_modes];
        let hi = &self.envelopes[(k + 1) * self.n_modes..(k + 2) * self.n_modes];
        let mut e = 0.0;
        for m in 0..self.n_modes {
            let b = lo[m] * (1.0 - w) + hi[m] * w;
            let h = sigma.map_or(1.0, |s| gaussian_transfer(self.freqs[m], s));
            let (s, c) = (2.0 * PI * self.freqs[m] * t).sin_cos();
            e += h * (b.re * c - b.im * s);
        }
        self.scale * e
    }
}

impl FieldSampler for TrajectorySampler {
    fn field(&self, t: f64) -> f64 {
        self.evaluate(t, None)
    }

    /// Envelopes vary on picosecond scales, far slower than the probe
    /// window, so each mode is filtered at its carrier frequency.
    fn probe_average(&self, t: f64, sigma: f64) -> f64 {
        self.evaluate(t, Some(sigma))
    }
}

/// Real field in V/m, `field_scale` V/m per saturation-field unit.
pub fn reconstruct_field(traj: &ModalTrajectory, field_scale: f64) -> Result<FieldTrace> {
    if traj.len() < 2 {
        return Err(Error::InvalidParameter("trajectory shorter than two snapshots".into()));
    }
    let (a, b) = traj.span();
    let power: f64 = traj.mode_powers().iter().sum();
    FieldTrace::new(
        Arc::new(TrajectorySampler::new(traj, field_scale)),
        a,
        b,
        SourceDescriptor {
            kind: "maxwell-bloch".into(),
            nu0: traj.params.nu0,
            amplitude: field_scale * power.sqrt(),
        },
    )
}

/// Field values on `t_grid`.
pub fn field_on_grid(trace: &FieldTrace, t_grid: &[f64]) -> Result<Vec<f64>> {
    t_grid.iter().map(|&t| trace.eval(t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(params: MBParams) -> MBParams {
        MBParams { n_modes: 1, ..params }
    }

    #[test]
    fn lorentzian_shape() {
        let p = MBParams::default();
        assert_eq!(lorentzian_gain(3.0, p.nu0, &p), 3.0);
        let hwhm = 1.0 / (2.0 * PI * p.tau_coh);
        assert!((hwhm - 318.3e9).abs() < 0.1e9);
        assert!((lorentzian_gain(3.0, p.nu0 + hwhm, &p) - 1.5).abs() < 1e-12);
        assert!((lorentzian_gain(3.0, p.nu0 - hwhm, &p) - 1.5).abs() < 1e-12);
        assert!(lorentzian_gain(3.0, p.nu0 + 1e18, &p) < 1e-9);
    }

    #[test]
    fn gvd_detuning_values() {
        let p = MBParams::default();
        assert!((p.gdd_roundtrip() - 1.248e-24).abs() < 1e-30);
        assert_eq!(gvd_detuning(0, &p), 0.0);
        let d1 = gvd_detuning(1, &p);
        assert!((d1 + 61.3e9).abs() < 0.1e9, "{d1}");
        assert_eq!(gvd_detuning(2, &p), gvd_detuning(-2, &p));
        assert!((p.fsr() - 250e9).abs() < 1e-3);
    }

    #[test]
    fn current_map() {
        let gth = 1.0 / 35e-12;
        assert!((map_gain_to_current(gth, 495.0, gth) - 495.0).abs() < 1e-12);
        assert_eq!(map_gain_to_current(0.0, 495.0, gth), 0.0);
        assert!((map_gain_to_current(1.02 * gth, 495.0, gth) - 504.9).abs() < 1e-9);
    }

    #[test]
    fn validation() {
        assert!(MBParams {
            n_modes: 4,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(MBParams {
            tau_up: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        let p = MBParams::default();
        let s = ModalState::zeros(7);
        assert!(step_modes(&s, 5e-12, &p, None).is_err());
        assert!(step_modes(&s, 0.0, &p, None).is_err());
    }

    #[test]
    fn pure_cavity_decay() {
        let p = single(MBParams::default());
        let settings = SimSettings {
            duration: 100e-12,
            transient: 0.0,
            record_dt: 0.05e-12,
            dt: 0.05e-12,
            noise: false,
        };
        let mut init = ModalState::zeros(1);
        init.amplitudes[0] = Complex64::new(1.0, 0.0);
        let end = integrate(&p, init, &settings, 0, |_| {}).unwrap();
        let want = (-p.kappa() * 100e-12 / 2.0).exp();
        assert!((end.amplitudes[0].norm() - want).abs() / want < 2e-3);
    }

    #[test]
    fn single_mode_steady_state() {
        let p = single(MBParams::default());
        let p = p.with_gain(2.0 * p.kappa());
        let settings = SimSettings {
            duration: 3e-9,
            transient: 0.0,
            record_dt: 1e-12,
            dt: 0.25e-12,
            noise: false,
        };
        let mut init = ModalState::zeros(1);
        init.amplitudes[0] = Complex64::new(0.1, 0.0);
        let end = integrate(&p, init, &settings, 0, |_| {}).unwrap();
        assert!((end.amplitudes[0].norm_sqr() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn blow_up_is_reported() {
        let p = MBParams::default().with_gain(1e16);
        let mut s = ModalState::initial(&p);
        s.amplitudes[0] = Complex64::new(999.0, 0.0);
        let r = step_modes(&s, 0.25e-12, &p, None);
        assert!(matches!(r, Err(Error::BlowUp { .. }) | Err(Error::NotFinite { .. })));
    }

    #[test]
    fn energy_decreases_below_threshold_without_noise() {
        let p = MBParams::default();
        let p = p.with_gain(0.8 * p.kappa());
        let mut model = ModalModel::new(&p).unwrap();
        let mut s = ModalState::zeros(7);
        for (k, a) in s.amplitudes.iter_mut().enumerate() {
            *a = Complex64::from_polar(0.3, k as f64 * 1.1);
        }
        let mut f = vec![Complex64::new(0.0, 0.0); 7];
        let mut e = s.energy();
        for _ in 0..20_000 {
            model.step(&mut s, 0.25e-12, None, &mut f).unwrap();
            let e2 = s.energy();
            assert!(e2 < e);
            e = e2;
        }
    }

    #[test]
    fn phase_rotation_symmetry() {
        let p = MBParams::default();
        let p = p.with_gain(1.4 * p.kappa());
        let settings = SimSettings {
            duration: 2e-9,
            transient: 0.0,
            record_dt: 1e-12,
            dt: 0.25e-12,
            noise: false,
        };
        let mut a = ModalState::zeros(7);
        for (k, x) in a.amplitudes.iter_mut().enumerate() {
            *x = Complex64::from_polar(0.05 + 0.02 * k as f64, 0.7 * k as f64);
        }
        let mut b = a.clone();
        let rot = Complex64::from_polar(1.0, 1.234);
        b.amplitudes.iter_mut().for_each(|x| *x *= rot);
        let ea = integrate(&p, a, &settings, 0, |_| {}).unwrap();
        let eb = integrate(&p, b, &settings, 0, |_| {}).unwrap();
        for (x, y) in ea.amplitudes.iter().zip(&eb.amplitudes) {
            assert!((x.norm() - y.norm()).abs() < 1e-9);
        }
    }

    #[test]
    fn intensity_moments_of_frozen_modes() {
        let m = IntensityMoments::new(1);
        assert!(m.g2().is_err());
        let mut m = IntensityMoments::new(2);
        m.push(&[Complex64::new(1.0, 0.0), Complex64::from_polar(1.0, 0.3)]);
        // I = 2 + 2cos(ωt + φ): ⟨I²⟩/⟨I⟩² = 6/4.
        assert!((m.g2().unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn constant_single_mode_g2_is_one() {
        let p = single(MBParams::default());
        let t = ModalTrajectory::stationary(&p, &[Complex64::new(0.4, 0.2)], 0.0, 1e-12, 100);
        assert!((g2_modal(&t).unwrap() - 1.0).abs() < 1e-12);
        let z = ModalTrajectory::stationary(&p, &[Complex64::new(0.0, 0.0)], 0.0, 1e-12, 100);
        assert!(matches!(g2_modal(&z), Err(Error::NoField)));
    }

    #[test]
    fn reconstructed_single_mode_is_a_sinusoid() {
        let p = single(MBParams::default());
        let t = ModalTrajectory::stationary(&p, &[Complex64::new(1.0, 0.0)], 0.0, 1e-12, 1001);
        let tr = reconstruct_field(&t, 50.0).unwrap();
        let grid: Vec<f64> = (0..2000).map(|k| k as f64 * 1e-15).collect();
        let e = field_on_grid(&tr, &grid).unwrap();
        for (t, v) in grid.iter().zip(&e) {
            assert!((v - 50.0 * (2.0 * PI * 2.3e12 * t).cos()).abs() < 1e-9);
        }
        assert!(tr.eval(2e-9).is_err());
    }

    #[test]
    fn two_modes_reconstruct_their_beat() {
        let p = MBParams {
            n_modes: 3,
            ..Default::default()
        };
        let amps = [
            Complex64::new(0.0, 0.0),
            Complex64::new(1.0, 0.0),
            Complex64::from_polar(1.0, 0.4),
        ];
        let t = ModalTrajectory::stationary(&p, &amps, 0.0, 1e-12, 20_001);
        let tr = reconstruct_field(&t, 2.0).unwrap();
        let (f0, f1) = (p.mode_frequency(0), p.mode_frequency(1));
        assert!((f1 - f0 - 188.7e9).abs() < 0.1e9);
        for k in 0..5000 {
            let x = 1e-9 + k as f64 * 3.1e-15;
            let want = 2.0 * ((2.0 * PI * f0 * x).cos() + (2.0 * PI * f1 * x + 0.4).cos());
            assert!((tr.eval(x).unwrap() - want).abs() < 1e-6, "t = {x:e}");
        }
    }

    #[test]
    fn parseval_of_reconstruction() {
        let p = MBParams::default();
        let amps: Vec<Complex64> = (0..7)
            .map(|k| Complex64::from_polar(0.1 + 0.05 * k as f64, k as f64))
            .collect();
        let t = ModalTrajectory::stationary(&p, &amps, 0.0, 1e-12, 40_001);
        let tr = reconstruct_field(&t, 3.0).unwrap();
        let n = 400_000;
        let dt = 40e-9 / n as f64;
        let mean_sq = (0..n).map(|k| tr.eval(k as f64 * dt).unwrap().powi(2)).sum::<f64>() / n as f64;
        let want = 9.0 / 2.0 * amps.iter().map(|a| a.norm_sqr()).sum::<f64>();
        assert!((mean_sq / want - 1.0).abs() < 0.01, "{mean_sq} vs {want}");
    }

    #[test]
    fn probe_filter_matches_quadrature_on_trajectory() {
        let p = MBParams::default().with_gain(1.3 / 35e-12);
        let settings = SimSettings {
            duration: 1.2e-9,
            transient: 0.2e-9,
            ..Default::default()
        };
        let traj = simulate(&p, &settings, 5).unwrap();
        let tr = reconstruct_field(&traj, 400.0).unwrap();
        let sigma = 62e-15;
        for t in [0.3e-9, 0.51234e-9, 0.9e-9] {
            let q = crate::model::gaussian_quadrature(|s| tr.sampler().field(s), t, sigma);
            let a = tr.sampler().probe_average(t, sigma);
            assert!((q - a).abs() < 1e-3 * 400.0 * 0.5, "{q} vs {a}");
        }
    }

    #[test]
    fn trajectory_csv_header() {
        let p = MBParams {
            n_modes: 3,
            ..Default::default()
        };
        let t = ModalTrajectory::stationary(&p, &[Complex64::new(1.0, 2.0); 3], 0.0, 1e-12, 2);
        let mut out = Vec::new();
        t.write_csv(&mut out).unwrap();
        let s = String::from_utf8(out).unwrap();
        assert!(s.starts_with("# t_s, re_a_-1, im_a_-1, re_a_0, im_a_0, re_a_1, im_a_1\n"));
        assert_eq!(s.lines().count(), 3);
    }

    fn run(p: &MBParams, duration: f64, seed: u64) -> LiPoint {
        let settings = SimSettings {
            duration: 20e-9 + duration,
            ..SimSettings::default()
        };
        li_point(p, &settings, seed).unwrap()
    }

    fn at_ratio(r: f64) -> MBParams {
        let p = MBParams::default();
        p.with_gain(r * p.threshold_gain())
    }

    #[test]
    fn cold_cavity_noise_power() {
        let p = MBParams::default();
        let pt = run(&p, 100e-9, 1);
        let per_mode = pt.total_power / p.n_modes as f64;
        let want = p.sp_ratio * p.sp_ratio;
        assert!((per_mode / want - 1.0).abs() < 0.2, "{per_mode:e} vs {want:e}");
    }

    #[test]
    fn below_threshold_stays_near_noise_floor() {
        let p = at_ratio(0.5);
        let pt = run(&p, 100e-9, 2);
        let floor = p.sp_ratio * p.sp_ratio;
        assert!(pt.mode_powers.iter().all(|&m| m < 10.0 * floor), "{:?}", pt.mode_powers);
        assert!((pt.g2_zero - 2.0).abs() < 0.1, "g2 = {}", pt.g2_zero);
    }

    #[test]
    fn single_mode_just_above_threshold() {
        let pt = run(&at_ratio(1.05), 100e-9, 3);
        assert!(pt.second_mode_fraction() < 0.05);
        assert!((pt.g2_zero - 1.0).abs() < 0.05);
    }

    #[test]
    fn same_seed_same_trajectory() {
        let p = at_ratio(1.1);
        let s = SimSettings {
            duration: 2e-9,
            transient: 0.5e-9,
            ..SimSettings::default()
        };
        let a = simulate(&p, &s, 9).unwrap();
        let b = simulate(&p, &s, 9).unwrap();
        let c = simulate(&p, &s, 10).unwrap();
        assert_eq!(a.amplitudes, b.amplitudes);
        assert_ne!(a.amplitudes, c.amplitudes);
    }

    #[test]
    fn step_size_convergence() {
        let p = at_ratio(1.1);
        let coarse = run(&p, 50e-9, 4);
        let fine = li_point(
            &p,
            &SimSettings {
                duration: 70e-9,
                dt: 0.125e-12,
                ..SimSettings::default()
            },
            4,
        )
        .unwrap();
        assert!((coarse.total_power / fine.total_power - 1.0).abs() < 0.02);
    }

    #[test]
    fn light_current_contrast() {
        let p = MBParams::default();
        let g = [0.2, 1.2].map(|r| r * p.threshold_gain());
        let pts = li_sweep(
            &p,
            &g,
            &SimSettings {
                duration: 80e-9,
                ..SimSettings::default()
            },
            5,
        )
        .unwrap();
        assert!(pts[1].total_power / pts[0].total_power > 1e5);
        assert!(li_sweep(&p, &[g[1], g[0]], &SimSettings::default(), 5).is_err());
    }
}
