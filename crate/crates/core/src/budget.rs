//! Conversions between detected field, photon number, CW power and the
//! intracavity field scales of the laser model.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::CONSTANTS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BudgetParams {
    /// Hz.
    pub nu: f64,
    /// Detection window, s.
    pub delta_t: f64,
    /// Effective beam area at the detector, m².
    pub mode_area: f64,
    /// Refractive index of the detection medium.
    pub refr_index: f64,
    /// Relative permittivity of the laser cavity.
    pub eps_r: f64,
    /// m³.
    pub cavity_volume: f64,
}

impl Default for BudgetParams {
    fn default() -> Self {
        Self {
            nu: 2.3e12,
            delta_t: 146e-15,
            mode_area: 4.6e-7,
            refr_index: 3.17,
            eps_r: 12.9,
            cavity_volume: 150e-6 * 1000e-6 * 16.6e-6,
        }
    }
}

impl BudgetParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("nu", self.nu),
            ("delta_t", self.delta_t),
            ("mode_area", self.mode_area),
            ("refr_index", self.refr_index),
            ("eps_r", self.eps_r),
            ("cavity_volume", self.cavity_volume),
        ];
        for (name, v) in fields {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Photons carried through the detection window by a wave of peak field
/// `e_amp`: N = c·ε₀·n·E²·A·Δt / (2hν).
pub fn photons_in_window(e_amp: f64, p: &BudgetParams) -> f64 {
    let c = &CONSTANTS;
    c.c * c.eps0 * p.refr_index * e_amp * e_amp * p.mode_area * p.delta_t / (2.0 * c.h * p.nu)
}

/// P = N·h·ν / Δt, W.
pub fn cw_power(n_photons: f64, nu: f64, delta_t: f64) -> f64 {
    n_photons * CONSTANTS.h * nu / delta_t
}

/// Field of one photon in the cavity, √(hν / (2ε₀ε_r V)), V/m.
pub fn single_photon_field(nu: f64, p: &BudgetParams) -> f64 {
    (CONSTANTS.h * nu / (2.0 * CONSTANTS.eps0 * p.eps_r * p.cavity_volume)).sqrt()
}

/// E_sat = ħ / (e·z₁₂·√(τ_up·τ_coh)), V/m.
pub fn saturation_field(z12: f64, tau_up: f64, tau_coh: f64) -> f64 {
    CONSTANTS.hbar / (CONSTANTS.e_charge * z12 * (tau_up * tau_coh).sqrt())
}

/// Labeled budget for one detected field amplitude.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetTable {
    pub field_v_per_m: f64,
    pub nu_thz: f64,
    pub window_fs: f64,
    pub photons_in_window: f64,
    pub cw_power_uw: f64,
    pub single_photon_field_v_per_m: f64,
    pub saturation_field_v_per_m: f64,
    pub single_photon_to_saturation: f64,
}

pub fn budget_table(field: f64, p: &BudgetParams, z12: f64, tau_up: f64, tau_coh: f64) -> Result<BudgetTable> {
    p.validate()?;
    if !(field >= 0.0) {
        return Err(Error::InvalidParameter(format!("field must be ≥ 0, got {field}")));
    }
    let n = photons_in_window(field, p);
    let a_sp = single_photon_field(p.nu, p);
    let e_sat = saturation_field(z12, tau_up, tau_coh);
    Ok(BudgetTable {
        field_v_per_m: field,
        nu_thz: p.nu * 1e-12,
        window_fs: p.delta_t * 1e15,
        photons_in_window: n,
        cw_power_uw: cw_power(n, p.nu, p.delta_t) * 1e6,
        single_photon_field_v_per_m: a_sp,
        saturation_field_v_per_m: e_sat,
        single_photon_to_saturation: a_sp / e_sat,
    })
}

impl std::fmt::Display for BudgetTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "detected field            {:>12.3} V/m", self.field_v_per_m)?;
        writeln!(f, "frequency                 {:>12.3} THz", self.nu_thz)?;
        writeln!(f, "detection window          {:>12.1} fs", self.window_fs)?;
        writeln!(f, "photons in window         {:>12.1}", self.photons_in_window)?;
        writeln!(f, "CW power                  {:>12.3} uW", self.cw_power_uw)?;
        writeln!(
            f,
            "single-photon field       {:>12.4} V/m",
            self.single_photon_field_v_per_m
        )?;
        writeln!(
            f,
            "saturation field          {:>12.4e} V/m",
            self.saturation_field_v_per_m
        )?;
        write!(
            f,
            "single-photon / E_sat     {:>12.4e}",
            self.single_photon_to_saturation
        )
    }
}
