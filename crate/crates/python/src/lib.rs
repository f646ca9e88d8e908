//! Python bindings for the `thz_coherence` crate.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use thz_coherence::budget::{budget_table, cw_power, photons_in_window, BudgetParams};
use thz_coherence::correlator::{correlation_scan, uniform_grid, ScanSettings, ScanSource};
use thz_coherence::eos::DetectorParams;
use thz_coherence::mb::{self, MBParams, SimSettings};
use thz_coherence::runner;
use thz_coherence::sources::SourceSpec;
use thz_coherence::{parse_config, Error, ExperimentConfig};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::InvalidParameter(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn to_dict<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Laser model parameters. Keyword arguments override the defaults.
#[pyclass(name = "MBParams", module = "thz_coherence", skip_from_py_object)]
#[derive(Clone)]
struct PyMBParams {
    inner: MBParams,
}

#[pymethods]
impl PyMBParams {
    #[new]
    #[pyo3(signature = (gain_ratio=None, n_modes=None, noise_ratio=None))]
    fn new(gain_ratio: Option<f64>, n_modes: Option<usize>, noise_ratio: Option<f64>) -> PyResult<Self> {
        let mut p = MBParams::default();
        if let Some(n) = n_modes {
            p.n_modes = n;
        }
        if let Some(s) = noise_ratio {
            p.sp_ratio = s;
        }
        if let Some(r) = gain_ratio {
            p.gain = r * p.threshold_gain();
        }
        p.validate().map_err(to_py)?;
        Ok(Self { inner: p })
    }

    #[getter]
    fn gain(&self) -> f64 {
        self.inner.gain
    }

    #[getter]
    fn n_modes(&self) -> usize {
        self.inner.n_modes
    }

    #[getter]
    fn threshold_gain(&self) -> f64 {
        self.inner.threshold_gain()
    }

    #[getter]
    fn kappa(&self) -> f64 {
        self.inner.kappa()
    }

    #[getter]
    fn fsr(&self) -> f64 {
        self.inner.fsr()
    }

    fn gvd_detuning(&self, m: i64) -> f64 {
        mb::gvd_detuning(m, &self.inner)
    }

    fn as_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_dict(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "MBParams(gain={:.4e}, G/G_th={:.3}, n_modes={})",
            self.inner.gain,
            self.inner.gain / self.inner.threshold_gain(),
            self.inner.n_modes
        )
    }
}

/// Recorded modal amplitudes.
#[pyclass(name = "ModalTrajectory", module = "thz_coherence")]
struct PyTrajectory {
    inner: mb::ModalTrajectory,
}

#[pymethods]
impl PyTrajectory {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn n_modes(&self) -> usize {
        self.inner.n_modes
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.inner.dt
    }

    fn mode_powers(&self) -> Vec<f64> {
        self.inner.mode_powers()
    }

    /// Amplitudes of snapshot `i` as (re, im) pairs.
    fn snapshot(&self, i: usize) -> PyResult<Vec<(f64, f64)>> {
        if i >= self.inner.len() {
            return Err(PyValueError::new_err(format!("snapshot {i} out of range")));
        }
        Ok(self.inner.snapshot(i).iter().map(|a| (a.re, a.im)).collect())
    }

    fn g2_modal(&self) -> PyResult<f64> {
        mb::g2_modal(&self.inner).map_err(to_py)
    }

    /// Reconstructed field in V/m at the given times.
    fn field(&self, times: Vec<f64>, field_scale: f64) -> PyResult<Vec<f64>> {
        let trace = mb::reconstruct_field(&self.inner, field_scale).map_err(to_py)?;
        mb::field_on_grid(&trace, &times).map_err(to_py)
    }
}

#[pyfunction]
#[pyo3(signature = (params, seed, duration_s=None, transient_s=None, record_dt_s=None, noise=true))]
fn simulate(
    py: Python<'_>,
    params: &PyMBParams,
    seed: u64,
    duration_s: Option<f64>,
    transient_s: Option<f64>,
    record_dt_s: Option<f64>,
    noise: bool,
) -> PyResult<PyTrajectory> {
    let mut s = SimSettings::default();
    if let Some(t) = transient_s {
        s.transient = t;
    }
    if let Some(d) = duration_s {
        s.duration = s.transient + d;
    }
    if let Some(r) = record_dt_s {
        s.record_dt = r;
    }
    s.noise = noise;
    let p = params.inner;
    let inner = py.detach(|| mb::simulate(&p, &s, seed)).map_err(to_py)?;
    Ok(PyTrajectory { inner })
}

/// Total power, g2(0) and its error at each gain ratio.
#[pyfunction]
#[pyo3(signature = (gain_ratios, seed, params=None))]
fn li_sweep<'py>(
    py: Python<'py>,
    gain_ratios: Vec<f64>,
    seed: u64,
    params: Option<&PyMBParams>,
) -> PyResult<Bound<'py, PyAny>> {
    let p = params.map(|p| p.inner).unwrap_or_default();
    let gains: Vec<f64> = gain_ratios.iter().map(|r| r * p.threshold_gain()).collect();
    let s = SimSettings::default();
    let points = py.detach(|| mb::li_sweep(&p, &gains, &s, seed)).map_err(to_py)?;
    to_dict(py, &points)
}

fn source_spec(kind: &str, nu0: f64, amplitudes: Vec<f64>, bandwidth: f64, spacing: f64) -> PyResult<SourceSpec> {
    let spec = match kind {
        "coherent" => SourceSpec::coherent(nu0, *amplitudes.first().unwrap_or(&6000.0)),
        "thermal" => SourceSpec::thermal(nu0, *amplitudes.first().unwrap_or(&6000.0), bandwidth),
        "multimode" => SourceSpec::multimode(nu0, amplitudes, spacing),
        other => return Err(PyValueError::new_err(format!("unknown source kind '{other}'"))),
    };
    spec.validate().map_err(to_py)?;
    Ok(spec)
}

/// Delay scan of a synthetic source. Returns a dict of columns.
#[pyfunction]
#[pyo3(signature = (kind, amplitudes, seed, n_pulses=100_000, tau_max_s=900e-15, n_tau=41, nu0=2.3e12, bandwidth=50e9, spacing=25e9, nef=None))]
#[allow(clippy::too_many_arguments)]
fn correlate<'py>(
    py: Python<'py>,
    kind: &str,
    amplitudes: Vec<f64>,
    seed: u64,
    n_pulses: u64,
    tau_max_s: f64,
    n_tau: usize,
    nu0: f64,
    bandwidth: f64,
    spacing: f64,
    nef: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = source_spec(kind, nu0, amplitudes, bandwidth, spacing)?;
    let mut det = DetectorParams::default();
    if let Some(n) = nef {
        det.nef = n;
    }
    let taus = uniform_grid(-tau_max_s, tau_max_s, n_tau);
    let settings = ScanSettings {
        n_pulses,
        ..ScanSettings::default()
    };
    let source = ScanSource::Synthetic(spec);
    let trace = py
        .detach(|| correlation_scan(&source, &taus, &settings, &det, seed))
        .map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("tau_s", trace.taus.clone())?;
    for (name, col) in [
        ("g1", &trace.g1),
        ("g2_raw", &trace.g2_raw),
        ("g2_env", &trace.g2_envelope),
    ] {
        out.set_item(name, col.iter().map(|e| e.value).collect::<Vec<_>>())?;
        out.set_item(format!("{name}_err"), col.iter().map(|e| e.stderr).collect::<Vec<_>>())?;
    }
    Ok(out)
}

#[pyfunction]
fn budget<'py>(py: Python<'py>, field_v_per_m: f64) -> PyResult<Bound<'py, PyAny>> {
    let p = MBParams::default();
    let table = budget_table(field_v_per_m, &BudgetParams::default(), p.z12, p.tau_up, p.tau_coh).map_err(to_py)?;
    to_dict(py, &table)
}

#[pyfunction(name = "photons_in_window")]
fn py_photons_in_window(field_v_per_m: f64) -> f64 {
    photons_in_window(field_v_per_m, &BudgetParams::default())
}

#[pyfunction(name = "cw_power")]
fn py_cw_power(n_photons: f64, nu: f64, delta_t: f64) -> f64 {
    cw_power(n_photons, nu, delta_t)
}

/// Parsed experiment configuration.
#[pyclass(name = "ExperimentConfig", module = "thz_coherence")]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: parse_config(text).map_err(|e| to_py(e.into()))?,
        })
    }

    #[getter]
    fn master_seed(&self) -> u64 {
        self.inner.master_seed
    }

    #[setter]
    fn set_output_dir(&mut self, dir: std::path::PathBuf) {
        self.inner.output.directory = dir;
    }

    #[getter]
    fn output_dir(&self) -> std::path::PathBuf {
        self.inner.output.directory.clone()
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    /// Run the configured delay scan and write its outputs.
    fn run_correlation<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let (report, files) = py
            .detach(|| runner::run_correlation_experiment(&self.inner))
            .map_err(to_py)?;
        let out = PyDict::new(py);
        out.set_item("envelope_g2_zero", report.envelope_g2_zero.value)?;
        out.set_item("envelope_g2_zero_err", report.envelope_g2_zero.stderr)?;
        out.set_item("g1_peak_hz", report.g1_peak)?;
        out.set_item("g2_peak_hz", report.g2_peak)?;
        out.set_item("files", files)?;
        Ok(out)
    }

    /// Run the configured threshold sweep and write its outputs.
    fn run_sweep<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let (report, _) = py.detach(|| runner::run_threshold_sweep(&self.inner)).map_err(to_py)?;
        to_dict(py, &report)
    }
}

#[pyfunction]
fn parse(text: &str) -> PyResult<PyConfig> {
    PyConfig::parse(text)
}

#[pymodule]
#[pyo3(name = "thz_coherence")]
fn thz_coherence_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMBParams>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_class::<PyConfig>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(li_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(correlate, m)?)?;
    m.add_function(wrap_pyfunction!(budget, m)?)?;
    m.add_function(wrap_pyfunction!(py_photons_in_window, m)?)?;
    m.add_function(wrap_pyfunction!(py_cw_power, m)?)?;
    m.add_function(wrap_pyfunction!(parse, m)?)?;
    Ok(())
}
