//! End-to-end experiments driven by an [`ExperimentConfig`].

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::budget::{cw_power, photons_in_window, BudgetParams};
use crate::config::{ExperimentConfig, LaserConfig, SourceConfig, SweepConfig};
use crate::correlator::{correlation_scan, scan_point_stream, CorrelationTrace, Estimate, ScanSettings, ScanSource};
use crate::eos::{write_eosc, AsynchronousFold, DetectorParams};
use crate::error::{Error, Result};
use crate::mb::{map_gain_to_current, reconstruct_field, simulate, LiPoint, ModalTrajectory};
use crate::model::{derive_seed, FieldTrace};
use crate::spectra::{correlation_spectrum, peak_frequency, Spectrum, Window};

/// Outcome of a correlation experiment.
#[derive(Debug, Clone)]
pub struct CorrelationReport {
    pub trace: CorrelationTrace,
    pub g1_spectrum: Spectrum,
    pub g2_spectrum: Spectrum,
    /// Hz.
    pub g1_peak: f64,
    /// Dominant non-DC peak of the raw g² trace, Hz.
    pub g2_peak: f64,
    /// Few-cycle envelope g² at the delay closest to zero.
    pub envelope_g2_zero: Estimate,
}

fn scan_settings(cfg: &ExperimentConfig) -> ScanSettings {
    ScanSettings {
        n_pulses: cfg.correlator.n_pulses,
        floor_eps: cfg.correlator.floor_eps,
        envelope_cycles: cfg.correlator.envelope_cycles,
    }
}

/// Laser trajectory turned into a trace covering `n_pulses` probe shots.
pub fn laser_scan_trace(traj: &ModalTrajectory, laser: &LaserConfig, f_rep: f64, n_pulses: u64) -> Result<FieldTrace> {
    let field = reconstruct_field(traj, laser.field_scale)?;
    AsynchronousFold::trace(&field, f_rep, n_pulses)
}

/// Scan source for the configured `[source]`. Laser sources also return
/// their trajectory.
pub fn build_scan_source(cfg: &ExperimentConfig) -> Result<(ScanSource, Option<ModalTrajectory>)> {
    match &cfg.source {
        None => Err(Error::InvalidParameter(
            "a correlation experiment needs a [source] section".into(),
        )),
        Some(SourceConfig::Synthetic { spec, .. }) => Ok((ScanSource::Synthetic(spec.clone()), None)),
        Some(SourceConfig::Laser) => {
            let traj = simulate(
                &cfg.laser.params,
                &cfg.laser.sim,
                derive_seed(cfg.master_seed, "runner/laser"),
            )?;
            let trace = laser_scan_trace(&traj, &cfg.laser, cfg.detector.f_rep, cfg.correlator.n_pulses)?;
            Ok((ScanSource::Trace(trace), Some(traj)))
        }
    }
}

/// Spectra and summary numbers of a finished scan.
pub fn analyse_trace(trace: CorrelationTrace, window: Window) -> Result<CorrelationReport> {
    let g1: Vec<f64> = trace.g1.iter().map(|e| e.value).collect();
    let g2: Vec<f64> = trace.g2_raw.iter().map(|e| e.value).collect();
    let g1_spectrum = correlation_spectrum(&trace.taus, &g1, window, true)?;
    let g2_spectrum = correlation_spectrum(&trace.taus, &g2, window, true)?;
    let nyq = |s: &Spectrum| *s.frequencies.last().expect("spectrum has bins");
    // Skip the DC bin and its window leakage.
    let g1_peak = peak_frequency(&g1_spectrum, 2.0 * g1_spectrum.bin_width(), nyq(&g1_spectrum))?;
    let g2_peak = peak_frequency(&g2_spectrum, 2.0 * g2_spectrum.bin_width(), nyq(&g2_spectrum))?;
    let envelope_g2_zero = trace.g2_envelope[trace.nearest(0.0)];
    Ok(CorrelationReport {
        trace,
        g1_spectrum,
        g2_spectrum,
        g1_peak,
        g2_peak,
        envelope_g2_zero,
    })
}

/// Run the delay scan without touching the file system.
pub fn correlation_experiment(
    cfg: &ExperimentConfig,
) -> Result<(CorrelationReport, ScanSource, Option<ModalTrajectory>)> {
    let (source, traj) = build_scan_source(cfg)?;
    let trace = correlation_scan(
        &source,
        &cfg.correlator.taus(),
        &scan_settings(cfg),
        &cfg.detector,
        cfg.master_seed,
    )?;
    Ok((analyse_trace(trace, cfg.correlator.window)?, source, traj))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_with<F>(path: &Path, f: F) -> Result<PathBuf>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush()?;
    Ok(path.to_path_buf())
}

pub fn write_effective_config(cfg: &ExperimentConfig, dir: &Path) -> Result<PathBuf> {
    write_with(&dir.join("effective_config.toml"), |w| {
        w.write_all(cfg.to_toml().as_bytes())
    })
}

fn source_label(cfg: &ExperimentConfig) -> String {
    match &cfg.source {
        Some(SourceConfig::Synthetic { spec, .. }) => spec.kind_name().to_string(),
        Some(SourceConfig::Laser) => format!(
            "mb, G/G_th = {}",
            cfg.laser.params.gain / cfg.laser.params.threshold_gain()
        ),
        None => "none".into(),
    }
}

/// Correlation scan plus files: `correlation.csv`, `spectrum_g1.csv`,
/// `spectrum_g2.csv`, `effective_config.toml` and, when enabled, one EOSC
/// stream per delay and the laser trajectory.
pub fn run_correlation_experiment(cfg: &ExperimentConfig) -> Result<(CorrelationReport, Vec<PathBuf>)> {
    let (report, source, traj) = correlation_experiment(cfg)?;
    let dir = &cfg.output.directory;
    let mut files = vec![write_effective_config(cfg, dir)?];
    let header = vec![
        format!("source: {}", source_label(cfg)),
        format!("master_seed: {}", cfg.master_seed),
        format!("nu0_hz: {:e}", report.trace.nu0),
        format!("nef_v_per_m: {}", cfg.detector.nef),
        format!("envelope_cycles: {}", cfg.correlator.envelope_cycles),
    ];
    files.push(write_with(&dir.join("correlation.csv"), |w| {
        report.trace.write_csv(w, &header)
    })?);
    files.push(write_with(&dir.join("spectrum_g1.csv"), |w| {
        report.g1_spectrum.write_csv(w)
    })?);
    files.push(write_with(&dir.join("spectrum_g2.csv"), |w| {
        report.g2_spectrum.write_csv(w)
    })?);
    if cfg.output.eosc {
        for (i, &tau) in report.trace.taus.iter().enumerate() {
            let stream = scan_point_stream(&source, tau, i, cfg.correlator.n_pulses, &cfg.detector, cfg.master_seed)?;
            let path = dir.join("eosc").join(format!("tau_{i:04}.eosc"));
            let mut w = create(&path)?;
            write_eosc(&mut w, &stream)?;
            w.flush()?;
            files.push(path);
        }
    }
    if let (true, Some(t)) = (cfg.output.trajectory, &traj) {
        files.push(write_with(&dir.join("trajectory.csv"), |w| t.write_csv(w))?);
    }
    Ok((report, files))
}

/// One operating point of a threshold sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub gain: f64,
    pub gain_ratio: f64,
    pub current_ma: f64,
    /// Σ⟨|a_m|²⟩, E_sat² units.
    pub total_power: f64,
    /// Detected peak field, V/m.
    pub detected_field: f64,
    /// CW power equivalent of the detected field, µW.
    pub output_power_uw: f64,
    pub second_mode_fraction: Option<f64>,
    pub g2_modal: Option<f64>,
    pub g2_modal_err: Option<f64>,
    pub g2_pipeline: Option<f64>,
    pub g2_pipeline_err: Option<f64>,
    /// "ok", "disabled", "skipped: …" or "failed: …".
    pub pipeline_status: String,
    /// Failure of the simulation itself.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub master_seed: u64,
    pub threshold_gain: f64,
    pub threshold_current_ma: f64,
    pub field_scale: f64,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# master_seed: {}", self.master_seed)?;
        writeln!(w, "# threshold_gain_per_s: {:e}", self.threshold_gain)?;
        writeln!(w, "# field_scale_v_per_m: {}", self.field_scale)?;
        writeln!(
            w,
            "gain_per_s,gain_ratio,current_ma,total_power_esat2,detected_field_v_per_m,output_power_uw,second_mode_fraction,g2_modal,g2_modal_err,g2_pipeline,g2_pipeline_err,pipeline_status,error"
        )?;
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6e}"));
        for r in &self.rows {
            writeln!(
                w,
                "{:.6e},{:.6},{:.3},{:.6e},{:.6e},{:.6e},{},{},{},{},{},{},{}",
                r.gain,
                r.gain_ratio,
                r.current_ma,
                r.total_power,
                r.detected_field,
                r.output_power_uw,
                opt(r.second_mode_fraction),
                opt(r.g2_modal),
                opt(r.g2_modal_err),
                opt(r.g2_pipeline),
                opt(r.g2_pipeline_err),
                csv_text(&r.pipeline_status),
                csv_text(r.error.as_deref().unwrap_or("")),
            )?;
        }
        Ok(())
    }
}

fn csv_text(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Few-cycle envelope g²(0) of a laser trajectory through the full
/// detection chain.
pub fn pipeline_g2_zero(
    traj: &ModalTrajectory,
    laser: &LaserConfig,
    sweep: &SweepConfig,
    detector: &DetectorParams,
    envelope_cycles: f64,
    floor_eps: f64,
    seed: u64,
) -> Result<Estimate> {
    let trace = laser_scan_trace(traj, laser, detector.f_rep, sweep.pipeline_pulses)?;
    let settings = ScanSettings {
        n_pulses: sweep.pipeline_pulses,
        floor_eps,
        envelope_cycles,
    };
    let scan = correlation_scan(
        &ScanSource::Trace(trace),
        &sweep.pipeline_taus(),
        &settings,
        detector,
        seed,
    )?;
    Ok(scan.g2_envelope[scan.nearest(0.0)])
}

fn sweep_row(cfg: &ExperimentConfig, sweep: &SweepConfig, index: usize, gain: f64) -> SweepRow {
    let laser = &cfg.laser;
    let params = laser.params.with_gain(gain);
    let g_th = params.threshold_gain();
    let mut row = SweepRow {
        gain,
        gain_ratio: gain / g_th,
        current_ma: map_gain_to_current(gain, sweep.threshold_current_ma, g_th),
        total_power: f64::NAN,
        detected_field: f64::NAN,
        output_power_uw: f64::NAN,
        second_mode_fraction: None,
        g2_modal: None,
        g2_modal_err: None,
        g2_pipeline: None,
        g2_pipeline_err: None,
        pipeline_status: "disabled".into(),
        error: None,
    };
    let seed = derive_seed(cfg.master_seed, &format!("sweep/point/{index}"));
    let traj = match simulate(&params, &laser.sim, seed) {
        Ok(t) => t,
        Err(e) => {
            row.error = Some(e.to_string());
            row.pipeline_status = "skipped: simulation failed".into();
            return row;
        }
    };
    match LiPoint::from_trajectory(&traj) {
        Ok(p) => {
            row.total_power = p.total_power;
            row.second_mode_fraction = Some(p.second_mode_fraction());
            row.g2_modal = Some(p.g2_zero);
            row.g2_modal_err = Some(p.g2_err);
        }
        Err(e) => {
            row.total_power = 0.0;
            row.error = Some(e.to_string());
        }
    }
    let budget = BudgetParams {
        nu: params.nu0,
        delta_t: cfg.detector.probe_fwhm,
        ..BudgetParams::default()
    };
    row.detected_field = laser.field_scale * row.total_power.sqrt();
    row.output_power_uw = cw_power(
        photons_in_window(row.detected_field, &budget),
        budget.nu,
        budget.delta_t,
    ) * 1e6;
    if sweep.pipeline {
        let pseed = derive_seed(cfg.master_seed, &format!("sweep/pipeline/{index}"));
        match pipeline_g2_zero(
            &traj,
            laser,
            sweep,
            &cfg.detector,
            cfg.correlator.envelope_cycles,
            cfg.correlator.floor_eps,
            pseed,
        ) {
            Ok(e) => {
                row.g2_pipeline = Some(e.value);
                row.g2_pipeline_err = Some(e.stderr);
                row.pipeline_status = "ok".into();
            }
            Err(e @ Error::InsufficientSignal { .. }) => {
                row.pipeline_status = format!("skipped: {e}");
            }
            Err(e) => row.pipeline_status = format!("failed: {e}"),
        }
    }
    row
}

/// Threshold sweep without file output. Points run in parallel; each has
/// its own derived seeds, so the result does not depend on scheduling.
pub fn threshold_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("a threshold sweep needs a [sweep] section".into()))?;
    let rows: Vec<SweepRow> = sweep
        .gains
        .par_iter()
        .enumerate()
        .map(|(i, &g)| sweep_row(cfg, sweep, i, g))
        .collect();
    Ok(SweepReport {
        master_seed: cfg.master_seed,
        threshold_gain: cfg.laser.params.threshold_gain(),
        threshold_current_ma: sweep.threshold_current_ma,
        field_scale: cfg.laser.field_scale,
        rows,
    })
}

/// Threshold sweep written to `sweep.csv`, `sweep.json` and
/// `effective_config.toml`.
pub fn run_threshold_sweep(cfg: &ExperimentConfig) -> Result<(SweepReport, Vec<PathBuf>)> {
    let report = threshold_sweep(cfg)?;
    let dir = &cfg.output.directory;
    let mut files = vec![write_effective_config(cfg, dir)?];
    files.push(write_with(&dir.join("sweep.csv"), |w| report.write_csv(w))?);
    files.push(write_with(&dir.join("sweep.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &report)?;
        writeln!(w)
    })?);
    Ok((report, files))
}

/// Laser trajectory export: `trajectory.csv` and `trajectory_summary.json`.
pub fn run_simulation(cfg: &ExperimentConfig) -> Result<(LiPoint, Vec<PathBuf>)> {
    let traj = simulate(
        &cfg.laser.params,
        &cfg.laser.sim,
        derive_seed(cfg.master_seed, "runner/laser"),
    )?;
    let point = LiPoint::from_trajectory(&traj)?;
    let dir = &cfg.output.directory;
    let files = vec![
        write_effective_config(cfg, dir)?,
        write_with(&dir.join("trajectory.csv"), |w| traj.write_csv(w))?,
        write_with(&dir.join("trajectory_summary.json"), |w| {
            serde_json::to_writer_pretty(&mut *w, &point)?;
            writeln!(w)
        })?,
    ];
    Ok((point, files))
}

/// Columns of a correlation CSV as written by [`CorrelationTrace::write_csv`].
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationTable {
    pub names: Vec<String>,
    /// Column-major values.
    pub columns: Vec<Vec<f64>>,
}

impl CorrelationTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Format("correlation CSV is empty".into()))?;
        let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
        let mut columns = vec![Vec::new(); names.len()];
        for (no, line) in lines {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != names.len() {
                return Err(Error::Format(format!(
                    "line {}: {} fields, header has {}",
                    no + 1,
                    cells.len(),
                    names.len()
                )));
            }
            for (col, cell) in columns.iter_mut().zip(cells) {
                let v = cell
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("line {}: bad number '{cell}'", no + 1)))?;
                col.push(v);
            }
        }
        Ok(Self { names, columns })
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
            .ok_or_else(|| Error::Format(format!("no column '{name}' (have {})", self.names.join(", "))))
    }
}

/// Spectrum of one column of a correlation CSV against its `tau_fs` column.
pub fn spectrum_from_csv(text: &str, column: &str, window: Window) -> Result<Spectrum> {
    let table = CorrelationTable::parse(text)?;
    let taus: Vec<f64> = table.column("tau_fs")?.iter().map(|t| t * 1e-15).collect();
    correlation_spectrum(&taus, table.column(column)?, window, true)
}

/// Correlation trace from pre-recorded EOSC streams, one delay per stream.
///
/// The envelope needs at least two delays on a fine enough grid; when it
/// cannot be formed its column holds NaN.
pub fn correlate_streams(
    streams: &[crate::eos::PulseSampleStream],
    nu0: f64,
    envelope_cycles: f64,
    floor_eps: f64,
) -> Result<CorrelationTrace> {
    if streams.is_empty() {
        return Err(Error::InvalidParameter("no EOSC streams given".into()));
    }
    let mut order: Vec<usize> = (0..streams.len()).collect();
    order.sort_by(|&a, &b| streams[a].tau.total_cmp(&streams[b].tau));
    let stats: Vec<_> = order
        .par_iter()
        .map(|&i| crate::correlator::accumulate(&streams[i]))
        .collect();
    let taus: Vec<f64> = order.iter().map(|&i| streams[i].tau).collect();
    let nef = streams[0].params.nef;
    let floor = crate::correlator::variance_floor(floor_eps, nef);
    let mut trace = CorrelationTrace::from_stats(taus, &stats, floor, nef, nu0)?;
    trace.g2_envelope = match crate::correlator::few_cycle_envelope(&trace, nu0, envelope_cycles) {
        Ok(env) if trace.len() >= 2 => env,
        _ => vec![
            Estimate {
                value: f64::NAN,
                stderr: f64::NAN
            };
            trace.len()
        ],
    };
    Ok(trace)
}
