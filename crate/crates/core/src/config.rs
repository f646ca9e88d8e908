//! Experiment configuration: a sectioned `key = value` file in TOML syntax.
//!
//! ```toml
//! master_seed = 7
//!
//! [source]
//! kind = "coherent"          # coherent | thermal | multimode | mb
//! amplitude_v_per_m = 6000
//!
//! [detector]
//! nef_v_per_m = 600
//!
//! [correlator]
//! tau_start_fs = -900
//! tau_step_fs = 45
//! n_tau = 41
//! ```
//!
//! Every key carries its unit in the name. Unknown keys, keys that do not
//! apply to the chosen source kind, wrong types and out-of-range values are
//! rejected with the line they appear on.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::RangeInclusive;
use std::path::PathBuf;

use toml::de::{DeTable, DeValue};
use toml::Spanned;

use crate::correlator::uniform_grid;
use crate::eos::DetectorParams;
use crate::mb::{MBParams, SimSettings};
use crate::sources::{PhaseBlocks, SourceKind, SourceSpec, MIN_THERMAL_COMPONENTS};
use crate::spectra::Window;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct ConfigError {
    /// 1-based line, 0 when the problem is not tied to a line.
    pub line: usize,
    pub key: Option<String>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config")?;
        if self.line > 0 {
            write!(f, " line {}", self.line)?;
        }
        if let Some(k) = &self.key {
            write!(f, ", key '{k}'")?;
        }
        write!(f, ": {}", self.message)
    }
}

type CResult<T> = std::result::Result<T, ConfigError>;

/// Laser model used by `kind = "mb"` sources and by threshold sweeps.
#[derive(Debug, Clone, PartialEq)]
pub struct LaserConfig {
    /// `params.gain` holds the correlation-experiment operating point.
    pub params: MBParams,
    /// Detected V/m per saturation-field unit.
    pub field_scale: f64,
    pub sim: SimSettings,
}

impl Default for LaserConfig {
    fn default() -> Self {
        let params = MBParams::default();
        Self {
            params: params.with_gain(1.03 * params.threshold_gain()),
            field_scale: DEFAULT_FIELD_SCALE,
            sim: SimSettings::default(),
        }
    }
}

/// V/m per E_sat unit; puts operation just above threshold at 50–90 V/m.
pub const DEFAULT_FIELD_SCALE: f64 = 400.0;

#[derive(Debug, Clone, PartialEq)]
pub enum SourceConfig {
    Synthetic { spec: SourceSpec, block_pulses: u64 },
    Laser,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelatorConfig {
    /// s.
    pub tau_start: f64,
    /// s.
    pub tau_step: f64,
    pub n_tau: usize,
    pub n_pulses: u64,
    pub envelope_cycles: f64,
    pub floor_eps: f64,
    pub window: Window,
}

impl Default for CorrelatorConfig {
    fn default() -> Self {
        Self {
            tau_start: -900e-15,
            tau_step: 45e-15,
            n_tau: 41,
            n_pulses: 1_000_000,
            envelope_cycles: 2.0,
            floor_eps: crate::correlator::DEFAULT_FLOOR_EPS,
            window: Window::Hann,
        }
    }
}

impl CorrelatorConfig {
    pub fn taus(&self) -> Vec<f64> {
        uniform_grid(
            self.tau_start,
            self.tau_start + self.tau_step * (self.n_tau as f64 - 1.0),
            self.n_tau,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    /// Absolute pump values G, 1/s, ascending.
    pub gains: Vec<f64>,
    pub threshold_current_ma: f64,
    /// Run the detection pipeline on each point as well.
    pub pipeline: bool,
    pub pipeline_pulses: u64,
    pub pipeline_n_tau: usize,
    /// s.
    pub pipeline_tau_step: f64,
}

pub const DEFAULT_GAIN_RATIOS: [f64; 20] = [
    0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 1.0, 1.01, 1.02, 1.03, 1.05, 1.1, 1.15, 1.2, 1.3, 1.4, 1.5,
];

impl SweepConfig {
    pub fn with_defaults(g_th: f64) -> Self {
        Self {
            gains: DEFAULT_GAIN_RATIOS.iter().map(|r| r * g_th).collect(),
            threshold_current_ma: 495.0,
            pipeline: true,
            pipeline_pulses: 200_000,
            pipeline_n_tau: 41,
            pipeline_tau_step: 45e-15,
        }
    }

    /// Delay grid centred on zero.
    pub fn pipeline_taus(&self) -> Vec<f64> {
        let half = (self.pipeline_n_tau as f64 - 1.0) / 2.0 * self.pipeline_tau_step;
        uniform_grid(-half, half, self.pipeline_n_tau)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub directory: PathBuf,
    /// Dump raw pulse streams as EOSC files.
    pub eosc: bool,
    /// Export the simulated modal trajectory.
    pub trajectory: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("out"),
            eosc: false,
            trajectory: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub source: Option<SourceConfig>,
    pub laser: LaserConfig,
    pub detector: DetectorParams,
    pub correlator: CorrelatorConfig,
    pub sweep: Option<SweepConfig>,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let laser = LaserConfig::default();
        Self {
            master_seed: 0,
            source: None,
            detector: DetectorParams::default(),
            correlator: CorrelatorConfig::default(),
            sweep: None,
            output: OutputConfig::default(),
            laser,
        }
    }
}

/// Line lookup for byte offsets.
struct Lines(Vec<usize>);

impl Lines {
    fn new(text: &str) -> Self {
        Self(text.match_indices('\n').map(|(i, _)| i).collect())
    }

    fn line(&self, offset: usize) -> usize {
        self.0.partition_point(|&nl| nl < offset) + 1
    }
}

/// One table with key consumption tracking.
struct Section<'a, 'i> {
    name: &'a str,
    table: &'a DeTable<'i>,
    line: usize,
    lines: &'a Lines,
    used: BTreeSet<String>,
}

impl<'a, 'i> Section<'a, 'i> {
    fn err(&self, line: usize, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError {
            line,
            key: Some(self.qualified(key)),
            message: message.into(),
        }
    }

    fn qualified(&self, key: &str) -> String {
        if self.name.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.name)
        }
    }

    fn get(&mut self, key: &str) -> Option<(&'a Spanned<DeValue<'i>>, usize)> {
        let table: &'a DeTable<'i> = self.table;
        let (_, v) = table.iter().find(|(k, _)| k.get_ref().as_ref() == key)?;
        self.used.insert(key.to_string());
        Some((v, self.lines.line(v.span().start)))
    }

    fn number(&self, v: &DeValue<'_>, key: &str, line: usize) -> CResult<f64> {
        let parsed = match v {
            DeValue::Float(f) => f.as_str().replace('_', "").parse::<f64>().ok(),
            DeValue::Integer(i) => i64::from_str_radix(&i.as_str().replace('_', ""), i.radix())
                .ok()
                .map(|n| n as f64),
            _ => return Err(self.err(line, key, format!("expected a number, found {}", v.type_str()))),
        };
        parsed.ok_or_else(|| self.err(line, key, "unreadable number"))
    }

    fn f64(&mut self, key: &str, default: f64, range: RangeInclusive<f64>) -> CResult<f64> {
        let Some((v, line)) = self.get(key) else {
            return Ok(default);
        };
        let x = self.number(v.get_ref(), key, line)?;
        check_range(x, &range).map_err(|m| self.err(line, key, m))?;
        Ok(x)
    }

    /// Strictly positive, finite.
    fn positive(&mut self, key: &str, default: f64) -> CResult<f64> {
        let Some((v, line)) = self.get(key) else {
            return Ok(default);
        };
        let x = self.number(v.get_ref(), key, line)?;
        if !(x > 0.0) || !x.is_finite() {
            return Err(self.err(line, key, format!("must be positive, got {x}")));
        }
        Ok(x)
    }

    fn uint(&mut self, key: &str, default: u64, range: RangeInclusive<u64>) -> CResult<u64> {
        let Some((v, line)) = self.get(key) else {
            return Ok(default);
        };
        let DeValue::Integer(i) = v.get_ref() else {
            return Err(self.err(
                line,
                key,
                format!("expected an integer, found {}", v.get_ref().type_str()),
            ));
        };
        let n = i64::from_str_radix(&i.as_str().replace('_', ""), i.radix())
            .map_err(|_| self.err(line, key, "unreadable integer"))?;
        if n < 0 || !range.contains(&(n as u64)) {
            return Err(self.err(
                line,
                key,
                format!("{n} outside allowed range {}..={}", range.start(), range.end()),
            ));
        }
        Ok(n as u64)
    }

    fn bool(&mut self, key: &str, default: bool) -> CResult<bool> {
        let Some((v, line)) = self.get(key) else {
            return Ok(default);
        };
        v.get_ref()
            .as_bool()
            .ok_or_else(|| self.err(line, key, "expected true or false"))
    }

    fn string(&mut self, key: &str) -> CResult<Option<(String, usize)>> {
        let Some((v, line)) = self.get(key) else {
            return Ok(None);
        };
        match v.get_ref().as_str() {
            Some(s) => Ok(Some((s.to_string(), line))),
            None => Err(self.err(line, key, "expected a quoted string")),
        }
    }

    fn list(&mut self, key: &str, range: RangeInclusive<f64>) -> CResult<Option<(Vec<f64>, usize)>> {
        let Some((v, line)) = self.get(key) else {
            return Ok(None);
        };
        let Some(arr) = v.get_ref().as_array() else {
            return Err(self.err(line, key, "expected an array of numbers"));
        };
        if arr.is_empty() {
            return Err(self.err(line, key, "array is empty"));
        }
        let mut out = Vec::with_capacity(arr.len());
        for item in arr.iter() {
            let x = self.number(item.get_ref(), key, line)?;
            check_range(x, &range).map_err(|m| self.err(line, key, m))?;
            out.push(x);
        }
        Ok(Some((out, line)))
    }

    /// Reject every key not read so far.
    fn finish(&self) -> CResult<()> {
        for (k, v) in self.table.iter() {
            let name = k.get_ref().as_ref();
            if self.used.contains(name) || (self.name.is_empty() && v.get_ref().is_table()) {
                continue;
            }
            return Err(self.err(self.lines.line(k.span().start), name, "unknown key"));
        }
        Ok(())
    }
}

fn check_range(x: f64, range: &RangeInclusive<f64>) -> std::result::Result<(), String> {
    if !x.is_finite() || !range.contains(&x) {
        return Err(format!("{x} outside allowed range {}..={}", range.start(), range.end()));
    }
    Ok(())
}

const SECTIONS: [&str; 5] = ["source", "detector", "correlator", "sweep", "output"];

/// Parse and validate a configuration, filling defaults.
pub fn parse_config(text: &str) -> CResult<ExperimentConfig> {
    let lines = Lines::new(text);
    let root = DeTable::parse(text).map_err(|e| ConfigError {
        line: e.span().map_or(0, |s| lines.line(s.start)),
        key: None,
        message: e.message().to_string(),
    })?;
    let root = root.get_ref();
    for (k, v) in root.iter() {
        let name = k.get_ref().as_ref();
        if v.get_ref().is_table() && !SECTIONS.contains(&name) {
            return Err(ConfigError {
                line: lines.line(k.span().start),
                key: Some(name.to_string()),
                message: format!("unknown section, expected one of {}", SECTIONS.join(", ")),
            });
        }
    }
    let section = |name: &'static str| -> Option<Section<'_, '_>> {
        let (k, v) = root.iter().find(|(k, _)| k.get_ref().as_ref() == name)?;
        Some(Section {
            name,
            table: v.get_ref().as_table()?,
            line: lines.line(k.span().start),
            lines: &lines,
            used: BTreeSet::new(),
        })
    };
    let empty = DeTable::default();
    let blank = |name: &'static str| Section {
        name,
        table: &empty,
        line: 0,
        lines: &lines,
        used: BTreeSet::new(),
    };

    let mut cfg = ExperimentConfig::default();
    let mut top = Section {
        name: "",
        table: root,
        line: 1,
        lines: &lines,
        used: BTreeSet::new(),
    };
    cfg.master_seed = top.uint("master_seed", 0, 0..=u64::MAX)?;
    top.finish()?;

    let mut det = section("detector").unwrap_or_else(|| blank("detector"));
    let d = DetectorParams::default();
    cfg.detector = DetectorParams {
        probe_fwhm: det.f64("probe_fwhm_fs", 146.0, 1.0..=5000.0)? / 1e15,
        f_rep: det.f64("f_rep_mhz", 90.0, 1e-3..=1e5)? * 1e6,
        nef: det.f64("nef_v_per_m", d.nef, 0.0..=1e9)?,
        mod_period_pulses: det.uint("mod_period_pulses", d.mod_period_pulses as u64, 2..=u32::MAX as u64)? as u32,
        duty_on_pulses: det.uint("duty_on_pulses", d.duty_on_pulses as u64, 1..=u32::MAX as u64)? as u32,
    };
    if cfg.detector.duty_on_pulses >= cfg.detector.mod_period_pulses {
        return Err(det.err(det.line, "duty_on_pulses", "must be smaller than mod_period_pulses"));
    }
    det.finish()?;

    let mut src = section("source");
    if let Some(s) = src.as_mut() {
        cfg.source = Some(parse_source(s, &mut cfg.laser, &cfg.detector)?);
        s.finish()?;
    }

    let mut cor = section("correlator").unwrap_or_else(|| blank("correlator"));
    let c = CorrelatorConfig::default();
    cfg.correlator = CorrelatorConfig {
        tau_start: cor.f64("tau_start_fs", -900.0, -1e7..=1e7)? / 1e15,
        tau_step: cor.positive("tau_step_fs", 45.0)? / 1e15,
        n_tau: cor.uint("n_tau", c.n_tau as u64, 1..=100_000)? as usize,
        n_pulses: cor.uint("n_pulses", c.n_pulses, 1..=1_000_000_000_000)?,
        envelope_cycles: cor.positive("envelope_cycles", c.envelope_cycles)?,
        floor_eps: cor.positive("floor_eps", c.floor_eps)?,
        window: match cor.string("window")? {
            None => c.window,
            Some((w, line)) => w
                .parse()
                .map_err(|_| cor.err(line, "window", "expected \"hann\" or \"none\""))?,
        },
    };
    cor.finish()?;

    if let Some(mut sw) = section("sweep") {
        let g_th = cfg.laser.params.threshold_gain();
        let mut s = SweepConfig::with_defaults(g_th);
        s.threshold_current_ma = sw.positive("threshold_current_ma", s.threshold_current_ma)?;
        let ratios = sw.list("gain_ratios", 0.0..=100.0)?;
        let currents = sw.list("currents_ma", 0.0..=1e6)?;
        match (ratios, currents) {
            (Some(_), Some((_, line))) => {
                return Err(sw.err(line, "currents_ma", "give either gain_ratios or currents_ma, not both"))
            }
            (Some((r, line)), None) => {
                check_sorted(&r).map_err(|m| sw.err(line, "gain_ratios", m))?;
                s.gains = r.iter().map(|x| x * g_th).collect();
            }
            (None, Some((i, line))) => {
                check_sorted(&i).map_err(|m| sw.err(line, "currents_ma", m))?;
                s.gains = i.iter().map(|x| x / s.threshold_current_ma * g_th).collect();
            }
            (None, None) => {}
        }
        s.pipeline = sw.bool("pipeline", s.pipeline)?;
        s.pipeline_pulses = sw.uint("pipeline_pulses", s.pipeline_pulses, 1..=1_000_000_000_000)?;
        s.pipeline_n_tau = sw.uint("pipeline_n_tau", s.pipeline_n_tau as u64, 1..=100_001)? as usize;
        if s.pipeline_n_tau.is_multiple_of(2) {
            return Err(sw.err(sw.line, "pipeline_n_tau", "must be odd so the grid contains τ = 0"));
        }
        s.pipeline_tau_step = sw.positive("pipeline_tau_step_fs", 45.0)? / 1e15;
        sw.finish()?;
        if !matches!(cfg.source, None | Some(SourceConfig::Laser)) {
            return Err(ConfigError {
                line: sw.line,
                key: None,
                message: "a [sweep] needs source kind \"mb\" or no [source] section".into(),
            });
        }
        cfg.sweep = Some(s);
    }

    if let Some(mut out) = section("output") {
        if let Some((d, _)) = out.string("directory")? {
            cfg.output.directory = PathBuf::from(d);
        }
        cfg.output.eosc = out.bool("eosc", false)?;
        cfg.output.trajectory = out.bool("trajectory", false)?;
        out.finish()?;
    }
    Ok(cfg)
}

/// Round to 12 significant digits so unit conversions echo cleanly.
fn tidy(x: f64) -> f64 {
    format!("{x:.11e}").parse().unwrap_or(x)
}

fn check_sorted(v: &[f64]) -> std::result::Result<(), String> {
    if v.windows(2).any(|w| w[1] < w[0]) {
        return Err("values must be in ascending order".into());
    }
    Ok(())
}

const KINDS: [&str; 4] = ["coherent", "thermal", "multimode", "mb"];

fn parse_source(s: &mut Section<'_, '_>, laser: &mut LaserConfig, det: &DetectorParams) -> CResult<SourceConfig> {
    let Some((kind, kind_line)) = s.string("kind")? else {
        return Err(s.err(
            s.line,
            "kind",
            format!("missing required key, expected one of {}", KINDS.join(", ")),
        ));
    };
    let nu0 = s.f64("nu0_thz", 2.3, 0.01..=100.0)? * 1e12;
    if kind == "mb" {
        let mut p = MBParams {
            nu0,
            tau_coh: s.positive("tau_coh_ps", 0.5)? / 1e12,
            tau_up: s.positive("tau_up_ps", 5.0)? / 1e12,
            tau_photon: s.positive("tau_photon_ps", 35.0)? / 1e12,
            t_roundtrip: s.positive("t_roundtrip_ps", 4.0)? / 1e12,
            gvd: s.f64("gvd_fs2_per_mm", 6.24e5, -1e9..=1e9)? / 1e27,
            dispersive_length_per_rt: s.f64("dispersive_length_mm", 2.0, 0.0..=1e4)? / 1e3,
            z12: s.positive("z12_nm", 7.0)? / 1e9,
            sp_ratio: s.f64("sp_ratio", 4e-5, 0.0..=1.0)?,
            n_modes: s.uint("n_modes", 7, 1..=101)? as usize,
            gain: 0.0,
        };
        if p.n_modes.is_multiple_of(2) {
            return Err(s.err(s.line, "n_modes", "must be odd"));
        }
        let ratio = s.f64("gain_ratio", 1.03, 0.0..=100.0)?;
        p.gain = ratio * p.threshold_gain();
        let sim = SimSettings {
            transient: s.f64("transient_ns", 20.0, 0.0..=1e6)? / 1e9,
            duration: 0.0,
            record_dt: s.positive("record_dt_ps", 1.0)? / 1e12,
            dt: s.positive("dt_ps", 0.25)? / 1e12,
            noise: s.bool("noise", true)?,
        };
        let record = s.positive("record_ns", 200.0)? / 1e9;
        laser.params = p;
        laser.sim = SimSettings {
            duration: sim.transient + record,
            ..sim
        };
        laser.field_scale = s.positive("field_scale_v_per_m", DEFAULT_FIELD_SCALE)?;
        laser
            .params
            .validate()
            .and_then(|_| laser.sim.validate(&laser.params))
            .map_err(|e| s.err(s.line, "kind", e.to_string()))?;
        return Ok(SourceConfig::Laser);
    }
    let kind = match kind.as_str() {
        "coherent" => SourceKind::Coherent {
            amplitude: s.f64("amplitude_v_per_m", 6000.0, 0.0..=1e12)?,
        },
        "thermal" => SourceKind::Thermal {
            rms: s.f64("rms_v_per_m", 6000.0, 0.0..=1e12)?,
            bandwidth: s.positive("bandwidth_ghz", 50.0)? * 1e9,
            n_components: s.uint(
                "n_components",
                MIN_THERMAL_COMPONENTS as u64,
                MIN_THERMAL_COMPONENTS as u64..=1_000_000,
            )? as usize,
        },
        "multimode" => SourceKind::Multimode {
            amplitudes: s
                .list("mode_amplitudes_v_per_m", 0.0..=1e12)?
                .map_or_else(|| vec![6000.0, 6000.0], |(v, _)| v),
            spacing: s.positive("mode_spacing_ghz", 25.0)? * 1e9,
        },
        other => {
            return Err(s.err(
                kind_line,
                "kind",
                format!("unknown source kind '{other}', expected one of {}", KINDS.join(", ")),
            ))
        }
    };
    let block_pulses = s.uint("block_pulses", det.duty_on_pulses as u64, 1..=u32::MAX as u64)?;
    let blocks =
        PhaseBlocks::from_pulses(block_pulses, det.f_rep).map_err(|e| s.err(s.line, "block_pulses", e.to_string()))?;
    let spec = SourceSpec { kind, nu0, blocks };
    spec.validate().map_err(|e| s.err(s.line, "kind", e.to_string()))?;
    Ok(SourceConfig::Synthetic { spec, block_pulses })
}

impl ExperimentConfig {
    /// Effective configuration in the input syntax. Parsing the result gives
    /// back an equal configuration.
    pub fn to_toml(&self) -> String {
        use toml::{Table, Value};
        let mut root = Table::new();
        root.insert("master_seed".into(), Value::Integer(self.master_seed as i64));

        let d = &self.detector;
        let mut det = Table::new();
        det.insert("probe_fwhm_fs".into(), tidy(d.probe_fwhm * 1e15).into());
        det.insert("f_rep_mhz".into(), tidy(d.f_rep * 1e-6).into());
        det.insert("nef_v_per_m".into(), d.nef.into());
        det.insert("mod_period_pulses".into(), Value::Integer(d.mod_period_pulses as i64));
        det.insert("duty_on_pulses".into(), Value::Integer(d.duty_on_pulses as i64));
        root.insert("detector".into(), det.into());

        if let Some(source) = &self.source {
            let mut s = Table::new();
            match source {
                SourceConfig::Synthetic { spec, block_pulses } => {
                    s.insert("kind".into(), spec.kind_name().into());
                    s.insert("nu0_thz".into(), tidy(spec.nu0 * 1e-12).into());
                    s.insert("block_pulses".into(), Value::Integer(*block_pulses as i64));
                    match &spec.kind {
                        SourceKind::Coherent { amplitude } => {
                            s.insert("amplitude_v_per_m".into(), (*amplitude).into());
                        }
                        SourceKind::Thermal {
                            rms,
                            bandwidth,
                            n_components,
                        } => {
                            s.insert("rms_v_per_m".into(), (*rms).into());
                            s.insert("bandwidth_ghz".into(), tidy(bandwidth * 1e-9).into());
                            s.insert("n_components".into(), Value::Integer(*n_components as i64));
                        }
                        SourceKind::Multimode { amplitudes, spacing } => {
                            s.insert(
                                "mode_amplitudes_v_per_m".into(),
                                Value::Array(amplitudes.iter().map(|a| Value::Float(*a)).collect()),
                            );
                            s.insert("mode_spacing_ghz".into(), tidy(spacing * 1e-9).into());
                        }
                    }
                }
                SourceConfig::Laser => {
                    let p = &self.laser.params;
                    let sim = &self.laser.sim;
                    s.insert("kind".into(), "mb".into());
                    s.insert("nu0_thz".into(), tidy(p.nu0 * 1e-12).into());
                    s.insert("tau_coh_ps".into(), tidy(p.tau_coh * 1e12).into());
                    s.insert("tau_up_ps".into(), tidy(p.tau_up * 1e12).into());
                    s.insert("tau_photon_ps".into(), tidy(p.tau_photon * 1e12).into());
                    s.insert("t_roundtrip_ps".into(), tidy(p.t_roundtrip * 1e12).into());
                    s.insert("gvd_fs2_per_mm".into(), tidy(p.gvd * 1e27).into());
                    s.insert(
                        "dispersive_length_mm".into(),
                        tidy(p.dispersive_length_per_rt * 1e3).into(),
                    );
                    s.insert("z12_nm".into(), tidy(p.z12 * 1e9).into());
                    s.insert("sp_ratio".into(), p.sp_ratio.into());
                    s.insert("n_modes".into(), Value::Integer(p.n_modes as i64));
                    s.insert("gain_ratio".into(), tidy(p.gain / p.threshold_gain()).into());
                    s.insert("field_scale_v_per_m".into(), self.laser.field_scale.into());
                    s.insert("transient_ns".into(), tidy(sim.transient * 1e9).into());
                    s.insert("record_ns".into(), tidy((sim.duration - sim.transient) * 1e9).into());
                    s.insert("record_dt_ps".into(), tidy(sim.record_dt * 1e12).into());
                    s.insert("dt_ps".into(), tidy(sim.dt * 1e12).into());
                    s.insert("noise".into(), sim.noise.into());
                }
            }
            root.insert("source".into(), s.into());
        }

        let c = &self.correlator;
        let mut cor = Table::new();
        cor.insert("tau_start_fs".into(), tidy(c.tau_start * 1e15).into());
        cor.insert("tau_step_fs".into(), tidy(c.tau_step * 1e15).into());
        cor.insert("n_tau".into(), Value::Integer(c.n_tau as i64));
        cor.insert("n_pulses".into(), Value::Integer(c.n_pulses as i64));
        cor.insert("envelope_cycles".into(), c.envelope_cycles.into());
        cor.insert("floor_eps".into(), c.floor_eps.into());
        cor.insert(
            "window".into(),
            match c.window {
                Window::Hann => "hann",
                Window::None => "none",
            }
            .into(),
        );
        root.insert("correlator".into(), cor.into());

        if let Some(sw) = &self.sweep {
            let g_th = self.laser.params.threshold_gain();
            let mut t = Table::new();
            t.insert(
                "gain_ratios".into(),
                Value::Array(sw.gains.iter().map(|g| Value::Float(tidy(g / g_th))).collect()),
            );
            t.insert("threshold_current_ma".into(), sw.threshold_current_ma.into());
            t.insert("pipeline".into(), sw.pipeline.into());
            t.insert("pipeline_pulses".into(), Value::Integer(sw.pipeline_pulses as i64));
            t.insert("pipeline_n_tau".into(), Value::Integer(sw.pipeline_n_tau as i64));
            t.insert("pipeline_tau_step_fs".into(), tidy(sw.pipeline_tau_step * 1e15).into());
            root.insert("sweep".into(), t.into());
        }

        let mut out = Table::new();
        out.insert(
            "directory".into(),
            self.output.directory.to_string_lossy().into_owned().into(),
        );
        out.insert("eosc".into(), self.output.eosc.into());
        out.insert("trajectory".into(), self.output.trajectory.into());
        root.insert("output".into(), out.into());
        toml::to_string(&root).expect("plain table serializes")
    }
}
