//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any criterion fails.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use thz_coherence::budget::{cw_power, photons_in_window, BudgetParams};
use thz_coherence::config::{parse_config, ExperimentConfig, SweepConfig};
use thz_coherence::correlator::{
    accumulate, correlation_scan, estimate_g1, estimate_g2, estimate_g2_uncorrected, few_cycle_envelope,
    g1_from_moments, g2_from_moments, scan_point_stats, variance_floor, CorrelationTrace, ScanSettings, ScanSource,
    SufficientStats,
};
use thz_coherence::eos::{sample_pulse_stream, DetectorParams};
use thz_coherence::model::{gaussian_transfer, FWHM_PER_SIGMA};
use thz_coherence::runner::{correlation_experiment, run_correlation_experiment, threshold_sweep};
use thz_coherence::sources::{PhaseBlocks, SourceSpec};

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn load(name: &str) -> ExperimentConfig {
    let text = std::fs::read_to_string(config_path(name)).expect("fixture config");
    parse_config(&text).expect("fixture parses")
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn probe_transfer(det: &DetectorParams, nu: f64) -> f64 {
    gaussian_transfer(nu, det.probe_fwhm / FWHM_PER_SIGMA)
}

/// Criteria 1 and 2 share one scan.
fn coherent_benchmark() -> (Outcome, Outcome) {
    let cfg = load("coherent.toml");
    assert_eq!(cfg.correlator.taus().len(), 41);
    assert_eq!(cfg.correlator.n_pulses, 1_000_000);
    let start = Instant::now();
    let (report, _, _) = correlation_experiment(&cfg).expect("coherent scan");
    let secs = start.elapsed().as_secs_f64();
    let threads = rayon::current_num_threads() as f64;
    let g2 = report.envelope_g2_zero;
    let c1 = outcome(
        (g2.value - 1.0).abs() <= 0.03 && secs * threads < 120.0,
        format!(
            "envelope g2(0) = {:.4} ± {:.4} (target 1.00 ± 0.03); {secs:.1} s wall on {threads} thread(s)",
            g2.value, g2.stderr
        ),
    );
    let bin2 = report.g2_spectrum.bin_width();
    let bin1 = report.g1_spectrum.bin_width();
    let c2 = outcome(
        (report.g2_peak - 4.6e12).abs() <= bin2 && (report.g1_peak - 2.3e12).abs() <= bin1,
        format!(
            "g2_raw peak {:.3} THz (4.6 ± {:.3}), g1 peak {:.3} THz (2.3 ± {:.3})",
            report.g2_peak * 1e-12,
            bin2 * 1e-12,
            report.g1_peak * 1e-12,
            bin1 * 1e-12
        ),
    );
    (c1, c2)
}

fn stats_over_delays(
    source: &ScanSource,
    taus: &[f64],
    n: u64,
    det: &DetectorParams,
    seed: u64,
) -> Vec<SufficientStats> {
    taus.par_iter()
        .enumerate()
        .map(|(i, &tau)| scan_point_stats(source, tau, i, n, det, seed).expect("scan point"))
        .collect()
}

fn thermal_oracle() -> Outcome {
    let cfg = load("thermal.toml");
    assert_eq!(cfg.detector.nef, 0.0);
    let Some(thz_coherence::config::SourceConfig::Synthetic { spec, .. }) = &cfg.source else {
        panic!("thermal fixture must be synthetic");
    };
    let taus = cfg.correlator.taus();
    let source = ScanSource::Synthetic(spec.clone());
    let stats = stats_over_delays(&source, &taus, cfg.correlator.n_pulses, &cfg.detector, cfg.master_seed);
    let mut trace = CorrelationTrace::from_stats(taus.clone(), &stats, 0.0, 0.0, spec.nu0).unwrap();
    trace.g2_envelope = few_cycle_envelope(&trace, spec.nu0, cfg.correlator.envelope_cycles).unwrap();
    let g2 = trace.g2_envelope[trace.nearest(0.0)];
    // Isserlis: g2_raw − 1 − 2·g1² vanishes; its error comes from the same
    // jackknife so correlations between g1 and g2 are included.
    let mut holds = 0;
    for s in &stats {
        let d = s
            .jackknife(|on, off| {
                let g1 = g1_from_moments(on, off, 0.0)?;
                Ok(g2_from_moments(on, off, 0.0)? - 1.0 - 2.0 * g1 * g1)
            })
            .unwrap();
        if d.value.abs() <= 3.0 * d.stderr {
            holds += 1;
        }
    }
    let frac = holds as f64 / stats.len() as f64;
    outcome(
        (g2.value - 2.0).abs() <= 0.05 && frac >= 0.95,
        format!(
            "envelope g2(0) = {:.4} ± {:.4} (target 2.00 ± 0.05); Isserlis within 3σ at {holds}/{} delays",
            g2.value,
            g2.stderr,
            stats.len()
        ),
    )
}

/// ⟨|Σ e^{iφ_k}|⁴⟩ / ⟨|Σ e^{iφ_k}|²⟩² over random phase sets.
fn monte_carlo_g2(m: usize, draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut s2, mut s4) = (0.0, 0.0);
    for _ in 0..draws {
        let z: Complex64 = (0..m)
            .map(|_| Complex64::from_polar(1.0, rng.random::<f64>() * 2.0 * PI))
            .sum();
        let i = z.norm_sqr();
        s2 += i;
        s4 += i * i;
    }
    let n = draws as f64;
    (s4 / n) / (s2 / n).powi(2)
}

fn multimode_oracle() -> Outcome {
    let det = DetectorParams::default();
    let mut pass = true;
    let mut parts = Vec::new();
    for (k, m) in [2usize, 3, 5].into_iter().enumerate() {
        let spec = SourceSpec::multimode(2.3e12, vec![6000.0; m], 25e9);
        let settings = ScanSettings::default();
        let taus = thz_coherence::correlator::uniform_grid(-900e-15, 900e-15, 41);
        let scan = correlation_scan(&ScanSource::Synthetic(spec), &taus, &settings, &det, 100 + k as u64).unwrap();
        let g2 = scan.g2_envelope[scan.nearest(0.0)].value;
        let oracle = 2.0 - 1.0 / m as f64;
        let mc = monte_carlo_g2(m, 100_000, 900 + m as u64);
        let ok = (g2 - oracle).abs() <= 0.05 && (mc - oracle).abs() <= 0.05 && (g2 - mc).abs() <= 0.05;
        pass &= ok;
        parts.push(format!("M={m}: {g2:.4} (2−1/M = {oracle:.4}, MC {mc:.4})"));
    }
    outcome(pass, parts.join("; "))
}

fn threshold_sweep_check() -> Outcome {
    let mut cfg = ExperimentConfig {
        master_seed: 3,
        ..Default::default()
    };
    let g_th = cfg.laser.params.threshold_gain();
    let mut sweep = SweepConfig::with_defaults(g_th);
    sweep.pipeline = false;
    cfg.sweep = Some(sweep);
    let start = Instant::now();
    let report = threshold_sweep(&cfg).expect("sweep");
    let secs = start.elapsed().as_secs_f64();
    let threads = rayon::current_num_threads() as f64;
    let rows = &report.rows;
    for r in rows {
        println!(
            "    G/G_th {:5.2}  P {:10.3e}  g2 {:.4} ± {:.4}  second mode {:.2e}  {}",
            r.gain_ratio,
            r.total_power,
            r.g2_modal.unwrap_or(f64::NAN),
            r.g2_modal_err.unwrap_or(f64::NAN),
            r.second_mode_fraction.unwrap_or(f64::NAN),
            r.error.as_deref().unwrap_or("")
        );
    }
    let in_range: Vec<_> = rows
        .iter()
        .filter(|r| r.gain_ratio >= 0.2 - 1e-9 && r.gain_ratio <= 1.2 + 1e-9)
        .collect();
    let pmax = in_range.iter().map(|r| r.total_power).fold(0.0, f64::max);
    let pmin = in_range.iter().map(|r| r.total_power).fold(f64::INFINITY, f64::min);
    let a = pmax / pmin > 1e5;
    let half = rows
        .iter()
        .find(|r| (r.gain_ratio - 0.5).abs() < 1e-9)
        .expect("G = 0.5 G_th in sweep");
    let g_half = half.g2_modal.unwrap_or(f64::NAN);
    let b = (g_half - 2.0).abs() <= 0.2;
    let window: Vec<f64> = rows
        .iter()
        .filter(|r| {
            r.gain_ratio > 1.0
                && r.second_mode_fraction.is_some_and(|f| f < 0.2)
                && r.g2_modal.is_some_and(|g| (g - 1.0).abs() <= 0.05)
        })
        .map(|r| r.gain_ratio)
        .collect();
    let c = !window.is_empty();
    let multimode: Vec<_> = rows
        .iter()
        .filter(|r| r.second_mode_fraction.is_some_and(|f| f >= 0.2))
        .collect();
    let max_second = rows.iter().filter_map(|r| r.second_mode_fraction).fold(0.0, f64::max);
    let d = !multimode.is_empty() && multimode.iter().all(|r| r.g2_modal.is_some_and(|g| g > 1.2));
    let time_ok = secs < 30.0 * 60.0;
    outcome(
        a && b && c && d && time_ok,
        format!(
            "(a) P ratio {:.2e} [{}] (b) g2(0.5 G_th) = {g_half:.3} [{}] (c) single-mode window at G/G_th {:?} [{}] \
             (d) {} multimode point(s), largest second-mode fraction {max_second:.2e} [{}]; {secs:.1} s on {threads} thread(s)",
            pmax / pmin,
            pf(a),
            pf(b),
            window,
            pf(c),
            multimode.len(),
            pf(d)
        ),
    )
}

fn pf(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "FAIL"
    }
}

fn photon_budget() -> Outcome {
    let p = cw_power(1500.0, 2.3e12, 146e-15) * 1e6;
    let n = photons_in_window(90.0, &BudgetParams::default());
    outcome(
        (p - 15.7).abs() <= 0.05 && (p / 16.0 - 1.0).abs() <= 0.03 && (n / 1500.0 - 1.0).abs() <= 0.1,
        format!("cw_power = {p:.3} µW (≈16 within 3%), photons_in_window(90 V/m) = {n:.1}"),
    )
}

fn noise_correction() -> Outcome {
    let det = DetectorParams::default();
    // Filtered amplitude equals the noise-equivalent field.
    let amplitude = det.nef / probe_transfer(&det, 2.3e12);
    let spec = SourceSpec::coherent(2.3e12, amplitude);
    let taus = thz_coherence::correlator::uniform_grid(-900e-15, 900e-15, 41);
    let n = 10_000_000;
    let stats = stats_over_delays(&ScanSource::Synthetic(spec), &taus, n, &det, 77);
    let floor = variance_floor(0.01, det.nef);
    let mut trace = CorrelationTrace::from_stats(taus.clone(), &stats, floor, det.nef, 2.3e12).unwrap();
    let corrected = few_cycle_envelope(&trace, 2.3e12, 2.0).unwrap();
    trace.g2_raw = stats
        .iter()
        .map(|s| estimate_g2_uncorrected(s, floor).unwrap())
        .collect();
    let uncorrected = few_cycle_envelope(&trace, 2.3e12, 2.0).unwrap();
    let i0 = trace.nearest(0.0);
    let (c, u) = (corrected[i0], uncorrected[i0]);
    outcome(
        (c.value - 1.0).abs() <= 0.05 && (u.value - 1.0).abs() >= 0.5,
        format!(
            "SNR 1, 10^7 pulses: corrected {:.4} ± {:.4}, uncorrected {:.3}",
            c.value, c.stderr, u.value
        ),
    )
}

fn estimator_statistics() -> Outcome {
    let det = DetectorParams {
        mod_period_pulses: 200,
        duty_on_pulses: 100,
        ..Default::default()
    };
    let spec = SourceSpec::coherent(2.3e12, 6000.0).with_blocks(PhaseBlocks::from_pulses(100, det.f_rep).unwrap());
    let floor = variance_floor(0.01, det.nef);
    let mut scaled = Vec::new();
    for (k, n) in [10_000u64, 100_000, 1_000_000, 10_000_000].into_iter().enumerate() {
        let tr = spec.build(-1e-9, n as f64 / det.f_rep + 1e-9, 5 + k as u64).unwrap();
        let s = accumulate(&sample_pulse_stream(&tr, 0.0, n, &det, 50 + k as u64).unwrap());
        let e = estimate_g2(&s, floor).unwrap();
        scaled.push((n, e.stderr * (n as f64).sqrt()));
    }
    let reference = scaled.last().unwrap().1;
    let scaling = scaled.iter().all(|(_, v)| v / reference <= 1.5 && reference / v <= 1.5);

    // Merge associativity.
    let tr = spec.build(-1e-9, 2e-3, 9).unwrap();
    let stream = sample_pulse_stream(&tr, 30e-15, 150_000, &det, 10).unwrap();
    let (a, rest) = stream.split_at(40_123);
    let (b, c) = rest.split_at(61_777);
    let (sa, sb, sc) = (accumulate(&a), accumulate(&b), accumulate(&c));
    let left = sa.clone().merged(&sb).merged(&sc);
    let right = sa.merged(&sb.merged(&sc));
    let rel = |x: f64, y: f64| (x - y).abs() / x.abs().max(y.abs()).max(f64::MIN_POSITIVE);
    let (lo, ro) = (left.on_totals(), right.on_totals());
    let (lf, rf) = (left.off_totals(), right.off_totals());
    let pairs = [
        (lo.xy, ro.xy),
        (lo.xx, ro.xx),
        (lo.yy, ro.yy),
        (lo.xxyy, ro.xxyy),
        (lf.xy, rf.xy),
        (lf.xx, rf.xx),
        (lf.xxyy, rf.xxyy),
    ];
    let merge_err = pairs.iter().map(|&(x, y)| rel(x, y)).fold(0.0, f64::max);
    let g_l = estimate_g2(&left, floor).unwrap().value;
    let g_r = estimate_g2(&right, floor).unwrap().value;
    let merge_ok = merge_err <= 1e-10 && rel(g_l, g_r) <= 1e-10 && lo.n == ro.n;

    // Scale invariance, noise-free.
    let quiet = DetectorParams { nef: 0.0, ..det };
    let base = sample_pulse_stream(&tr, 120e-15, 100_000, &quiet, 11).unwrap();
    let est = |s: &SufficientStats| (estimate_g1(s, 0.0).unwrap().value, estimate_g2(s, 0.0).unwrap().value);
    let (g1_0, g2_0) = est(&accumulate(&base));
    let mut scale_err: f64 = 0.0;
    for factor in [1e-3, 0.37, 4.0, 2.5e3] {
        let mut s = base.clone();
        s.samples.iter_mut().for_each(|(x, y)| {
            *x *= factor;
            *y *= factor;
        });
        let (g1, g2) = est(&accumulate(&s));
        scale_err = scale_err.max(rel(g1, g1_0)).max(rel(g2, g2_0));
    }
    let scale_ok = scale_err <= 1e-12;
    outcome(
        scaling && merge_ok && scale_ok,
        format!(
            "stderr·√n = {} [{}]; merge rel. diff {merge_err:.1e} [{}]; scale rel. diff {scale_err:.1e} [{}]",
            scaled
                .iter()
                .map(|(n, v)| format!("{v:.3}@{n:.0e}", n = *n as f64))
                .collect::<Vec<_>>()
                .join(", "),
            pf(scaling),
            pf(merge_ok),
            pf(scale_ok)
        ),
    )
}

fn read_dir_sorted(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for name in ["coherent.toml", "two_mode.toml", "laser.toml"] {
        let mut cfg = load(name);
        cfg.correlator.n_pulses = 100_000;
        cfg.correlator.n_tau = 21;
        cfg.output.eosc = true;
        cfg.output.trajectory = true;
        if name == "laser.toml" {
            cfg.laser.sim.duration = cfg.laser.sim.transient + 20e-9;
        }
        // Both runs write to the same path; the first result is moved aside.
        let root = tempfile::tempdir().unwrap();
        let out = root.path().join("out");
        cfg.output.directory = out.clone();
        run_correlation_experiment(&cfg).expect("fixture runs");
        let first = root.path().join("first");
        std::fs::rename(&out, &first).unwrap();
        run_correlation_experiment(&cfg).expect("fixture runs");
        let (a, b) = (read_dir_sorted(&first), read_dir_sorted(&out));
        let differing: Vec<String> = a
            .iter()
            .zip(&b)
            .filter(|(x, y)| x != y)
            .map(|(x, _)| x.0.display().to_string())
            .collect();
        let same = a == b && !a.is_empty();
        pass &= same;
        parts.push(if same {
            format!("{name}: {} files identical", a.len())
        } else {
            format!("{name}: differ in {differing:?} ({} vs {} files)", a.len(), b.len())
        });
    }
    outcome(pass, parts.join("; "))
}

fn throughput() -> Outcome {
    let det = DetectorParams::default();
    let spec = SourceSpec::coherent(2.3e12, 6000.0);
    let n = 10_000_000u64;
    let tr = spec.build(-1e-9, n as f64 / det.f_rep + 1e-9, 1).unwrap();
    let stream = sample_pulse_stream(&tr, 45e-15, n, &det, 2).unwrap();
    let mut best = f64::INFINITY;
    let mut check = 0.0;
    for _ in 0..3 {
        let start = Instant::now();
        let s = accumulate(&stream);
        best = best.min(start.elapsed().as_secs_f64());
        check += s.on_totals().xy;
    }
    assert!(check.is_finite());
    let rate = n as f64 / best;
    outcome(
        rate >= 1e7,
        format!("accumulate: {:.3e} pulse pairs/s on one core", rate),
    )
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let (c1, c2) = coherent_benchmark();
    results.push((1, "coherent benchmark", c1));
    results.push((2, "double-frequency signature", c2));
    results.push((3, "thermal oracle", thermal_oracle()));
    results.push((4, "multimode oracle", multimode_oracle()));
    results.push((5, "threshold sweep", threshold_sweep_check()));
    results.push((6, "photon budget", photon_budget()));
    results.push((7, "noise correction", noise_correction()));
    results.push((8, "estimator statistics", estimator_statistics()));
    results.push((9, "determinism", determinism()));
    results.push((10, "throughput", throughput()));

    let mut failed = 0;
    for (k, name, o) in &results {
        println!(
            "criterion {k:>2} {name:<28} {}  {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
