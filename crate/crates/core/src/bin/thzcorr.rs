use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use thz_coherence::budget::{budget_table, BudgetParams};
use thz_coherence::config::{parse_config, ExperimentConfig, SourceConfig};
use thz_coherence::eos::read_eosc;
use thz_coherence::runner::{
    correlate_streams, run_correlation_experiment, run_simulation, run_threshold_sweep, spectrum_from_csv,
    write_effective_config,
};
use thz_coherence::spectra::{peak_frequency, Window};
use thz_coherence::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "thzcorr",
    version,
    about = "Sub-cycle g1/g2 correlation experiments on THz sources"
)]
struct Cli {
    /// Experiment configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overrides the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Integrate the laser model and export its modal trajectory.
    Simulate,
    /// Delay scan of the configured source, or of recorded EOSC streams.
    Correlate {
        /// Pre-recorded stream, one per delay; replaces the configured source.
        #[arg(long)]
        eosc: Vec<PathBuf>,
    },
    /// Threshold sweep of the laser model.
    Sweep,
    /// Spectrum of one column of a correlation CSV.
    Spectrum {
        /// Correlation CSV written by `correlate`.
        #[arg(long)]
        input: PathBuf,
        /// Column to transform: g1, g2_raw or g2_env.
        #[arg(long, default_value = "g2_raw")]
        column: String,
        #[arg(long, default_value = "hann")]
        window: Window,
    },
    /// Photon budget for a detected field amplitude.
    Budget {
        /// Peak detected field, V/m.
        #[arg(long, default_value_t = 90.0)]
        field: f64,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => parse_config(&fs::read_to_string(path)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.master_seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output.directory = o.clone();
    }
    Ok(cfg)
}

fn print_files(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    }
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Simulate => {
            if !matches!(cfg.source, None | Some(SourceConfig::Laser)) {
                return Err(Error::InvalidParameter("simulate needs source kind \"mb\"".into()));
            }
            let (point, files) = run_simulation(&cfg)?;
            println!(
                "G/G_th = {:.4}  total power = {:.4e} E_sat^2  g2(0) = {:.4} ± {:.4}",
                point.gain / cfg.laser.params.threshold_gain(),
                point.total_power,
                point.g2_zero,
                point.g2_err
            );
            print_files(&files);
        }
        Command::Correlate { eosc } if !eosc.is_empty() => {
            let streams = eosc
                .iter()
                .map(|p| read_eosc(BufReader::new(File::open(p)?), &cfg.detector))
                .collect::<Result<Vec<_>>>()?;
            let nu0 = match &cfg.source {
                Some(SourceConfig::Synthetic { spec, .. }) => spec.nu0,
                _ => cfg.laser.params.nu0,
            };
            let trace = correlate_streams(&streams, nu0, cfg.correlator.envelope_cycles, cfg.correlator.floor_eps)?;
            let dir = &cfg.output.directory;
            fs::create_dir_all(dir)?;
            let path = dir.join("correlation.csv");
            let mut w = std::io::BufWriter::new(File::create(&path)?);
            let header: Vec<String> = eosc.iter().map(|p| format!("eosc: {}", p.display())).collect();
            trace.write_csv(&mut w, &header)?;
            w.flush()?;
            let i0 = trace.nearest(0.0);
            println!(
                "tau = {:.1} fs  g1 = {:.4} ± {:.4}  g2_raw = {:.4} ± {:.4}",
                trace.taus[i0] * 1e15,
                trace.g1[i0].value,
                trace.g1[i0].stderr,
                trace.g2_raw[i0].value,
                trace.g2_raw[i0].stderr
            );
            print_files(&[write_effective_config(&cfg, dir)?, path]);
        }
        Command::Correlate { .. } => {
            let (report, files) = run_correlation_experiment(&cfg)?;
            println!(
                "envelope g2(0) = {:.4} ± {:.4}  g1 peak = {:.4} THz  g2 peak = {:.4} THz",
                report.envelope_g2_zero.value,
                report.envelope_g2_zero.stderr,
                report.g1_peak * 1e-12,
                report.g2_peak * 1e-12
            );
            print_files(&files);
        }
        Command::Sweep => {
            let (report, files) = run_threshold_sweep(&cfg)?;
            println!(
                "{:>8} {:>9} {:>12} {:>8} {:>8}  pipeline",
                "G/G_th", "I (mA)", "power", "g2", "err"
            );
            for r in &report.rows {
                println!(
                    "{:>8.3} {:>9.1} {:>12.4e} {:>8.4} {:>8.4}  {}",
                    r.gain_ratio,
                    r.current_ma,
                    r.total_power,
                    r.g2_modal.unwrap_or(f64::NAN),
                    r.g2_modal_err.unwrap_or(f64::NAN),
                    match (&r.error, r.g2_pipeline) {
                        (Some(e), _) => e.clone(),
                        (None, Some(g)) => format!("{g:.4} ± {:.4}", r.g2_pipeline_err.unwrap_or(f64::NAN)),
                        (None, None) => r.pipeline_status.clone(),
                    }
                );
            }
            print_files(&files);
        }
        Command::Spectrum { input, column, window } => {
            let spec = spectrum_from_csv(&fs::read_to_string(input)?, column, *window)?;
            let top = *spec.frequencies.last().expect("spectrum has bins");
            let peak = peak_frequency(&spec, 2.0 * spec.bin_width(), top)?;
            let dir = &cfg.output.directory;
            fs::create_dir_all(dir)?;
            let path = dir.join(format!("spectrum_{column}.csv"));
            let mut w = std::io::BufWriter::new(File::create(&path)?);
            spec.write_csv(&mut w)?;
            w.flush()?;
            println!(
                "peak {:.4} THz (bin width {:.4} THz)",
                peak * 1e-12,
                spec.bin_width() * 1e-12
            );
            print_files(&[path]);
        }
        Command::Budget { field, json } => {
            let p = &cfg.laser.params;
            let budget = BudgetParams {
                nu: p.nu0,
                delta_t: cfg.detector.probe_fwhm,
                ..BudgetParams::default()
            };
            let table = budget_table(*field, &budget, p.z12, p.tau_up, p.tau_coh)?;
            if *json {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&table).expect("plain struct serializes")
                );
            } else {
                println!("{table}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cli(dir: &std::path::Path, config: Option<&str>, args: &[&str]) -> Result<()> {
        let mut argv = vec!["thzcorr".to_string(), "--out".into(), dir.display().to_string()];
        if let Some(text) = config {
            let path = dir.join("in.toml");
            fs::create_dir_all(dir).unwrap();
            fs::write(&path, text).unwrap();
            argv.extend(["--config".into(), path.display().to_string()]);
        }
        argv.extend(args.iter().map(|s| s.to_string()));
        run(Cli::try_parse_from(argv).expect("arguments parse"))
    }

    const SMALL: &str = "master_seed = 8\n[source]\nkind = \"coherent\"\n\
        [correlator]\nn_pulses = 5000\nn_tau = 21\n[output]\neosc = true\n";

    #[test]
    fn budget_runs_without_config() {
        let d = tempfile::tempdir().unwrap();
        cli(d.path(), None, &["budget", "--field", "90", "--json"]).unwrap();
    }

    #[test]
    fn missing_config_is_an_io_error() {
        let argv = ["thzcorr", "--config", "/nonexistent/x.toml", "budget"];
        let e = run(Cli::try_parse_from(argv).unwrap()).unwrap_err();
        assert!(matches!(e, Error::Io(_)));
    }

    #[test]
    fn bad_config_is_a_config_error() {
        let d = tempfile::tempdir().unwrap();
        let e = cli(d.path(), Some("[correlator]\nn_tau = -5\n"), &["correlate"]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("line 2"), "{e}");
    }

    #[test]
    fn correlate_then_spectrum_then_replay() {
        let d = tempfile::tempdir().unwrap();
        cli(d.path(), Some(SMALL), &["correlate"]).unwrap();
        for f in [
            "correlation.csv",
            "spectrum_g1.csv",
            "spectrum_g2.csv",
            "effective_config.toml",
        ] {
            assert!(d.path().join(f).is_file(), "{f}");
        }
        let csv = d.path().join("correlation.csv");
        let spec_dir = d.path().join("spec");
        cli(
            &spec_dir,
            None,
            &["spectrum", "--input", csv.to_str().unwrap(), "--column", "g1"],
        )
        .unwrap();
        assert!(spec_dir.join("spectrum_g1.csv").is_file());

        let mut eosc: Vec<_> = fs::read_dir(d.path().join("eosc"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        eosc.sort();
        assert_eq!(eosc.len(), 21);
        let replay = d.path().join("replay");
        let mut args = vec!["correlate".to_string()];
        for p in &eosc {
            args.extend(["--eosc".into(), p.display().to_string()]);
        }
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        cli(&replay, None, &args).unwrap();
        let a = CorrelationCols::read(&csv);
        let b = CorrelationCols::read(&replay.join("correlation.csv"));
        // Streams are stored in single precision.
        for (x, y) in a.0.iter().zip(&b.0) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
        assert_eq!(a.0.len(), b.0.len());
    }

    struct CorrelationCols(Vec<f64>);

    impl CorrelationCols {
        /// g1 column as text, comments dropped.
        fn read(path: &std::path::Path) -> Self {
            let text = fs::read_to_string(path).unwrap();
            let mut lines = text.lines().filter(|l| !l.starts_with('#'));
            let header: Vec<&str> = lines.next().unwrap().split(',').map(str::trim).collect();
            let col = header.iter().position(|h| *h == "g1").unwrap();
            Self(
                lines
                    .map(|l| l.split(',').nth(col).unwrap().trim().parse().unwrap())
                    .collect(),
            )
        }
    }

    #[test]
    fn simulate_writes_trajectory() {
        let d = tempfile::tempdir().unwrap();
        let cfg = "master_seed = 2\n[source]\nkind = \"mb\"\ngain_ratio = 1.05\ntransient_ns = 2\nrecord_ns = 3\n";
        cli(d.path(), Some(cfg), &["simulate"]).unwrap();
        assert!(d.path().join("trajectory.csv").is_file());
        let e = cli(d.path(), Some(SMALL), &["simulate"]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }
}
