//! `semtap` — command-line front end for the wiretap simulator and attack
//! harness.
//!
//! Exit codes: 0 success, 1 runtime failure (including a failed gradient
//! check), 2 bad flags or bad config.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};
use semtap_core::harness::{
    gradcheck_suite, render_audit_log, sweep, ExperimentConfig, MethodId, TrialRunner,
};
use semtap_core::image::{read_image, write_image};
use semtap_core::metrics::CellSummary;
use semtap_core::perception::calibrate_iqa;

#[derive(Parser)]
#[command(
    name = "semtap",
    version,
    about = "Desk-scale MIMO wiretap simulator and agentic eavesdropping attack harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured sweep; writes rows.csv and summary.csv.
    Sweep {
        /// Experiment config (JSON).
        config: PathBuf,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Attack a single image; writes reconstruction.ppm and audit.log.
    Attack {
        /// Experiment config (JSON).
        config: PathBuf,
        /// Source image to transmit and attack (binary PPM, config dims).
        #[arg(long)]
        image: PathBuf,
        /// Link SNR in dB (default: first entry of the config grid).
        #[arg(long)]
        snr: Option<f64>,
        /// Method to run.
        #[arg(long, default_value = "agentic")]
        method: String,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        /// Experiment config (JSON); validated before the suite runs.
        config: PathBuf,
        /// Seeded tiny instances per encoder kind.
        #[arg(long, default_value_t = 20)]
        instances: u64,
    },
    /// Recompute perceptual-quality calibration bounds from seeded samples.
    Calibrate {
        /// Experiment config (JSON); its master seed drives the sampling.
        config: PathBuf,
        /// Samples per class.
        #[arg(long, default_value_t = 200)]
        samples: usize,
    },
    /// Run the tiny built-in experiment and write sample outputs.
    Demo {
        /// Output directory.
        #[arg(long, default_value = "demo_out")]
        out: PathBuf,
    },
}

enum Failure {
    /// Bad config or bad invocation: exit 2 with usage.
    Config(String),
    /// Runtime failure: exit 1.
    Runtime(String),
}

impl From<semtap_core::Error> for Failure {
    fn from(e: semtap_core::Error) -> Self {
        match e {
            semtap_core::Error::Config(msg) => Failure::Config(msg),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            eprintln!();
            eprintln!("{}", Cli::command().render_usage());
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::load(path).map_err(|e| Failure::Config(e.to_string()))
}

fn ensure_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", path.display())))
}

fn print_cells(cells: &[CellSummary]) {
    println!(
        "{:<18} {:>7} {:>5} {:>8} {:>8} {:>8} {:>9} {:>17}",
        "method", "snr_db", "n", "psnr", "ms_ssim", "cosine", "success", "95% CI"
    );
    for c in cells {
        println!(
            "{:<18} {:>7} {:>5} {:>8.2} {:>8.4} {:>8.4} {:>8.0}% [{:.3}, {:.3}]",
            c.method,
            c.snr_db,
            c.count,
            c.mean_psnr,
            c.mean_ms_ssim,
            c.mean_cosine,
            100.0 * c.success_rate,
            c.ci_low,
            c.ci_high
        );
    }
}

fn run_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<(), Failure> {
    ensure_dir(out)?;
    let rows = out.join("rows.csv");
    let summary = out.join("summary.csv");
    let outcome = sweep(cfg, &rows, &summary)?;
    println!(
        "{} trials ({} run now, {} resumed) -> {}",
        outcome.rows.len(),
        outcome.executed,
        outcome.skipped,
        rows.display()
    );
    print_cells(&outcome.cells);
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Sweep { config, out } => {
            let cfg = load_config(&config)?;
            run_sweep(&cfg, &out)
        }
        Command::Attack { config, image, snr, method, out } => {
            let cfg = load_config(&config)?;
            let method = MethodId::from_name(&method)
                .ok_or_else(|| Failure::Config(format!("unknown method `{method}`")))?;
            let snr_db = snr.unwrap_or(cfg.snr_grid_db[0]);
            let source = read_image(&image)
                .map_err(|e| Failure::Runtime(format!("{}: {e}", image.display())))?;
            ensure_dir(&out)?;
            let runner = TrialRunner::new(&cfg)?;
            let result = runner.run_with_source(method, snr_db, 0, Some(&source));
            let report = &result.report;
            println!(
                "{} at {} dB: status={} psnr={:.2} ms_ssim={:.4} cosine={:.4} success={} steps={}",
                method, snr_db, report.status, report.psnr, report.ms_ssim, report.cosine,
                report.success, report.steps
            );
            if let Some(attack) = &result.attack {
                let log = out.join("audit.log");
                fs::write(&log, render_audit_log(&attack.audit))
                    .map_err(|e| Failure::Runtime(format!("cannot write audit log: {e}")))?;
                println!("audit log: {}", log.display());
            }
            match &result.reconstruction {
                Some(img) => {
                    let path = out.join("reconstruction.ppm");
                    write_image(img, &path)?;
                    println!("reconstruction: {}", path.display());
                    Ok(())
                }
                None => Err(Failure::Runtime(format!(
                    "no reconstruction produced: {}",
                    report.reason
                ))),
            }
        }
        Command::Gradcheck { config, instances } => {
            load_config(&config)?;
            let report = gradcheck_suite(instances)?;
            for inst in &report.instances {
                println!(
                    "{:<6} seed={:<3} rel_err_x={:.3e} rel_err_g={:.3e}",
                    inst.encoder_kind, inst.seed, inst.rel_err_x, inst.rel_err_g
                );
            }
            if report.passed() {
                println!(
                    "gradcheck passed: {} instances, max relative error {:.3e} < {:.0e}",
                    report.instances.len(),
                    report.max_rel_err(),
                    report.tolerance
                );
                Ok(())
            } else {
                Err(Failure::Runtime(format!(
                    "gradcheck failed: max relative error {:.3e} >= {:.0e}",
                    report.max_rel_err(),
                    report.tolerance
                )))
            }
        }
        Command::Calibrate { config, samples } => {
            let cfg = load_config(&config)?;
            let cal = calibrate_iqa(cfg.master_seed, samples);
            println!(
                "{}",
                serde_json::to_string_pretty(&cal)
                    .map_err(|e| Failure::Runtime(e.to_string()))?
            );
            Ok(())
        }
        Command::Demo { out } => {
            let cfg = ExperimentConfig::demo();
            ensure_dir(&out)?;
            fs::write(out.join("config.json"), cfg.to_json_pretty())
                .map_err(|e| Failure::Runtime(format!("cannot write config: {e}")))?;
            run_sweep(&cfg, &out)?;
            // One sample attack with artifacts.
            let runner = TrialRunner::new(&cfg)?;
            let snr_db = *cfg.snr_grid_db.last().expect("validated grid");
            let result = runner.run(MethodId::Agentic, snr_db, 0);
            if let Some(src) = &result.source {
                write_image(src, &out.join("source.ppm"))?;
            }
            if let Some(img) = &result.reconstruction {
                write_image(img, &out.join("reconstruction.ppm"))?;
            }
            if let Some(attack) = &result.attack {
                fs::write(out.join("audit.log"), render_audit_log(&attack.audit))
                    .map_err(|e| Failure::Runtime(format!("cannot write audit log: {e}")))?;
            }
            println!(
                "demo artifacts in {} (config.json, rows.csv, summary.csv, source.ppm, \
                 reconstruction.ppm, audit.log)",
                out.display()
            );
            Ok(())
        }
    }
}
