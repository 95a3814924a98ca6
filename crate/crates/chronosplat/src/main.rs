//! Command-line harness: dataset generation, alignment runs, evaluation
//! and ablation sweeps.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error,
//! 3 no-signal alignment (the report is still written).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use chronosplat::io::{read_dataset, write_dataset, IoError};
use chronosplat::pipeline::{
    ablation_rows_to_csv, align, evaluate, run_ablation, time_model_from_report, DatasetView,
    Mode, PipelineError, RunConfig,
};
use chronosplat::report::AlignmentReport;
use chronosplat::synth::generate_dataset;

#[derive(Parser)]
#[command(
    name = "chronosplat",
    version,
    about = "Temporal alignment of unsynchronized multi-view videos of dynamic Gaussian-splat scenes"
)]
struct Cli {
    /// Print the full default configuration as JSON and exit.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic unsynchronized multi-view dataset.
    Synth {
        /// Run configuration JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output dataset directory.
        #[arg(long, default_value = "dataset")]
        out: PathBuf,
    },
    /// Recover per-camera time offsets from a dataset.
    Align {
        /// Dataset directory written by `synth`.
        #[arg(long)]
        dataset: PathBuf,
        /// Stages to run: coarse, fine, or full.
        #[arg(long, default_value = "full")]
        mode: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for report.json, score tables and loss trace.
        #[arg(long, default_value = "align_out")]
        out: PathBuf,
    },
    /// Render evaluation pairs under the identity and recovered time
    /// models and score PSNR/SSIM against the captured frames.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        /// Alignment report produced by `align`.
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for metrics.json.
        #[arg(long, default_value = "eval_out")]
        out: PathBuf,
    },
    /// Run the {method} x {tau_max} ablation grid and emit a summary CSV.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for ablation.csv.
        #[arg(long, default_value = "ablate_out")]
        out: PathBuf,
    },
    /// Print the full default configuration as JSON.
    PrintConfig,
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NO_SIGNAL: u8 = 3;

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("CHRONOSPLAT_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: CHRONOSPLAT_THREADS must be a positive integer");
                return ExitCode::from(EXIT_USAGE);
            }
        }
    }

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes, everything else is
            // a usage error.
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };

    if cli.print_config {
        return print_config();
    }
    let Some(command) = cli.command else {
        eprintln!("error: a subcommand is required (try --help)");
        return ExitCode::from(EXIT_USAGE);
    };

    match command {
        Command::PrintConfig => print_config(),
        Command::Synth { config, seed, out } => cmd_synth(config.as_deref(), seed, &out),
        Command::Align {
            dataset,
            mode,
            config,
            seed,
            out,
        } => cmd_align(&dataset, &mode, config.as_deref(), seed, &out),
        Command::Evaluate {
            dataset,
            report,
            config,
            out,
        } => cmd_evaluate(&dataset, &report, config.as_deref(), &out),
        Command::Ablate { config, seed, out } => cmd_ablate(config.as_deref(), seed, &out),
    }
}

fn print_config() -> ExitCode {
    match serde_json::to_string_pretty(&RunConfig::default()) {
        Ok(text) => {
            println!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, ExitCode> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).map_err(|e| {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        })?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn data_err(e: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(EXIT_DATA)
}

fn cmd_synth(config: Option<&Path>, seed: Option<u64>, out: &Path) -> ExitCode {
    let cfg = match load_config(config, seed) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let dataset = generate_dataset(&cfg.effective_synth());
    if let Err(e) = write_dataset(out, &dataset) {
        return data_err(e);
    }
    println!(
        "wrote dataset: {} cameras x {} frames at {}x{} (seed {}) -> {}",
        dataset.config.n_cameras,
        dataset.config.n_frames,
        dataset.config.image_width,
        dataset.config.image_height,
        cfg.seed,
        out.display()
    );
    ExitCode::SUCCESS
}

fn cmd_align(
    dataset_dir: &Path,
    mode: &str,
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
) -> ExitCode {
    let mode: Mode = match mode.parse() {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let cfg = match load_config(config, seed) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let data = match read_dataset(dataset_dir) {
        Ok(d) => d,
        Err(e) => return data_err(e),
    };
    let view = DatasetView::from(&data);
    let outcome = match align(&view, mode, &cfg) {
        Ok(o) => o,
        Err(PipelineError::Io(e)) => return data_err(e),
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_DATA);
        }
    };

    if let Err(e) = std::fs::create_dir_all(out) {
        return data_err(e);
    }
    if let Err(e) = outcome.report.save(&out.join("report.json")) {
        return data_err(e);
    }
    for table in &outcome.report.score_tables {
        let csv = chronosplat::coarse::ScoreTable {
            offsets: table.offsets.clone(),
            totals: table.totals.clone(),
            per_frame: table.per_frame.clone(),
        }
        .to_csv();
        let path = out.join(format!("score_table_cam{}.csv", table.camera));
        if let Err(e) = std::fs::write(path, csv) {
            return data_err(e);
        }
    }
    if let Some(trace) = &outcome.loss_trace {
        if let Err(e) = std::fs::write(out.join("loss_trace.csv"), trace.to_csv()) {
            return data_err(e);
        }
    }

    for c in &outcome.report.cameras {
        println!(
            "camera {}: gt {:+.4}  recovered {:+.4} (coarse {:+}, fine {:+.4})  |err| {:.4}",
            c.camera, c.gt_offset, c.recovered_offset, c.coarse_offset, c.fine_offset, c.abs_error
        );
    }
    if !outcome.report.no_signal_cameras.is_empty() {
        eprintln!(
            "warning: no coarse signal for cameras {:?}; fell back to offset 0",
            outcome.report.no_signal_cameras
        );
        return ExitCode::from(EXIT_NO_SIGNAL);
    }
    ExitCode::SUCCESS
}

fn cmd_evaluate(
    dataset_dir: &Path,
    report_path: &Path,
    config: Option<&Path>,
    out: &Path,
) -> ExitCode {
    let cfg = match load_config(config, None) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let data = match read_dataset(dataset_dir) {
        Ok(d) => d,
        Err(e) => return data_err(e),
    };
    let report = match AlignmentReport::load(report_path) {
        Ok(r) => r,
        Err(e) => return data_err(e),
    };
    if report.cameras.len() != data.rig.len() {
        return data_err(IoError::Invalid(
            "report camera count does not match dataset".into(),
        ));
    }
    let recovered = time_model_from_report(&report);
    let view = DatasetView::from(&data);
    let eval = match evaluate(&view, &recovered, &cfg) {
        Ok(e) => e,
        Err(e) => return data_err(e),
    };
    if let Err(e) = std::fs::create_dir_all(out) {
        return data_err(e);
    }
    if let Err(e) = eval.save(&out.join("metrics.json")) {
        return data_err(e);
    }
    println!(
        "identity:  psnr {:.3} dB  ssim {:.4}  l1 {:.6}",
        eval.mean_psnr_identity, eval.mean_ssim_identity, eval.mean_l1_identity
    );
    println!(
        "recovered: psnr {:.3} dB  ssim {:.4}  l1 {:.6}",
        eval.mean_psnr_recovered, eval.mean_ssim_recovered, eval.mean_l1_recovered
    );
    ExitCode::SUCCESS
}

fn cmd_ablate(config: Option<&Path>, seed: Option<u64>, out: &Path) -> ExitCode {
    let cfg = match load_config(config, seed) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let rows = match run_ablation(&cfg) {
        Ok(r) => r,
        Err(e) => return data_err(e),
    };
    if let Err(e) = std::fs::create_dir_all(out) {
        return data_err(e);
    }
    let csv = ablation_rows_to_csv(&rows);
    if let Err(e) = std::fs::write(out.join("ablation.csv"), &csv) {
        return data_err(e);
    }
    print!("{csv}");
    ExitCode::SUCCESS
}
