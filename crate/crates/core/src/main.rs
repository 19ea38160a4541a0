use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use aquatwin::cli::{
    cmd_ablate, cmd_calibrate, cmd_evaluate, cmd_generate, cmd_run, cmd_sweep, cmd_train,
    ExperimentConfig,
};

/// Digital-twin experiment runner for water distribution networks.
#[derive(Parser)]
#[command(name = "aquatwin", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (JSON).
    #[arg(long, global = true, default_value = "aquatwin.json")]
    config: PathBuf,

    /// Worker threads for parallel stages.
    #[arg(long, global = true, default_value_t = default_workers())]
    workers: usize,

    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

fn default_workers() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic demand scenario archive.
    Generate,
    /// Train one forecaster per junction on the training split.
    Train,
    /// Produce per-budget conformal calibration tables (two passes).
    Calibrate,
    /// Run the twin loop over every (policy, budget, sigma, seed) cell.
    Run,
    /// Aggregate run artifacts into report tables and charts.
    Evaluate,
    /// Component ablation study at the ablation budget.
    Ablate,
    /// Sensitivity sweep over the conformal level and lookback window.
    Sweep,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let base_dir = cli
        .config
        .parent()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    let cfg = match ExperimentConfig::load(&cli.config) {
        Ok(cfg) => cfg,
        Err(err) => {
            eprintln!("error: {err}");
            return ExitCode::FAILURE;
        }
    };
    let out = &cli.out;
    let workers = cli.workers;

    let result: Result<String, String> = (|| {
        let summary = match cli.command {
            Command::Generate => {
                let s = cmd_generate(&cfg, &base_dir, out).map_err(|e| e.to_string())?;
                format!(
                    "generated {} scenarios for each of {} seed(s) under {}",
                    s.scenarios_per_seed,
                    s.seeds.len(),
                    out.join("scenarios").display()
                )
            }
            Command::Train => {
                let s = cmd_train(&cfg, out, workers).map_err(|e| e.to_string())?;
                format!("trained {} models per seed", s.models_per_seed)
            }
            Command::Calibrate => {
                let s = cmd_calibrate(&cfg, &base_dir, out, workers).map_err(|e| e.to_string())?;
                format!("calibrated {} budget table(s) per seed", s.tables_per_seed)
            }
            Command::Run => {
                let s = cmd_run(&cfg, &base_dir, out, workers).map_err(|e| e.to_string())?;
                format!("wrote {} trajectory cell(s)", s.cells)
            }
            Command::Evaluate => {
                let s = cmd_evaluate(&cfg, out).map_err(|e| e.to_string())?;
                format!("wrote {}", s.tables.join(", "))
            }
            Command::Ablate => {
                let s = cmd_ablate(&cfg, &base_dir, out, workers).map_err(|e| e.to_string())?;
                format!("ablation table with {} variants written", s.variants)
            }
            Command::Sweep => {
                let s = cmd_sweep(&cfg, &base_dir, out, workers).map_err(|e| e.to_string())?;
                format!("sensitivity table with {} rows written", s.rows)
            }
        };
        Ok(summary)
    })();

    match result {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
