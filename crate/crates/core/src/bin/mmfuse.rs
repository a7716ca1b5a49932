use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use mmfuse::harness::commands::{
    ablation_csv, ablation_table, eval_checkpoint, gradcheck_config, gradcheck_full_model,
    run_ablation, run_dir, train_run, Axis, EvalOptions, InitFrom, OUTPUT_ROOT_ENV,
};
use mmfuse::harness::config::RunConfig;
use mmfuse::harness::metrics::{format_table, read_jsonl, MetricsRecord};
use mmfuse::tensor::gradcheck::GradCheckConfig;

#[derive(Parser)]
#[command(
    name = "mmfuse",
    version,
    about = "Train and evaluate multimodal adapter fusion on the synthetic benchmark"
)]
#[command(after_help = format!("Relative output directories are placed under ${OUTPUT_ROOT_ENV} (default: ./runs)."))]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes a checkpoint and per-epoch metrics.
    Train {
        config: PathBuf,
        /// Start from this checkpoint (its modalities may be a prefix of the config's).
        #[arg(long)]
        init_from: Option<PathBuf>,
        /// Load the checkpoint even if its config digest differs.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on its benchmark's test split.
    Eval {
        checkpoint: PathBuf,
        /// Comma-separated modalities to feed; the rest get zero features.
        #[arg(long, value_delimiter = ',')]
        modalities: Option<Vec<String>>,
        /// Also report accuracy on the easy and hard subsets.
        #[arg(long)]
        easy_hard: bool,
        /// Checkpoint whose predictions define easy/hard (default: this model, major modality only).
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Evaluate on the benchmark of this config instead.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Sweep one axis of the base config and print a comparison table.
    Ablate {
        config: PathBuf,
        /// fusion, rank, tokens, mode, prioritize or order.
        #[arg(long)]
        axis: String,
    },
    /// Finite-difference check of the full model's gradients in 64-bit.
    Gradcheck {
        /// Check every n-th element of each tensor.
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Summarize metrics files: the last record of each.
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
    },
}

fn load_config(path: &PathBuf) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("invalid config {}", path.display()))
}

fn print_eval(rec: &MetricsRecord) -> Result<()> {
    println!("{}", format_table(std::slice::from_ref(rec)));
    if let (Some(e), Some(h)) = (rec.easy, rec.hard) {
        println!(
            "easy: {} examples, {:.1}%   hard: {} examples, {:.1}%",
            e.size,
            100.0 * e.accuracy,
            h.size,
            100.0 * h.accuracy
        );
    }
    println!("{}", serde_json::to_string(rec)?);
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train {
            config,
            init_from,
            force,
        } => {
            let cfg = load_config(&config)?;
            let dir = run_dir(&cfg);
            let init = init_from.as_deref().map(|p| InitFrom {
                checkpoint: p,
                force,
            });
            let out = train_run(&cfg, &dir, init)?;
            if let Some(r) = &out.restored {
                println!(
                    "restored {} tensors ({} grown, {} at init)",
                    r.restored,
                    r.grown.len(),
                    r.fresh.len()
                );
            }
            print!("{}", format_table(&out.records));
            for (m, e) in &out.report.exit_epochs {
                if let Some(e) = e {
                    println!("{m} exited after epoch {e}");
                }
            }
            println!("checkpoint: {}", out.checkpoint.display());
            println!("metrics:    {}", out.metrics.display());
        }
        Command::Eval {
            checkpoint,
            modalities,
            easy_hard,
            reference,
            config,
        } => {
            let bench = config
                .as_ref()
                .map(load_config)
                .transpose()?
                .map(|c| c.bench);
            let opts = EvalOptions {
                visible: modalities,
                easy_hard,
                reference,
                bench,
            };
            let rec = eval_checkpoint(&checkpoint, &opts)
                .with_context(|| format!("evaluating {}", checkpoint.display()))?;
            print_eval(&rec)?;
        }
        Command::Ablate { config, axis } => {
            let cfg = load_config(&config)?;
            let axis: Axis = axis.parse()?;
            let rows = run_ablation(&cfg, axis)?;
            print!("{}", ablation_table(&rows));
            let dir = run_dir(&cfg);
            std::fs::create_dir_all(&dir)?;
            let csv = dir.join(format!("ablate-{}.csv", axis.name()));
            std::fs::write(&csv, ablation_csv(&rows))?;
            println!("table: {}", csv.display());
        }
        Command::Gradcheck { stride } => {
            if stride == 0 {
                bail!("--stride must be at least 1");
            }
            let (model, bench) = gradcheck_config();
            let cfg = GradCheckConfig {
                stride,
                ..GradCheckConfig::default()
            };
            let start = Instant::now();
            let out = gradcheck_full_model(model, &bench, &cfg)?;
            let r = &out.report;
            println!(
                "checked {} elements across {} tensors in {:.1}s",
                r.elements_checked,
                out.tensors,
                start.elapsed().as_secs_f64()
            );
            println!(
                "max relative error {:.3e} (tolerance {:.0e}), max absolute error {:.3e}, worst in {}",
                r.max_rel_error,
                r.tolerance,
                r.max_abs_error,
                out.worst_tensor.as_deref().unwrap_or("-")
            );
            if !r.passed() {
                println!("FAIL");
                return Ok(ExitCode::FAILURE);
            }
            println!("PASS");
        }
        Command::Report { metrics } => {
            let mut last = Vec::new();
            for path in &metrics {
                let records =
                    read_jsonl(path).with_context(|| format!("reading {}", path.display()))?;
                match records.last() {
                    Some(r) => last.push(r.clone()),
                    None => bail!("{} holds no records", path.display()),
                }
            }
            print!("{}", format_table(&last));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
