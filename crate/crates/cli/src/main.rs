use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use latr::datamodel::LengthCategory;
use latr::pipeline::{cmd_ablate, cmd_analyze, cmd_eval, cmd_generate_data, cmd_train, RunConfig};

/// Length-aware temporal sentence grounding on synthetic clip features.
#[derive(Parser)]
#[command(name = "latr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic train/eval split as JSONL.
    GenerateData {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train a model and write its checkpoint and per-epoch loss log.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Training set (JSONL).
        #[arg(long)]
        data: PathBuf,
        /// Continue from this checkpoint up to the configured epoch count.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write metrics.json and metrics.csv.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation set (JSONL).
        #[arg(long)]
        data: PathBuf,
    },
    /// Train and evaluate the six component ablation rows (a)-(f).
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Training set (JSONL).
        #[arg(long)]
        data: PathBuf,
        /// Evaluation set (JSONL).
        #[arg(long)]
        eval_data: PathBuf,
    },
    /// Write per-query predicted-length concentration tables.
    Analyze {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

/// Config sources, applied in order: defaults, `--config`, `--set`, then
/// the dedicated flags.
#[derive(Args)]
struct RunArgs {
    /// Plain-text `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds data generation, initialization, shuffling and analysis sampling.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Any config key, e.g. `--set lr=1e-3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Suppression threshold.
    #[arg(long)]
    tau: Option<f64>,
    /// Number of decoder queries.
    #[arg(long)]
    nq: Option<usize>,
    /// Queries kept unsuppressed per layer.
    #[arg(long)]
    topk_save: Option<usize>,
    /// Queries per group used to refresh suppression.
    #[arg(long)]
    top_select: Option<usize>,
    /// Suppression mode: prose-consistent or literal.
    #[arg(long)]
    mode: Option<String>,
    /// Number of length categories.
    #[arg(long, value_parser = clap::value_parser!(u8).range(2..=4))]
    split: Option<u8>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut run = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
            run.set(k, v)?;
        }
        let overrides = [
            ("tau", self.tau.map(|v| v.to_string())),
            ("nq", self.nq.map(|v| v.to_string())),
            ("topk_save", self.topk_save.map(|v| v.to_string())),
            ("top_select", self.top_select.map(|v| v.to_string())),
            ("mode", self.mode.clone()),
            ("split", self.split.map(|v| v.to_string())),
        ];
        for (k, v) in overrides {
            if let Some(v) = v {
                run.set(k, &v)?;
            }
        }
        if let Some(seed) = self.seed {
            run.set_seed(seed);
        }
        run.validate()?;
        Ok(run)
    }
}

fn counts(c: &[(LengthCategory, usize)]) -> String {
    c.iter().map(|(cat, n)| format!("{cat}={n}")).collect::<Vec<_>>().join(" ")
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { run } => {
            let cfg = run.resolve()?;
            let s = cmd_generate_data(&cfg, &run.out_dir)?;
            println!("train {} ({})", s.train.display(), counts(&s.train_counts));
            println!("eval {} ({})", s.eval.display(), counts(&s.eval_counts));
        }
        Command::Train { run, data, resume } => {
            let cfg = run.resolve()?;
            let s = cmd_train(&cfg, &data, &run.out_dir, resume.as_deref())?;
            println!(
                "checkpoint {} after {} epochs, {} steps, final loss {:.6}",
                s.checkpoint.display(),
                s.epochs,
                s.steps,
                s.final_loss
            );
        }
        Command::Eval { run, checkpoint, data } => {
            let cfg = run.resolve()?;
            let m = cmd_eval(&checkpoint, &data, &run.out_dir, cfg.analyze_samples, cfg.train.seed)?;
            println!(
                "R1@0.5 {:.4}  R1@0.7 {:.4}  mAP@0.5 {:.4}  avg mAP {:.4}  mIoU {:.4}",
                m.r1_05, m.r1_07, m.map_50, m.avg_map, m.miou
            );
            report_written(&run.out_dir, "metrics.json");
        }
        Command::Ablate { run, data, eval_data } => {
            let cfg = run.resolve()?;
            for r in cmd_ablate(&cfg, &data, &eval_data, &run.out_dir)? {
                println!(
                    "row {}: R1@0.5 {:.4}  avg mAP {:.4}  final loss {:.6}",
                    r.row, r.metrics.r1_05, r.metrics.avg_map, r.final_loss
                );
            }
            report_written(&run.out_dir, "ablation.csv");
        }
        Command::Analyze { run, checkpoint, data } => {
            let cfg = run.resolve()?;
            let conc = cmd_analyze(&checkpoint, &data, &run.out_dir, cfg.analyze_samples, cfg.train.seed)?;
            for (q, c) in conc.iter().enumerate() {
                println!("query {q}: std {:.4} over {} samples", c.std, c.lengths.len());
            }
            report_written(&run.out_dir, "concentration.csv");
        }
    }
    Ok(())
}

fn report_written(dir: &Path, name: &str) {
    println!("wrote {}", dir.join(name).display());
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
