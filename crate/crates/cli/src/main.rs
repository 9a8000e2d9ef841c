use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use selfaug_core::harness::{
    export_embeddings, gen_synth, run_ablate, run_grid, run_kfold, run_train, EmbeddingLayer,
    ExperimentConfig, SplitName,
};
use selfaug_core::trainer::TrainMode;
use selfaug_core::{Error, Result};

/// Dual-stream self-augmented fine-tuning of a small transformer classifier.
#[derive(Parser, Debug)]
#[command(name = "selfaug", version)]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: the config's output_dir, else runs/<command>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Concurrent grid cells or folds.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train once and write checkpoint, epoch log, metrics and config snapshot.
    Train {
        /// Overrides the config's training mode.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<TrainMode>,
    },
    /// Exhaustive search over the config's grid section.
    Grid,
    /// k-fold cross-validation.
    Kfold {
        /// Number of folds (default: the config's `folds`).
        #[arg(long)]
        k: Option<usize>,
    },
    /// Baseline, +SA and +Proposed on shared splits and seeds.
    Ablate,
    /// Write per-example embeddings of a trained checkpoint as CSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// pooled_final or tapped.
        #[arg(long, default_value = "pooled_final")]
        layer: String,
        /// Append two principal-component columns.
        #[arg(long)]
        pca: bool,
    },
    /// Write the configured synthetic corpus as JSON-lines splits.
    GenSynth,
}

fn parse_mode(s: &str) -> std::result::Result<TrainMode, String> {
    match s {
        "baseline" => Ok(TrainMode::Baseline),
        "sa_only" => Ok(TrainMode::SaOnly),
        "proposed" => Ok(TrainMode::Proposed),
        _ => Err(format!("unknown mode `{s}` (baseline, sa_only, proposed)")),
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Train { .. } => "train",
        Command::Grid => "grid",
        Command::Kfold { .. } => "kfold",
        Command::Ablate => "ablate",
        Command::ExportEmbeddings { .. } => "export-embeddings",
        Command::GenSynth => "gen-synth",
    }
}

fn run(cli: Cli) -> Result<()> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config <path> is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| Path::new("runs").join(command_name(&cli.command)));

    match cli.command {
        Command::Train { mode } => {
            if let Some(m) = mode {
                cfg.train.mode = m;
            }
            let r = run_train(&cfg, &out)?;
            println!(
                "{}: best epoch {} of {}, val F1 {:.6}, test P/R/F1 {:.6}/{:.6}/{:.6}",
                r.mode.label(),
                r.best_epoch,
                r.epochs_run,
                r.validation.macro_avg.f1,
                r.test.macro_avg.precision,
                r.test.macro_avg.recall,
                r.test.macro_avg.f1
            );
        }
        Command::Grid => {
            let g = run_grid(&cfg, &out, cli.workers)?;
            for r in &g.rows {
                match (&r.error, r.best_val_f1) {
                    (None, Some(f)) => println!(
                        "cell {:03} b={} alpha={} Li={} Lj={}: val F1 {f:.6}",
                        r.cell, r.params.batch_size, r.params.alpha, r.params.layer_i, r.params.layer_j
                    ),
                    (e, _) => println!("cell {:03}: failed: {}", r.cell, e.as_deref().unwrap_or("")),
                }
            }
            match g.winner {
                Some(w) => println!("winner: cell {w:03}"),
                None => println!("winner: none"),
            }
            if g.failures > 0 {
                eprintln!("{} of {} cells failed", g.failures, g.rows.len());
            }
        }
        Command::Kfold { k } => {
            let k = k.unwrap_or(cfg.folds);
            let r = run_kfold(&cfg, k, &out, cli.workers)?;
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            for f in &r.folds {
                println!("fold {}: test F1 {:.6}", f.fold, f.test.f1);
            }
            println!("mean F1 {:.6} ± {:.6}", r.mean.f1, r.std.f1);
        }
        Command::Ablate => {
            let rows = run_ablate(&cfg, &out)?;
            println!("{:<10} {:>9} {:>9} {:>9}", "setting", "P", "R", "F1");
            for r in rows {
                println!(
                    "{:<10} {:>9.6} {:>9.6} {:>9.6}",
                    r.setting, r.precision, r.recall, r.f1
                );
            }
        }
        Command::ExportEmbeddings {
            checkpoint,
            split,
            layer,
            pca,
        } => {
            let split: SplitName = split.parse()?;
            let layer: EmbeddingLayer = layer.parse()?;
            let s = export_embeddings(&cfg, &checkpoint, split, layer, pca, &out)?;
            println!(
                "wrote {} rows x {} dims ({} PCA columns) to {}",
                s.rows,
                s.dims,
                s.pca_components,
                out.join("embeddings.csv").display()
            );
        }
        Command::GenSynth => {
            let d = gen_synth(&cfg, &out)?;
            println!(
                "wrote {} / {} / {} examples to {}",
                d.train.len(),
                d.val.len(),
                d.test.len(),
                out.display()
            );
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
            if e.is_config_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
