use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use gptf_cli::{cmd_eval, cmd_predict, cmd_synth, cmd_train, RunConfig};

/// GP tensor factorization with tight variational bounds.
#[derive(Parser)]
#[command(name = "gptf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic tensor with a known latent function.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Mode sizes, comma separated.
        #[arg(long)]
        dims: Option<String>,
        /// Fraction of cells observed for training.
        #[arg(long)]
        density: Option<f64>,
    },
    /// Fit a model to a COO tensor.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training tensor in COO text format.
        train: PathBuf,
        #[arg(long)]
        optimizer: Option<String>,
        #[arg(long)]
        max_iters: Option<usize>,
        /// Add sampled zero cells to balance the training entries.
        #[arg(long)]
        balance: bool,
    },
    /// Score cells with a trained checkpoint.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Cells to score, one index tuple per line.
        index: PathBuf,
    },
    /// Compare predictions against held-out values.
    Eval {
        #[command(flatten)]
        common: Common,
        predictions: PathBuf,
        truth: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// key=value settings file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// continuous or binary.
    #[arg(long)]
    mode: Option<String>,
    /// Number of inducing points.
    #[arg(long)]
    p: Option<usize>,
    /// Latent rank, one value or one per mode.
    #[arg(long)]
    rank: Option<String>,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

impl Common {
    fn config(&self, extra: &[(&str, Option<String>)]) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        let flags = [
            ("mode", self.mode.clone()),
            ("p", self.p.map(|v| v.to_string())),
            ("rank", self.rank.clone()),
            ("tasks", self.tasks.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
        ];
        for (k, v) in flags.iter().chain(extra) {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        Ok(cfg)
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth { common, dims, density } => {
            let cfg = common.config(&[("dims", dims), ("density", density.map(|v| v.to_string()))])?;
            let s = cmd_synth(&cfg, &common.out)?;
            println!("wrote {} training and {} test entries to {}", s.train_count, s.test_count, common.out.display());
            if s.resamples > 0 {
                println!("label balance needed {} resample(s)", s.resamples);
            }
        }
        Command::Train { common, train, optimizer, max_iters, balance } => {
            let cfg = common.config(&[
                ("optimizer", optimizer),
                ("max_iters", max_iters.map(|v| v.to_string())),
                ("balance", balance.then(|| "true".to_string())),
            ])?;
            let s = cmd_train(&cfg, &train, &common.out)?;
            println!(
                "{} entries, {} iterations, elbo {:.6} -> {:.6} ({:?})",
                s.entries, s.iterations, s.initial_elbo, s.final_elbo, s.stop
            );
            println!("checkpoint {}", s.checkpoint.display());
        }
        Command::Predict { common, checkpoint, index } => {
            let cfg = common.config(&[])?;
            let path = cmd_predict(&cfg, &checkpoint, &index, &common.out)?;
            println!("predictions {}", path.display());
        }
        Command::Eval { common, predictions, truth } => {
            let cfg = common.config(&[])?;
            let r = cmd_eval(&cfg, &predictions, &truth, &common.out)?;
            println!("{} = {:.6} over {} entries", r.metric, r.value, r.entries);
        }
    }
    Ok(())
}
