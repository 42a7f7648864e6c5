use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sgt_bench::commands;
use sgt_bench::ordering::{check_ordering, OrderingExpr};
use sgt_bench::{BenchError, ExperimentConfig};
use sgt_core::network::Variant;
use sgt_core::trainer::WORKERS_ENV;

#[derive(Parser)]
#[command(name = "sgt", about = "MIMO detection experiments", after_help = worker_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn worker_help() -> String {
    format!("Monte-Carlo worker threads are taken from {WORKERS_ENV}.")
}

#[derive(Args)]
struct Common {
    /// Experiment TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the root seed and the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the model variant.
    #[arg(long)]
    variant: Option<Variant>,
    /// Print a training progress line every N steps.
    #[arg(long)]
    progress: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes `{variant}.ckpt` and `{variant}_train_log.csv`.
    Train(Common),
    /// BER sweep of the configured detectors; writes `ber.csv`.
    Ber {
        #[command(flatten)]
        common: Common,
        /// Checkpoint(s) evaluated as `sgt`; defaults to `{out}/{variant}.ckpt`.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        /// Fail unless e.g. `ml<=sgt<=lmmse` holds at every checked SNR.
        #[arg(long)]
        assert_ordering: Option<OrderingExpr>,
        /// Lowest SNR (dB) the ordering is checked at.
        #[arg(long, default_value_t = f64::NEG_INFINITY, allow_negative_numbers = true)]
        ordering_min_snr: f64,
    },
    /// Train and compare every variant under one budget; writes `ablation.csv`.
    Ablate(Common),
    /// MAC counts over the configured sizes; writes `complexity.csv`.
    Complexity(Common),
}

impl Common {
    fn resolve(&self) -> Result<(ExperimentConfig, PathBuf), BenchError> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.override_seed(seed);
        }
        if let Some(v) = self.variant {
            cfg.override_variant(v)?;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        let out = cfg.out_dir.clone();
        Ok((cfg, out))
    }
}

fn run(cli: Cli) -> Result<(), BenchError> {
    match cli.command {
        Command::Train(common) => {
            let (cfg, out) = common.resolve()?;
            let done = commands::train(&cfg, &out, common.progress)?;
            println!(
                "trained {} for {} steps, final loss {:.5}",
                cfg.model.variant,
                cfg.train.steps,
                done.log.final_loss().unwrap_or(f64::NAN)
            );
            println!("wrote {} and {}", done.checkpoint.display(), done.log_csv.display());
        }
        Command::Ber {
            common,
            checkpoint,
            assert_ordering,
            ordering_min_snr,
        } => {
            let (cfg, out) = common.resolve()?;
            let records = commands::ber(&cfg, &checkpoint, &out)?;
            for r in &records {
                println!("{:<24} {:>6} dB  ber {:.4e}  [{:.4e}, {:.4e}]", r.detector, r.snr_db, r.ber, r.ci_low, r.ci_high);
            }
            if let Some(expr) = assert_ordering {
                let violations = check_ordering(&records, &expr, ordering_min_snr)?;
                for v in &violations {
                    eprintln!("{v}");
                }
                if !violations.is_empty() {
                    return Err(BenchError::OrderingViolated(violations.len()));
                }
                println!("ordering {expr} holds");
            }
        }
        Command::Ablate(common) => {
            let (cfg, out) = common.resolve()?;
            for r in commands::ablate(&cfg, &out, common.progress)? {
                let steps = r.steps_to_target.map_or("-".to_string(), |s| s.to_string());
                println!("{:<20} window loss {:.5}  steps to {:.5}: {steps}", r.variant, r.window_loss, r.target_loss);
            }
        }
        Command::Complexity(common) => {
            let (cfg, out) = common.resolve()?;
            let r = commands::complexity(&cfg, &out)?;
            println!(
                "slopes: attention score {:.3}, attention {:.3}, projection {:.3}, total {:.3}; symbolic agrees: {}",
                r.attention_score_slope, r.attention_slope, r.projection_slope, r.total_slope, r.symbolic_agrees
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
