use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use sgnet::commands::{cmd_ablate, cmd_evaluate, cmd_gen_data, cmd_gradcheck, cmd_train};
use sgnet::experiment::{ablation_deltas, BEST_CHECKPOINT, CHECKPOINT_DIR, TRAIN_LOG};
use sgnet::phantom::{Split, MANIFEST_FILE};
use std::path::PathBuf;

/// Train, evaluate and ablate 3D segmentation networks with semantic-guided
/// skip connections on synthetic phantoms.
#[derive(Parser)]
#[command(name = "sgnet", version)]
struct Cli {
    /// Run on a single thread so that every run is reproducible.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset and its manifest.
    GenData {
        /// Dataset spec JSON (number of cases, phantom settings, split).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Master seed; overrides the spec.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        num_cases: Option<usize>,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train a network from an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Continue from an epoch checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on one split of a dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest; defaults to the one named by --config.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
        /// Write mid-slice PGM overlays.
        #[arg(long)]
        overlays: bool,
    },
    /// Train and score the SG x soft-contour grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seeds; overrides the config.
        #[arg(long, value_delimiter = ',')]
        seed: Option<Vec<u64>>,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, seed, num_cases, out } => {
            let manifest = cmd_gen_data(config.as_deref(), seed, num_cases, &out)?;
            println!("wrote {} cases to {}", manifest.cases.len(), out.join(MANIFEST_FILE).display());
        }
        Command::Train { config, seed, out, resume } => {
            let outcome = cmd_train(&config, seed, &out, resume.as_deref())?;
            let last = outcome.steps.last();
            println!(
                "trained {} steps; final loss {}; log {}",
                outcome.steps.len(),
                last.map_or("n/a".into(), |s| format!("{:.5}", s.total)),
                out.join(TRAIN_LOG).display()
            );
            if let (Some(dsc), Some(epoch)) = (outcome.best_val_dsc, outcome.best_epoch) {
                println!(
                    "best validation mean DSC {dsc:.4} at epoch {epoch} ({})",
                    out.join(CHECKPOINT_DIR).join(BEST_CHECKPOINT).display()
                );
            }
        }
        Command::Evaluate { checkpoint, manifest, config, split, out, overlays } => {
            let manifest = match (manifest, config) {
                (Some(m), _) => m,
                (None, Some(c)) => sgnet::ExperimentConfig::from_file(&c)?.data.manifest,
                (None, None) => bail!("pass --manifest or --config"),
            };
            let report = cmd_evaluate(&checkpoint, &manifest, split, &out, overlays)?;
            for (class, s) in &report.per_class {
                let fmt = |m: Option<f64>, d: Option<f64>| match (m, d) {
                    (Some(m), Some(d)) => format!("{m:.4} ({d:.4})"),
                    _ => "undefined".into(),
                };
                println!("class {class}: DSC {}  ASD {}", fmt(s.dsc.mean, s.dsc.std), fmt(s.asd.mean, s.asd.std));
            }
            println!("mean DSC {:.4}; reports in {}", report.mean_dsc, out.display());
        }
        Command::Ablate { config, seed, out } => {
            let runs = cmd_ablate(&config, seed, &out)?;
            for d in ablation_deltas(&runs).iter().filter(|d| d.other_on) {
                println!(
                    "{} seed {} class {}: dDSC {:+.4}  ASD gain {:+.4}",
                    d.factor,
                    d.seed,
                    d.class,
                    d.dsc_delta.unwrap_or(f64::NAN),
                    d.asd_improvement.unwrap_or(f64::NAN)
                );
            }
            println!("tables in {}", out.display());
        }
        Command::Gradcheck { seed, out } => {
            let report = cmd_gradcheck(seed, out.as_deref())?;
            for e in &report.entries {
                let verdict = if e.passed { "ok" } else { "FAIL" };
                println!("{verdict:>4}  {:<28} {:<16} rel {:.3e}", e.component, e.group, e.max_rel_error);
            }
            if !report.passed {
                bail!("gradient check failed (tolerance {:e})", report.tolerance);
            }
            println!("all gradients within {:e}", report.tolerance);
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.deterministic {
        rayon::ThreadPoolBuilder::new().num_threads(1).build_global().context("configuring single-threaded mode")?;
    }
    run(cli)
}
