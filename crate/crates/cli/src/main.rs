use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use morphloss::error::Error;
use morphloss::harness::{self, Check, ExperimentConfig};
use morphloss::losses::LossKind;

/// Train and compare 3D morphable model reconstruction losses on synthetic data.
#[derive(Parser, Debug)]
#[command(name = "morphloss", version)]
struct Cli {
    /// Seed for model, dataset, training and search.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Multiply every epoch budget, e.g. 0.1 for smoke runs.
    #[arg(long, global = true)]
    epoch_scale: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the seeded synthetic dataset.
    GenData,
    /// Build a morphable model from registered shapes or the synthetic template.
    BuildModel {
        /// Directory of `*.json` shapes (default: synthetic template).
        #[arg(long)]
        shapes: Option<PathBuf>,
        /// Number of principal components.
        #[arg(long)]
        components: Option<usize>,
    },
    /// Train one loss and write its checkpoint.
    Train {
        #[arg(long)]
        loss: LossKind,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train every selected loss and tabulate test metrics and cost.
    Compare {
        #[arg(long, value_delimiter = ',')]
        losses: Vec<LossKind>,
        /// Trials per multiterm loss.
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Train the multiview loss for several view counts.
    SweepViews {
        #[arg(long, value_delimiter = ',')]
        views: Vec<usize>,
    },
    /// Train single-view and multiview reprojection on the same data and compare depth.
    FlatteningDemo,
    /// Random search over a multiterm loss's weights and learning rate.
    SearchHparams {
        #[arg(long)]
        loss: LossKind,
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Compare analytic loss gradients with central finite differences.
    GradCheck {
        #[arg(long, value_delimiter = ',')]
        losses: Vec<LossKind>,
        #[arg(long)]
        trials: Option<usize>,
    },
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
    Checks,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e.root() {
            Error::ConfigInvalid(_) => Failure::Config(e.into()),
            _ => Failure::Runtime(e.into()),
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(s) = cli.epoch_scale {
        cfg.epoch_scale = s;
    }
    match &cli.command {
        Command::BuildModel { shapes, components } => {
            if shapes.is_some() {
                cfg.model.shapes_dir = shapes.clone();
            }
            if let Some(b) = components {
                cfg.model.components = *b;
            }
        }
        Command::Compare { losses, budget } => {
            if !losses.is_empty() {
                cfg.losses = losses.clone();
            }
            if let Some(b) = budget {
                cfg.search.budget = *b;
            }
        }
        Command::SweepViews { views } if !views.is_empty() => cfg.sweep.views = views.clone(),
        Command::SearchHparams { budget: Some(b), .. } => cfg.search.budget = *b,
        Command::GradCheck { trials: Some(t), .. } => cfg.grad_check.trials = *t,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value)
        .context("serializing report")
        .map_err(Failure::Runtime)?;
    println!("{text}");
    Ok(())
}

fn report_checks(checks: &[Check]) -> Result<(), Failure> {
    for c in checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if checks.iter().all(|c| c.passed) {
        Ok(())
    } else {
        Err(Failure::Checks)
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    let out: &Path = &cfg.out_dir;
    match &cli.command {
        Command::GenData => {
            let ds = harness::cmd_gen_data(&cfg, out)?;
            println!("wrote {} scenes to {}", ds.scenes.len(), out.display());
        }
        Command::BuildModel { .. } => {
            let model = harness::cmd_build_model(&cfg, out)?;
            println!(
                "wrote model with {} points and {} components to {}",
                model.n_points(),
                model.n_components(),
                out.display()
            );
        }
        Command::Train { loss } => {
            let run = harness::cmd_train(&cfg, *loss, out)?;
            let last = run.history.epochs.last();
            println!(
                "{loss}: {} epochs, final train loss {:?}, val loss {:?}",
                run.history.epochs.len(),
                last.map(|e| e.train_loss),
                last.and_then(|e| e.val_loss)
            );
        }
        Command::Eval { checkpoint } => {
            let report = harness::cmd_eval(&cfg, checkpoint, out)?;
            print_json(&report.summary_json())?;
        }
        Command::Compare { .. } => {
            let table = harness::cmd_compare(&cfg, out)?;
            print!("{}", String::from_utf8_lossy(&table.to_csv()?));
        }
        Command::SweepViews { .. } => {
            let report = harness::cmd_sweep_views(&cfg, out)?;
            print_json(&report.rows)?;
            report_checks(&report.checks)?;
        }
        Command::FlatteningDemo => {
            let report = harness::cmd_flattening_demo(&cfg, out)?;
            print_json(&(&report.srl, &report.mrl))?;
            report_checks(&report.checks)?;
        }
        Command::SearchHparams { loss, .. } => {
            let (row, outcome) = harness::cmd_search_hparams(&cfg, *loss, out)?;
            let best = outcome.best_trial();
            println!("best trial {} weights {:?} lr {}", best.trial, best.params, best.lr);
            print_json(&row)?;
        }
        Command::GradCheck { losses, .. } => {
            let losses = if losses.is_empty() { LossKind::ALL.to_vec() } else { losses.clone() };
            let report = harness::cmd_grad_check(&cfg, &losses, out)?;
            let checks: Vec<Check> = report
                .checks
                .iter()
                .map(|c| Check {
                    name: c.loss.to_string(),
                    passed: c.passed(),
                    detail: if c.passed() {
                        format!("{} trials", c.trials)
                    } else {
                        format!("failed blocks {:?}", c.failed_blocks())
                    },
                })
                .collect();
            report_checks(&checks)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("configuration error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
        Err(Failure::Checks) => ExitCode::from(4),
    }
}
