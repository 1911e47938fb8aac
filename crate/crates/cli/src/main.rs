//! `lgcvs`: dataset generation, two-stage training, evaluation,
//! reconstruction dumps and ablation sweeps.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 on runtime errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use latent_graph::cli::{self, RunConfig, TrainTarget, DEFAULT_ROOT, ROOT_ENV};
use latent_graph::metrics::BaselineKind;

#[derive(Parser, Debug)]
#[command(name = "lgcvs", version, about = "Latent graph criteria classification on synthetic scenes")]
struct Args {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Dotted-path override such as `stage2.lr=0.001`; repeatable.
    #[arg(long = "set", short = 's', global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory all outputs are written under.
    #[arg(long, global = true, env = ROOT_ENV, default_value = DEFAULT_ROOT)]
    root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Stage {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    /// Layout-only baseline.
    Layout,
    /// Image-and-layout baseline.
    Deep,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the train, val and test splits and print positive rates.
    Dataset {
        /// Replace an existing dataset directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one stage of the latent graph model, or a baseline.
    Train {
        #[arg(long, value_enum)]
        stage: Stage,
        /// Continue from the last checkpoint of an interrupted run.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on a split and write a JSON report.
    Eval {
        /// Defaults to the run's best stage-2 checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write per-image logits and labels as CSV.
        #[arg(long)]
        csv: bool,
    },
    /// Write reconstructions of the first scenes of a split.
    Reconstruct {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Train and score every configuration of an ablation.
    Sweep {
        /// One of: components, edges, lambda_perturb, recon_bottleneck,
        /// gnn_layers, reconstruction.
        name: String,
    },
    /// Print the effective configuration as TOML.
    Config,
}

fn run(args: &Args) -> latent_graph::Result<()> {
    let cfg = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    let root: &Path = &args.root;
    match &args.command {
        Command::Dataset { force } => {
            for s in cli::cmd_dataset(&cfg, root, *force)? {
                let [a, b, c] = s.positive_rates;
                println!(
                    "{:<5} {:>6} scenes  positive rates C1 {a:.3}  C2 {b:.3}  C3 {c:.3}",
                    s.split, s.scenes
                );
            }
        }
        Command::Train { stage, resume } => {
            let target = match stage {
                Stage::One => TrainTarget::Stage1,
                Stage::Two => TrainTarget::Stage2,
                Stage::Layout => TrainTarget::Baseline(BaselineKind::Layout),
                Stage::Deep => TrainTarget::Baseline(BaselineKind::Deep),
            };
            let s = cli::cmd_train(&cfg, root, target, *resume)?;
            println!(
                "best epoch {} ({:.4}) -> {}",
                s.best_epoch,
                s.best_metric,
                s.best_checkpoint.display()
            );
        }
        Command::Eval { checkpoint, split, csv } => {
            let out = cli::cmd_eval(&cfg, root, checkpoint.as_deref(), split, *csv)?;
            println!("{}", serde_json::to_string_pretty(&out.report)?);
            println!("report: {}", out.report_path.display());
            if let Some(p) = out.csv_path {
                println!("scores: {}", p.display());
            }
        }
        Command::Reconstruct { checkpoint, split, count } => {
            let files = cli::cmd_reconstruct(&cfg, root, checkpoint.as_deref(), split, *count)?;
            println!("wrote {} images", files.len());
        }
        Command::Sweep { name } => {
            let table = cli::cmd_sweep(&cfg, root, name)?;
            print!("{}", table.to_markdown());
        }
        Command::Config => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 3 })
        }
    }
}
