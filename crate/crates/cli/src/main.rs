use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use camo_cli::commands::{self, Session};
use camo_cli::{error_message, exit_code, RunConfig};
use camo_core::texgen::Tau;
use clap::{Parser, Subcommand};

/// Adversarial vehicle camouflage workflows.
///
/// Exit status: 0 on success, 2 for invalid arguments or configuration,
/// 3 when a command fails while running.
#[derive(Parser)]
#[command(name = "camo", version)]
struct Cli {
    /// Run configuration (TOML). Built-in defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Logs progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Renders the scene dataset.
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trains the environment feature renderer on views of the dataset.
    TrainEfr {
        /// Continues from the last saved epoch.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Trains the grid detector on synthesized scenes.
    TrainDetector {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Optimizes the adversarial feature and writes the camouflage.
    Attack {
        /// Clip threshold; a positive number or `inf`.
        #[arg(long)]
        tau: Option<Tau>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Scores a texture on the dataset and writes AP reports.
    Eval {
        /// PNG path or `gray`.
        #[arg(long)]
        texture: Option<String>,
        /// Second texture for a side-by-side table.
        #[arg(long)]
        compare: Option<String>,
    },
    /// Reorders a mesh's UV atlas so adjacent faces stay adjacent in texture space.
    Uv {
        input: PathBuf,
        output: Option<PathBuf>,
        /// Only checks the input atlas.
        #[arg(long)]
        validate_only: bool,
    },
    /// Serves the toy generator over stdin/stdout.
    ServeGenerator,
    /// Serves the configured detector over stdin/stdout.
    ServeDetector,
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(j) = cli.jobs {
        config.jobs = Some(j);
    }
    match &cli.command {
        Command::TrainEfr { epochs: Some(e), .. } => config.efr.train.epochs = *e,
        Command::TrainDetector { epochs: Some(e) } => config.detector.train.epochs = *e,
        Command::Attack {
            tau,
            eta,
            epochs,
            max_steps,
        } => {
            if let Some(t) = tau {
                config.attack.tau = *t;
            }
            if let Some(e) = eta {
                config.attack.eta = *e;
            }
            if let Some(e) = epochs {
                config.attack.epochs = *e;
            }
            if max_steps.is_some() {
                config.attack.max_steps = *max_steps;
            }
        }
        _ => {}
    }
    let session = Session::new(config)?;
    if let Some(j) = session.config.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .context("configuring worker threads")?;
    }

    match cli.command {
        Command::Synth { out } => {
            let s = commands::synth(&session, out.as_deref())?;
            println!("wrote {} samples to {}", s.count, s.dir.display());
        }
        Command::TrainEfr { resume, .. } => {
            let s = commands::train_efr_cmd(&session, resume)?;
            println!("efr pairs: {} train, {} test", s.train_pairs, s.test_pairs);
            for r in &s.history {
                println!("epoch {}: train loss {:.6}, test MAE {:.6}", r.epoch, r.train_loss, r.test_mae);
            }
            println!("copy-input baseline MAE {:.6}", s.identity_mae);
            println!("best epoch {}; checkpoint {}", s.best_epoch, s.checkpoint.display());
        }
        Command::TrainDetector { .. } => {
            let s = commands::train_detector_cmd(&session)?;
            println!("detector examples: {}", s.examples);
            if let Some(l) = s.history.last() {
                println!("final loss {l:.6}; checkpoint {}", s.checkpoint.display());
            }
        }
        Command::Attack { .. } => {
            let s = commands::attack_cmd(&session)?;
            let r = &s.result;
            println!("tau {}; {} steps", session.config.tau_label(), r.steps.len());
            println!("mean D_s {:.6} -> {:.6}", r.initial_mean_ds, r.final_mean_ds);
            println!("final loss {:.6}", r.final_loss);
            for a in &s.artifacts {
                println!("wrote {}", a.display());
            }
        }
        Command::Eval { texture, compare } => {
            let s = commands::eval_cmd(&session, texture.as_deref(), compare.as_deref())?;
            println!("overall AP@{}: {:.6} ({} samples)", session.config.eval.iou_threshold, s.report.overall, s.report.count);
            if let Some(c) = &s.compare {
                println!("comparison AP: {:.6}", c.overall);
            }
            for b in &s.report.bins {
                println!("{:>9} {:>8}: AP {:.4} (n={})", b.dimension, b.value, b.ap, b.count);
            }
        }
        Command::Uv {
            input,
            output,
            validate_only,
        } => {
            let s = commands::uv_cmd(&session, &input, output.as_deref(), validate_only)?;
            match s.after {
                Some(after) => println!(
                    "adjacency score: {:.6} -> {:.6} (change {:+.6})",
                    s.before,
                    after,
                    after - s.before
                ),
                None => println!("adjacency score: {:.6}", s.before),
            }
            println!(
                "uv check: {} out of range, {} overlapping pairs, {} degenerate",
                s.report.out_of_range.len(),
                s.report.overlaps.len(),
                s.report.degenerate.len()
            );
        }
        Command::ServeGenerator => commands::serve_generator_cmd(&session)?,
        Command::ServeDetector => commands::serve_detector_cmd(&session)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", error_message(&e));
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
