mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use foley_core::generator::ConditioningMode;
use foley_core::{Error, ErrorClass, Result};

use commands::{EvalKind, GenerateArgs, TrainArgs};
use config::{Profile, RunConfig};

#[derive(Parser)]
#[command(name = "foley", version, about = "Video-conditioned waveform generation: data, training, sampling and retrieval")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command; they override the config file.
#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// desk or full.
    #[arg(long, global = true, value_parser = parse_profile)]
    profile: Option<Profile>,
    /// Worker threads (0: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

fn parse_profile(s: &str) -> std::result::Result<Profile, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<ConditioningMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus: WAVs, feature files and a manifest.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        categories: Option<usize>,
        #[arg(long)]
        clips_per_category: Option<usize>,
        #[arg(long)]
        test_per_category: Option<usize>,
    },
    /// Aggregate votes, drop rejected segments and merge runs into videos.
    Curate {
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        segment_seconds: Option<f64>,
    },
    /// Length statistics of a manifest.
    Stats {
        manifest: PathBuf,
        /// Also write the statistics as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per category (or one for all with --all-categories).
    Train {
        manifest: PathBuf,
        /// Output directory for checkpoints and reports.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<ConditioningMode>,
        /// Train only this category; repeatable.
        #[arg(long = "category")]
        categories: Vec<String>,
        #[arg(long)]
        all_categories: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        chunk_len: Option<usize>,
        /// Continue the run saved in this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample a waveform conditioned on a feature file.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Appearance features.
        #[arg(long)]
        features: PathBuf,
        /// Flow features, joined to the appearance features for flow models.
        #[arg(long)]
        flow: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Test-split loss or cross-modal retrieval.
    Eval {
        manifest: PathBuf,
        /// Repeat for one checkpoint per category.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        #[arg(long, conflicts_with = "retrieval", required_unless_present = "retrieval")]
        loss: bool,
        #[arg(long)]
        retrieval: bool,
        /// Comma-separated k values for top-k accuracy.
        #[arg(long, value_delimiter = ',')]
        top_k: Option<Vec<usize>>,
        /// Also write the results as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve(common: &Common, command: &Command) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(p) = common.profile {
        cfg.profile = p;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    match command {
        Command::SynthData { categories, clips_per_category, test_per_category, .. } => {
            let s = &mut cfg.synth;
            s.categories = categories.unwrap_or(s.categories);
            s.clips_per_category = clips_per_category.unwrap_or(s.clips_per_category);
            s.test_per_category = test_per_category.unwrap_or(s.test_per_category).min(s.clips_per_category);
        }
        Command::Curate { segment_seconds, .. } => {
            cfg.curate.segment_s = segment_seconds.unwrap_or(cfg.curate.segment_s);
        }
        Command::Train { mode, epochs, max_steps, learning_rate, batch_size, chunk_len, .. } => {
            cfg.set_mode(mode.unwrap_or(cfg.mode));
            let t = &mut cfg.train;
            t.epochs = epochs.unwrap_or(t.epochs);
            if max_steps.is_some() {
                t.max_steps = *max_steps;
                // a step budget alone means "this many steps"
                if epochs.is_none() {
                    t.epochs = 0;
                }
            }
            t.learning_rate = learning_rate.unwrap_or(t.learning_rate);
            t.batch_size = batch_size.unwrap_or(t.batch_size);
            t.chunk_len = chunk_len.unwrap_or(t.chunk_len);
        }
        Command::Generate { duration, temperature, .. } => {
            let g = &mut cfg.generate;
            g.duration_s = duration.unwrap_or(g.duration_s);
            g.temperature = temperature.unwrap_or(g.temperature);
        }
        Command::Eval { top_k, .. } => {
            if let Some(k) = top_k {
                cfg.eval.top_k = k.clone();
            }
        }
        Command::Stats { .. } => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.common, &cli.command)?;
    if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build_global()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    }
    match &cli.command {
        Command::SynthData { out, .. } => commands::synth_data(&cfg, out),
        Command::Curate { annotations, out, .. } => commands::curate(&cfg, annotations, out),
        Command::Stats { manifest, out } => commands::stats(&cfg, manifest, out.as_deref()),
        Command::Train { manifest, out, categories, all_categories, resume, .. } => commands::train(
            &cfg,
            &TrainArgs { manifest, out, categories, all_categories: *all_categories, resume: resume.as_deref() },
        ),
        Command::Generate { checkpoint, features, flow, out, .. } => {
            commands::generate(&cfg, &GenerateArgs { checkpoint, features, flow: flow.as_deref(), out })
        }
        Command::Eval { manifest, checkpoints, loss, out, .. } => {
            let kind = if *loss { EvalKind::Loss } else { EvalKind::Retrieval };
            commands::eval(&cfg, manifest, checkpoints, kind, out.as_deref())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Validation => 2,
        ErrorClass::Data => 3,
        ErrorClass::Io => 4,
    }
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors, matching the validation class
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
