//! `voxscreen`: config-driven runs of the screening pipeline.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;
use config::{Override, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "voxscreen", version, about = "Depression screening from speech mel-spectrogram fragments")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run config; flags override its keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Run seed (`seed`). Required here or in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Corpus manifest CSV (`paths.manifest`).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Fragment cache directory (`paths.cache_dir`).
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Output directory (`paths.output_dir`).
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Number of cross-validation folds (`folds`).
    #[arg(long)]
    folds: Option<usize>,
}

#[derive(Debug, Args)]
struct ModelFlags {
    /// CNN, CNN_LSTM or CNN_GRU (`model.encoder_type`).
    #[arg(long)]
    encoder: Option<String>,
    /// `model.kernel_size`
    #[arg(long)]
    kernel_size: Option<usize>,
    /// Fragments per bag (`model.n_fragments`).
    #[arg(long)]
    sample_size: Option<usize>,
    /// `train.max_epochs`
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus (WAVs and manifest.csv) in the output directory.
    Synth {
        #[command(flatten)]
        common: Common,
        /// `synth.n_speakers`
        #[arg(long)]
        speakers: Option<usize>,
        /// `synth.marker_prevalence`; 0 gives a null corpus.
        #[arg(long)]
        prevalence: Option<f64>,
        /// `synth.healthy_slice`: healthy speakers carry the marker on a slice this many bands wide.
        #[arg(long)]
        healthy_slice: Option<usize>,
        /// `synth.severity_scaled`
        #[arg(long)]
        severity_scaled: bool,
    },
    /// Precompute per-recording fragment caches into the cache directory.
    Featurize {
        #[command(flatten)]
        common: Common,
    },
    /// Train one configuration on one fold, or on every fold.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        /// Held-out fold; all folds when omitted.
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Run the encoder x kernel x sample-size grid under cross-validation.
    Grid {
        #[command(flatten)]
        common: Common,
        /// `train.max_epochs`
        #[arg(long)]
        epochs: Option<usize>,
        /// Grid cells trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Keep every cell's best checkpoint under `checkpoints/`.
        #[arg(long)]
        keep_checkpoints: bool,
    },
    /// Metrics and severity tables for a checkpoint on its held-out fold.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the fold recorded in the checkpoint.
        #[arg(long)]
        fold: Option<usize>,
        /// Bags averaged per speaker (`train.eval_repeats`).
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Encode a balanced fragment sample and cluster it with k-means.
    Cluster {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `cluster.fragments`
        #[arg(long)]
        fragments: Option<usize>,
        /// `cluster.k`
        #[arg(long)]
        k: Option<usize>,
    },
}

fn push<T: Into<serde_json::Value>>(o: &mut Vec<Override>, key: &'static str, v: Option<T>) {
    if let Some(v) = v {
        o.push(Override::new(key, v));
    }
}

impl Common {
    fn overrides(&self) -> Vec<Override> {
        let mut o = Vec::new();
        push(&mut o, "seed", self.seed);
        push(&mut o, "folds", self.folds.map(|f| f as u64));
        for (key, p) in [
            ("paths.manifest", &self.manifest),
            ("paths.cache_dir", &self.cache_dir),
            ("paths.output_dir", &self.out),
        ] {
            if let Some(p) = p {
                o.push(Override::path(key, p));
            }
        }
        o
    }

    fn load(&self, extra: Vec<Override>) -> Result<RunConfig, CliError> {
        let mut o = self.overrides();
        o.extend(extra);
        Ok(RunConfig::load(self.config.as_deref(), &o)?)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { common, speakers, prevalence, healthy_slice, severity_scaled } => {
            let mut o = Vec::new();
            push(&mut o, "synth.n_speakers", speakers.map(|n| n as u64));
            push(&mut o, "synth.marker_prevalence", prevalence);
            push(&mut o, "synth.healthy_slice", healthy_slice.map(|n| n as u64));
            if severity_scaled {
                o.push(Override::new("synth.severity_scaled", true));
            }
            commands::synth(&common.load(o)?)
        }
        Command::Featurize { common } => commands::featurize(&common.load(Vec::new())?),
        Command::Train { common, model, fold } => {
            let mut o = Vec::new();
            push(&mut o, "model.encoder_type", model.encoder);
            push(&mut o, "model.kernel_size", model.kernel_size.map(|n| n as u64));
            push(&mut o, "model.n_fragments", model.sample_size.map(|n| n as u64));
            push(&mut o, "train.max_epochs", model.epochs.map(|n| n as u64));
            commands::train(&common.load(o)?, fold)
        }
        Command::Grid { common, epochs, jobs, keep_checkpoints } => {
            let mut o = Vec::new();
            push(&mut o, "train.max_epochs", epochs.map(|n| n as u64));
            commands::grid(&common.load(o)?, jobs, keep_checkpoints)
        }
        Command::Eval { common, checkpoint, fold, repeats } => {
            let mut o = Vec::new();
            push(&mut o, "train.eval_repeats", repeats.map(|n| n as u64));
            commands::eval(&common.load(o)?, &checkpoint, fold)
        }
        Command::Cluster { common, checkpoint, fragments, k } => {
            let mut o = Vec::new();
            push(&mut o, "cluster.fragments", fragments.map(|n| n as u64));
            push(&mut o, "cluster.k", k.map(|n| n as u64));
            commands::cluster(&common.load(o)?, &checkpoint)
        }
    }
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors and 0 for --help/--version.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
