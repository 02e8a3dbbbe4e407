mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tempco::Error;

/// Temporal-context pretraining and online surgical phase segmentation.
#[derive(Parser, Debug)]
#[command(name = "tempco", version)]
struct Cli {
    /// Worker threads for LOSO folds and frame preprocessing.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Root seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ArchPreset {
    /// Full-size network on 240x320 frames.
    Full,
    /// Scaled-down network on 24x32 frames.
    Desk,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    /// Dataset manifest, or a directory containing `manifest.txt`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub arch: Option<ArchPreset>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum NetFlag {
    Naive,
    Tempconet,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic labeled dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        videos: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        phases: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        ambiguity: Option<f64>,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Self-supervised temporal-order pretraining.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        /// Continue from a checkpoint written by an earlier run into `--out`.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        static_threshold: Option<f64>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Train a phase network on every video of the dataset.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long, value_enum)]
        net: Option<NetFlag>,
        /// Pretrained temporal-order checkpoint for Conv1..FC6.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Leave-one-video-out evaluation.
    Loso {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long, value_enum)]
        net: Option<NetFlag>,
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Metrics of stored predictions against annotations.
    Evaluate {
        /// `index,phase_id` predictions.
        #[arg(long)]
        predictions: PathBuf,
        /// `index,phase_id` ground truth.
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        phases: usize,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every op and the desk-scale networks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Ops only.
        #[arg(long)]
        no_networks: bool,
        /// Corrupt one op's backward rule (self-test of the checker).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

/// Command failures and their exit codes.
#[derive(Debug)]
pub enum Failure {
    Run(Error),
    ChecksFailed,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(Error::Io(e))
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_)
        | Error::InvalidShape(_)
        | Error::Protocol(_)
        | Error::IncompatibleCheckpoint(_)
        | Error::StaleTape(_) => 2,
        Error::Diverged { .. } => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::ChecksFailed) => ExitCode::from(1),
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
