//! `vostk` command-line front end.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vostk_core::VosError;

#[derive(Debug, Parser)]
#[command(name = "vostk", version, about = "Semi-supervised video object segmentation toolkit")]
struct Cli {
    /// JSON pipeline config; command-line flags override its values.
    #[arg(long, global = true, env = "VOSTK_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Propagate the first-frame mask through a video at one scale.
    Propagate(commands::PropagateArgs),
    /// Merge several prediction directories into one.
    Fuse(commands::FuseArgs),
    /// Refine mask boundaries patch by patch.
    RefineBoundary(commands::RefineArgs),
    /// Re-segment small objects on zoomed crops.
    ZoomRefine(commands::ZoomArgs),
    /// Score predicted masks against ground truth.
    Evaluate(commands::EvaluateArgs),
    /// Run one attention readout on random tokens and print it.
    AttendDemo(commands::AttendArgs),
    /// Write a synthetic clip with ground truth.
    GenSynthetic(commands::SyntheticArgs),
    /// Run the whole pipeline on one video or a directory of videos.
    Run(commands::RunArgs),
}

/// Pipeline knobs shared by the commands that take a config.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigFlags {
    /// Attention readout: eq1, eq2 or eq3.
    #[arg(long)]
    pub variant: Option<String>,
    /// Frames kept in memory.
    #[arg(long)]
    pub capacity: Option<usize>,
    /// Memory sampling: keep-all, stride:N or first-plus-stride:T.
    #[arg(long)]
    pub policy: Option<String>,
    /// Keep only the k best memory tokens per query.
    #[arg(long)]
    pub topk: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Integer downsampling before propagation.
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub id_dim: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn exit_code(err: &VosError) -> u8 {
    match err {
        VosError::Input(_) => 3,
        VosError::Config(_) => 4,
        VosError::Format(_) => 5,
        VosError::Stage { .. } => 6,
        VosError::Io { .. } => 7,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = commands::dispatch(cli.config.as_deref(), cli.command);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
