//! `creative`: the batch workflow from dataset preparation to evaluation reports.

mod ctx;
mod data;
mod eval;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use creative_core::Error;

use crate::ctx::Ctx;

#[derive(Parser, Debug)]
#[command(name = "creative", version, about = "Creative fine-tuning of diffusion policies")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// TOML run config; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted `key=value` override, applied after the config file.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Global seed; also seeds the DDPO and CAN trainers.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Root of every artifact directory. Relative paths resolve against it.
    #[arg(long, default_value = "runs", global = true)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Caption a labeled dataset and keep the classes most often described as a medium.
    SubsetMediums(data::SubsetArgs),
    /// Cluster image embeddings into a k-means style model.
    FitClusters(data::ClusterArgs),
    /// Pretrain a discriminator style head for the discriminator classifier.
    TrainDisc(train::DiscArgs),
    /// Fine-tune the diffusion policy with the creativity reward.
    TrainDdpo(train::DdpoArgs),
    /// Train the CAN baseline.
    TrainCan(train::CanArgs),
    /// Sample a paired-seed evaluation set from one model.
    EvalGenerate(eval::GenerateArgs),
    /// Aesthetic and ImageReward score tables over evaluation sets.
    EvalScore(eval::SetsArgs),
    /// Cross-model similarity matrices of paired images.
    EvalSimilarity(eval::SimilarityArgs),
    /// Two-dimensional projection of every set's image embeddings.
    EvalSpace(eval::SetsArgs),
    /// Scores, box plots, similarity and possibility space in one directory.
    Report(eval::ReportArgs),
}

fn run(cli: Cli) -> creative_core::Result<()> {
    let ctx = Ctx::new(&cli.global)?;
    match cli.command {
        Command::SubsetMediums(a) => data::subset_mediums(&ctx, a),
        Command::FitClusters(a) => data::fit_clusters(&ctx, a),
        Command::TrainDisc(a) => train::train_disc(&ctx, a),
        Command::TrainDdpo(a) => train::train_ddpo(&ctx, a),
        Command::TrainCan(a) => train::train_can(&ctx, a),
        Command::EvalGenerate(a) => eval::generate(&ctx, a),
        Command::EvalScore(a) => eval::score(&ctx, a),
        Command::EvalSimilarity(a) => eval::similarity(&ctx, a),
        Command::EvalSpace(a) => eval::space(&ctx, a),
        Command::Report(a) => eval::report(&ctx, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap prints usage and exits with 2 on bad flags
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
