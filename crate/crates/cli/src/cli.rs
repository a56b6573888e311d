use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Clone, Parser)]
#[command(name = "interference-lab", version, about = "Seeded pipelines for ad-interference effect estimation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON run configuration; every omitted field takes its default.
    #[arg(long, global = true, value_name = "JSON")]
    pub config: Option<PathBuf>,
    /// Master seed for every random stream.
    #[arg(long, global = true, env = "INTERFERENCE_LAB_SEED")]
    pub seed: Option<u64>,
    /// Directory for artifacts.
    #[arg(long, global = true, default_value = "out", value_name = "DIR")]
    pub out_dir: PathBuf,
    /// Input dataset CSV (default: dataset.csv in the output directory).
    #[arg(long, global = true, value_name = "CSV")]
    pub dataset: Option<PathBuf>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    pub jobs: Option<u16>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Simulate pageviews and the ground-truth counterfactual means.
    Simulate,
    /// Write the ad DAG and the ignorability verdict for each rule.
    Graph,
    /// Estimate counterfactual means and effects from a dataset.
    Estimate,
    /// Discover the parents of each click outcome.
    Discover,
    /// Compare feature sets by held-out AUC.
    PredictEval,
    /// Summarize the artifacts in the output directory.
    Report,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Graph => "graph",
            Command::Estimate => "estimate",
            Command::Discover => "discover",
            Command::PredictEval => "predict-eval",
            Command::Report => "report",
        }
    }
}
