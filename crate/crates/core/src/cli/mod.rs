//! The `batchcause` command line.

mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{FileConfig, RunConfig};

use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "batchcause", version, about = "Budgeted outcome annotation and ATE estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Monte Carlo comparison of adaptive and uniform annotation.
    Simulate(SimulateArgs),
    /// Writes a synthetic dataset and its sealed outcomes.
    Generate(GenerateArgs),
    /// Optimal annotation probabilities for a partly annotated dataset.
    Plan(PlanArgs),
    /// ATE estimate from an annotated dataset and its plan.
    Estimate(EstimateArgs),
    /// Two-batch annotation campaign driven through files.
    #[command(subcommand)]
    Campaign(CampaignCommand),
}

/// Flags shared by every command. Each one overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub budget: Option<f64>,
    /// Comma-separated budget grid.
    #[arg(long, value_delimiter = ',')]
    pub budgets: Option<Vec<f64>>,
    #[arg(long)]
    pub control_budget: Option<f64>,
    #[arg(long)]
    pub treated_budget: Option<f64>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Sample size of generated data.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub theta: Option<f64>,
    /// Share of each simulated sample held out before the campaign.
    #[arg(long)]
    pub holdout: Option<f64>,
    /// Comma-separated methods (adaptive-aipw, adaptive-rz, uniform, skyline).
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Batch-1 share of units.
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// aipw, rz or external.
    #[arg(long)]
    pub estimator: Option<String>,
    /// design or reoptimized.
    #[arg(long)]
    pub weighting: Option<String>,
    /// Balance arms across batches and folds.
    #[arg(long)]
    pub stratify: bool,
    /// Outcome and variance learner: ridge, knn or forest.
    #[arg(long)]
    pub learner: Option<String>,
    /// logistic or forest.
    #[arg(long)]
    pub propensity_learner: Option<String>,
    #[arg(long)]
    pub ridge_lambda: Option<f64>,
    #[arg(long)]
    pub knn_k: Option<usize>,
    #[arg(long)]
    pub forest_trees: Option<usize>,
    #[arg(long)]
    pub forest_min_leaf: Option<usize>,
    #[arg(long)]
    pub forest_max_depth: Option<usize>,
    #[arg(long)]
    pub pi_floor: Option<f64>,
    #[arg(long)]
    pub variance_floor: Option<f64>,
    #[arg(long)]
    pub weight_cap: Option<f64>,
}

impl CommonArgs {
    fn flags(&self) -> FileConfig {
        FileConfig {
            seed: self.seed,
            budget: self.budget,
            budgets: self.budgets.clone(),
            control_budget: self.control_budget,
            treated_budget: self.treated_budget,
            trials: self.trials,
            n: self.n,
            theta: self.theta,
            holdout: self.holdout,
            methods: self.methods.clone(),
            kappa: self.kappa,
            folds: self.folds,
            alpha: self.alpha,
            estimator: self.estimator.clone(),
            weighting: self.weighting.clone(),
            stratify: self.stratify.then_some(true),
            learner: self.learner.clone(),
            propensity_learner: self.propensity_learner.clone(),
            ridge_lambda: self.ridge_lambda,
            knn_k: self.knn_k,
            forest_trees: self.forest_trees,
            forest_min_leaf: self.forest_min_leaf,
            forest_max_depth: self.forest_max_depth,
            pi_floor: self.pi_floor,
            variance_floor: self.variance_floor,
            weight_cap: self.weight_cap,
            ..FileConfig::default()
        }
    }

    /// Defaults, then the config file, then `extra`, then the flags.
    pub fn resolve(&self, command: &str, extra: FileConfig) -> Result<RunConfig> {
        let file = match &self.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        RunConfig::resolve(command, file.overlay(extra).overlay(self.flags()))
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Reveal each outcome with this probability in `data.csv`.
    #[arg(long, default_value_t = 0.0)]
    pub annotate: f64,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Dataset CSV with an annotated subset.
    #[arg(long)]
    pub data: PathBuf,
    /// binary or continuous.
    #[arg(long)]
    pub treatment: Option<String>,
    /// Target dose for continuous treatments.
    #[arg(long)]
    pub z0: Option<f64>,
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// gaussian or box.
    #[arg(long)]
    pub kernel: Option<String>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Plan CSV with columns id, pi.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Weights CSV with columns id, weight (external estimator).
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum CampaignCommand {
    /// Creates `campaign.json` in the output directory.
    Init(CampaignInitArgs),
    /// Advances the campaign as far as the available labels allow.
    Step(CampaignDirArgs),
    /// Final refit and estimate; writes `report.json`.
    Finalize(CampaignFinalizeArgs),
    /// Prints the phase and the next required action.
    Status(CampaignDirArgs),
}

#[derive(Debug, Args)]
pub struct CampaignInitArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// adaptive or uniform.
    #[arg(long, default_value = "adaptive")]
    pub design: String,
}

#[derive(Debug, Args)]
pub struct CampaignDirArgs {
    /// Campaign directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Dataset CSV; defaults to the path recorded at init.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CampaignFinalizeArgs {
    #[command(flatten)]
    pub dir: CampaignDirArgs,
    /// Weights CSV (id, weight) for the external estimator.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Generate(a) => commands::generate(&a),
        Command::Plan(a) => commands::plan(&a),
        Command::Estimate(a) => commands::estimate(&a),
        Command::Campaign(CampaignCommand::Init(a)) => commands::campaign_init(&a),
        Command::Campaign(CampaignCommand::Step(a)) => commands::campaign_step(&a),
        Command::Campaign(CampaignCommand::Finalize(a)) => commands::campaign_finalize(&a),
        Command::Campaign(CampaignCommand::Status(a)) => commands::campaign_status(&a),
    }
}
