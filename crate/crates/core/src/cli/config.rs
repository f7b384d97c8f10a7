//! Run configuration: defaults, then a flat `key = value` file, then flags.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::campaign::{CampaignConfig, DesignKind, Weighting};
use crate::data::{BudgetSpec, TreatmentMode};
use crate::design::{KernelKind, DEFAULT_PI_FLOOR};
use crate::error::{Error, Result};
use crate::estimator::{EstimatorKind, EstimatorOptions};
use crate::nuisance::{ClassifierKind, ClassifierSpec, ForestParams, NuisanceSpecs, RegressorSpec};
use crate::sim::{DgpSpec, Method, NoiseParam};

/// Keys accepted in a config file. Unknown keys are rejected by name.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub budget: Option<f64>,
    pub budgets: Option<Vec<f64>>,
    pub control_budget: Option<f64>,
    pub treated_budget: Option<f64>,
    pub trials: Option<usize>,
    pub n: Option<usize>,
    pub theta: Option<f64>,
    pub holdout: Option<f64>,
    pub noise: Option<String>,
    pub methods: Option<Vec<String>>,
    pub kappa: Option<f64>,
    pub folds: Option<usize>,
    pub alpha: Option<f64>,
    pub estimator: Option<String>,
    pub weighting: Option<String>,
    pub stratify: Option<bool>,
    pub learner: Option<String>,
    pub propensity_learner: Option<String>,
    pub ridge_lambda: Option<f64>,
    pub knn_k: Option<usize>,
    pub forest_trees: Option<usize>,
    pub forest_min_leaf: Option<usize>,
    pub forest_max_depth: Option<usize>,
    pub pi_floor: Option<f64>,
    pub variance_floor: Option<f64>,
    pub weight_cap: Option<f64>,
    pub treatment: Option<String>,
    pub z0: Option<f64>,
    pub bandwidth: Option<f64>,
    pub kernel: Option<String>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {}", e.message())))
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Fields set here replace those in `self`.
    pub fn overlay(mut self, other: FileConfig) -> Self {
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f; } )* };
        }
        take!(
            seed, budget, budgets, control_budget, treated_budget, trials, n, theta, holdout, noise, methods, kappa,
            folds, alpha, estimator, weighting, stratify, learner, propensity_learner, ridge_lambda, knn_k,
            forest_trees, forest_min_leaf, forest_max_depth, pi_floor, variance_floor, weight_cap, treatment, z0,
            bandwidth, kernel
        );
        self
    }
}

/// Fully resolved configuration; echoed by every command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub budget: f64,
    pub budgets: Vec<f64>,
    pub control_budget: Option<f64>,
    pub treated_budget: Option<f64>,
    pub trials: usize,
    pub n: usize,
    pub theta: f64,
    pub holdout: f64,
    pub noise: NoiseParam,
    pub methods: Vec<Method>,
    pub kappa: f64,
    pub folds: usize,
    pub alpha: f64,
    pub estimator: EstimatorKind,
    pub weighting: Weighting,
    pub stratify: bool,
    pub learner: String,
    pub propensity_learner: String,
    pub ridge_lambda: f64,
    pub knn_k: usize,
    pub forest_trees: usize,
    pub forest_min_leaf: usize,
    pub forest_max_depth: Option<usize>,
    pub pi_floor: f64,
    pub variance_floor: f64,
    pub weight_cap: Option<f64>,
    pub treatment: TreatmentMode,
    pub z0: Option<f64>,
    pub bandwidth: f64,
    pub kernel: KernelKind,
}

fn parse_estimator(s: &str) -> Result<EstimatorKind> {
    match s {
        "aipw" => Ok(EstimatorKind::Aipw),
        "rz" | "rz-plugin" => Ok(EstimatorKind::RzPlugin),
        "external" | "external-weights" => Ok(EstimatorKind::ExternalWeights),
        other => Err(Error::Config(format!("unknown estimator `{other}` (aipw, rz, external)"))),
    }
}

impl RunConfig {
    pub fn resolve(command: &str, f: FileConfig) -> Result<Self> {
        let noise = match f.noise.as_deref().unwrap_or("variance") {
            "variance" => NoiseParam::Variance,
            "stddev" => NoiseParam::StdDev,
            other => return Err(Error::Config(format!("unknown noise `{other}` (variance, stddev)"))),
        };
        let weighting = match f.weighting.as_deref().unwrap_or("design") {
            "design" => Weighting::Design,
            "reoptimized" => Weighting::Reoptimized,
            other => return Err(Error::Config(format!("unknown weighting `{other}` (design, reoptimized)"))),
        };
        let treatment = match f.treatment.as_deref().unwrap_or("binary") {
            "binary" => TreatmentMode::Binary,
            "continuous" => TreatmentMode::Continuous,
            other => return Err(Error::Config(format!("unknown treatment `{other}` (binary, continuous)"))),
        };
        let kernel = match f.kernel.as_deref().unwrap_or("gaussian") {
            "gaussian" => KernelKind::Gaussian,
            "box" => KernelKind::Box,
            other => return Err(Error::Config(format!("unknown kernel `{other}` (gaussian, box)"))),
        };
        let methods = match &f.methods {
            Some(ms) => ms.iter().map(|m| Method::parse(m)).collect::<Result<Vec<_>>>()?,
            None => Method::ALL.to_vec(),
        };
        let cfg = RunConfig {
            command: command.to_string(),
            seed: f.seed.unwrap_or(0),
            budget: f.budget.unwrap_or(0.3),
            budgets: f.budgets.unwrap_or_else(|| vec![0.1, 0.2, 0.3, 0.4]),
            control_budget: f.control_budget,
            treated_budget: f.treated_budget,
            trials: f.trials.unwrap_or(100),
            n: f.n.unwrap_or(1000),
            theta: f.theta.unwrap_or(3.0),
            holdout: f.holdout.unwrap_or(0.0),
            noise,
            methods,
            kappa: f.kappa.unwrap_or(0.55),
            folds: f.folds.unwrap_or(5),
            alpha: f.alpha.unwrap_or(0.05),
            estimator: parse_estimator(f.estimator.as_deref().unwrap_or("aipw"))?,
            weighting,
            stratify: f.stratify.unwrap_or(false),
            learner: f.learner.unwrap_or_else(|| "ridge".into()),
            propensity_learner: f.propensity_learner.unwrap_or_else(|| "logistic".into()),
            ridge_lambda: f.ridge_lambda.unwrap_or(1.0),
            knn_k: f.knn_k.unwrap_or(10),
            forest_trees: f.forest_trees.unwrap_or(100),
            forest_min_leaf: f.forest_min_leaf.unwrap_or(4),
            forest_max_depth: f.forest_max_depth,
            pi_floor: f.pi_floor.unwrap_or(DEFAULT_PI_FLOOR),
            variance_floor: f.variance_floor.unwrap_or(1e-3),
            weight_cap: f.weight_cap,
            treatment,
            z0: f.z0,
            bandwidth: f.bandwidth.unwrap_or(0.5),
            kernel,
        };
        cfg.nuisance_specs()?.validate()?;
        Ok(cfg)
    }

    fn forest(&self) -> ForestParams {
        ForestParams {
            n_trees: self.forest_trees,
            min_leaf: self.forest_min_leaf,
            max_depth: self.forest_max_depth,
            ..ForestParams::default()
        }
    }

    pub fn regressor(&self) -> Result<RegressorSpec> {
        match self.learner.as_str() {
            "ridge" => Ok(RegressorSpec::Ridge { lambda: self.ridge_lambda }),
            "knn" => Ok(RegressorSpec::Knn { k: self.knn_k }),
            "forest" => Ok(RegressorSpec::Forest(self.forest())),
            other => Err(Error::Config(format!("unknown learner `{other}` (ridge, knn, forest)"))),
        }
    }

    pub fn classifier_kind(&self) -> Result<ClassifierKind> {
        match self.propensity_learner.as_str() {
            "logistic" => Ok(ClassifierKind::Logistic),
            "forest" => Ok(ClassifierKind::Forest(self.forest())),
            other => Err(Error::Config(format!("unknown propensity learner `{other}` (logistic, forest)"))),
        }
    }

    pub fn nuisance_specs(&self) -> Result<NuisanceSpecs> {
        let base = NuisanceSpecs::default();
        let kind = self.classifier_kind()?;
        Ok(NuisanceSpecs {
            outcome: self.regressor()?,
            variance: self.regressor()?,
            propensity: ClassifierSpec { kind: kind.clone(), ..base.propensity },
            joint_score: ClassifierSpec { kind, ..base.joint_score },
            variance_floor: self.variance_floor,
            ..base
        })
    }

    pub fn budget_spec(&self) -> Result<BudgetSpec> {
        let spec = match (self.control_budget, self.treated_budget) {
            (Some(control), Some(treated)) => BudgetSpec::PerArm { control, treated },
            (None, None) => BudgetSpec::Global { budget: self.budget },
            _ => return Err(Error::Config("per-arm budgets need both control_budget and treated_budget".into())),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn estimator_options(&self) -> EstimatorOptions {
        EstimatorOptions { alpha: self.alpha, weight_cap: self.weight_cap }
    }

    pub fn campaign_config(&self, design: DesignKind) -> Result<CampaignConfig> {
        let cfg = CampaignConfig {
            budget: self.budget_spec()?,
            kappa: self.kappa,
            folds: self.folds,
            seed: self.seed,
            design,
            weighting: self.weighting,
            stratify: self.stratify,
            pi_floor: self.pi_floor,
            specs: self.nuisance_specs()?,
            estimator: self.estimator,
            estimator_options: self.estimator_options(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dgp(&self) -> DgpSpec {
        DgpSpec { n: self.n, theta: self.theta, noise: self.noise, seed: self.seed, ..DgpSpec::default() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_named() {
        let err = FileConfig::parse("budget = 0.2\nbudgte = 0.3\n").unwrap_err();
        assert!(err.to_string().contains("budgte"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn flags_override_file() {
        let file = FileConfig::parse("budget = 0.2\nseed = 4\nbudgets = [0.1, 0.5]\n").unwrap();
        let flags = FileConfig { seed: Some(9), ..Default::default() };
        let cfg = RunConfig::resolve("x", file.overlay(flags)).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.budget, 0.2);
        assert_eq!(cfg.budgets, vec![0.1, 0.5]);
    }

    #[test]
    fn bad_learner_is_config_error() {
        let f = FileConfig { learner: Some("svm".into()), ..Default::default() };
        assert!(matches!(RunConfig::resolve("x", f), Err(Error::Config(_))));
    }

    #[test]
    fn half_specified_per_arm_budget_is_rejected() {
        let f = FileConfig { control_budget: Some(0.2), ..Default::default() };
        assert!(RunConfig::resolve("x", f).unwrap().budget_spec().is_err());
    }
}
