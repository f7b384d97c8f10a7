//! Nuisance learners and the per-arm fitting procedures.
//!
//! Every fitted function is an immutable value; a [`NuisanceSet`] bundles the
//! outcome, conditional-variance, propensity and (optionally) joint
//! treated-and-annotated score models behind the [`Nuisances`] trait, which
//! the design and estimator modules consume.

pub mod forest;
pub mod knn;
pub mod logistic;
pub mod ridge;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Arm, Dataset, Unit};
use crate::error::{Error, Result};
use crate::rng;

pub use forest::{ForestModel, ForestParams};
pub use knn::KnnModel;
pub use logistic::LogisticModel;
pub use ridge::RidgeModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RegressorSpec {
    Ridge { lambda: f64 },
    Knn { k: usize },
    Forest(ForestParams),
}

impl Default for RegressorSpec {
    fn default() -> Self {
        RegressorSpec::Ridge { lambda: 1.0 }
    }
}

impl RegressorSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            RegressorSpec::Ridge { lambda } if !(*lambda >= 0.0 && lambda.is_finite()) => {
                Err(Error::Config(format!("ridge penalty must be >= 0, got {lambda}")))
            }
            RegressorSpec::Knn { k: 0 } => Err(Error::Config("k must be at least 1".into())),
            RegressorSpec::Forest(p) => p.validate(),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ClassifierKind {
    Logistic,
    Forest(ForestParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub kind: ClassifierKind,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub clip_low: f64,
    pub clip_high: f64,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        ClassifierSpec {
            kind: ClassifierKind::Logistic,
            tolerance: 1e-8,
            max_iterations: 100,
            clip_low: 0.02,
            clip_high: 0.98,
        }
    }
}

impl ClassifierSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.clip_low && self.clip_low < self.clip_high && self.clip_high < 1.0) {
            return Err(Error::Config(format!(
                "probability clip bounds must satisfy 0 < low < high < 1, got [{}, {}]",
                self.clip_low, self.clip_high
            )));
        }
        if let ClassifierKind::Forest(p) = &self.kind {
            p.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FittedRegressor {
    Ridge(RidgeModel),
    Knn(KnnModel),
    Forest(ForestModel),
}

impl FittedRegressor {
    pub fn predict(&self, x: &[f64]) -> f64 {
        match self {
            FittedRegressor::Ridge(m) => m.predict(x),
            FittedRegressor::Knn(m) => m.predict(x),
            FittedRegressor::Forest(m) => m.predict(x),
        }
    }
}

pub fn fit_regressor(spec: &RegressorSpec, features: &[Vec<f64>], targets: &[f64], seed: u64) -> Result<FittedRegressor> {
    spec.validate()?;
    if features.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(Error::Data("non-finite regression target".into()));
    }
    Ok(match spec {
        RegressorSpec::Ridge { lambda } => FittedRegressor::Ridge(ridge::fit(features, targets, *lambda)?),
        RegressorSpec::Knn { k } => FittedRegressor::Knn(KnnModel::fit(features, targets, *k)?),
        RegressorSpec::Forest(p) => FittedRegressor::Forest(ForestModel::fit(features, targets, p, seed)?),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum ClassifierModel {
    Logistic(LogisticModel),
    Forest(ForestModel),
}

/// Binary classifier whose probabilities are always inside its clip bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedClassifier {
    model: ClassifierModel,
    clip_low: f64,
    clip_high: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl FittedClassifier {
    pub fn raw_probability(&self, x: &[f64]) -> f64 {
        match &self.model {
            ClassifierModel::Logistic(m) => m.probability(x),
            ClassifierModel::Forest(m) => m.predict(x),
        }
    }

    pub fn probability(&self, x: &[f64]) -> f64 {
        self.raw_probability(x).clamp(self.clip_low, self.clip_high)
    }

    pub fn logistic(&self) -> Option<&LogisticModel> {
        match &self.model {
            ClassifierModel::Logistic(m) => Some(m),
            ClassifierModel::Forest(_) => None,
        }
    }
}

pub fn fit_classifier(spec: &ClassifierSpec, features: &[Vec<f64>], labels: &[f64], seed: u64) -> Result<FittedClassifier> {
    spec.validate()?;
    if features.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let (model, converged, iterations) = match &spec.kind {
        ClassifierKind::Logistic => {
            let m = logistic::fit(features, labels, spec.tolerance, spec.max_iterations)?;
            let (c, it) = (m.converged, m.iterations);
            (ClassifierModel::Logistic(m), c, it)
        }
        ClassifierKind::Forest(p) => (ClassifierModel::Forest(ForestModel::fit(features, labels, p, seed)?), true, 0),
    };
    Ok(FittedClassifier { model, clip_low: spec.clip_low, clip_high: spec.clip_high, converged, iterations })
}

/// Nuisance functions evaluated per arm and unit.
pub trait Nuisances: Sync {
    fn mu(&self, arm: Arm, unit: &Unit) -> f64;
    fn sigma2(&self, arm: Arm, unit: &Unit) -> f64;
    fn propensity(&self, arm: Arm, unit: &Unit) -> f64;
    /// P(Z = arm, R = 1 | x), when a joint score model is available.
    fn joint_score(&self, _arm: Arm, _unit: &Unit) -> Option<f64> {
        None
    }
}

fn tabular_features(unit: &Unit) -> Vec<f64> {
    unit.covariates.clone()
}

fn context_features(unit: &Unit) -> Vec<f64> {
    unit.covariates.iter().chain(&unit.context).copied().collect()
}

/// Per-arm outcome regression, optionally blended with a model that also sees
/// the context features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub tabular: FittedRegressor,
    pub with_context: Option<FittedRegressor>,
    /// Convex weight on the context model.
    pub context_weight: f64,
}

impl OutcomeModel {
    pub fn predict(&self, unit: &Unit) -> f64 {
        let base = self.tabular.predict(&unit.covariates);
        match &self.with_context {
            Some(ctx) if self.context_weight > 0.0 => {
                (1.0 - self.context_weight) * base + self.context_weight * ctx.predict(&context_features(unit))
            }
            _ => base,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceModel {
    pub regressor: FittedRegressor,
    pub floor: f64,
}

impl VarianceModel {
    pub fn predict(&self, unit: &Unit) -> f64 {
        let v = self.regressor.predict(&unit.covariates);
        if v.is_finite() {
            v.max(self.floor)
        } else {
            self.floor
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub classifier: FittedClassifier,
}

impl PropensityModel {
    pub fn treated(&self, unit: &Unit) -> f64 {
        self.classifier.probability(&unit.covariates)
    }

    pub fn propensity(&self, arm: Arm, unit: &Unit) -> f64 {
        let e1 = self.treated(unit);
        match arm {
            Arm::Treated => e1,
            Arm::Control => 1.0 - e1,
        }
    }
}

/// One classifier per arm for the joint event {Z = z, R = 1}. The two scores
/// are rescaled jointly whenever they would sum above one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RzModel {
    pub classifiers: [FittedClassifier; 2],
}

impl RzModel {
    pub fn scores(&self, unit: &Unit) -> [f64; 2] {
        let mut q = [
            self.classifiers[0].probability(&unit.covariates),
            self.classifiers[1].probability(&unit.covariates),
        ];
        let total = q[0] + q[1];
        if total > 1.0 {
            q[0] /= total;
            q[1] /= total;
        }
        q
    }

    pub fn score(&self, arm: Arm, unit: &Unit) -> f64 {
        self.scores(unit)[arm.index()]
    }
}

fn arm_training(ds: &Dataset, arm: Arm) -> Vec<&Unit> {
    ds.units().iter().filter(|u| u.is_arm(arm) && u.annotated()).collect()
}

fn blend_weight(ds_arm: &[&Unit], spec: &RegressorSpec, seed: u64) -> Result<f64> {
    let mut order: Vec<usize> = (0..ds_arm.len()).collect();
    order.shuffle(&mut rng::stream(seed, "blend-split", 0));
    let n_val = ds_arm.len() / 5;
    let (val, train) = order.split_at(n_val);
    let ys = |idx: &[usize]| idx.iter().map(|&i| ds_arm[i].outcome().unwrap()).collect::<Vec<_>>();
    let tab = fit_regressor(spec, &train.iter().map(|&i| tabular_features(ds_arm[i])).collect::<Vec<_>>(), &ys(train), seed)?;
    let ctx = fit_regressor(spec, &train.iter().map(|&i| context_features(ds_arm[i])).collect::<Vec<_>>(), &ys(train), seed)?;
    let preds: Vec<(f64, f64, f64)> = val
        .iter()
        .map(|&i| {
            let u = ds_arm[i];
            (tab.predict(&u.covariates), ctx.predict(&context_features(u)), u.outcome().unwrap())
        })
        .collect();
    let mut best = (f64::INFINITY, 1.0);
    for step in 0..=10 {
        let w = step as f64 / 10.0;
        let mse = preds.iter().map(|(a, b, y)| ((1.0 - w) * a + w * b - y).powi(2)).sum::<f64>();
        if mse < best.0 {
            best = (mse, w);
        }
    }
    Ok(best.1)
}

/// Fits μ̂_z on the annotated units of each arm. With `use_context` and context
/// columns present, a second model on covariates plus context is blended in
/// with a convex weight chosen on a 20% validation split.
pub fn fit_outcome_models(ds: &Dataset, spec: &RegressorSpec, use_context: bool, seed: u64) -> Result<[OutcomeModel; 2]> {
    let fit_arm = |arm: Arm| -> Result<OutcomeModel> {
        let train = arm_training(ds, arm);
        if train.is_empty() {
            return Err(Error::EmptyArm { arm: arm.index() as u8 });
        }
        let ys: Vec<f64> = train.iter().map(|u| u.outcome().unwrap()).collect();
        let arm_seed = rng::derive_seed(seed, "outcome", arm.index() as u64);
        let tabular = fit_regressor(spec, &train.iter().map(|u| tabular_features(u)).collect::<Vec<_>>(), &ys, arm_seed)?;
        if !use_context || ds.context_dim() == 0 {
            return Ok(OutcomeModel { tabular, with_context: None, context_weight: 0.0 });
        }
        let ctx = fit_regressor(spec, &train.iter().map(|u| context_features(u)).collect::<Vec<_>>(), &ys, arm_seed)?;
        let weight = if train.len() >= 10 { blend_weight(&train, spec, arm_seed)? } else { 1.0 };
        Ok(OutcomeModel { tabular, with_context: Some(ctx), context_weight: weight })
    };
    Ok([fit_arm(Arm::Control)?, fit_arm(Arm::Treated)?])
}

/// Regresses squared residuals (Y − μ̂_z)² on the covariates within each arm;
/// predictions are floored at `floor`.
pub fn fit_variance_models(
    ds: &Dataset,
    mu: &[OutcomeModel; 2],
    spec: &RegressorSpec,
    floor: f64,
    seed: u64,
) -> Result<[VarianceModel; 2]> {
    if !(floor > 0.0) {
        return Err(Error::Config(format!("variance floor must be positive, got {floor}")));
    }
    let fit_arm = |arm: Arm| -> Result<VarianceModel> {
        let train = arm_training(ds, arm);
        if train.is_empty() {
            return Err(Error::EmptyArm { arm: arm.index() as u8 });
        }
        let targets: Vec<f64> = train
            .iter()
            .map(|u| (u.outcome().unwrap() - mu[arm.index()].predict(u)).powi(2))
            .collect();
        let features: Vec<Vec<f64>> = train.iter().map(|u| tabular_features(u)).collect();
        let regressor = fit_regressor(spec, &features, &targets, rng::derive_seed(seed, "variance", arm.index() as u64))?;
        Ok(VarianceModel { regressor, floor })
    };
    Ok([fit_arm(Arm::Control)?, fit_arm(Arm::Treated)?])
}

/// Regresses Z on X over every unit, annotated or not.
pub fn fit_propensity(ds: &Dataset, spec: &ClassifierSpec, seed: u64) -> Result<PropensityModel> {
    if ds.arm_count(Arm::Control) == 0 || ds.arm_count(Arm::Treated) == 0 {
        return Err(Error::Data("propensity fit needs units in both arms".into()));
    }
    let features: Vec<Vec<f64>> = ds.units().iter().map(tabular_features).collect();
    let labels: Vec<f64> = ds.units().iter().map(|u| if u.is_arm(Arm::Treated) { 1.0 } else { 0.0 }).collect();
    let classifier = fit_classifier(spec, &features, &labels, rng::derive_seed(seed, "propensity", 0))?;
    Ok(PropensityModel { classifier })
}

/// Fits one classifier per arm for the indicator 1[Z = z, R = 1].
pub fn fit_rz_score(ds: &Dataset, spec: &ClassifierSpec, seed: u64) -> Result<RzModel> {
    let features: Vec<Vec<f64>> = ds.units().iter().map(tabular_features).collect();
    let fit_arm = |arm: Arm| -> Result<FittedClassifier> {
        if ds.annotated_count(arm) == 0 {
            return Err(Error::EmptyArm { arm: arm.index() as u8 });
        }
        let labels: Vec<f64> =
            ds.units().iter().map(|u| if u.is_arm(arm) && u.annotated() { 1.0 } else { 0.0 }).collect();
        fit_classifier(spec, &features, &labels, rng::derive_seed(seed, "rz", arm.index() as u64))
    };
    Ok(RzModel { classifiers: [fit_arm(Arm::Control)?, fit_arm(Arm::Treated)?] })
}

/// Learner configuration for a full nuisance fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceSpecs {
    pub outcome: RegressorSpec,
    pub variance: RegressorSpec,
    pub propensity: ClassifierSpec,
    pub joint_score: ClassifierSpec,
    pub use_context: bool,
    pub variance_floor: f64,
}

impl Default for NuisanceSpecs {
    fn default() -> Self {
        NuisanceSpecs {
            outcome: RegressorSpec::default(),
            variance: RegressorSpec::default(),
            propensity: ClassifierSpec::default(),
            joint_score: ClassifierSpec { clip_low: 0.005, clip_high: 0.995, ..ClassifierSpec::default() },
            use_context: false,
            variance_floor: 1e-3,
        }
    }
}

impl NuisanceSpecs {
    pub fn validate(&self) -> Result<()> {
        self.outcome.validate()?;
        self.variance.validate()?;
        self.propensity.validate()?;
        self.joint_score.validate()?;
        if !(self.variance_floor > 0.0) {
            return Err(Error::Config("variance floor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceSet {
    pub mu: [OutcomeModel; 2],
    pub sigma2: [VarianceModel; 2],
    pub propensity: PropensityModel,
    pub joint: Option<RzModel>,
}

impl Nuisances for NuisanceSet {
    fn mu(&self, arm: Arm, unit: &Unit) -> f64 {
        self.mu[arm.index()].predict(unit)
    }

    fn sigma2(&self, arm: Arm, unit: &Unit) -> f64 {
        self.sigma2[arm.index()].predict(unit)
    }

    fn propensity(&self, arm: Arm, unit: &Unit) -> f64 {
        self.propensity.propensity(arm, unit)
    }

    fn joint_score(&self, arm: Arm, unit: &Unit) -> Option<f64> {
        self.joint.as_ref().map(|j| j.score(arm, unit))
    }
}

/// Fits every nuisance on `ds`: outcome and variance models on its annotated
/// units, propensity (and joint score when requested) on all of its units.
pub fn fit_nuisance_set(ds: &Dataset, specs: &NuisanceSpecs, with_joint: bool, seed: u64) -> Result<NuisanceSet> {
    specs.validate()?;
    let mu = fit_outcome_models(ds, &specs.outcome, specs.use_context, seed)?;
    let sigma2 = fit_variance_models(ds, &mu, &specs.variance, specs.variance_floor, seed)?;
    let propensity = fit_propensity(ds, &specs.propensity, seed)?;
    let joint = if with_joint { Some(fit_rz_score(ds, &specs.joint_score, seed)?) } else { None };
    Ok(NuisanceSet { mu, sigma2, propensity, joint })
}

type ArmFn<'a> = Box<dyn Fn(Arm, &Unit) -> f64 + Send + Sync + 'a>;

/// Nuisances given directly as closures, e.g. known population functions.
pub struct FnNuisances<'a> {
    pub mu: ArmFn<'a>,
    pub sigma2: ArmFn<'a>,
    pub propensity: ArmFn<'a>,
    pub joint: Option<ArmFn<'a>>,
}

impl<'a> FnNuisances<'a> {
    pub fn new(
        mu: impl Fn(Arm, &Unit) -> f64 + Send + Sync + 'a,
        sigma2: impl Fn(Arm, &Unit) -> f64 + Send + Sync + 'a,
        propensity: impl Fn(Arm, &Unit) -> f64 + Send + Sync + 'a,
    ) -> Self {
        FnNuisances { mu: Box::new(mu), sigma2: Box::new(sigma2), propensity: Box::new(propensity), joint: None }
    }

    pub fn with_joint(mut self, joint: impl Fn(Arm, &Unit) -> f64 + Send + Sync + 'a) -> Self {
        self.joint = Some(Box::new(joint));
        self
    }
}

impl Nuisances for FnNuisances<'_> {
    fn mu(&self, arm: Arm, unit: &Unit) -> f64 {
        (self.mu)(arm, unit)
    }

    fn sigma2(&self, arm: Arm, unit: &Unit) -> f64 {
        (self.sigma2)(arm, unit)
    }

    fn propensity(&self, arm: Arm, unit: &Unit) -> f64 {
        (self.propensity)(arm, unit)
    }

    fn joint_score(&self, arm: Arm, unit: &Unit) -> Option<f64> {
        self.joint.as_ref().map(|f| f(arm, unit))
    }
}

/// Gaussian generalized propensity for a continuous treatment:
/// `Z | x ~ N(a + b·x, s²)` with `s²` the residual variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianGps {
    pub mean: RidgeModel,
    pub variance: f64,
}

impl GaussianGps {
    pub fn density(&self, z: f64, unit: &Unit) -> f64 {
        let m = self.mean.predict(&unit.covariates);
        let d = z - m;
        (-0.5 * d * d / self.variance).exp() / (2.0 * std::f64::consts::PI * self.variance).sqrt()
    }
}

pub fn fit_gaussian_gps(ds: &Dataset, lambda: f64) -> Result<GaussianGps> {
    if ds.len() < 2 {
        return Err(Error::Data("generalized propensity fit needs at least two units".into()));
    }
    let features: Vec<Vec<f64>> = ds.units().iter().map(tabular_features).collect();
    let z: Vec<f64> = ds.units().iter().map(|u| u.treatment).collect();
    let mean = ridge::fit(&features, &z, lambda)?;
    let rss: f64 = ds.units().iter().map(|u| (u.treatment - mean.predict(&u.covariates)).powi(2)).sum();
    let variance = rss / (ds.len() - 1) as f64;
    if !(variance > 0.0) {
        return Err(Error::Numerical("treatment has no residual variation".into()));
    }
    Ok(GaussianGps { mean, variance })
}

/// Outcome mean and conditional variance as functions of (x, z), fitted on
/// annotated units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseResponseModel {
    pub mean: FittedRegressor,
    pub variance: FittedRegressor,
    pub floor: f64,
}

fn dose_features(x: &[f64], z: f64) -> Vec<f64> {
    x.iter().copied().chain(std::iter::once(z)).collect()
}

impl DoseResponseModel {
    pub fn mu(&self, z: f64, unit: &Unit) -> f64 {
        self.mean.predict(&dose_features(&unit.covariates, z))
    }

    pub fn sigma2(&self, z: f64, unit: &Unit) -> f64 {
        let v = self.variance.predict(&dose_features(&unit.covariates, z));
        if v.is_finite() {
            v.max(self.floor)
        } else {
            self.floor
        }
    }
}

pub fn fit_dose_response(ds: &Dataset, spec: &RegressorSpec, floor: f64, seed: u64) -> Result<DoseResponseModel> {
    let train: Vec<&Unit> = ds.units().iter().filter(|u| u.annotated()).collect();
    if train.is_empty() {
        return Err(Error::Data("no annotated units to fit the dose response".into()));
    }
    let features: Vec<Vec<f64>> = train.iter().map(|u| dose_features(&u.covariates, u.treatment)).collect();
    let ys: Vec<f64> = train.iter().map(|u| u.outcome().unwrap()).collect();
    let mean = fit_regressor(spec, &features, &ys, rng::derive_seed(seed, "dose-mean", 0))?;
    let sq: Vec<f64> = features.iter().zip(&ys).map(|(f, y)| (y - mean.predict(f)).powi(2)).collect();
    let variance = fit_regressor(spec, &features, &sq, rng::derive_seed(seed, "dose-variance", 0))?;
    Ok(DoseResponseModel { mean, variance, floor })
}

#[cfg(test)]
mod tests {
    #[test]
    fn gaussian_gps_recovers_linear_dose() {
        let units: Vec<Unit> = (0..200)
            .map(|i| {
                let x = (i as f64 * 0.13).sin();
                let noise = ((i * 7919) % 200) as f64 / 100.0 - 1.0;
                Unit::new(i, vec![x], 1.0 + 2.0 * x + 0.3 * noise, None)
            })
            .collect();
        let ds = Dataset::new(units, crate::data::TreatmentMode::Continuous).unwrap();
        let g = fit_gaussian_gps(&ds, 0.0).unwrap();
        assert!((g.mean.predict(&[0.5]) - 2.0).abs() < 0.1);
        assert!(g.density(2.0, &ds.units()[0]) > 0.0);
    }

    use super::*;
    use crate::data::TreatmentMode;

    fn dataset(units: Vec<Unit>) -> Dataset {
        Dataset::new(units, TreatmentMode::Binary).unwrap()
    }

    #[test]
    fn constant_arm_outcome_is_recovered() {
        let units: Vec<Unit> = (0..20)
            .map(|i| {
                let z = (i % 2) as f64;
                let y = if z == 1.0 { Some(7.0) } else { Some(i as f64) };
                Unit::new(i, vec![i as f64 * 0.1, (i % 3) as f64], z, y)
            })
            .collect();
        let mu = fit_outcome_models(&dataset(units.clone()), &RegressorSpec::default(), false, 0).unwrap();
        for u in &units {
            assert!((mu[1].predict(u) - 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_arm_is_named() {
        let units: Vec<Unit> = (0..6)
            .map(|i| Unit::new(i, vec![i as f64], (i % 2) as f64, if i % 2 == 1 { Some(1.0) } else { None }))
            .collect();
        match fit_outcome_models(&dataset(units), &RegressorSpec::default(), false, 0) {
            Err(Error::EmptyArm { arm: 0 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_residuals_engage_the_floor() {
        let units: Vec<Unit> = (0..30)
            .map(|i| {
                let x = i as f64 * 0.2;
                Unit::new(i, vec![x], (i % 2) as f64, Some(1.0 + 2.0 * x))
            })
            .collect();
        let ds = dataset(units);
        let mu = fit_outcome_models(&ds, &RegressorSpec::Ridge { lambda: 0.0 }, false, 0).unwrap();
        let s2 = fit_variance_models(&ds, &mu, &RegressorSpec::Ridge { lambda: 0.0 }, 1e-3, 0).unwrap();
        for u in ds.units() {
            assert_eq!(s2[0].predict(u), 1e-3);
            assert_eq!(s2[1].predict(u), 1e-3);
        }
    }

    #[test]
    fn single_arm_propensity_is_rejected() {
        let units: Vec<Unit> = (0..5).map(|i| Unit::new(i, vec![i as f64], 1.0, None)).collect();
        assert!(fit_propensity(&dataset(units), &ClassifierSpec::default(), 0).is_err());
    }

    #[test]
    fn joint_scores_never_sum_above_one() {
        let units: Vec<Unit> = (0..60)
            .map(|i| {
                let x = (i as f64 * 0.7).sin() * 3.0;
                let z = if x > 0.0 { 1.0 } else { 0.0 };
                Unit::new(i, vec![x], z, Some(x))
            })
            .collect();
        let ds = dataset(units);
        let spec = ClassifierSpec { clip_low: 0.005, clip_high: 0.995, ..Default::default() };
        let rz = fit_rz_score(&ds, &spec, 0).unwrap();
        for k in -50..50 {
            let u = Unit::new(0, vec![k as f64 * 0.1], 0.0, None);
            let q = rz.scores(&u);
            assert!(q[0] + q[1] <= 1.0 + 1e-15);
            assert!(q[0] > 0.0 && q[1] > 0.0);
        }
    }

    #[test]
    fn context_blend_weight_is_on_grid() {
        let units: Vec<Unit> = (0..100)
            .map(|i| {
                let x = (i as f64 * 0.37).sin();
                let c = (i as f64 * 1.3).cos();
                Unit::new(i, vec![x], (i % 2) as f64, Some(x + 3.0 * c)).with_context(vec![c])
            })
            .collect();
        let mu = fit_outcome_models(&dataset(units), &RegressorSpec::Ridge { lambda: 1e-6 }, true, 5).unwrap();
        for m in &mu {
            let w = m.context_weight;
            assert!((w * 10.0 - (w * 10.0).round()).abs() < 1e-12);
            // The context column carries most of the signal.
            assert!(w >= 0.8, "weight {w}");
        }
    }
}
