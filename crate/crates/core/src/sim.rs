//! Synthetic data with known potential outcomes and the Monte Carlo runner.
//!
//! Default data-generating process (coordinates numbered from 1):
//!
//! - `X ~ N(0, I_5)`
//! - `P(Z = 1 | X) = 1 / (1 + exp(X₂ + X₃ + 0.5))`
//! - `σ²₀(X) = max(3.5 + 0.3 cos X₃, 0)`, `σ²₁(X) = max(1.3 + 0.4 sin X₁, 0)`
//! - `Y(0) = 5 + X₁ − 2X₂ + ε₀`, `Y(1) = Y(0) + θ + ε₁`, `ε_z ~ N(0, σ²_z(X))`
//!
//! Potential outcomes live in a [`SealedOutcomes`] table that only oracles and
//! truth metrics read.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::campaign::{Campaign, CampaignConfig, DesignKind, SimulationOracle};
use crate::data::{Arm, BudgetSpec, Dataset, TreatmentMode, Unit};
use crate::error::{Error, Result};
use crate::estimator::EstimatorKind;
use crate::nuisance::FnNuisances;
use crate::rng;
use crate::stats::compensated_sum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Wave {
    Sin,
    Cos,
}

/// `max(base + amplitude · wave(x[covariate]), 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceFn {
    pub base: f64,
    pub amplitude: f64,
    /// Zero-based covariate index.
    pub covariate: usize,
    pub wave: Wave,
}

impl VarianceFn {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let v = x[self.covariate];
        let w = match self.wave {
            Wave::Sin => v.sin(),
            Wave::Cos => v.cos(),
        };
        (self.base + self.amplitude * w).max(0.0)
    }
}

/// How the variance function parameterizes the noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseParam {
    /// The function is the noise variance (standard deviation √σ²).
    Variance,
    /// The function is used directly as the standard deviation.
    StdDev,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpSpec {
    pub n: usize,
    pub dim: usize,
    pub theta: f64,
    /// `P(Z = 1 | x) = 1 / (1 + exp(intercept + coefficients · x))`.
    pub propensity_intercept: f64,
    pub propensity_coefficients: Vec<f64>,
    /// `E[Y(0) | x] = baseline_intercept + baseline_coefficients · x`.
    pub baseline_intercept: f64,
    pub baseline_coefficients: Vec<f64>,
    pub control_variance: VarianceFn,
    pub treated_variance: VarianceFn,
    pub noise: NoiseParam,
    pub seed: u64,
}

impl Default for DgpSpec {
    fn default() -> Self {
        DgpSpec {
            n: 1000,
            dim: 5,
            theta: 3.0,
            propensity_intercept: 0.5,
            propensity_coefficients: vec![0.0, 1.0, 1.0, 0.0, 0.0],
            baseline_intercept: 5.0,
            baseline_coefficients: vec![1.0, -2.0, 0.0, 0.0, 0.0],
            control_variance: VarianceFn { base: 3.5, amplitude: 0.3, covariate: 2, wave: Wave::Cos },
            treated_variance: VarianceFn { base: 1.3, amplitude: 0.4, covariate: 0, wave: Wave::Sin },
            noise: NoiseParam::Variance,
            seed: 0,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl DgpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("dim must be at least 1".into()));
        }
        if self.propensity_coefficients.len() != self.dim || self.baseline_coefficients.len() != self.dim {
            return Err(Error::Config(format!("coefficient vectors must have length dim = {}", self.dim)));
        }
        for v in [&self.control_variance, &self.treated_variance] {
            if v.covariate >= self.dim {
                return Err(Error::Config(format!("variance covariate {} out of range", v.covariate)));
            }
        }
        Ok(())
    }

    pub fn treated_propensity(&self, x: &[f64]) -> f64 {
        1.0 / (1.0 + (self.propensity_intercept + dot(&self.propensity_coefficients, x)).exp())
    }

    pub fn control_mean(&self, x: &[f64]) -> f64 {
        self.baseline_intercept + dot(&self.baseline_coefficients, x)
    }

    fn noise_sd(&self, v: f64) -> f64 {
        match self.noise {
            NoiseParam::Variance => v.sqrt(),
            NoiseParam::StdDev => v,
        }
    }

    /// Conditional variance of the noise term whose function value is `v`.
    fn noise_variance(&self, v: f64) -> f64 {
        let sd = self.noise_sd(v);
        sd * sd
    }

    /// True nuisances: E[Y(z) | x], Var[Y(z) | x] and P(Z = z | x).
    /// Since Y(1) = Y(0) + θ + ε₁, arm 1 carries both noise terms.
    pub fn oracle_nuisances(&self) -> FnNuisances<'_> {
        FnNuisances::new(
            move |a, u: &Unit| {
                let m = self.control_mean(&u.covariates);
                if a == Arm::Treated {
                    m + self.theta
                } else {
                    m
                }
            },
            move |a, u: &Unit| {
                let v0 = self.noise_variance(self.control_variance.eval(&u.covariates));
                if a == Arm::Treated {
                    v0 + self.noise_variance(self.treated_variance.eval(&u.covariates))
                } else {
                    v0
                }
            },
            move |a, u: &Unit| {
                let e = self.treated_propensity(&u.covariates);
                if a == Arm::Treated {
                    e
                } else {
                    1.0 - e
                }
            },
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SealedRow {
    pub y0: f64,
    pub y1: f64,
    /// Noise-free conditional means E[Y(z) | x].
    pub mu0: f64,
    pub mu1: f64,
}

/// Potential outcomes by unit id.
#[derive(Debug, Clone, PartialEq)]
pub struct SealedOutcomes {
    rows: HashMap<u64, SealedRow>,
}

impl SealedOutcomes {
    pub fn row(&self, id: u64) -> Option<&SealedRow> {
        self.rows.get(&id)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Oracle revealing Y = Y(Z) for the units of `ds`.
    pub fn oracle(&self, ds: &Dataset) -> SimulationOracle {
        SimulationOracle::new(
            ds.units().iter().map(|u| (u.id, self.observed(u))).collect(),
        )
    }

    fn observed(&self, u: &Unit) -> f64 {
        let r = &self.rows[&u.id];
        if u.is_arm(Arm::Treated) {
            r.y1
        } else {
            r.y0
        }
    }

    /// `ds` with every observed outcome revealed.
    pub fn reveal_all(&self, ds: &Dataset) -> Dataset {
        let units = ds
            .units()
            .iter()
            .map(|u| {
                let mut u = u.clone();
                let y = self.observed(&u);
                u.reveal(y);
                u
            })
            .collect();
        Dataset::new(units, ds.mode()).expect("revealing outcomes keeps a valid dataset")
    }

    /// Sample mean of Y(1) − Y(0).
    pub fn sample_effect(&self) -> f64 {
        compensated_sum(self.rows.values().map(|r| r.y1 - r.y0)) / self.rows.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedData {
    /// Covariates and treatments; no outcomes.
    pub dataset: Dataset,
    pub sealed: SealedOutcomes,
}

pub fn generate(spec: &DgpSpec) -> Result<SimulatedData> {
    spec.validate()?;
    let mut r = rng::stream(spec.seed, "dgp", 0);
    let mut units = Vec::with_capacity(spec.n);
    let mut rows = HashMap::with_capacity(spec.n);
    for i in 0..spec.n {
        let x: Vec<f64> = (0..spec.dim).map(|_| r.sample(StandardNormal)).collect();
        let e1 = spec.treated_propensity(&x);
        let z = if r.random::<f64>() < e1 { 1.0 } else { 0.0 };
        let e0: f64 = r.sample(StandardNormal);
        let e1n: f64 = r.sample(StandardNormal);
        let mu0 = spec.control_mean(&x);
        let mu1 = mu0 + spec.theta;
        let y0 = mu0 + spec.noise_sd(spec.control_variance.eval(&x)) * e0;
        let y1 = y0 + spec.theta + spec.noise_sd(spec.treated_variance.eval(&x)) * e1n;
        rows.insert(i as u64, SealedRow { y0, y1, mu0, mu1 });
        units.push(Unit::new(i as u64, x, z, None));
    }
    Ok(SimulatedData { dataset: Dataset::new(units, TreatmentMode::Binary)?, sealed: SealedOutcomes { rows } })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    AdaptiveAipw,
    AdaptiveRz,
    Uniform,
    Skyline,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::AdaptiveAipw, Method::AdaptiveRz, Method::Uniform, Method::Skyline];

    pub fn name(self) -> &'static str {
        match self {
            Method::AdaptiveAipw => "adaptive-aipw",
            Method::AdaptiveRz => "adaptive-rz",
            Method::Uniform => "uniform",
            Method::Skyline => "skyline",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub method: Method,
    pub budget: f64,
    pub trial: usize,
    pub tau_hat: f64,
    pub sq_error: f64,
    pub ci_width: f64,
    pub covered: bool,
    pub realized_fraction: f64,
    /// Error message when the run failed; metrics are then NaN.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: Method,
    pub budget: f64,
    pub trials: usize,
    pub failed: usize,
    pub mse: f64,
    pub mean_ci_width: f64,
    pub mean_log_ci_width: f64,
    pub coverage: f64,
    pub mean_realized_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub records: Vec<TrialRecord>,
    pub aggregates: Vec<Aggregate>,
}

impl TrialMetrics {
    pub fn aggregate(&self, method: Method, budget: f64) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.method == method && a.budget == budget)
    }

    /// Long format: method, budget, trial, tau_hat, sq_error, ci_width,
    /// covered, realized_fraction, failed.
    pub fn write_long_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "method",
            "budget",
            "trial",
            "tau_hat",
            "sq_error",
            "ci_width",
            "covered",
            "realized_fraction",
            "failed",
        ])?;
        for r in &self.records {
            w.write_record([
                r.method.name().to_string(),
                r.budget.to_string(),
                r.trial.to_string(),
                r.tau_hat.to_string(),
                r.sq_error.to_string(),
                r.ci_width.to_string(),
                (r.covered as u8).to_string(),
                r.realized_fraction.to_string(),
                r.failure.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_agg_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "method",
            "budget",
            "trials",
            "failed",
            "mse",
            "mean_ci_width",
            "mean_log_ci_width",
            "coverage",
            "mean_realized_fraction",
        ])?;
        for a in &self.aggregates {
            w.write_record([
                a.method.name().to_string(),
                a.budget.to_string(),
                a.trials.to_string(),
                a.failed.to_string(),
                a.mse.to_string(),
                a.mean_ci_width.to_string(),
                a.mean_log_ci_width.to_string(),
                a.coverage.to_string(),
                a.mean_realized_fraction.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save<P: AsRef<Path>>(&self, dir: P) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.write_long_csv(std::fs::File::create(dir.join("metrics_long.csv"))?)?;
        self.write_agg_csv(std::fs::File::create(dir.join("metrics_agg.csv"))?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialPlan {
    pub budgets: Vec<f64>,
    pub methods: Vec<Method>,
    pub trials: usize,
    /// Share of each simulated sample set aside before the campaign; 0 disables.
    pub holdout_fraction: f64,
    pub seed: u64,
}

fn failed_record(method: Method, budget: f64, trial: usize, e: &Error) -> TrialRecord {
    TrialRecord {
        method,
        budget,
        trial,
        tau_hat: f64::NAN,
        sq_error: f64::NAN,
        ci_width: f64::NAN,
        covered: false,
        realized_fraction: f64::NAN,
        failure: Some(e.to_string()),
    }
}

fn record(method: Method, budget: f64, trial: usize, c: &Campaign, kind: EstimatorKind, tau: f64) -> TrialRecord {
    let report = c.state().report.as_ref().expect("finished campaign has a report");
    let est = report.estimate(kind).expect("aipw and plug-in estimates are always computed");
    TrialRecord {
        method,
        budget,
        trial,
        tau_hat: est.tau_hat,
        sq_error: (est.tau_hat - tau).powi(2),
        ci_width: est.ci_width(),
        covered: est.covers(tau),
        realized_fraction: report.realized_fraction,
        failure: None,
    }
}

fn run_campaign(sim: &SimulatedData, ds: &Dataset, config: CampaignConfig) -> Result<Campaign> {
    let mut oracle = sim.sealed.oracle(ds);
    let mut c = Campaign::init(ds, config, None)?;
    c.run(&mut oracle)?;
    Ok(c)
}

fn one_trial(plan: &TrialPlan, dgp: &DgpSpec, template: &CampaignConfig, trial: usize) -> Vec<TrialRecord> {
    let trial_seed = rng::derive_seed(plan.seed, "trial", trial as u64);
    let spec = DgpSpec { seed: rng::derive_seed(trial_seed, "dgp", 0), ..dgp.clone() };
    let sim = match generate(&spec) {
        Ok(s) => s,
        Err(e) => {
            return plan
                .budgets
                .iter()
                .flat_map(|&b| plan.methods.iter().map(move |&m| (m, b)))
                .map(|(m, b)| failed_record(m, b, trial, &e))
                .collect()
        }
    };
    let ds = if plan.holdout_fraction > 0.0 {
        let mut r = rng::stream(trial_seed, "holdout", 0);
        let keep: Vec<usize> =
            (0..sim.dataset.len()).filter(|_| r.random::<f64>() >= plan.holdout_fraction).collect();
        sim.dataset.subset(&keep)
    } else {
        sim.dataset.clone()
    };
    let tau = dgp.theta;
    let campaign_seed = rng::derive_seed(trial_seed, "campaign", 0);
    let config = |budget: f64, design: DesignKind| CampaignConfig {
        budget: BudgetSpec::Global { budget },
        design,
        seed: campaign_seed,
        ..template.clone()
    };
    let has = |m: Method| plan.methods.contains(&m);
    let mut out = Vec::new();
    for &b in &plan.budgets {
        if has(Method::AdaptiveAipw) || has(Method::AdaptiveRz) {
            match run_campaign(&sim, &ds, config(b, DesignKind::Adaptive)) {
                Ok(c) => {
                    if has(Method::AdaptiveAipw) {
                        out.push(record(Method::AdaptiveAipw, b, trial, &c, EstimatorKind::Aipw, tau));
                    }
                    if has(Method::AdaptiveRz) {
                        out.push(record(Method::AdaptiveRz, b, trial, &c, EstimatorKind::RzPlugin, tau));
                    }
                }
                Err(e) => {
                    for m in [Method::AdaptiveAipw, Method::AdaptiveRz].into_iter().filter(|&m| has(m)) {
                        out.push(failed_record(m, b, trial, &e));
                    }
                }
            }
        }
        if has(Method::Uniform) {
            out.push(match run_campaign(&sim, &ds, config(b, DesignKind::Uniform)) {
                Ok(c) => record(Method::Uniform, b, trial, &c, EstimatorKind::Aipw, tau),
                Err(e) => failed_record(Method::Uniform, b, trial, &e),
            });
        }
    }
    if has(Method::Skyline) {
        out.push(match run_campaign(&sim, &ds, config(1.0, DesignKind::Uniform)) {
            Ok(c) => record(Method::Skyline, 1.0, trial, &c, EstimatorKind::Aipw, tau),
            Err(e) => failed_record(Method::Skyline, 1.0, trial, &e),
        });
    }
    out
}

/// Runs every method on fresh data for each trial; trials run in parallel
/// with seeds derived from `(plan.seed, trial)`. The skyline runs once per
/// trial and is recorded at budget 1.
pub fn run_trials(plan: &TrialPlan, dgp: &DgpSpec, template: &CampaignConfig) -> Result<TrialMetrics> {
    if plan.trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    if plan.methods.is_empty() || plan.budgets.is_empty() {
        return Err(Error::Config("need at least one method and one budget".into()));
    }
    if !(0.0..1.0).contains(&plan.holdout_fraction) {
        return Err(Error::Config(format!("holdout fraction must lie in [0, 1), got {}", plan.holdout_fraction)));
    }
    for &b in &plan.budgets {
        BudgetSpec::Global { budget: b }.validate()?;
    }
    dgp.validate()?;
    template.validate()?;
    let per_trial: Vec<Vec<TrialRecord>> =
        (0..plan.trials).into_par_iter().map(|t| one_trial(plan, dgp, template, t)).collect();
    let records: Vec<TrialRecord> = per_trial.into_iter().flatten().collect();
    let aggregates = aggregate(&records);
    Ok(TrialMetrics { records, aggregates })
}

fn aggregate(records: &[TrialRecord]) -> Vec<Aggregate> {
    let mut keys: Vec<(Method, f64)> = Vec::new();
    for r in records {
        if !keys.iter().any(|&(m, b)| m == r.method && b == r.budget) {
            keys.push((r.method, r.budget));
        }
    }
    keys.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    keys.into_iter()
        .map(|(method, budget)| {
            let all: Vec<&TrialRecord> = records.iter().filter(|r| r.method == method && r.budget == budget).collect();
            let ok: Vec<&TrialRecord> = all.iter().copied().filter(|r| r.failure.is_none()).collect();
            let k = ok.len().max(1) as f64;
            let avg = |f: &dyn Fn(&TrialRecord) -> f64| compensated_sum(ok.iter().map(|r| f(r))) / k;
            let nan_if_empty = |v: f64| if ok.is_empty() { f64::NAN } else { v };
            Aggregate {
                method,
                budget,
                trials: ok.len(),
                failed: all.len() - ok.len(),
                mse: nan_if_empty(avg(&|r| r.sq_error)),
                mean_ci_width: nan_if_empty(avg(&|r| r.ci_width)),
                mean_log_ci_width: nan_if_empty(avg(&|r| r.ci_width.ln())),
                coverage: nan_if_empty(avg(&|r| r.covered as u8 as f64)),
                mean_realized_fraction: nan_if_empty(avg(&|r| r.realized_fraction)),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetSaving {
    pub budget: f64,
    /// Uniform budget with the same CI width (the grid maximum when beyond the grid).
    pub matched_budget: f64,
    /// `(B_u − B) / B_u`, clamped at 0.
    pub saving: f64,
    /// The adaptive width is narrower than every uniform width on the grid,
    /// so `saving` is a lower bound.
    pub beyond_grid: bool,
}

/// Inverts the uniform width-vs-budget curve by linear interpolation.
/// `uniform` and `adaptive` are `(budget, width)` pairs.
pub fn budget_saved_curve(uniform: &[(f64, f64)], adaptive: &[(f64, f64)]) -> Result<Vec<BudgetSaving>> {
    let mut curve = uniform.to_vec();
    curve.sort_by(|a, b| a.0.total_cmp(&b.0));
    if curve.is_empty() {
        return Err(Error::Data("no uniform widths to compare against".into()));
    }
    let width_at = |b: f64| -> Option<f64> {
        curve.windows(2).find(|w| w[0].0 <= b && b <= w[1].0).map(|w| {
            let t = (b - w[0].0) / (w[1].0 - w[0].0);
            w[0].1 + t * (w[1].1 - w[0].1)
        })
        .or_else(|| curve.iter().find(|p| p.0 == b).map(|p| p.1))
    };
    let mut out = Vec::new();
    for &(b, w) in adaptive {
        let reference = width_at(b).ok_or_else(|| Error::Data(format!("budget {b} lies outside the uniform grid")))?;
        if w >= reference {
            out.push(BudgetSaving { budget: b, matched_budget: b, saving: 0.0, beyond_grid: false });
            continue;
        }
        let (b_max, w_min) = *curve.last().unwrap();
        if w < w_min {
            out.push(BudgetSaving { budget: b, matched_budget: b_max, saving: ((b_max - b) / b_max).max(0.0), beyond_grid: true });
            continue;
        }
        // First crossing at or above b.
        let mut matched = b;
        for seg in curve.windows(2) {
            let (lo, hi) = (seg[0], seg[1]);
            if hi.0 < b {
                continue;
            }
            let (w_lo, b_lo) = if lo.0 < b { (reference, b) } else { (lo.1, lo.0) };
            if w_lo >= w && w >= hi.1 {
                matched = if w_lo == hi.1 { b_lo } else { b_lo + (w_lo - w) / (w_lo - hi.1) * (hi.0 - b_lo) };
                break;
            }
        }
        out.push(BudgetSaving { budget: b, matched_budget: matched, saving: ((matched - b) / matched).max(0.0), beyond_grid: false });
    }
    Ok(out)
}

/// Budget savings of `method` against the uniform curve in `metrics`.
pub fn budget_saved(metrics: &TrialMetrics, method: Method) -> Result<Vec<BudgetSaving>> {
    let pairs = |m: Method| -> Vec<(f64, f64)> {
        metrics
            .aggregates
            .iter()
            .filter(|a| a.method == m && a.mean_ci_width.is_finite())
            .map(|a| (a.budget, a.mean_ci_width))
            .collect()
    };
    budget_saved_curve(&pairs(Method::Uniform), &pairs(method))
}
