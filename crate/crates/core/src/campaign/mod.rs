//! The two-batch annotation campaign as a resumable state machine.
//!
//! Phases run `initialized → batch1-requested → batch1-labeled → planned →
//! batch2-requested → batch2-labeled → finalized`. All randomness is derived
//! from the configured seed and a per-step tag, so a campaign reloaded from
//! its JSON state continues exactly as an uninterrupted run would.
//!
//! The planner never sees the original dataset: it works on a redacted copy
//! into which only labels returned by the oracle are written back.

pub mod oracle;

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use oracle::{Collected, FileOracle, Oracle, SimulationOracle};

use crate::crossfit::{assign, assign_stratified, fit_folded, BatchFoldAssignment, FoldedNuisances, Stage};
use crate::data::{Arm, BudgetSpec, Dataset, TreatmentMode};
use crate::design::{batch2_probability, clamped, pi_shape, water_fill, DEFAULT_PI_FLOOR};
use crate::error::{Error, Result};
use crate::estimator::{
    estimate_ate, estimate_with_external_weights, normal_quantile, EstimateReport, EstimatorKind, EstimatorOptions,
};
use crate::nuisance::NuisanceSpecs;
use crate::rng;
use crate::stats::mean;

pub const STATE_FILE: &str = "campaign.json";
const STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Initialized,
    Batch1Requested,
    Batch1Labeled,
    Planned,
    Batch2Requested,
    Batch2Labeled,
    Finalized,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Initialized => "initialized",
            Phase::Batch1Requested => "batch1-requested",
            Phase::Batch1Labeled => "batch1-labeled",
            Phase::Planned => "planned",
            Phase::Batch2Requested => "batch2-requested",
            Phase::Batch2Labeled => "batch2-labeled",
            Phase::Finalized => "finalized",
        })
    }
}

/// How batch-2 probabilities are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DesignKind {
    /// Variance-optimal plan from batch-1 nuisances.
    Adaptive,
    /// Batch 2 repeats the batch-1 probability.
    Uniform,
}

/// Which annotation probability enters the inverse weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// The design's marginal probability `κ π₁ + (1 − κ) π₂(x)`.
    Design,
    /// π* re-optimized from the final-stage out-of-fold nuisances.
    Reoptimized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub budget: BudgetSpec,
    pub kappa: f64,
    pub folds: usize,
    pub seed: u64,
    pub design: DesignKind,
    pub weighting: Weighting,
    pub stratify: bool,
    pub pi_floor: f64,
    pub specs: NuisanceSpecs,
    pub estimator: EstimatorKind,
    pub estimator_options: EstimatorOptions,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            budget: BudgetSpec::Global { budget: 0.3 },
            kappa: 0.55,
            folds: 5,
            seed: 0,
            design: DesignKind::Adaptive,
            weighting: Weighting::Design,
            stratify: false,
            pi_floor: DEFAULT_PI_FLOOR,
            specs: NuisanceSpecs::default(),
            estimator: EstimatorKind::Aipw,
            estimator_options: EstimatorOptions::default(),
        }
    }
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<()> {
        self.budget.validate()?;
        if matches!(self.budget, BudgetSpec::ContinuousLocal { .. }) {
            return Err(Error::Config("campaigns support global and per-arm budgets".into()));
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(Error::Config(format!("kappa must lie in (0, 1), got {}", self.kappa)));
        }
        if self.folds == 0 {
            return Err(Error::Config("folds must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.pi_floor) {
            return Err(Error::Config(format!("pi floor must lie in [0, 1), got {}", self.pi_floor)));
        }
        if let Some(cap) = self.estimator_options.weight_cap {
            if !(cap > 0.0) {
                return Err(Error::Config(format!("weight cap must be positive, got {cap}")));
            }
        }
        normal_quantile(self.estimator_options.alpha)?;
        self.specs.validate()
    }

    /// Nominal overall budget (mean of the arm budgets for per-arm specs).
    pub fn nominal_budget(&self) -> f64 {
        match self.budget {
            BudgetSpec::PerArm { control, treated } => 0.5 * (control + treated),
            BudgetSpec::Global { budget } | BudgetSpec::ContinuousLocal { budget, .. } => budget,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub path: Option<String>,
    /// Hash of ids, features and treatments (outcomes excluded).
    pub content_hash: String,
    pub n: usize,
}

/// Per-unit probabilities of the two-batch design, in dataset order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub pi1: Vec<f64>,
    pub pi_star: Vec<f64>,
    pub pi2: Vec<f64>,
    /// `κ π₁ + (1 − κ) π₂`.
    pub marginal: Vec<f64>,
    /// False where π₂ had to be clamped to reach π*.
    pub feasible: Vec<bool>,
    /// Scale of π* per planning group (fold, or fold × arm for per-arm budgets).
    pub group_scales: Vec<f64>,
    /// Share of batch-2 units whose π₂ was clamped.
    pub infeasible_fraction: f64,
    /// Mean over all units of the probability each was drawn with.
    pub expected_spend: f64,
    pub arm_expected_spend: [Option<f64>; 2],
    pub planning_fingerprints: Vec<String>,
}

impl BatchPlan {
    /// Probability unit i was (or will be) drawn with.
    pub fn draw_probability(&self, assignment: &BatchFoldAssignment, i: usize) -> f64 {
        if assignment.batch[i] == 1 {
            self.pi1[i]
        } else {
            self.pi2[i]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub phase: Phase,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub selected: EstimatorKind,
    pub estimates: Vec<EstimateReport>,
    pub budget: BudgetSpec,
    pub realized_fraction: f64,
    pub expected_fraction: f64,
    pub infeasible_fraction: f64,
    /// Mean of the re-optimized π over all units.
    pub reoptimized_mean_pi: f64,
    pub final_fingerprints: Vec<String>,
}

impl CampaignReport {
    pub fn estimate(&self, kind: EstimatorKind) -> Option<&EstimateReport> {
        self.estimates.iter().find(|e| e.kind == kind)
    }

    pub fn selected_estimate(&self) -> &EstimateReport {
        self.estimate(self.selected).expect("selected estimate is always computed")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignState {
    pub version: u32,
    pub phase: Phase,
    pub config: CampaignConfig,
    pub dataset: DatasetRef,
    pub assignment: BatchFoldAssignment,
    pub batch1_requests: Vec<u64>,
    pub batch2_requests: Vec<u64>,
    pub labels: BTreeMap<u64, f64>,
    pub plan: Option<BatchPlan>,
    pub report: Option<CampaignReport>,
    pub audit: Vec<AuditEntry>,
}

impl CampaignState {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let state: CampaignState = serde_json::from_str(s)?;
        if state.version != STATE_VERSION {
            return Err(Error::Config(format!("unsupported state version {}", state.version)));
        }
        Ok(state)
    }

    /// Writes atomically (temporary file, then rename).
    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, self.to_json()?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn realized_fraction(&self) -> f64 {
        (self.batch1_requests.len() + self.batch2_requests.len()) as f64 / self.dataset.n.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Advanced(Phase),
    Waiting(String),
}

pub struct Campaign {
    state: CampaignState,
    /// Covariates and treatments only; outcomes come from `state.labels`.
    data: Dataset,
    final_nuisances: Option<FoldedNuisances>,
}

impl Campaign {
    pub fn init(ds: &Dataset, config: CampaignConfig, path: Option<String>) -> Result<Self> {
        config.validate()?;
        if ds.mode() != TreatmentMode::Binary {
            return Err(Error::Config("campaigns need a binary treatment".into()));
        }
        let data = ds.redacted();
        let assign_seed = rng::derive_seed(config.seed, "assignment", 0);
        let assignment = if config.stratify {
            let arms: Vec<Arm> = data.units().iter().map(|u| u.arm()).collect();
            assign_stratified(&arms, config.folds, config.kappa, assign_seed)?
        } else {
            assign(data.len(), config.folds, config.kappa, assign_seed)?
        };
        let state = CampaignState {
            version: STATE_VERSION,
            phase: Phase::Initialized,
            dataset: DatasetRef { path, content_hash: data.content_hash(), n: data.len() },
            config,
            assignment,
            batch1_requests: Vec::new(),
            batch2_requests: Vec::new(),
            labels: BTreeMap::new(),
            plan: None,
            report: None,
            audit: vec![AuditEntry { phase: Phase::Initialized, detail: format!("{} units", data.len()) }],
        };
        Ok(Campaign { state, data, final_nuisances: None })
    }

    /// Reattaches a saved state to its dataset; the content hash must match.
    pub fn resume(state: CampaignState, ds: &Dataset) -> Result<Self> {
        let data = ds.redacted();
        if data.content_hash() != state.dataset.content_hash {
            return Err(Error::Data("dataset does not match the campaign's content hash".into()));
        }
        Ok(Campaign { state, data, final_nuisances: None })
    }

    pub fn state(&self) -> &CampaignState {
        &self.state
    }

    pub fn into_state(self) -> CampaignState {
        self.state
    }

    pub fn phase(&self) -> Phase {
        self.state.phase
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    /// Final-stage out-of-fold nuisances, available after finalizing in this process.
    pub fn final_nuisances(&self) -> Option<&FoldedNuisances> {
        self.final_nuisances.as_ref()
    }

    /// The redacted dataset with every label revealed so far.
    pub fn labeled_view(&self) -> Dataset {
        let mut view = self.data.clone();
        for u in view.units_mut() {
            if let Some(&y) = self.state.labels.get(&u.id) {
                u.reveal(y);
            }
        }
        view
    }

    fn expect_phase(&self, want: Phase, action: &str) -> Result<()> {
        if self.state.phase != want {
            return Err(Error::Phase(format!(
                "cannot {action}: campaign is at phase `{}`, expected `{want}`",
                self.state.phase
            )));
        }
        Ok(())
    }

    fn advance(&mut self, to: Phase, detail: String) {
        self.state.phase = to;
        self.state.audit.push(AuditEntry { phase: to, detail });
    }

    /// One uniform draw per unit from the tagged stream, in dataset order.
    fn draws(&self, tag: &str) -> Vec<f64> {
        let mut r = rng::stream(self.state.config.seed, tag, 0);
        (0..self.data.len()).map(|_| r.random::<f64>()).collect()
    }

    fn batch1_probability(&self, i: usize) -> f64 {
        self.state.config.budget.arm_budget(self.data.units()[i].arm())
    }

    pub fn request_batch1(&mut self, oracle: &mut dyn Oracle) -> Result<()> {
        self.expect_phase(Phase::Initialized, "request batch-1 labels")?;
        let u = self.draws("batch1-draw");
        let ids: Vec<u64> = (0..self.data.len())
            .filter(|&i| self.state.assignment.batch[i] == 1 && u[i] < self.batch1_probability(i))
            .map(|i| self.data.units()[i].id)
            .collect();
        oracle.request(&ids)?;
        let detail = format!("requested {} of {} batch-1 units", ids.len(), self.state.assignment.batch_members(1).len());
        self.state.batch1_requests = ids;
        self.advance(Phase::Batch1Requested, detail);
        Ok(())
    }

    fn ingest(&mut self, oracle: &mut dyn Oracle, ids: &[u64]) -> Result<Option<String>> {
        let labels = match oracle.collect(ids)? {
            Collected::Pending(msg) => return Ok(Some(msg)),
            Collected::Ready(labels) => labels,
        };
        let wanted: std::collections::HashSet<u64> = ids.iter().copied().collect();
        let mut fresh = BTreeMap::new();
        for (id, y) in labels {
            if !wanted.contains(&id) {
                continue;
            }
            if !y.is_finite() {
                return Err(Error::Oracle(format!("non-finite label for unit {id}")));
            }
            if let Some(&prev) = self.state.labels.get(&id) {
                if prev != y {
                    return Err(Error::Oracle(format!("label for unit {id} changed from {prev} to {y}")));
                }
            }
            fresh.insert(id, y);
        }
        if let Some(id) = ids.iter().find(|id| !fresh.contains_key(id)) {
            return Err(Error::Oracle(format!("oracle returned no label for requested unit {id}")));
        }
        self.state.labels.extend(fresh);
        Ok(None)
    }

    /// Returns `Some(message)` while labels are still pending.
    pub fn ingest_batch1(&mut self, oracle: &mut dyn Oracle) -> Result<Option<String>> {
        self.expect_phase(Phase::Batch1Requested, "ingest batch-1 labels")?;
        let ids = self.state.batch1_requests.clone();
        if let Some(msg) = self.ingest(oracle, &ids)? {
            return Ok(Some(msg));
        }
        self.advance(Phase::Batch1Labeled, format!("ingested {} labels", ids.len()));
        Ok(None)
    }

    /// Fits planning-stage nuisances on batch 1 and sets the batch-2 probabilities.
    pub fn plan(&mut self) -> Result<()> {
        self.expect_phase(Phase::Batch1Labeled, "plan batch 2")?;
        let plan = match self.state.config.design {
            DesignKind::Uniform => self.uniform_plan(),
            DesignKind::Adaptive => self.adaptive_plan()?,
        };
        let detail = format!(
            "expected spend {:.6}, batch-2 clamped share {:.4}",
            plan.expected_spend, plan.infeasible_fraction
        );
        self.state.plan = Some(plan);
        self.advance(Phase::Planned, detail);
        Ok(())
    }

    fn uniform_plan(&self) -> BatchPlan {
        let pi1: Vec<f64> = (0..self.data.len()).map(|i| self.batch1_probability(i)).collect();
        self.finish_plan(pi1.clone(), pi1.clone(), pi1, Vec::new(), Vec::new())
    }

    fn finish_plan(
        &self,
        pi1: Vec<f64>,
        pi_star: Vec<f64>,
        pi2: Vec<f64>,
        group_scales: Vec<f64>,
        planning_fingerprints: Vec<String>,
    ) -> BatchPlan {
        let kappa = self.state.config.kappa;
        let a = &self.state.assignment;
        let n = self.data.len();
        // Written as π₁ + (1 − κ)(π₂ − π₁) so that π₂ = π₁ gives π₁ exactly.
        let marginal: Vec<f64> = (0..n).map(|i| pi1[i] + (1.0 - kappa) * (pi2[i] - pi1[i])).collect();
        let feasible: Vec<bool> = (0..n).map(|i| batch2_probability(pi_star[i], kappa, pi1[i]).feasible).collect();
        let batch2 = a.batch_members(2);
        let infeasible_fraction = batch2.iter().filter(|&&i| !feasible[i]).count() as f64 / batch2.len().max(1) as f64;
        let draw: Vec<f64> = (0..n).map(|i| if a.batch[i] == 1 { pi1[i] } else { pi2[i] }).collect();
        let mut arm_expected_spend = [None; 2];
        for arm in Arm::BOTH {
            let vals: Vec<f64> = (0..n).filter(|&i| self.data.units()[i].is_arm(arm)).map(|i| draw[i]).collect();
            arm_expected_spend[arm.index()] = (!vals.is_empty()).then(|| mean(&vals));
        }
        BatchPlan {
            expected_spend: mean(&draw),
            arm_expected_spend,
            pi1,
            pi_star,
            pi2,
            marginal,
            feasible,
            group_scales,
            infeasible_fraction,
            planning_fingerprints,
        }
    }

    /// Planning groups: folds, split by arm under a per-arm budget.
    fn groups(&self) -> Vec<Vec<usize>> {
        let a = &self.state.assignment;
        let per_arm = matches!(self.state.config.budget, BudgetSpec::PerArm { .. });
        let mut out = Vec::new();
        for k in 0..a.folds {
            let fold: Vec<usize> = (0..a.len()).filter(|&i| a.fold[i] == k).collect();
            if per_arm {
                for arm in Arm::BOTH {
                    out.push(fold.iter().copied().filter(|&i| self.data.units()[i].is_arm(arm)).collect());
                }
            } else {
                out.push(fold);
            }
        }
        out
    }

    fn adaptive_plan(&self) -> Result<BatchPlan> {
        let cfg = &self.state.config;
        let view = self.labeled_view();
        let folded = fit_folded(
            &view,
            &self.state.assignment,
            Stage::Planning,
            &cfg.specs,
            rng::derive_seed(cfg.seed, "planning-fit", 0),
        )?;
        let n = view.len();
        let kappa = cfg.kappa;
        let pi1: Vec<f64> = (0..n).map(|i| self.batch1_probability(i)).collect();
        let shapes: Vec<f64> = (0..n)
            .map(|i| {
                let u = &view.units()[i];
                pi_shape(folded.for_unit(i), u.arm(), u)
            })
            .collect();
        let mut pi_star = vec![0.0; n];
        let mut pi2 = vec![0.0; n];
        let mut scales = Vec::new();
        for group in self.groups() {
            if group.is_empty() {
                continue;
            }
            let budget = pi1[group[0]];
            let floor = cfg.pi_floor.min(budget);
            let batch2: Vec<usize> = group.iter().copied().filter(|&i| self.state.assignment.batch[i] == 2).collect();
            let second = |t: f64, i: usize| batch2_probability(clamped(t, shapes[i], floor), kappa, pi1[i]).value;
            let positive = shapes.iter().copied().filter(|&s| s > 0.0 && s.is_finite()).fold(f64::INFINITY, f64::min);
            let scale = if batch2.is_empty() || !positive.is_finite() || shapes.iter().any(|s| !s.is_finite()) {
                None
            } else {
                let spend = |t: f64| batch2.iter().map(|&i| second(t, i)).sum::<f64>() / batch2.len() as f64;
                let hi = 1.0 / positive;
                if spend(hi) <= budget {
                    Some(hi)
                } else {
                    let (mut lo, mut hi) = (0.0, hi);
                    for _ in 0..200 {
                        let mid = 0.5 * (lo + hi);
                        if spend(mid) > budget {
                            hi = mid;
                        } else {
                            lo = mid;
                        }
                    }
                    Some(lo)
                }
            };
            for &i in &group {
                match scale {
                    Some(t) => {
                        pi_star[i] = clamped(t, shapes[i], floor);
                        pi2[i] = second(t, i);
                    }
                    None => {
                        pi_star[i] = budget;
                        pi2[i] = budget;
                    }
                }
            }
            scales.push(scale.unwrap_or(f64::NAN).max(0.0));
        }
        Ok(self.finish_plan(pi1, pi_star, pi2, scales, folded.fingerprints))
    }

    pub fn request_batch2(&mut self, oracle: &mut dyn Oracle) -> Result<()> {
        self.expect_phase(Phase::Planned, "request batch-2 labels")?;
        let plan = self.state.plan.as_ref().expect("planned phase has a plan");
        let u = self.draws("batch2-draw");
        let ids: Vec<u64> = (0..self.data.len())
            .filter(|&i| self.state.assignment.batch[i] == 2 && u[i] < plan.pi2[i])
            .map(|i| self.data.units()[i].id)
            .collect();
        oracle.request(&ids)?;
        let detail = format!("requested {} of {} batch-2 units", ids.len(), self.state.assignment.batch_members(2).len());
        self.state.batch2_requests = ids;
        self.advance(Phase::Batch2Requested, detail);
        Ok(())
    }

    pub fn ingest_batch2(&mut self, oracle: &mut dyn Oracle) -> Result<Option<String>> {
        self.expect_phase(Phase::Batch2Requested, "ingest batch-2 labels")?;
        let ids = self.state.batch2_requests.clone();
        if let Some(msg) = self.ingest(oracle, &ids)? {
            return Ok(Some(msg));
        }
        self.advance(Phase::Batch2Labeled, format!("ingested {} labels", ids.len()));
        Ok(None)
    }

    /// Re-optimized π from final-stage nuisances, scaled per planning group so
    /// its mean equals the group's budget.
    fn reoptimized(&self, view: &Dataset, folded: &FoldedNuisances) -> Result<Vec<f64>> {
        let cfg = &self.state.config;
        let mut pi = vec![0.0; view.len()];
        for group in self.groups() {
            if group.is_empty() {
                continue;
            }
            let budget = cfg.budget.arm_budget(view.units()[group[0]].arm());
            let shapes: Vec<f64> = group
                .iter()
                .map(|&i| {
                    let u = &view.units()[i];
                    pi_shape(folded.for_unit(i), u.arm(), u)
                })
                .collect();
            let weights = vec![1.0; group.len()];
            let floor = cfg.pi_floor.min(budget);
            match water_fill(&shapes, &weights, budget * group.len() as f64, floor) {
                Ok(fill) => {
                    for (&i, &s) in group.iter().zip(&shapes) {
                        pi[i] = clamped(fill.scale, s, floor);
                    }
                }
                Err(Error::Numerical(_)) => group.iter().for_each(|&i| pi[i] = budget),
                Err(e) => return Err(e),
            }
        }
        Ok(pi)
    }

    /// Final-stage refit on all labels and the ATE estimates. `external`
    /// supplies per-unit weights for the external-weights estimator.
    pub fn finalize(&mut self, external: Option<&[f64]>) -> Result<&CampaignReport> {
        self.expect_phase(Phase::Batch2Labeled, "finalize")?;
        let cfg = self.state.config.clone();
        if cfg.estimator == EstimatorKind::ExternalWeights && external.is_none() {
            return Err(Error::Config("the external-weights estimator needs a weights file".into()));
        }
        let view = self.labeled_view();
        let folded =
            fit_folded(&view, &self.state.assignment, Stage::Final, &cfg.specs, rng::derive_seed(cfg.seed, "final-fit", 0))?;
        let plan = self.state.plan.as_ref().expect("labeled phase has a plan");
        let reopt = self.reoptimized(&view, &folded)?;
        let weights_pi = match cfg.weighting {
            Weighting::Design => plan.marginal.clone(),
            Weighting::Reoptimized => reopt.clone(),
        };
        let opts = cfg.estimator_options;
        let mut estimates = vec![
            estimate_ate(&view, &folded, &weights_pi, EstimatorKind::Aipw, &opts)?,
            estimate_ate(&view, &folded, &weights_pi, EstimatorKind::RzPlugin, &opts)?,
        ];
        if let Some(w) = external {
            estimates.push(estimate_with_external_weights(&view, &folded, w, &opts)?);
        }
        let report = CampaignReport {
            selected: cfg.estimator,
            estimates,
            budget: cfg.budget,
            realized_fraction: self.state.realized_fraction(),
            expected_fraction: plan.expected_spend,
            infeasible_fraction: plan.infeasible_fraction,
            reoptimized_mean_pi: mean(&reopt),
            final_fingerprints: folded.fingerprints.clone(),
        };
        let detail = format!("tau_hat {:.6}", report.selected_estimate().tau_hat);
        self.state.report = Some(report);
        self.final_nuisances = Some(folded);
        self.advance(Phase::Finalized, detail);
        Ok(self.state.report.as_ref().unwrap())
    }

    /// Performs the next transition. Finalizing uses the configured estimator
    /// and no external weights.
    pub fn step(&mut self, oracle: &mut dyn Oracle) -> Result<StepOutcome> {
        let waiting = match self.state.phase {
            Phase::Initialized => {
                self.request_batch1(oracle)?;
                None
            }
            Phase::Batch1Requested => self.ingest_batch1(oracle)?,
            Phase::Batch1Labeled => {
                self.plan()?;
                None
            }
            Phase::Planned => {
                self.request_batch2(oracle)?;
                None
            }
            Phase::Batch2Requested => self.ingest_batch2(oracle)?,
            Phase::Batch2Labeled => {
                self.finalize(None)?;
                None
            }
            Phase::Finalized => return Err(Error::Phase("campaign is already finalized".into())),
        };
        Ok(match waiting {
            Some(msg) => StepOutcome::Waiting(msg),
            None => StepOutcome::Advanced(self.state.phase),
        })
    }

    /// Steps until finalized or until the oracle has nothing ready.
    pub fn run(&mut self, oracle: &mut dyn Oracle) -> Result<StepOutcome> {
        while self.state.phase != Phase::Finalized {
            if let StepOutcome::Waiting(msg) = self.step(oracle)? {
                return Ok(StepOutcome::Waiting(msg));
            }
        }
        Ok(StepOutcome::Advanced(Phase::Finalized))
    }

    /// Runs a whole campaign against a simulation oracle sealed from `ds`.
    pub fn run_simulated(ds: &Dataset, config: CampaignConfig) -> Result<Campaign> {
        let mut oracle = SimulationOracle::from_dataset(ds);
        let mut c = Campaign::init(ds, config, None)?;
        c.run(&mut oracle)?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Unit;

    fn toy(n: usize, y: impl Fn(usize) -> f64) -> Dataset {
        let units = (0..n)
            .map(|i| {
                let x = ((i * 37) % 101) as f64 / 50.0 - 1.0;
                Unit::new(i as u64, vec![x, (i as f64 * 0.3).sin()], ((i * 7) % 3 == 0) as u8 as f64, Some(y(i)))
            })
            .collect();
        Dataset::new(units, TreatmentMode::Binary).unwrap()
    }

    fn config(budget: f64) -> CampaignConfig {
        CampaignConfig { budget: BudgetSpec::Global { budget }, seed: 11, ..Default::default() }
    }

    #[test]
    fn full_budget_requests_every_batch1_unit() {
        let ds = toy(120, |i| i as f64);
        let mut c = Campaign::init(&ds, config(1.0), None).unwrap();
        let mut o = SimulationOracle::from_dataset(&ds);
        c.request_batch1(&mut o).unwrap();
        assert_eq!(c.state().batch1_requests.len(), c.state().assignment.batch_members(1).len());
    }

    #[test]
    fn constant_labels_give_zero_effect() {
        let ds = toy(200, |_| 2.0);
        let c = Campaign::run_simulated(&ds, config(0.5)).unwrap();
        let r = c.state().report.as_ref().unwrap();
        assert!(r.selected_estimate().tau_hat.abs() < 1e-9);
    }

    #[test]
    fn constant_nuisances_give_flat_batch2_probability() {
        let units = (0..200).map(|i| Unit::new(i, vec![0.0], (i % 2) as f64, Some(1.0))).collect();
        let ds = Dataset::new(units, TreatmentMode::Binary).unwrap();
        let cfg = CampaignConfig { budget: BudgetSpec::PerArm { control: 0.3, treated: 0.3 }, ..config(0.3) };
        let c = Campaign::run_simulated(&ds, cfg).unwrap();
        let plan = c.state().plan.as_ref().unwrap();
        assert!(plan.pi2.iter().all(|&p| (p - 0.3).abs() < 1e-9));
    }

    #[test]
    fn phases_are_enforced() {
        let ds = toy(100, |i| i as f64);
        let mut c = Campaign::init(&ds, config(0.3), None).unwrap();
        assert!(matches!(c.plan(), Err(Error::Phase(_))));
        let mut o = SimulationOracle::from_dataset(&ds);
        assert!(matches!(c.ingest_batch1(&mut o), Err(Error::Phase(_))));
    }

    #[test]
    fn plan_meets_budget() {
        let ds = toy(300, |i| (i as f64 * 0.11).sin() * (1.0 + (i % 4) as f64));
        let c = Campaign::run_simulated(&ds, config(0.3)).unwrap();
        let plan = c.state().plan.as_ref().unwrap();
        assert!(plan.expected_spend <= 0.3 + 1e-9);
        assert!((plan.expected_spend - 0.3).abs() < 1e-9);
    }

    #[test]
    fn state_round_trips_through_json() {
        let ds = toy(150, |i| i as f64 * 0.5);
        let c = Campaign::run_simulated(&ds, config(0.4)).unwrap();
        let s = c.state().to_json().unwrap();
        assert_eq!(&CampaignState::from_json(&s).unwrap(), c.state());
    }

    #[test]
    fn resume_rejects_other_dataset() {
        let ds = toy(100, |i| i as f64);
        let c = Campaign::init(&ds, config(0.3), None).unwrap();
        let other = toy(101, |i| i as f64);
        assert!(Campaign::resume(c.into_state(), &other).is_err());
    }
}
