//! Variance-optimal annotation probabilities.
//!
//! The π-dependent part of the AIPW asymptotic variance is
//! `Σ_z E[σ²_z(X) / (e_z(X) π(z, X))]`. Under a linear budget on π its
//! minimizer is proportional to the shape `√σ²_z(x) / e_z(x)` (for continuous
//! treatments, `√(σ²(z,x) / (e(z,x) ẽ_h(z,x)))`). With box constraints
//! `π ∈ [floor, 1]` the minimizer is the clamped shape at the scale that
//! exhausts the budget, which [`water_fill`] finds.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Arm, Dataset, TreatmentMode, Unit};
use crate::error::{Error, Result};
use crate::nuisance::Nuisances;
use crate::rng;
use crate::stats::{compensated_sum, mean, variance};

/// Default lower clip for annotation probabilities.
pub const DEFAULT_PI_FLOOR: f64 = 0.01;

const MAX_PASSES: usize = 50;

/// Result of [`water_fill`]: probabilities are `clamp(scale * shape, floor, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaterFill {
    pub scale: f64,
    pub passes: usize,
    pub at_floor: usize,
    pub at_ceiling: usize,
    pub used_bisection: bool,
}

pub fn clamped(scale: f64, shape: f64, floor: f64) -> f64 {
    (scale * shape).clamp(floor, 1.0)
}

fn spend(shapes: &[f64], weights: &[f64], scale: f64, floor: f64) -> f64 {
    compensated_sum(shapes.iter().zip(weights).map(|(&s, &w)| w * clamped(scale, s, floor)))
}

/// Finds the scale `t` with `Σ w_i clamp(t s_i, floor, 1) = total`.
///
/// Units are repeatedly classified as pinned at the floor, pinned at one, or
/// interior, and the interior scale is re-solved in closed form; the loop stops
/// when the classification is stable. Bisection takes over if it has not
/// settled after 50 passes. When the budget covers every unit at probability
/// one, all units are pinned at one.
pub fn water_fill(shapes: &[f64], weights: &[f64], total: f64, floor: f64) -> Result<WaterFill> {
    if shapes.len() != weights.len() {
        return Err(Error::Numerical("shape and weight lengths differ".into()));
    }
    if shapes.iter().any(|s| !s.is_finite() || *s < 0.0) || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::Numerical("shapes and weights must be finite and non-negative".into()));
    }
    if !(0.0..1.0).contains(&floor) {
        return Err(Error::Config(format!("probability floor must lie in [0, 1), got {floor}")));
    }
    let weight_total = compensated_sum(weights.iter().copied());
    if weight_total <= 0.0 {
        return Err(Error::Numerical("no unit carries budget weight".into()));
    }
    if floor * weight_total > total * (1.0 + 1e-12) {
        return Err(Error::Config(format!(
            "budget {} is below the floor spend {}",
            total / weight_total,
            floor
        )));
    }
    let max_shape = shapes.iter().zip(weights).filter(|(_, &w)| w > 0.0).map(|(&s, _)| s).fold(0.0, f64::max);
    if max_shape <= 0.0 {
        return Err(Error::Numerical("all annotation shapes are zero".into()));
    }
    let min_positive = shapes.iter().copied().filter(|&s| s > 0.0).fold(f64::INFINITY, f64::min);
    let counts = |t: f64| {
        let lo = shapes.iter().filter(|&&s| t * s <= floor).count();
        let hi = shapes.iter().filter(|&&s| s > 0.0 && t * s >= 1.0).count();
        (lo, hi)
    };
    if weight_total <= total {
        let t = 1.0 / min_positive;
        let (lo, hi) = counts(t);
        return Ok(WaterFill { scale: t, passes: 0, at_floor: lo, at_ceiling: hi, used_bisection: false });
    }

    #[derive(PartialEq, Clone, Copy)]
    enum Pin {
        Floor,
        Interior,
        Ceiling,
    }
    let classify = |t: f64| -> Vec<Pin> {
        shapes
            .iter()
            .map(|&s| {
                let v = t * s;
                if v <= floor {
                    Pin::Floor
                } else if v >= 1.0 {
                    Pin::Ceiling
                } else {
                    Pin::Interior
                }
            })
            .collect()
    };

    let mut pins = vec![Pin::Interior; shapes.len()];
    let mut scale = f64::NAN;
    let mut passes = 0;
    let mut settled = false;
    while passes < MAX_PASSES {
        passes += 1;
        let mut fixed = 0.0;
        let mut interior = 0.0;
        for ((&s, &w), p) in shapes.iter().zip(weights).zip(&pins) {
            match p {
                Pin::Floor => fixed += w * floor,
                Pin::Ceiling => fixed += w,
                Pin::Interior => interior += w * s,
            }
        }
        if interior <= 0.0 {
            break;
        }
        scale = (total - fixed) / interior;
        if !(scale > 0.0 && scale.is_finite()) {
            break;
        }
        let next = classify(scale);
        if next == pins {
            settled = true;
            break;
        }
        pins = next;
    }

    let mut used_bisection = false;
    if !settled {
        used_bisection = true;
        let (mut lo, mut hi) = (0.0, 1.0 / min_positive);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if spend(shapes, weights, mid, floor) > total {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        scale = lo;
    }
    // Never overspend through rounding.
    let mut guard = 0;
    while spend(shapes, weights, scale, floor) > total * (1.0 + 1e-12) && guard < 100 {
        scale *= 1.0 - 1e-12;
        guard += 1;
    }
    let (lo, hi) = counts(scale);
    Ok(WaterFill { scale, passes, at_floor: lo, at_ceiling: hi, used_bisection })
}

/// Shape of the binary-treatment optimum, `√σ²_z(x) / e_z(x)`.
pub fn pi_shape(nuis: &dyn Nuisances, arm: Arm, unit: &Unit) -> f64 {
    nuis.sigma2(arm, unit).max(0.0).sqrt() / nuis.propensity(arm, unit)
}

/// Scaled, clamped shape: the functional form of every optimal plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiPolicy {
    pub scale: f64,
    pub floor: f64,
    /// Set when the shape was degenerate and a constant probability is used.
    pub uniform: Option<f64>,
}

impl PiPolicy {
    pub fn uniform(p: f64) -> Self {
        PiPolicy { scale: 0.0, floor: p, uniform: Some(p) }
    }

    pub fn apply(&self, shape: f64) -> f64 {
        match self.uniform {
            Some(p) => p,
            None => clamped(self.scale, shape, self.floor),
        }
    }

    pub fn evaluate(&self, nuis: &dyn Nuisances, arm: Arm, unit: &Unit) -> f64 {
        self.apply(pi_shape(nuis, arm, unit))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PlanAudit {
    pub budget: f64,
    /// Mean of π over the units (each at its own treatment arm).
    pub expected_fraction: f64,
    /// Per-arm mean of π, indexed by [`Arm::index`].
    pub arm_expected_fraction: [Option<f64>; 2],
    pub realized_fraction: Option<f64>,
    pub at_floor: usize,
    pub at_ceiling: usize,
    pub passes: usize,
    pub uniform_fallback: bool,
    /// Scale the unclipped closed form would use before renormalization.
    pub closed_form_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationPlan {
    pub ids: Vec<u64>,
    pub pi: Vec<f64>,
    pub realized: Option<Vec<bool>>,
    pub audit: PlanAudit,
}

impl AnnotationPlan {
    pub fn new(ds: &Dataset, pi: Vec<f64>, budget: f64) -> Self {
        let mut plan = AnnotationPlan {
            ids: ds.units().iter().map(|u| u.id).collect(),
            pi,
            realized: None,
            audit: PlanAudit { budget, ..Default::default() },
        };
        plan.audit.expected_fraction = mean(&plan.pi);
        if ds.mode() == TreatmentMode::Binary {
            for arm in Arm::BOTH {
                let vals: Vec<f64> =
                    ds.units().iter().zip(&plan.pi).filter(|(u, _)| u.is_arm(arm)).map(|(_, &p)| p).collect();
                plan.audit.arm_expected_fraction[arm.index()] = (!vals.is_empty()).then(|| mean(&vals));
            }
        }
        plan
    }

    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }

    /// Draws R_i ~ Bernoulli(π_i) in unit order.
    pub fn sample(&mut self, seed: u64) {
        let mut rng = rng::stream(seed, "plan-sample", 0);
        let r: Vec<bool> = self.pi.iter().map(|&p| rng.random::<f64>() < p).collect();
        self.audit.realized_fraction = Some(r.iter().filter(|&&b| b).count() as f64 / r.len().max(1) as f64);
        self.realized = Some(r);
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["id", "pi", "r"])?;
        for (i, (&id, &p)) in self.ids.iter().zip(&self.pi).enumerate() {
            let r = match &self.realized {
                Some(r) => if r[i] { "1" } else { "0" }.to_string(),
                None => String::new(),
            };
            wtr.write_record([id.to_string(), p.to_string(), r])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

/// Reads a plan CSV (`id, pi[, r]`) into an id → π map.
pub fn read_plan_probabilities<R: Read>(reader: R) -> Result<HashMap<u64, f64>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let id_pos = headers.iter().position(|h| h == "id").ok_or_else(|| Error::Data("plan lacks `id` column".into()))?;
    let pi_pos = headers.iter().position(|h| h == "pi").ok_or_else(|| Error::Data("plan lacks `pi` column".into()))?;
    let mut out = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::MalformedRow { row, message: e.to_string() })?;
        let id = rec[id_pos].trim().parse::<u64>().map_err(|_| Error::MalformedRow { row, message: "bad id".into() })?;
        let pi = rec[pi_pos].trim().parse::<f64>().map_err(|_| Error::MalformedRow { row, message: "bad pi".into() })?;
        if !(pi > 0.0 && pi <= 1.0) {
            return Err(Error::MalformedRow { row, message: format!("pi {pi} outside (0, 1]") });
        }
        out.insert(id, pi);
    }
    Ok(out)
}

pub fn load_plan_probabilities<P: AsRef<Path>>(path: P) -> Result<HashMap<u64, f64>> {
    read_plan_probabilities(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Aligns a plan map with the dataset order; every unit must be covered.
pub fn align_plan(ds: &Dataset, pi: &HashMap<u64, f64>) -> Result<Vec<f64>> {
    ds.units()
        .iter()
        .map(|u| pi.get(&u.id).copied().ok_or_else(|| Error::Data(format!("plan has no probability for unit {}", u.id))))
        .collect()
}

/// Empirical plug-in of `Var[μ₁ − μ₀] + Σ_z E[σ²_z / (e_z π(z, X))]`, with
/// the variance taken over the sample (denominator n).
pub fn asymptotic_variance(ds: &Dataset, nuis: &dyn Nuisances, pi: &dyn Fn(Arm, &Unit) -> f64) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let contrast: Vec<f64> = ds.units().iter().map(|u| nuis.mu(Arm::Treated, u) - nuis.mu(Arm::Control, u)).collect();
    let mut terms = Vec::with_capacity(2 * ds.len());
    for u in ds.units() {
        for arm in Arm::BOTH {
            let p = pi(arm, u);
            if !(p > 0.0) || !p.is_finite() {
                return Err(Error::Numerical(format!("annotation probability {p} for unit {} arm {arm}", u.id)));
            }
            terms.push(nuis.sigma2(arm, u) / (nuis.propensity(arm, u) * p));
        }
    }
    Ok(variance(&contrast, 0) + compensated_sum(terms) / ds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalDesign {
    pub policy: PiPolicy,
    pub plan: AnnotationPlan,
}

/// Global-budget optimum: `π*(z,x) ∝ √σ²_z(x) / e_z(x)`, clamped to
/// `[floor, 1]` and scaled so the sample mean of π(Z_i, X_i) equals the budget.
pub fn optimal_pi_global(ds: &Dataset, nuis: &dyn Nuisances, budget: f64, floor: f64) -> Result<GlobalDesign> {
    check_budget(budget)?;
    if ds.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let shapes: Vec<f64> = ds.units().iter().map(|u| pi_shape(nuis, u.arm(), u)).collect();
    let normalizer = mean(
        &ds.units()
            .iter()
            .map(|u| nuis.sigma2(Arm::Treated, u).max(0.0).sqrt() + nuis.sigma2(Arm::Control, u).max(0.0).sqrt())
            .collect::<Vec<_>>(),
    );
    let closed_form_scale = (normalizer > 0.0).then(|| budget / normalizer);
    let weights = vec![1.0; shapes.len()];
    let (policy, fill) = match water_fill(&shapes, &weights, budget * ds.len() as f64, floor.min(budget)) {
        Ok(f) => (PiPolicy { scale: f.scale, floor: floor.min(budget), uniform: None }, Some(f)),
        Err(Error::Numerical(_)) => (PiPolicy::uniform(budget), None),
        Err(e) => return Err(e),
    };
    let pi: Vec<f64> = shapes.iter().map(|&s| policy.apply(s)).collect();
    let mut plan = AnnotationPlan::new(ds, pi, budget);
    plan.audit.closed_form_scale = closed_form_scale;
    plan.audit.uniform_fallback = fill.is_none();
    if let Some(f) = fill {
        plan.audit.at_floor = f.at_floor;
        plan.audit.at_ceiling = f.at_ceiling;
        plan.audit.passes = f.passes;
    }
    Ok(GlobalDesign { policy, plan })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerArmDesign {
    /// Indexed by [`Arm::index`].
    pub policies: [PiPolicy; 2],
    pub plan: AnnotationPlan,
}

/// Per-arm budget optimum: within arm z, `π*(z,x) ∝ √(σ²_z(x) / e_z(x)²)`,
/// scaled so the mean of π over units with Z = z equals `B_z`.
pub fn optimal_pi_per_arm(
    ds: &Dataset,
    nuis: &dyn Nuisances,
    control_budget: f64,
    treated_budget: f64,
    floor: f64,
) -> Result<PerArmDesign> {
    let budgets = [control_budget, treated_budget];
    budgets.iter().try_for_each(|&b| check_budget(b))?;
    let mut pi = vec![0.0; ds.len()];
    let mut policies = [PiPolicy::uniform(control_budget), PiPolicy::uniform(treated_budget)];
    let mut audit = PlanAudit::default();
    for arm in Arm::BOTH {
        let members: Vec<usize> = (0..ds.len()).filter(|&i| ds.units()[i].is_arm(arm)).collect();
        if members.is_empty() {
            return Err(Error::Data(format!("arm {arm} has no units")));
        }
        let b = budgets[arm.index()];
        let shapes: Vec<f64> = members.iter().map(|&i| pi_shape(nuis, arm, &ds.units()[i])).collect();
        let weights = vec![1.0; shapes.len()];
        let f = floor.min(b);
        let policy = match water_fill(&shapes, &weights, b * members.len() as f64, f) {
            Ok(fill) => {
                audit.at_floor += fill.at_floor;
                audit.at_ceiling += fill.at_ceiling;
                audit.passes = audit.passes.max(fill.passes);
                PiPolicy { scale: fill.scale, floor: f, uniform: None }
            }
            Err(Error::Numerical(_)) => {
                audit.uniform_fallback = true;
                PiPolicy::uniform(b)
            }
            Err(e) => return Err(e),
        };
        for (&i, &s) in members.iter().zip(&shapes) {
            pi[i] = policy.apply(s);
        }
        policies[arm.index()] = policy;
    }
    let overall = mean(&[control_budget, treated_budget]);
    let mut plan = AnnotationPlan::new(ds, pi, overall);
    audit.budget = overall;
    audit.expected_fraction = plan.audit.expected_fraction;
    audit.arm_expected_fraction = plan.audit.arm_expected_fraction;
    plan.audit = audit;
    Ok(PerArmDesign { policies, plan })
}

fn check_budget(b: f64) -> Result<()> {
    if b > 0.0 && b <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("budget must lie in (0, 1], got {b}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Gaussian,
    Box,
}

/// Symmetric smoothing kernel `K_h(u) = K(u / h) / h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub bandwidth: f64,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::Config(format!("bandwidth must be positive, got {bandwidth}")));
        }
        Ok(KernelSpec { kind, bandwidth })
    }

    pub fn eval(&self, u: f64) -> f64 {
        let t = u / self.bandwidth;
        let k = match self.kind {
            KernelKind::Gaussian => (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt(),
            KernelKind::Box => {
                if t.abs() <= 1.0 {
                    0.5
                } else {
                    0.0
                }
            }
        };
        k / self.bandwidth
    }

    /// Half-width of the integration window.
    pub fn half_width(&self) -> f64 {
        match self.kind {
            KernelKind::Gaussian => 6.0 * self.bandwidth,
            KernelKind::Box => self.bandwidth,
        }
    }
}

/// Trapezoid rule on `[a, b]`, doubling the grid until successive estimates
/// agree to `tol` (relative to max(1, |value|)).
pub fn adaptive_trapezoid<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> Result<f64> {
    let mut n = 16usize;
    let h = |n: usize| (b - a) / n as f64;
    let sum_ends = 0.5 * (f(a) + f(b));
    let mut interior: f64 = (1..n).map(|i| f(a + i as f64 * h(n))).sum();
    let mut estimate = h(n) * (sum_ends + interior);
    for _ in 0..20 {
        let added: f64 = (0..n).map(|i| f(a + (2 * i + 1) as f64 * h(2 * n))).sum();
        interior += added;
        n *= 2;
        let refined = h(n) * (sum_ends + interior);
        if !refined.is_finite() {
            return Err(Error::Numerical("quadrature produced a non-finite value".into()));
        }
        if (refined - estimate).abs() <= tol * refined.abs().max(1.0) {
            return Ok(refined);
        }
        estimate = refined;
    }
    Err(Error::Numerical("quadrature did not converge".into()))
}

/// Kernel localization `ẽ_h(z0, x) = ∫ K_h(z' − z0) e(z', x) dz'` over the
/// kernel window, normalized by the kernel mass inside the window.
pub fn localized_propensity(gps: &dyn Fn(f64, &Unit) -> f64, unit: &Unit, z0: f64, kernel: &KernelSpec) -> Result<f64> {
    let w = kernel.half_width();
    let tol = 1e-8;
    // Integrate over the offset so the window ends sit exactly on the support.
    let num = adaptive_trapezoid(|u| kernel.eval(u) * gps(z0 + u, unit), -w, w, tol)?;
    let mass = adaptive_trapezoid(|u| kernel.eval(u), -w, w, tol)?;
    Ok(num / mass)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousDesign {
    pub z0: f64,
    pub kernel: KernelSpec,
    pub policy: PiPolicy,
    /// π(z0, X_i) for every unit.
    pub plan: AnnotationPlan,
    pub localized: Vec<f64>,
    /// Σ_i π(z0, X_i) K_h(Z_i − z0) / n, the kernel-weighted spend.
    pub kernel_weighted_spend: f64,
}

/// Continuous-treatment optimum at dose `z0`:
/// `π*(z0,x) ∝ (√σ²(z0,x) / e(z0,x)) √(e(z0,x) / ẽ_h(z0,x))`, scaled so that
/// `mean_i[π(z0, X_i) K_h(Z_i − z0)] = B`.
pub fn optimal_pi_continuous(
    ds: &Dataset,
    sigma2: &dyn Fn(f64, &Unit) -> f64,
    gps: &dyn Fn(f64, &Unit) -> f64,
    kernel: &KernelSpec,
    z0: f64,
    budget: f64,
    floor: f64,
) -> Result<ContinuousDesign> {
    check_budget(budget)?;
    if ds.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    const DENSITY_FLOOR: f64 = 1e-10;
    let mut localized = Vec::with_capacity(ds.len());
    let mut shapes = Vec::with_capacity(ds.len());
    for u in ds.units() {
        let loc = localized_propensity(gps, u, z0, kernel)?;
        if !(loc >= DENSITY_FLOOR) {
            return Err(Error::Numerical(format!("localized propensity {loc} below floor for unit {}", u.id)));
        }
        let e = gps(z0, u);
        if !(e >= DENSITY_FLOOR) {
            return Err(Error::Numerical(format!("generalized propensity {e} below floor for unit {}", u.id)));
        }
        let s2 = sigma2(z0, u).max(0.0);
        shapes.push((s2.sqrt() / e) * (e / loc).sqrt());
        localized.push(loc);
    }
    let weights: Vec<f64> = ds.units().iter().map(|u| kernel.eval(u.treatment - z0)).collect();
    if weights.iter().all(|&w| w == 0.0) {
        return Err(Error::Data(format!("no treatment values inside the kernel window around {z0}")));
    }
    let n = ds.len() as f64;
    let fill = water_fill(&shapes, &weights, budget * n, floor.min(budget))?;
    let policy = PiPolicy { scale: fill.scale, floor: floor.min(budget), uniform: None };
    let pi: Vec<f64> = shapes.iter().map(|&s| policy.apply(s)).collect();
    let kernel_weighted_spend = compensated_sum(pi.iter().zip(&weights).map(|(p, w)| p * w)) / n;
    let mut plan = AnnotationPlan::new(ds, pi, budget);
    plan.audit.at_floor = fill.at_floor;
    plan.audit.at_ceiling = fill.at_ceiling;
    plan.audit.passes = fill.passes;
    Ok(ContinuousDesign { z0, kernel: *kernel, policy, plan, localized, kernel_weighted_spend })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Batch2Probability {
    pub value: f64,
    /// False when the mixture target was unreachable and the value was clamped.
    pub feasible: bool,
}

/// Second-batch probability `(π* − κ π₁) / (1 − κ)` that makes the two-batch
/// mixture hit `π*`, clamped to [0, 1].
pub fn batch2_probability(pi_star: f64, kappa: f64, pi1: f64) -> Batch2Probability {
    debug_assert!(kappa > 0.0 && kappa < 1.0);
    let raw = (pi_star - kappa * pi1) / (1.0 - kappa);
    let value = raw.clamp(0.0, 1.0);
    // Rounding at the ends (e.g. π* = π₁ = 1) is not infeasibility.
    let feasible = (raw - value).abs() <= 1e-12;
    Batch2Probability { value, feasible }
}

/// Sample variance (n − 1) of μ̂₁(x_i) − μ̂₀(x_i).
pub fn outcome_contrast_variance(ds: &Dataset, nuis: &dyn Nuisances) -> f64 {
    let c: Vec<f64> = ds.units().iter().map(|u| nuis.mu(Arm::Treated, u) - nuis.mu(Arm::Control, u)).collect();
    variance(&c, 1)
}

/// Plug-in relative efficiency of optimized versus uniform annotation at the
/// same budget:
/// `[(1/B)(E[√σ²₁ + √σ²₀])² + Var τ] / [(1/B) E[σ²₁/e₁ + σ²₀/e₀] + Var τ]`.
pub fn relative_efficiency(ds: &Dataset, nuis: &dyn Nuisances, tau_x_variance: f64, budget: f64) -> Result<f64> {
    check_budget(budget)?;
    if ds.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let roots: Vec<f64> = ds
        .units()
        .iter()
        .map(|u| nuis.sigma2(Arm::Treated, u).sqrt() + nuis.sigma2(Arm::Control, u).sqrt())
        .collect();
    let ratios: Vec<f64> = ds
        .units()
        .iter()
        .map(|u| Arm::BOTH.iter().map(|&a| nuis.sigma2(a, u) / nuis.propensity(a, u)).sum())
        .collect();
    let root_mean = mean(&roots);
    let num = root_mean * root_mean / budget + tau_x_variance;
    let den = mean(&ratios) / budget + tau_x_variance;
    if !(den > 0.0) {
        return Err(Error::Numerical("relative efficiency denominator is zero".into()));
    }
    Ok(num / den)
}

/// A covariate distribution on finitely many support points with known
/// nuisances; the population version of the design problems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportPoint {
    pub weight: f64,
    /// Indexed by [`Arm::index`].
    pub sigma2: [f64; 2],
    pub treated_propensity: f64,
}

impl SupportPoint {
    pub fn propensity(&self, arm: Arm) -> f64 {
        match arm {
            Arm::Treated => self.treated_propensity,
            Arm::Control => 1.0 - self.treated_propensity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteInstance {
    pub points: Vec<SupportPoint>,
}

impl DiscreteInstance {
    /// `Σ_j p_j Σ_z σ²_zj / (e_zj π_zj)`.
    pub fn pi_term(&self, pi: &[[f64; 2]]) -> f64 {
        self.points
            .iter()
            .zip(pi)
            .map(|(pt, p)| {
                pt.weight * Arm::BOTH.iter().map(|&a| pt.sigma2[a.index()] / (pt.propensity(a) * p[a.index()])).sum::<f64>()
            })
            .sum()
    }

    /// `E[π(Z, X)] = Σ_j p_j Σ_z e_zj π_zj`.
    pub fn global_spend(&self, pi: &[[f64; 2]]) -> f64 {
        self.points
            .iter()
            .zip(pi)
            .map(|(pt, p)| pt.weight * Arm::BOTH.iter().map(|&a| pt.propensity(a) * p[a.index()]).sum::<f64>())
            .sum()
    }

    /// `E[π(z, X) | Z = z]`.
    pub fn arm_spend(&self, pi: &[[f64; 2]], arm: Arm) -> f64 {
        let mass: f64 = self.points.iter().map(|pt| pt.weight * pt.propensity(arm)).sum();
        self.points.iter().zip(pi).map(|(pt, p)| pt.weight * pt.propensity(arm) * p[arm.index()]).sum::<f64>() / mass
    }

    pub fn uniform(&self, budget: f64) -> Vec<[f64; 2]> {
        vec![[budget; 2]; self.points.len()]
    }

    fn flat_shapes(&self) -> Vec<f64> {
        self.points
            .iter()
            .flat_map(|pt| Arm::BOTH.map(|a| pt.sigma2[a.index()].sqrt() / pt.propensity(a)))
            .collect()
    }

    /// Global-budget optimum under `E[π(Z,X)] ≤ B`.
    pub fn optimal_pi_global(&self, budget: f64, floor: f64) -> Result<Vec<[f64; 2]>> {
        check_budget(budget)?;
        let shapes = self.flat_shapes();
        let weights: Vec<f64> =
            self.points.iter().flat_map(|pt| Arm::BOTH.map(|a| pt.weight * pt.propensity(a))).collect();
        let total_weight: f64 = weights.iter().sum();
        let fill = water_fill(&shapes, &weights, budget * total_weight, floor)?;
        Ok(shapes.chunks(2).map(|c| [clamped(fill.scale, c[0], floor), clamped(fill.scale, c[1], floor)]).collect())
    }

    /// Per-arm optimum under `E[π(z,X) | Z = z] ≤ B_z`.
    pub fn optimal_pi_per_arm(&self, control_budget: f64, treated_budget: f64, floor: f64) -> Result<Vec<[f64; 2]>> {
        let budgets = [control_budget, treated_budget];
        let mut out = vec![[0.0; 2]; self.points.len()];
        for arm in Arm::BOTH {
            let b = budgets[arm.index()];
            check_budget(b)?;
            let shapes: Vec<f64> =
                self.points.iter().map(|pt| pt.sigma2[arm.index()].sqrt() / pt.propensity(arm)).collect();
            let weights: Vec<f64> = self.points.iter().map(|pt| pt.weight * pt.propensity(arm)).collect();
            let total: f64 = weights.iter().sum();
            let fill = water_fill(&shapes, &weights, b * total, floor)?;
            for (o, s) in out.iter_mut().zip(&shapes) {
                o[arm.index()] = clamped(fill.scale, *s, floor);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nuisance::FnNuisances;

    fn units(n: usize) -> Dataset {
        let units = (0..n).map(|i| Unit::new(i as u64, vec![i as f64 / n as f64], (i % 2) as f64, None)).collect();
        Dataset::new(units, TreatmentMode::Binary).unwrap()
    }

    fn constant(s1: f64, s0: f64, e1: f64) -> FnNuisances<'static> {
        FnNuisances::new(
            |_, _| 0.0,
            move |a, _| if a == Arm::Treated { s1 } else { s0 },
            move |a, _| if a == Arm::Treated { e1 } else { 1.0 - e1 },
        )
    }

    #[test]
    fn avar_constant_instance() {
        let ds = units(10);
        let n = constant(1.0, 1.0, 0.5);
        assert!((asymptotic_variance(&ds, &n, &|_, _| 1.0).unwrap() - 4.0).abs() < 1e-12);
        assert!((asymptotic_variance(&ds, &n, &|_, _| 0.5).unwrap() - 8.0).abs() < 1e-12);
        assert!(asymptotic_variance(&ds, &n, &|_, _| 0.0).is_err());
    }

    #[test]
    fn avar_matches_enumeration_on_three_points() {
        // Three support points, each replicated once; direct summation.
        let xs = [-1.0, 0.0, 2.0];
        let units = xs.iter().enumerate().map(|(i, &x)| Unit::new(i as u64, vec![x], 0.0, None)).collect();
        let ds = Dataset::new(units, TreatmentMode::Binary).unwrap();
        let mu = |a: Arm, u: &Unit| if a == Arm::Treated { 2.0 * u.covariates[0] } else { u.covariates[0] * u.covariates[0] };
        let s2 = |a: Arm, u: &Unit| 1.0 + u.covariates[0].abs() + a.index() as f64;
        let e = |a: Arm, u: &Unit| {
            let e1 = 0.3 + 0.1 * u.covariates[0];
            if a == Arm::Treated { e1 } else { 1.0 - e1 }
        };
        let pi = |a: Arm, u: &Unit| 0.2 + 0.1 * a.index() as f64 + 0.05 * u.covariates[0];
        let n = FnNuisances::new(mu, s2, e);
        let got = asymptotic_variance(&ds, &n, &pi).unwrap();
        // contrast = 2x - x² at x = -1, 0, 2 → -3, 0, 0
        let c = [-3.0f64, 0.0, 0.0];
        let cm = c.iter().sum::<f64>() / 3.0;
        let mut expected = c.iter().map(|v| (v - cm).powi(2)).sum::<f64>() / 3.0;
        for &x in &xs {
            let e1: f64 = 0.3 + 0.1 * x;
            expected += (1.0 + x.abs() + 1.0) / (e1 * (0.3 + 0.05 * x)) / 3.0;
            expected += (1.0 + x.abs()) / ((1.0 - e1) * (0.2 + 0.05 * x)) / 3.0;
        }
        assert!((got - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn symmetric_instance_gives_uniform_plan() {
        let ds = units(40);
        for &b in &[0.05, 0.3, 0.7, 1.0] {
            let d = optimal_pi_global(&ds, &constant(2.5, 2.5, 0.5), b, DEFAULT_PI_FLOOR).unwrap();
            for &p in &d.plan.pi {
                assert!((p - b).abs() < 1e-12, "b={b} p={p}");
            }
        }
    }

    #[test]
    fn closed_form_scale_matches_water_fill_when_interior() {
        let ds = units(40);
        let d = optimal_pi_global(&ds, &constant(4.0, 1.0, 0.5), 0.2, DEFAULT_PI_FLOOR).unwrap();
        // Both arms equally represented, so the realized-arm and population
        // normalizers coincide.
        assert!((d.policy.scale - d.plan.audit.closed_form_scale.unwrap()).abs() < 1e-12);
        assert!((d.plan.audit.expected_fraction - 0.2).abs() < 1e-12);
    }

    #[test]
    fn per_arm_constant_shape_gives_arm_budget() {
        let ds = units(30);
        let d = optimal_pi_per_arm(&ds, &constant(3.0, 1.0, 0.4), 0.1, 0.6, DEFAULT_PI_FLOOR).unwrap();
        for (u, &p) in ds.units().iter().zip(&d.plan.pi) {
            let want = if u.is_arm(Arm::Treated) { 0.6 } else { 0.1 };
            assert!((p - want).abs() < 1e-12);
        }
    }

    #[test]
    fn per_arm_empty_arm_is_error() {
        let units = (0..5).map(|i| Unit::new(i, vec![0.0], 1.0, None)).collect();
        let ds = Dataset::new(units, TreatmentMode::Binary).unwrap();
        assert!(optimal_pi_per_arm(&ds, &constant(1.0, 1.0, 0.5), 0.2, 0.2, 0.01).is_err());
    }

    #[test]
    fn batch2_probability_cases() {
        let b = batch2_probability(0.3, 0.55, 0.3);
        assert!((b.value - 0.3).abs() < 1e-12 && b.feasible);
        let b = batch2_probability(0.5, 0.5, 0.2);
        assert!((b.value - 0.8).abs() < 1e-12 && b.feasible);
        let b = batch2_probability(0.05, 0.5, 0.2);
        assert_eq!(b.value, 0.0);
        assert!(!b.feasible);
        let b = batch2_probability(1.0, 0.55, 1.0);
        assert!((b.value - 1.0).abs() < 1e-12 && b.feasible);
    }

    #[test]
    fn relative_efficiency_reference_values() {
        let ds = units(10);
        let r = relative_efficiency(&ds, &constant(2.0, 2.0, 0.5), 0.0, 0.3).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        let r = relative_efficiency(&ds, &constant(4.0, 1.0, 0.5), 0.0, 0.2).unwrap();
        assert!((r - 0.9).abs() < 1e-12);
    }

    #[test]
    fn water_fill_saturates_when_budget_covers_everything() {
        let f = water_fill(&[1.0, 2.0, 3.0], &[1.0; 3], 3.0, 0.01).unwrap();
        for s in [1.0, 2.0, 3.0] {
            assert_eq!(clamped(f.scale, s, 0.01), 1.0);
        }
    }

    #[test]
    fn water_fill_pins_large_shapes_at_one() {
        let shapes = [10.0, 1.0, 1.0, 1.0];
        let f = water_fill(&shapes, &[1.0; 4], 1.6, 0.01).unwrap();
        let pi: Vec<f64> = shapes.iter().map(|&s| clamped(f.scale, s, 0.01)).collect();
        assert_eq!(pi[0], 1.0);
        assert!((pi[1] - 0.2).abs() < 1e-12);
        assert_eq!(f.at_ceiling, 1);
    }

    #[test]
    fn water_fill_rejects_budget_below_floor() {
        assert!(matches!(water_fill(&[1.0, 1.0], &[1.0, 1.0], 0.01, 0.1), Err(Error::Config(_))));
    }

    #[test]
    fn box_kernel_linear_profile_is_exact() {
        let k = KernelSpec::new(KernelKind::Box, 0.4).unwrap();
        let u = Unit::new(0, vec![1.5], 0.0, None);
        let gps = |z: f64, u: &Unit| 0.2 + 0.1 * z + 0.05 * u.covariates[0];
        let got = localized_propensity(&gps, &u, 0.7, &k).unwrap();
        assert!((got - gps(0.7, &u)).abs() < 1e-12);
    }

    #[test]
    fn kernels_are_normalized() {
        for kind in [KernelKind::Gaussian, KernelKind::Box] {
            let k = KernelSpec::new(kind, 0.3).unwrap();
            let w = k.half_width();
            let m = adaptive_trapezoid(|u| k.eval(u), -w, w, 1e-10).unwrap();
            assert!((m - 1.0).abs() < 1e-8, "{kind:?} {m}");
            assert_eq!(k.eval(0.2), k.eval(-0.2));
        }
    }
}
