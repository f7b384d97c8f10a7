//! Cross-fitted AIPW with designed missingness in the outcome.
//!
//! Per-unit score for arm z:
//! `ψ_z = 1[Z=z] R (Y − μ_z) / (e_z π) + μ_z`. The estimate is the mean of
//! `ψ₁ − ψ₀`, its variance the sample variance of the same contributions.

use serde::{Deserialize, Serialize};

use crate::crossfit::FoldedNuisances;
use crate::data::{Arm, Dataset, Unit};
use crate::error::{Error, Result};
use crate::nuisance::Nuisances;
use crate::stats::{mean, variance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Aipw,
    RzPlugin,
    ExternalWeights,
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EstimatorKind::Aipw => "aipw",
            EstimatorKind::RzPlugin => "rz-plugin",
            EstimatorKind::ExternalWeights => "external-weights",
        })
    }
}

/// Two-sided standard normal quantile `z_{α/2}` for the supported levels.
pub fn normal_quantile(alpha: f64) -> Result<f64> {
    const TABLE: [(f64, f64); 6] = [
        (0.001, 3.2905267314919255),
        (0.01, 2.5758293035489004),
        (0.02, 2.3263478740408408),
        (0.05, 1.959963984540054),
        (0.1, 1.6448536269514722),
        (0.2, 1.2815515655446004),
    ];
    TABLE
        .iter()
        .find(|(a, _)| (a - alpha).abs() < 1e-12)
        .map(|&(_, z)| z)
        .ok_or_else(|| Error::Config(format!("unsupported alpha {alpha}; use one of 0.001, 0.01, 0.02, 0.05, 0.1, 0.2")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorOptions {
    pub alpha: f64,
    /// Cap on the inverse weight `1 / (e π)` (or the supplied weight).
    pub weight_cap: Option<f64>,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        EstimatorOptions { alpha: 0.05, weight_cap: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClipEvents {
    pub weight_capped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub kind: EstimatorKind,
    pub tau_hat: f64,
    pub variance_hat: f64,
    pub std_error: f64,
    pub ci: (f64, f64),
    pub alpha: f64,
    pub n: usize,
    /// Annotated units per arm, indexed by [`Arm::index`].
    pub n_effective: [usize; 2],
    /// Means of ψ₀ and ψ₁.
    pub arm_means: [f64; 2],
    pub clip_events: ClipEvents,
}

impl EstimateReport {
    pub fn ci_width(&self) -> f64 {
        self.ci.1 - self.ci.0
    }

    pub fn covers(&self, tau: f64) -> bool {
        self.ci.0 <= tau && tau <= self.ci.1
    }
}

/// Nuisances to use for the unit at a given dataset position.
pub trait UnitNuisances: Sync {
    fn at(&self, i: usize) -> &dyn Nuisances;
}

impl UnitNuisances for FoldedNuisances {
    fn at(&self, i: usize) -> &dyn Nuisances {
        self.for_unit(i)
    }
}

/// One nuisance set shared by every unit (e.g. known population functions).
pub struct Shared<N>(pub N);

impl<N: Nuisances> UnitNuisances for Shared<N> {
    fn at(&self, _i: usize) -> &dyn Nuisances {
        &self.0
    }
}

fn residual(unit: &Unit, mu: f64) -> f64 {
    // annotated() guarantees the outcome is present.
    unit.outcome().map_or(0.0, |y| y - mu)
}

fn weighted(weight: f64, cap: Option<f64>, events: &mut ClipEvents) -> f64 {
    match cap {
        Some(c) if weight > c => {
            events.weight_capped += 1;
            c
        }
        _ => weight,
    }
}

/// `1[Z=z] R (Y − μ_z) / (e_z π) + μ_z`; `pi` is the unit's own annotation
/// probability.
pub fn aipw_score(unit: &Unit, nuis: &dyn Nuisances, pi: f64, arm: Arm) -> Result<f64> {
    aipw_score_capped(unit, nuis, pi, arm, None, &mut ClipEvents::default())
}

fn aipw_score_capped(
    unit: &Unit,
    nuis: &dyn Nuisances,
    pi: f64,
    arm: Arm,
    cap: Option<f64>,
    events: &mut ClipEvents,
) -> Result<f64> {
    if !(pi > 0.0 && pi <= 1.0) {
        return Err(Error::Numerical(format!("annotation probability {pi} for unit {} outside (0, 1]", unit.id)));
    }
    let mu = nuis.mu(arm, unit);
    if !(unit.is_arm(arm) && unit.annotated()) {
        return Ok(mu);
    }
    let e = nuis.propensity(arm, unit);
    if !(e > 0.0) {
        return Err(Error::Numerical(format!("propensity {e} for unit {}", unit.id)));
    }
    Ok(weighted(1.0 / (e * pi), cap, events) * residual(unit, mu) + mu)
}

/// `1[Z=z, R=1] (Y − μ_z) / q_z + μ_z` with `q_z = P(Z=z, R=1 | x)`.
pub fn rz_score(unit: &Unit, nuis: &dyn Nuisances, arm: Arm) -> Result<f64> {
    rz_score_capped(unit, nuis, arm, None, &mut ClipEvents::default())
}

fn rz_score_capped(unit: &Unit, nuis: &dyn Nuisances, arm: Arm, cap: Option<f64>, events: &mut ClipEvents) -> Result<f64> {
    let mu = nuis.mu(arm, unit);
    if !(unit.is_arm(arm) && unit.annotated()) {
        return Ok(mu);
    }
    let q = nuis
        .joint_score(arm, unit)
        .ok_or_else(|| Error::Config("joint-score estimator needs a fitted joint-score model".into()))?;
    if !(q > 0.0) {
        return Err(Error::Numerical(format!("joint score {q} for unit {}", unit.id)));
    }
    Ok(weighted(1.0 / q, cap, events) * residual(unit, mu) + mu)
}

fn external_score(unit: &Unit, nuis: &dyn Nuisances, weight: f64, arm: Arm, cap: Option<f64>, events: &mut ClipEvents) -> f64 {
    let mu = nuis.mu(arm, unit);
    if !(unit.is_arm(arm) && unit.annotated()) {
        return mu;
    }
    weighted(weight, cap, events) * residual(unit, mu) + mu
}

fn assemble(ds: &Dataset, kind: EstimatorKind, scores: &[[f64; 2]], opts: &EstimatorOptions, events: ClipEvents) -> Result<EstimateReport> {
    let z = normal_quantile(opts.alpha)?;
    let n = scores.len();
    if n < 2 {
        return Err(Error::Data("estimation needs at least two units".into()));
    }
    let diffs: Vec<f64> = scores.iter().map(|s| s[1] - s[0]).collect();
    let tau_hat = mean(&diffs);
    let variance_hat = variance(&diffs, 1);
    let std_error = (variance_hat / n as f64).sqrt();
    let half = z * std_error;
    let arm_means = [
        mean(&scores.iter().map(|s| s[0]).collect::<Vec<_>>()),
        mean(&scores.iter().map(|s| s[1]).collect::<Vec<_>>()),
    ];
    Ok(EstimateReport {
        kind,
        tau_hat,
        variance_hat,
        std_error,
        ci: (tau_hat - half, tau_hat + half),
        alpha: opts.alpha,
        n,
        n_effective: [ds.annotated_count(Arm::Control), ds.annotated_count(Arm::Treated)],
        arm_means,
        clip_events: events,
    })
}

fn check_annotated(ds: &Dataset) -> Result<()> {
    for arm in Arm::BOTH {
        if ds.annotated_count(arm) == 0 {
            return Err(Error::EmptyArm { arm: arm.index() as u8 });
        }
    }
    Ok(())
}

/// AIPW or joint-score plug-in estimate. `pi[i]` is unit i's annotation
/// probability (ignored by the plug-in).
pub fn estimate_ate(
    ds: &Dataset,
    nuis: &dyn UnitNuisances,
    pi: &[f64],
    kind: EstimatorKind,
    opts: &EstimatorOptions,
) -> Result<EstimateReport> {
    check_annotated(ds)?;
    if kind == EstimatorKind::ExternalWeights {
        return Err(Error::Config("external weights go through estimate_with_external_weights".into()));
    }
    if pi.len() != ds.len() {
        return Err(Error::Data(format!("{} annotation probabilities for {} units", pi.len(), ds.len())));
    }
    let mut events = ClipEvents::default();
    let mut scores = Vec::with_capacity(ds.len());
    for (i, u) in ds.units().iter().enumerate() {
        let n = nuis.at(i);
        let mut s = [0.0; 2];
        for arm in Arm::BOTH {
            s[arm.index()] = match kind {
                EstimatorKind::Aipw => aipw_score_capped(u, n, pi[i], arm, opts.weight_cap, &mut events)?,
                _ => rz_score_capped(u, n, arm, opts.weight_cap, &mut events)?,
            };
        }
        scores.push(s);
    }
    assemble(ds, kind, &scores, opts, events)
}

/// AIPW with a supplied per-unit weight in place of `1 / (e π)`.
pub fn estimate_with_external_weights(
    ds: &Dataset,
    nuis: &dyn UnitNuisances,
    weights: &[f64],
    opts: &EstimatorOptions,
) -> Result<EstimateReport> {
    check_annotated(ds)?;
    if weights.len() != ds.len() {
        return Err(Error::Data(format!("{} weights for {} units", weights.len(), ds.len())));
    }
    if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::Data(format!("weight {w} for unit {} must be finite and non-negative", ds.units()[i].id)));
    }
    let mut events = ClipEvents::default();
    let scores: Vec<[f64; 2]> = ds
        .units()
        .iter()
        .enumerate()
        .map(|(i, u)| Arm::BOTH.map(|arm| external_score(u, nuis.at(i), weights[i], arm, opts.weight_cap, &mut events)))
        .collect();
    assemble(ds, EstimatorKind::ExternalWeights, &scores, opts, events)
}

/// Reads `id, weight` and aligns it with the dataset order.
pub fn read_weights<R: std::io::Read>(ds: &Dataset, reader: R) -> Result<Vec<f64>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| Error::Data(format!("weights lack `{name}` column")));
    let (id_pos, w_pos) = (col("id")?, col("weight")?);
    let mut map = std::collections::HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::MalformedRow { row, message: e.to_string() })?;
        let id = rec[id_pos].trim().parse::<u64>().map_err(|_| Error::MalformedRow { row, message: "bad id".into() })?;
        let w = rec[w_pos].trim().parse::<f64>().map_err(|_| Error::MalformedRow { row, message: "bad weight".into() })?;
        map.insert(id, w);
    }
    ds.units()
        .iter()
        .map(|u| map.get(&u.id).copied().ok_or_else(|| Error::Data(format!("no weight for unit {}", u.id))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TreatmentMode;
    use crate::nuisance::FnNuisances;

    fn nuis(mu1: f64, mu0: f64, e1: f64) -> FnNuisances<'static> {
        FnNuisances::new(
            move |a, _| if a == Arm::Treated { mu1 } else { mu0 },
            |_, _| 1.0,
            move |a, _| if a == Arm::Treated { e1 } else { 1.0 - e1 },
        )
    }

    #[test]
    fn hand_computed_scores() {
        let u = Unit::new(0, vec![0.0], 1.0, Some(3.0));
        assert!((aipw_score(&u, &nuis(1.0, 0.0, 0.5), 0.5, Arm::Treated).unwrap() - 9.0).abs() < 1e-12);
        assert_eq!(aipw_score(&u, &nuis(1.0, 0.0, 0.5), 0.5, Arm::Control).unwrap(), 0.0);
        let u = Unit::new(0, vec![0.0], 1.0, Some(3.0));
        assert_eq!(aipw_score(&u, &nuis(3.0, 0.0, 0.5), 0.5, Arm::Treated).unwrap(), 3.0);
        let u = Unit::new(0, vec![0.0], 1.0, Some(2.0));
        let n = nuis(0.0, 0.0, 0.5).with_joint(|_, _| 0.25);
        assert!((rz_score(&u, &n, Arm::Treated).unwrap() - 8.0).abs() < 1e-12);
        let u = Unit::new(0, vec![0.0], 1.0, None);
        assert_eq!(rz_score(&u, &nuis(5.0, 0.0, 0.5), Arm::Treated).unwrap(), 5.0);
    }

    #[test]
    fn rz_matches_aipw_when_joint_factorizes() {
        let u = Unit::new(0, vec![0.0], 0.0, Some(-1.5));
        let n = nuis(0.4, 0.7, 0.3).with_joint(|a, _| if a == Arm::Treated { 0.3 * 0.2 } else { 0.7 * 0.2 });
        let a = aipw_score(&u, &n, 0.2, Arm::Control).unwrap();
        let r = rz_score(&u, &n, Arm::Control).unwrap();
        assert!((a - r).abs() < 1e-12);
    }

    #[test]
    fn bad_probability_is_rejected() {
        let u = Unit::new(0, vec![0.0], 1.0, Some(3.0));
        assert!(aipw_score(&u, &nuis(1.0, 0.0, 0.5), 0.0, Arm::Treated).is_err());
    }

    fn four_rows() -> Dataset {
        let units = vec![
            Unit::new(1, vec![0.0], 1.0, Some(4.0)),
            Unit::new(2, vec![0.0], 1.0, None),
            Unit::new(3, vec![0.0], 0.0, Some(1.0)),
            Unit::new(4, vec![0.0], 0.0, Some(3.0)),
        ];
        Dataset::new(units, TreatmentMode::Binary).unwrap()
    }

    #[test]
    fn four_row_fixture() {
        let ds = four_rows();
        let pi = [0.5, 0.5, 0.25, 1.0];
        let r = estimate_ate(&ds, &Shared(nuis(2.0, 1.0, 0.5)), &pi, EstimatorKind::Aipw, &Default::default()).unwrap();
        // ψ₁: 2 + 2/0.25 = 10, 2, 2, 2     ψ₀: 1, 1, 1 + 0 = 1, 1 + 2/0.5 = 5
        let d = [9.0, 1.0, 1.0, -3.0];
        let m = d.iter().sum::<f64>() / 4.0;
        let v = d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 3.0;
        assert_eq!(r.tau_hat, m);
        assert!((r.variance_hat - v).abs() < 1e-12);
        assert!((r.ci_width() - 2.0 * 1.959963984540054 * (v / 4.0).sqrt()).abs() < 1e-12);
        assert_eq!(r.n_effective, [2, 1]);
    }

    #[test]
    fn external_weights_reproduce_aipw_and_reduce_to_outcome_model() {
        let ds = four_rows();
        let pi = [0.5, 0.5, 0.25, 1.0];
        let n = Shared(nuis(2.0, 1.0, 0.5));
        let a = estimate_ate(&ds, &n, &pi, EstimatorKind::Aipw, &Default::default()).unwrap();
        let w: Vec<f64> = pi.iter().map(|p| 1.0 / (0.5 * p)).collect();
        let e = estimate_with_external_weights(&ds, &n, &w, &Default::default()).unwrap();
        assert!((a.tau_hat - e.tau_hat).abs() < 1e-12);
        let z = estimate_with_external_weights(&ds, &n, &[0.0; 4], &Default::default()).unwrap();
        assert_eq!(z.tau_hat, 1.0);
        assert!(estimate_with_external_weights(&ds, &n, &[1.0, -1.0, 1.0, 1.0], &Default::default()).is_err());
    }

    #[test]
    fn constant_outcomes_give_zero() {
        let units = (0..6).map(|i| Unit::new(i, vec![0.0], (i % 2) as f64, Some(2.5))).collect();
        let ds = Dataset::new(units, TreatmentMode::Binary).unwrap();
        let r = estimate_ate(&ds, &Shared(nuis(2.5, 2.5, 0.5)), &[0.7; 6], EstimatorKind::Aipw, &Default::default()).unwrap();
        assert_eq!(r.tau_hat, 0.0);
        assert_eq!(r.variance_hat, 0.0);
    }

    #[test]
    fn weight_cap_is_audited() {
        let ds = four_rows();
        let opts = EstimatorOptions { alpha: 0.05, weight_cap: Some(3.0) };
        let r = estimate_ate(&ds, &Shared(nuis(2.0, 1.0, 0.5)), &[0.5, 0.5, 0.25, 1.0], EstimatorKind::Aipw, &opts).unwrap();
        assert_eq!(r.clip_events.weight_capped, 2);
    }

    #[test]
    fn missing_arm_labels_are_an_error() {
        let units = (0..4).map(|i| Unit::new(i, vec![0.0], (i % 2) as f64, if i % 2 == 0 { Some(1.0) } else { None })).collect();
        let ds = Dataset::new(units, TreatmentMode::Binary).unwrap();
        let r = estimate_ate(&ds, &Shared(nuis(0.0, 0.0, 0.5)), &[1.0; 4], EstimatorKind::Aipw, &Default::default());
        assert!(matches!(r, Err(Error::EmptyArm { arm: 1 })));
    }

    #[test]
    fn unsupported_alpha_is_config_error() {
        assert!(normal_quantile(0.07).is_err());
        assert_eq!(normal_quantile(0.05).unwrap(), 1.959963984540054);
    }
}
