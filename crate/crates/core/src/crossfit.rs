//! Two-batch, K-fold assignment and out-of-fold nuisance fits.
//!
//! Every unit belongs to exactly one (batch, fold) cell. The model used to
//! score unit i is trained on the complement of i's fold, so no unit is ever
//! scored by a model that saw it.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Arm, Dataset};
use crate::error::{Error, Result};
use crate::nuisance::{fit_nuisance_set, NuisanceSet, NuisanceSpecs, Nuisances};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchFoldAssignment {
    /// 1 or 2 per unit, in dataset order.
    pub batch: Vec<u8>,
    /// Zero-based fold per unit.
    pub fold: Vec<usize>,
    pub kappa: f64,
    pub folds: usize,
    pub seed: u64,
}

fn check_shape(n: usize, folds: usize, kappa: f64) -> Result<usize> {
    if folds < 1 {
        return Err(Error::Config("need at least one fold".into()));
    }
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(Error::Config(format!("batch-1 share must lie in (0, 1), got {kappa}")));
    }
    if n < 2 * folds {
        return Err(Error::Config(format!("{n} units cannot fill {folds} folds in each of two batches")));
    }
    let n1 = (kappa * n as f64).round() as usize;
    if n1 < folds || n - n1 < folds {
        return Err(Error::Config(format!(
            "batch sizes {n1} and {} cannot each fill {folds} folds",
            n - n1
        )));
    }
    Ok(n1)
}

/// Shuffles the units, puts the first `round(κ n)` in batch 1 and deals
/// folds round-robin within each batch.
pub fn assign(n: usize, folds: usize, kappa: f64, seed: u64) -> Result<BatchFoldAssignment> {
    let n1 = check_shape(n, folds, kappa)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "assign", 0));
    let mut batch = vec![0u8; n];
    let mut fold = vec![0usize; n];
    for (pos, &i) in order.iter().enumerate() {
        if pos < n1 {
            batch[i] = 1;
            fold[i] = pos % folds;
        } else {
            batch[i] = 2;
            fold[i] = (pos - n1) % folds;
        }
    }
    Ok(BatchFoldAssignment { batch, fold, kappa, folds, seed })
}

/// Like [`assign`], but balances treatment arms across batches and folds.
pub fn assign_stratified(arms: &[Arm], folds: usize, kappa: f64, seed: u64) -> Result<BatchFoldAssignment> {
    let n = arms.len();
    check_shape(n, folds, kappa)?;
    let mut rng = rng::stream(seed, "assign-stratified", 0);
    let mut order = Vec::with_capacity(n);
    for arm in Arm::BOTH {
        let mut members: Vec<usize> = (0..n).filter(|&i| arms[i] == arm).collect();
        members.shuffle(&mut rng);
        order.extend(members);
    }
    // Systematic selection along the arm-sorted order: exactly round(κ n)
    // units land in batch 1, spread evenly over both arms.
    let mut batch = vec![0u8; n];
    let mut fold = vec![0usize; n];
    let (mut c1, mut c2) = (0usize, 0usize);
    for (pos, &i) in order.iter().enumerate() {
        let take = ((pos + 1) as f64 * kappa + 0.5).floor() > (pos as f64 * kappa + 0.5).floor();
        if take {
            batch[i] = 1;
            fold[i] = c1 % folds;
            c1 += 1;
        } else {
            batch[i] = 2;
            fold[i] = c2 % folds;
            c2 += 1;
        }
    }
    Ok(BatchFoldAssignment { batch, fold, kappa, folds, seed })
}

impl BatchFoldAssignment {
    pub fn len(&self) -> usize {
        self.batch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch.is_empty()
    }

    pub fn members(&self, batch: u8, fold: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.batch[i] == batch && self.fold[i] == fold).collect()
    }

    pub fn batch_members(&self, batch: u8) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.batch[i] == batch).collect()
    }

    /// CSV with columns `id, batch, fold` (fold numbered from 1).
    pub fn write_csv<W: Write>(&self, ds: &Dataset, writer: W) -> Result<()> {
        if ds.len() != self.len() {
            return Err(Error::Data("assignment and dataset sizes differ".into()));
        }
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["id", "batch", "fold"])?;
        for (i, u) in ds.units().iter().enumerate() {
            wtr.write_record([u.id.to_string(), self.batch[i].to_string(), (self.fold[i] + 1).to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn save<P: AsRef<Path>>(&self, ds: &Dataset, path: P) -> Result<()> {
        self.write_csv(ds, std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Batch-1 units only; no joint-score model.
    Planning,
    /// Both batches pooled; includes the joint-score model.
    Final,
}

/// SHA-256 over the sorted training ids.
pub fn fingerprint(ids: &[u64]) -> String {
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    let mut h = Sha256::new();
    for id in sorted {
        h.update(id.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldedNuisances {
    pub stage: Stage,
    /// Model k was trained without fold k.
    pub models: Vec<NuisanceSet>,
    pub fold_of: Vec<usize>,
    /// Training ids for each fold's model.
    pub training_ids: Vec<Vec<u64>>,
    pub fingerprints: Vec<String>,
}

impl FoldedNuisances {
    /// The out-of-fold model for the unit at dataset position `i`.
    pub fn for_unit(&self, i: usize) -> &NuisanceSet {
        &self.models[self.fold_of[i]]
    }

    pub fn folds(&self) -> usize {
        self.models.len()
    }

    /// Per-unit view: `mu(arm, i)` etc. evaluated with the unit's out-of-fold model.
    pub fn mu(&self, ds: &Dataset, arm: Arm, i: usize) -> f64 {
        self.for_unit(i).mu(arm, &ds.units()[i])
    }

    pub fn sigma2(&self, ds: &Dataset, arm: Arm, i: usize) -> f64 {
        self.for_unit(i).sigma2(arm, &ds.units()[i])
    }

    pub fn propensity(&self, ds: &Dataset, arm: Arm, i: usize) -> f64 {
        self.for_unit(i).propensity(arm, &ds.units()[i])
    }
}

/// Fits one nuisance set per fold on the complement of that fold.
///
/// The planning stage restricts training to batch 1; the final stage pools
/// both batches. Outcome and variance models use annotated training units;
/// propensity and joint-score models use all of them.
pub fn fit_folded(
    ds: &Dataset,
    assignment: &BatchFoldAssignment,
    stage: Stage,
    specs: &NuisanceSpecs,
    seed: u64,
) -> Result<FoldedNuisances> {
    if ds.len() != assignment.len() {
        return Err(Error::Data("assignment and dataset sizes differ".into()));
    }
    let fits: Vec<(NuisanceSet, Vec<u64>)> = (0..assignment.folds)
        .into_par_iter()
        .map(|k| {
            let train: Vec<usize> = (0..ds.len())
                .filter(|&i| assignment.fold[i] != k && (stage == Stage::Final || assignment.batch[i] == 1))
                .collect();
            let subset = ds.subset(&train);
            let fold_seed = rng::derive_seed(seed, "fold-fit", k as u64);
            let set = fit_nuisance_set(&subset, specs, stage == Stage::Final, fold_seed).map_err(|e| match e {
                Error::EmptyArm { arm } => {
                    Error::Data(format!("training complement of fold {} has no annotated units in arm {arm}", k + 1))
                }
                other => other,
            })?;
            Ok((set, subset.units().iter().map(|u| u.id).collect()))
        })
        .collect::<Result<_>>()?;
    let (models, training_ids): (Vec<_>, Vec<_>) = fits.into_iter().unzip();
    let fingerprints = training_ids.iter().map(|ids: &Vec<u64>| fingerprint(ids)).collect();
    Ok(FoldedNuisances { stage, models, fold_of: assignment.fold.clone(), training_ids, fingerprints })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{TreatmentMode, Unit};

    #[test]
    fn assignment_sizes() {
        let a = assign(100, 5, 0.55, 1).unwrap();
        assert_eq!(a.batch_members(1).len(), 55);
        for k in 0..5 {
            assert_eq!(a.members(1, k).len(), 11);
            assert_eq!(a.members(2, k).len(), 9);
        }
        let a = assign(10, 5, 0.5, 2).unwrap();
        for b in [1, 2] {
            for k in 0..5 {
                assert_eq!(a.members(b, k).len(), 1);
            }
        }
    }

    #[test]
    fn assignment_is_deterministic() {
        assert_eq!(assign(57, 3, 0.4, 9).unwrap(), assign(57, 3, 0.4, 9).unwrap());
        assert_ne!(assign(57, 3, 0.4, 9).unwrap(), assign(57, 3, 0.4, 10).unwrap());
    }

    #[test]
    fn too_few_units_is_error() {
        assert!(assign(9, 5, 0.5, 0).is_err());
        assert!(assign(12, 5, 0.9, 0).is_err());
    }

    #[test]
    fn stratified_balances_arms() {
        let arms: Vec<Arm> = (0..100).map(|i| if i < 30 { Arm::Treated } else { Arm::Control }).collect();
        let a = assign_stratified(&arms, 5, 0.5, 4).unwrap();
        assert_eq!(a.batch_members(1).len(), 50);
        let treated_b1 = a.batch_members(1).iter().filter(|&&i| arms[i] == Arm::Treated).count();
        assert_eq!(treated_b1, 15);
    }

    fn constant_dataset(n: usize) -> Dataset {
        let units = (0..n)
            .map(|i| Unit::new(i as u64, vec![(i as f64 * 0.7).sin()], (i % 2) as f64, Some(4.0)))
            .collect();
        Dataset::new(units, TreatmentMode::Binary).unwrap()
    }

    #[test]
    fn folded_models_exclude_their_fold() {
        let ds = constant_dataset(60);
        let a = assign(60, 2, 0.5, 3).unwrap();
        let f = fit_folded(&ds, &a, Stage::Planning, &NuisanceSpecs::default(), 5).unwrap();
        for i in 0..ds.len() {
            let id = ds.units()[i].id;
            assert!(!f.training_ids[a.fold[i]].contains(&id));
            for arm in Arm::BOTH {
                assert!((f.mu(&ds, arm, i) - 4.0).abs() < 1e-9);
            }
        }
        for ids in &f.training_ids {
            assert!(ids.iter().all(|&id| a.batch[id as usize] == 1));
        }
        assert_eq!(f.fingerprints[0], fingerprint(&f.training_ids[0]));
    }

    #[test]
    fn final_stage_pools_batches() {
        let ds = constant_dataset(60);
        let a = assign(60, 3, 0.5, 3).unwrap();
        let f = fit_folded(&ds, &a, Stage::Final, &NuisanceSpecs::default(), 5).unwrap();
        assert_eq!(f.training_ids[0].len(), 40);
        assert!(f.models[0].joint.is_some());
    }

    #[test]
    fn missing_labels_in_a_fold_complement_is_error() {
        let units = (0..20)
            .map(|i| Unit::new(i as u64, vec![i as f64], (i % 2) as f64, if i % 2 == 0 { Some(1.0) } else { None }))
            .collect();
        let ds = Dataset::new(units, TreatmentMode::Binary).unwrap();
        let a = assign(20, 2, 0.5, 1).unwrap();
        assert!(matches!(fit_folded(&ds, &a, Stage::Final, &NuisanceSpecs::default(), 0), Err(Error::Data(_))));
    }
}
