//! Independent reference computations for the statistical building blocks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use batchcause_core::campaign::{Campaign, CampaignConfig, SimulationOracle};
use batchcause_core::crossfit::{assign, fit_folded, Stage};
use batchcause_core::data::{read_dataset, write_dataset, Arm, BudgetSpec, ColumnSchema, Dataset, TreatmentMode, Unit};
use batchcause_core::design::{localized_propensity, relative_efficiency, DiscreteInstance, KernelKind, KernelSpec, SupportPoint};
use batchcause_core::estimator::{estimate_ate, EstimatorKind, EstimatorOptions, Shared};
use batchcause_core::nuisance::{
    fit_nuisance_set, fit_outcome_models, fit_propensity, fit_rz_score, fit_variance_models, ridge, ClassifierSpec,
    FnNuisances, Nuisances, NuisanceSpecs, RegressorSpec,
};
use batchcause_core::sim::{budget_saved, generate, run_trials, DgpSpec, Method, TrialPlan};

fn revealed(dgp: &DgpSpec) -> Dataset {
    let sim = generate(dgp).unwrap();
    sim.sealed.reveal_all(&sim.dataset)
}

fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn simulator_shape() {
    let sim = generate(&DgpSpec { n: 1000, seed: 1, ..DgpSpec::default() }).unwrap();
    assert_eq!(sim.dataset.dim(), 5);
    assert!(sim.dataset.units().iter().all(|u| u.treatment == 0.0 || u.treatment == 1.0));
}

#[test]
fn csv_round_trip_is_exact() {
    let ds = revealed(&DgpSpec { n: 1000, seed: 2, ..DgpSpec::default() });
    let mut buf = Vec::new();
    write_dataset(&ds, &mut buf).unwrap();
    let back = read_dataset(buf.as_slice(), &ColumnSchema::default()).unwrap();
    let mut again = Vec::new();
    write_dataset(&back, &mut again).unwrap();
    assert_eq!(buf, again);
    assert_eq!(ds, back);
}

#[test]
fn ridge_matches_least_squares_on_control_arm() {
    let ds = revealed(&DgpSpec { n: 5000, seed: 3, ..DgpSpec::default() });
    let ctrl: Vec<&Unit> = ds.units().iter().filter(|u| u.is_arm(Arm::Control)).take(2000).collect();
    assert_eq!(ctrl.len(), 2000);
    let xs: Vec<Vec<f64>> = ctrl.iter().map(|u| u.covariates.clone()).collect();
    let ys: Vec<f64> = ctrl.iter().map(|u| u.outcome().unwrap()).collect();
    let m = ridge::fit(&xs, &ys, 1e-6).unwrap();

    // Normal equations with an explicit intercept column.
    let n = xs.len();
    let design = DMatrix::from_fn(n, 6, |i, j| if j == 0 { 1.0 } else { xs[i][j - 1] });
    let beta = (design.transpose() * &design).lu().solve(&(design.transpose() * DVector::from_vec(ys))).unwrap();
    let fitted: Vec<f64> = std::iter::once(m.intercept).chain(m.coefficients.iter().copied()).collect();
    let truth = [5.0, 1.0, -2.0, 0.0, 0.0, 0.0];
    for j in 0..6 {
        assert!((fitted[j] - beta[j]).abs() < 1e-6, "coef {j}: {} vs {}", fitted[j], beta[j]);
        assert!((fitted[j] - truth[j]).abs() < 0.1, "coef {j}: {}", fitted[j]);
    }
}

#[test]
fn outcome_and_variance_fits_track_the_truth() {
    let dgp = DgpSpec { n: 4000, seed: 4, ..DgpSpec::default() };
    let ds = revealed(&dgp);
    let spec = RegressorSpec::Ridge { lambda: 1.0 };
    let mu = fit_outcome_models(&ds, &spec, false, 1).unwrap();
    let ctrl: Vec<&Unit> = ds.units().iter().filter(|u| u.is_arm(Arm::Control)).collect();
    let mse: f64 = ctrl.iter().map(|u| (mu[0].predict(u) - dgp.control_mean(&u.covariates)).powi(2)).sum::<f64>()
        / ctrl.len() as f64;
    let y0: Vec<f64> = ctrl.iter().map(|u| u.outcome().unwrap()).collect();
    let m0 = y0.iter().sum::<f64>() / y0.len() as f64;
    let var_y0 = y0.iter().map(|y| (y - m0).powi(2)).sum::<f64>() / (y0.len() - 1) as f64;
    assert!(mse < var_y0, "{mse} vs {var_y0}");

    // A learner that can bend picks up the cosine in the control variance.
    let forest = RegressorSpec::Forest(Default::default());
    let s2 = fit_variance_models(&ds, &mu, &forest, 1e-3, 2).unwrap();
    let fitted: Vec<f64> = ctrl.iter().map(|u| s2[0].predict(u)).collect();
    let truth: Vec<f64> = ctrl.iter().map(|u| 3.5 + 0.3 * u.covariates[2].cos()).collect();
    assert!(corr(&fitted, &truth) > 0.0);
}

#[test]
fn homoskedastic_variance_is_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let units: Vec<Unit> = (0..20000)
        .map(|i| {
            let x: f64 = rng.random_range(-1.0..1.0);
            let z = (i % 2) as f64;
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            Unit::new(i, vec![x], z, Some(1.0 + x + 2.0 * e))
        })
        .collect();
    let ds = Dataset::new(units, TreatmentMode::Binary).unwrap();
    let spec = RegressorSpec::Ridge { lambda: 1.0 };
    let mu = fit_outcome_models(&ds, &spec, false, 0).unwrap();
    let s2 = fit_variance_models(&ds, &mu, &spec, 1e-3, 0).unwrap();
    for u in ds.units().iter().take(50) {
        for arm in Arm::BOTH {
            assert!((s2[arm.index()].predict(u) - 4.0).abs() < 0.5, "{}", s2[arm.index()].predict(u));
        }
    }
}

#[test]
fn logistic_propensity_recovers_generating_coefficients() {
    let ds = generate(&DgpSpec { n: 5000, seed: 6, ..DgpSpec::default() }).unwrap().dataset;
    let m = fit_propensity(&ds, &ClassifierSpec::default(), 0).unwrap();
    let params = &m.classifier.logistic().unwrap().params;
    // logit P(Z = 1) = −0.5 − x2 − x3.
    assert!((params[2] + 1.0).abs() < 0.2 && (params[3] + 1.0).abs() < 0.2, "{params:?}");
    assert!(ds.units().iter().all(|u| {
        let e = m.treated(u);
        e > 0.0 && e < 1.0
    }));
}

#[test]
fn joint_score_is_product_of_independent_marginals() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let units: Vec<Unit> = (0..20000)
        .map(|i| {
            let x: f64 = rng.random_range(-1.0..1.0);
            let z = rng.random_bool(0.5) as u8 as f64;
            let y = rng.random_bool(0.3).then_some(x);
            Unit::new(i, vec![x], z, y)
        })
        .collect();
    let ds = Dataset::new(units, TreatmentMode::Binary).unwrap();
    let q = fit_rz_score(&ds, &ClassifierSpec::default(), 0).unwrap();
    for u in ds.units().iter().take(20) {
        for arm in Arm::BOTH {
            assert!((q.score(arm, u) - 0.15).abs() < 0.02);
        }
    }
}

#[test]
fn per_arm_optimum_matches_grid_search() {
    // Two covariate values; per arm the budget fixes π(b) given π(a).
    let inst = DiscreteInstance {
        points: vec![
            SupportPoint { weight: 0.4, sigma2: [3.0, 0.5], treated_propensity: 0.3 },
            SupportPoint { weight: 0.6, sigma2: [1.0, 2.5], treated_propensity: 0.7 },
        ],
    };
    let budgets = [0.25, 0.4];
    let closed = inst.optimal_pi_per_arm(budgets[0], budgets[1], 0.0).unwrap();
    for arm in Arm::BOTH {
        let k = arm.index();
        let mass: Vec<f64> = inst.points.iter().map(|p| p.weight * p.propensity(arm)).collect();
        let total: f64 = mass.iter().sum();
        let term = |pa: f64, pb: f64| {
            inst.points[0].weight * inst.points[0].sigma2[k] / (inst.points[0].propensity(arm) * pa)
                + inst.points[1].weight * inst.points[1].sigma2[k] / (inst.points[1].propensity(arm) * pb)
        };
        let mut best = f64::INFINITY;
        let steps = 200_000;
        for i in 1..steps {
            let pa = i as f64 / steps as f64;
            let pb = (budgets[k] * total - mass[0] * pa) / mass[1];
            if pb > 0.0 && pb <= 1.0 {
                best = best.min(term(pa, pb));
            }
        }
        let got = term(closed[0][k], closed[1][k]);
        assert!((got - best).abs() / best < 1e-6, "arm {k}: {got} vs {best}");
    }
}

#[test]
fn gaussian_kernel_on_exponential_profile() {
    let unit = Unit::new(0, vec![0.0], 0.0, None);
    let (z0, h) = (0.3, 0.4);
    let k = KernelSpec::new(KernelKind::Gaussian, h).unwrap();
    let got = localized_propensity(&|z: f64, _: &Unit| z.exp(), &unit, z0, &k).unwrap();
    let pts = 100_000;
    let (lo, hi) = (z0 - 12.0 * h, z0 + 12.0 * h);
    let dz = (hi - lo) / pts as f64;
    let f = |z: f64| (-0.5 * ((z - z0) / h).powi(2)).exp() / (h * (2.0 * std::f64::consts::PI).sqrt()) * z.exp();
    let trap: f64 = (0..=pts).map(|i| f(lo + i as f64 * dz) * if i == 0 || i == pts { 0.5 } else { 1.0 }).sum::<f64>() * dz;
    assert!((got - trap).abs() < 1e-6, "{got} vs {trap}");
    // Closed form of the same integral.
    assert!((trap - (z0 + 0.5 * h * h).exp()).abs() < 1e-6);
}

#[test]
fn relative_efficiency_falls_as_budget_shrinks() {
    let units: Vec<Unit> = (0..4).map(|i| Unit::new(i, vec![i as f64], (i % 2) as f64, None)).collect();
    let ds = Dataset::new(units, TreatmentMode::Binary).unwrap();
    let nuis = FnNuisances::new(
        |a, u: &Unit| if a == Arm::Treated { u.covariates[0] } else { 0.0 },
        |a, u: &Unit| if a == Arm::Treated { 4.0 + u.covariates[0] } else { 1.0 },
        |a, _: &Unit| if a == Arm::Treated { 0.4 } else { 0.6 },
    );
    let vals: Vec<f64> = [0.5, 0.2, 0.05].iter().map(|&b| relative_efficiency(&ds, &nuis, 1.5, b).unwrap()).collect();
    assert!(vals[0] > vals[1] && vals[1] > vals[2], "{vals:?}");
}

#[test]
fn folded_outcome_model_is_close_to_full_fit() {
    let ds = revealed(&DgpSpec { n: 2000, seed: 8, ..DgpSpec::default() });
    let specs = NuisanceSpecs::default();
    let full = fit_nuisance_set(&ds, &specs, false, 0).unwrap();
    let a = assign(ds.len(), 5, 0.55, 1).unwrap();
    let folded = fit_folded(&ds, &a, Stage::Final, &specs, 0).unwrap();
    let mut worst: f64 = 0.0;
    for (i, u) in ds.units().iter().enumerate() {
        for arm in Arm::BOTH {
            worst = worst.max((folded.for_unit(i).mu(arm, u) - full.mu(arm, u)).abs());
        }
    }
    assert!(worst < 0.5, "{worst}");
}

#[test]
fn batch1_request_count_is_binomial() {
    let ds = revealed(&DgpSpec { n: 1000, seed: 9, ..DgpSpec::default() });
    let runs = 200;
    let mut total = 0usize;
    for s in 0..runs {
        let mut oracle = SimulationOracle::from_dataset(&ds);
        let config = CampaignConfig { budget: BudgetSpec::Global { budget: 0.3 }, seed: s, ..CampaignConfig::default() };
        let mut c = Campaign::init(&ds, config, None).unwrap();
        c.request_batch1(&mut oracle).unwrap();
        assert_eq!(c.state().assignment.batch_members(1).len(), 550);
        total += c.state().batch1_requests.len();
    }
    let mean = total as f64 / runs as f64;
    // Binomial(550, 0.3): mean 165, sd of the mean over 200 runs ≈ 0.76.
    assert!((mean - 165.0).abs() < 4.0 * (550.0 * 0.21 / runs as f64).sqrt(), "{mean}");
}

#[test]
fn noisier_arm_gets_larger_probabilities() {
    // Treated outcomes carry both noise terms, so arm 1 is the noisier arm.
    let dgp = DgpSpec { n: 2000, seed: 10, ..DgpSpec::default() };
    let ds = revealed(&dgp);
    let oracle = dgp.oracle_nuisances();
    let u0 = &ds.units()[0];
    assert!(oracle.sigma2(Arm::Treated, u0) > oracle.sigma2(Arm::Control, u0));

    let mut c = Campaign::init(&ds, CampaignConfig { seed: 3, ..CampaignConfig::default() }, None).unwrap();
    let mut so = SimulationOracle::from_dataset(&ds);
    c.request_batch1(&mut so).unwrap();
    c.ingest_batch1(&mut so).unwrap();
    c.plan().unwrap();
    let plan = c.state().plan.as_ref().unwrap();
    // At matched x: the same unit's π* under each arm, using the planning nuisances' shape.
    let mut ratio_sum = 0.0;
    for u in ds.units() {
        ratio_sum += (oracle.sigma2(Arm::Treated, u).sqrt() / oracle.propensity(Arm::Treated, u))
            / (oracle.sigma2(Arm::Control, u).sqrt() / oracle.propensity(Arm::Control, u));
    }
    assert!(ratio_sum / ds.len() as f64 > 1.0);
    let arm_mean = |arm: Arm| {
        let v: Vec<f64> = ds.units().iter().zip(&plan.pi_star).filter(|(u, _)| u.is_arm(arm)).map(|(_, &p)| p).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(arm_mean(Arm::Treated) > arm_mean(Arm::Control));
}

#[test]
fn oracle_aipw_recovers_the_effect_at_large_n() {
    let dgp = DgpSpec { n: 100_000, seed: 11, ..DgpSpec::default() };
    let ds = revealed(&dgp);
    let rep = estimate_ate(
        &ds,
        &Shared(dgp.oracle_nuisances()),
        &vec![1.0; ds.len()],
        EstimatorKind::Aipw,
        &EstimatorOptions::default(),
    )
    .unwrap();
    assert!((rep.tau_hat - 3.0).abs() < 0.05, "{}", rep.tau_hat);
}

#[test]
fn sample_effect_at_a_million_units() {
    let sim = generate(&DgpSpec { n: 1_000_000, seed: 12, ..DgpSpec::default() }).unwrap();
    assert!((sim.sealed.sample_effect() - 3.0).abs() < 0.02);
}

#[test]
fn aipw_is_doubly_robust() {
    let dgp = DgpSpec { n: 40_000, seed: 13, ..DgpSpec::default() };
    let ds = revealed(&dgp);
    let truth = dgp.oracle_nuisances();
    let ones = vec![1.0; ds.len()];
    let opts = EstimatorOptions::default();
    // Correct outcome model, wrong propensity.
    let bad_e = FnNuisances::new(
        |a, u: &Unit| truth.mu(a, u),
        |a, u: &Unit| truth.sigma2(a, u),
        |a, _: &Unit| if a == Arm::Treated { 0.7 } else { 0.3 },
    );
    // Wrong outcome model, correct propensity.
    let bad_mu = FnNuisances::new(
        |a, u: &Unit| if a == Arm::Treated { 1.0 } else { u.covariates[0] },
        |a, u: &Unit| truth.sigma2(a, u),
        |a, u: &Unit| truth.propensity(a, u),
    );
    for nuis in [bad_e, bad_mu] {
        let r = estimate_ate(&ds, &Shared(nuis), &ones, EstimatorKind::Aipw, &opts).unwrap();
        assert!((r.tau_hat - 3.0).abs() < 4.0 * r.std_error.max(0.02), "{} ± {}", r.tau_hat, r.std_error);
    }
}

#[test]
fn adaptive_design_saves_budget() {
    let plan = TrialPlan {
        budgets: vec![0.1, 0.2, 0.3, 0.4],
        methods: vec![Method::AdaptiveAipw, Method::Uniform],
        trials: 20,
        holdout_fraction: 0.0,
        seed: 55,
    };
    let m = run_trials(&plan, &DgpSpec::default(), &CampaignConfig::default()).unwrap();
    let savings = budget_saved(&m, Method::AdaptiveAipw).unwrap();
    for s in savings.iter().filter(|s| s.budget <= 0.3) {
        assert!(s.saving > 0.0, "{s:?}");
    }
}

