use proptest::prelude::*;

use batchcause_core::campaign::{Campaign, CampaignConfig, CampaignState};
use batchcause_core::crossfit::assign;
use batchcause_core::data::{read_dataset, write_dataset, Arm, BudgetSpec, ColumnSchema, Dataset, TreatmentMode, Unit};
use batchcause_core::design::{
    asymptotic_variance, batch2_probability, optimal_pi_global, optimal_pi_per_arm, relative_efficiency, water_fill,
};
use batchcause_core::nuisance::FnNuisances;
use batchcause_core::sim::{generate, DgpSpec};

fn table(rows: &[(f64, f64, f64, bool)]) -> (Dataset, FnNuisances<'static>) {
    let units: Vec<Unit> =
        rows.iter().enumerate().map(|(i, r)| Unit::new(i as u64, vec![i as f64], r.3 as u8 as f64, None)).collect();
    let ds = Dataset::new(units, TreatmentMode::Binary).unwrap();
    let s: Vec<[f64; 2]> = rows.iter().map(|r| [r.0, r.1]).collect();
    let e: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let nuis = FnNuisances::new(
        |_, _| 0.0,
        move |a, u: &Unit| s[u.id as usize][a.index()],
        move |a, u: &Unit| if a == Arm::Treated { e[u.id as usize] } else { 1.0 - e[u.id as usize] },
    );
    (ds, nuis)
}

fn rows() -> impl Strategy<Value = Vec<(f64, f64, f64, bool)>> {
    prop::collection::vec((0.01f64..10.0, 0.01f64..10.0, 0.05f64..0.95, any::<bool>()), 2..40)
        .prop_filter("both arms", |r| r.iter().any(|x| x.3) && r.iter().any(|x| !x.3))
}

proptest! {
    #[test]
    fn water_fill_respects_total_and_box(
        shapes in prop::collection::vec(0.01f64..50.0, 1..30),
        frac in 0.05f64..1.0,
    ) {
        let w = vec![1.0; shapes.len()];
        let total = frac * shapes.len() as f64;
        let fill = water_fill(&shapes, &w, total, 0.01).unwrap();
        let pi: Vec<f64> = shapes.iter().map(|s| (fill.scale * s).clamp(0.01, 1.0)).collect();
        let spend: f64 = pi.iter().sum();
        prop_assert!(spend <= total * (1.0 + 1e-9));
        prop_assert!(pi.iter().all(|&p| p > 0.0 && p <= 1.0));
    }

    #[test]
    fn emitted_plans_stay_within_budget(r in rows(), b in 0.02f64..1.0, b0 in 0.02f64..1.0, b1 in 0.02f64..1.0) {
        let (ds, nuis) = table(&r);
        let g = optimal_pi_global(&ds, &nuis, b, 0.01).unwrap();
        prop_assert!(g.plan.pi.iter().all(|&p| p > 0.0 && p <= 1.0));
        prop_assert!(g.plan.pi.iter().sum::<f64>() / ds.len() as f64 <= b * (1.0 + 1e-9));
        let p = optimal_pi_per_arm(&ds, &nuis, b0, b1, 0.01).unwrap();
        for (arm, budget) in [(Arm::Control, b0), (Arm::Treated, b1)] {
            let v: Vec<f64> = ds.units().iter().zip(&p.plan.pi).filter(|(u, _)| u.is_arm(arm)).map(|(_, &x)| x).collect();
            prop_assert!(v.iter().sum::<f64>() / v.len() as f64 <= budget * (1.0 + 1e-9));
        }
    }

    #[test]
    fn relative_efficiency_never_exceeds_one(r in rows(), b in 0.01f64..1.0, var_tau in 0.0f64..5.0) {
        let (ds, nuis) = table(&r);
        prop_assert!(relative_efficiency(&ds, &nuis, var_tau, b).unwrap() <= 1.0 + 1e-12);
    }

    #[test]
    fn avar_decreases_when_probabilities_rise(r in rows(), lo in 0.05f64..0.9, bump in 0.01f64..0.1) {
        let (ds, nuis) = table(&r);
        let base = asymptotic_variance(&ds, &nuis, &|_, _| lo).unwrap();
        let higher = asymptotic_variance(&ds, &nuis, &|a, u| if a == Arm::Treated && u.id % 2 == 0 { lo + bump } else { lo }).unwrap();
        let all_higher = asymptotic_variance(&ds, &nuis, &|_, _| lo + bump).unwrap();
        prop_assert!(higher <= base);
        prop_assert!(all_higher < base);
    }

    #[test]
    fn batch_mixture_hits_target_when_feasible(pi_star in 0.0f64..1.0, kappa in 0.05f64..0.95, pi1 in 0.0f64..1.0) {
        let b = batch2_probability(pi_star, kappa, pi1);
        prop_assert!((0.0..=1.0).contains(&b.value));
        if b.feasible {
            prop_assert!((kappa * pi1 + (1.0 - kappa) * b.value - pi_star).abs() < 1e-12);
        }
    }

    #[test]
    fn folds_partition_the_units(n in 10usize..400, k in 1usize..6, kappa in 0.2f64..0.8, seed in any::<u64>()) {
        prop_assume!(n >= 2 * k && ((kappa * n as f64).round() as usize) >= k && n - ((kappa * n as f64).round() as usize) >= k);
        let a = assign(n, k, kappa, seed).unwrap();
        let mut seen = vec![0u8; n];
        for batch in [1u8, 2] {
            let sizes: Vec<usize> = (0..k).map(|f| a.members(batch, f).len()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            for f in 0..k {
                for i in a.members(batch, f) {
                    seen[i] += 1;
                }
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        prop_assert_eq!(a.batch_members(1).len(), (kappa * n as f64).round() as usize);
    }

    #[test]
    fn dataset_csv_round_trip(
        cells in prop::collection::vec((prop::collection::vec(-1e6f64..1e6, 3), any::<bool>(), prop::option::of(-1e9f64..1e9)), 0..30),
    ) {
        let units: Vec<Unit> = cells.iter().enumerate().map(|(i, (x, z, y))| Unit::new(i as u64 * 3, x.clone(), *z as u8 as f64, *y)).collect();
        let ds = if units.is_empty() { Dataset::empty(3, 0, TreatmentMode::Binary) } else { Dataset::new(units, TreatmentMode::Binary).unwrap() };
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let back = read_dataset(buf.as_slice(), &ColumnSchema::default()).unwrap();
        prop_assert_eq!(back.units(), ds.units());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn campaign_state_json_round_trip(seed in 0u64..1000, budget in 0.2f64..0.6) {
        let sim = generate(&DgpSpec { n: 200, seed, ..DgpSpec::default() }).unwrap();
        let mut oracle = sim.sealed.oracle(&sim.dataset);
        let cfg = CampaignConfig { budget: BudgetSpec::Global { budget }, seed, ..CampaignConfig::default() };
        let mut c = Campaign::init(&sim.dataset, cfg, Some("data.csv".into())).unwrap();
        for _ in 0..4 {
            c.step(&mut oracle).unwrap();
            let s = c.state();
            prop_assert_eq!(&CampaignState::from_json(&s.to_json().unwrap()).unwrap(), s);
        }
    }
}
