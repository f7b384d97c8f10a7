use std::path::{Path, PathBuf};

use rand::Rng;
use serde::Serialize;

use super::config::{FileConfig, RunConfig};
use super::{CampaignDirArgs, CampaignFinalizeArgs, CampaignInitArgs, EstimateArgs, GenerateArgs, PlanArgs, SimulateArgs};
use crate::campaign::{Campaign, CampaignState, DesignKind, FileOracle, Phase, StepOutcome, STATE_FILE};
use crate::crossfit::{assign, fit_folded, Stage};
use crate::data::{load_dataset, save_dataset, Arm, BudgetSpec, ColumnSchema, Dataset, TreatmentMode};
use crate::design::{
    align_plan, load_plan_probabilities, optimal_pi_continuous, optimal_pi_global, optimal_pi_per_arm,
    outcome_contrast_variance, relative_efficiency, AnnotationPlan, KernelSpec,
};
use crate::error::{Error, Result};
use crate::estimator::{estimate_ate, estimate_with_external_weights, read_weights, EstimateReport, EstimatorKind, Shared, UnitNuisances};
use crate::nuisance::{fit_dose_response, fit_gaussian_gps, fit_nuisance_set};
use crate::rng;
use crate::sim::{budget_saved, generate as generate_data, run_trials, Method, TrialPlan};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn prepare_out(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join("config_echo.json"), cfg)
}

fn load(path: &Path, mode: TreatmentMode) -> Result<Dataset> {
    load_dataset(path, &ColumnSchema { mode, ..ColumnSchema::default() })
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    let cfg = a.common.resolve("simulate", FileConfig::default())?;
    let template = cfg.campaign_config(DesignKind::Adaptive)?;
    let plan = TrialPlan {
        budgets: cfg.budgets.clone(),
        methods: cfg.methods.clone(),
        trials: cfg.trials,
        holdout_fraction: cfg.holdout,
        seed: cfg.seed,
    };
    let metrics = run_trials(&plan, &cfg.dgp(), &template)?;
    prepare_out(&a.common.out, &cfg)?;
    metrics.save(&a.common.out)?;

    println!("{:<14} {:>7} {:>7} {:>10} {:>10} {:>9} {:>9}", "method", "budget", "trials", "mse", "ci_width", "coverage", "realized");
    for g in &metrics.aggregates {
        println!(
            "{:<14} {:>7.3} {:>7} {:>10.5} {:>10.5} {:>9.3} {:>9.4}",
            g.method.name(),
            g.budget,
            g.trials,
            g.mse,
            g.mean_ci_width,
            g.coverage,
            g.mean_realized_fraction
        );
    }
    let failed: usize = metrics.aggregates.iter().map(|g| g.failed).sum();
    if failed > 0 {
        println!("{failed} runs failed; see metrics_long.csv");
    }
    if cfg.methods.contains(&Method::Uniform) {
        for m in [Method::AdaptiveAipw, Method::AdaptiveRz].into_iter().filter(|m| cfg.methods.contains(m)) {
            if let Ok(savings) = budget_saved(&metrics, m) {
                for s in savings {
                    let bound = if s.beyond_grid { " (lower bound)" } else { "" };
                    println!("budget saved by {m} at {:.3}: {:.1}%{bound}", s.budget, 100.0 * s.saving);
                }
            }
        }
    }
    Ok(())
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    let cfg = a.common.resolve("generate", FileConfig::default())?;
    if !(0.0..=1.0).contains(&a.annotate) {
        return Err(Error::Config(format!("annotate must lie in [0, 1], got {}", a.annotate)));
    }
    let sim = generate_data(&cfg.dgp())?;
    let full = sim.sealed.reveal_all(&sim.dataset);
    let mut shown = full.clone();
    let mut r = rng::stream(cfg.seed, "generate-annotate", 0);
    for u in shown.units_mut() {
        if r.random::<f64>() >= a.annotate {
            u.redact();
        }
    }
    prepare_out(&a.common.out, &cfg)?;
    save_dataset(&shown, a.common.out.join("data.csv"))?;
    let mut w = csv::Writer::from_path(a.common.out.join("outcomes.csv"))?;
    w.write_record(["id", "y"])?;
    for u in full.units() {
        w.write_record([u.id.to_string(), u.outcome().expect("revealed").to_string()])?;
    }
    w.flush()?;
    println!(
        "wrote {} units ({} annotated) to {}",
        shown.len(),
        shown.units().iter().filter(|u| u.annotated()).count(),
        a.common.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct PlanOutput<'a> {
    audit: &'a crate::design::PlanAudit,
    relative_efficiency: Option<f64>,
    kernel_weighted_spend: Option<f64>,
    config: &'a RunConfig,
}

pub fn plan(a: &PlanArgs) -> Result<()> {
    let extra = FileConfig {
        treatment: a.treatment.clone(),
        z0: a.z0,
        bandwidth: a.bandwidth,
        kernel: a.kernel.clone(),
        ..FileConfig::default()
    };
    let cfg = a.common.resolve("plan", extra)?;
    let ds = load(&a.data, cfg.treatment)?;
    if ds.units().iter().all(|u| !u.annotated()) {
        return Err(Error::Data("plan needs some annotated units to fit nuisances".into()));
    }
    let seed = rng::derive_seed(cfg.seed, "plan-fit", 0);
    let (mut plan, rel_eff, kernel_spend) = match cfg.treatment {
        TreatmentMode::Binary => {
            let nuis = fit_nuisance_set(&ds, &cfg.nuisance_specs()?, false, seed)?;
            let plan = match cfg.budget_spec()? {
                BudgetSpec::PerArm { control, treated } => {
                    optimal_pi_per_arm(&ds, &nuis, control, treated, cfg.pi_floor)?.plan
                }
                BudgetSpec::Global { budget } | BudgetSpec::ContinuousLocal { budget, .. } => {
                    optimal_pi_global(&ds, &nuis, budget, cfg.pi_floor)?.plan
                }
            };
            let rel = relative_efficiency(&ds, &nuis, outcome_contrast_variance(&ds, &nuis), plan.audit.budget)?;
            (plan, Some(rel), None)
        }
        TreatmentMode::Continuous => {
            let z0 = cfg.z0.ok_or_else(|| Error::Config("continuous plans need z0".into()))?;
            let gps = fit_gaussian_gps(&ds, cfg.ridge_lambda)?;
            let dose = fit_dose_response(&ds, &cfg.regressor()?, cfg.variance_floor, seed)?;
            let kernel = KernelSpec::new(cfg.kernel, cfg.bandwidth)?;
            let design = optimal_pi_continuous(
                &ds,
                &|z, u| dose.sigma2(z, u),
                &|z, u| gps.density(z, u),
                &kernel,
                z0,
                cfg.budget,
                cfg.pi_floor,
            )?;
            (design.plan, None, Some(design.kernel_weighted_spend))
        }
    };
    plan.sample(rng::derive_seed(cfg.seed, "plan", 0));
    prepare_out(&a.common.out, &cfg)?;
    plan.save(a.common.out.join("plan.csv"))?;
    let out = PlanOutput { audit: &plan.audit, relative_efficiency: rel_eff, kernel_weighted_spend: kernel_spend, config: &cfg };
    write_json(&a.common.out.join("plan_audit.json"), &out)?;
    print_plan(&plan, rel_eff, kernel_spend);
    Ok(())
}

fn print_plan(plan: &AnnotationPlan, rel_eff: Option<f64>, kernel_spend: Option<f64>) {
    let au = &plan.audit;
    println!("budget {:.6}, expected fraction {:.6}", au.budget, au.expected_fraction);
    for arm in Arm::BOTH {
        if let Some(f) = au.arm_expected_fraction[arm.index()] {
            println!("  arm {arm}: expected fraction {f:.6}");
        }
    }
    if let Some(s) = kernel_spend {
        println!("kernel-weighted spend {s:.6}");
    }
    if let Some(r) = au.realized_fraction {
        println!("realized fraction {r:.6}");
    }
    println!("at floor {}, at ceiling {}, uniform fallback {}", au.at_floor, au.at_ceiling, au.uniform_fallback);
    if let Some(r) = rel_eff {
        println!("relative efficiency {r:.6}");
    }
}

#[derive(Serialize)]
struct EstimateOutput<'a> {
    report: &'a EstimateReport,
    config: &'a RunConfig,
}

pub fn estimate(a: &EstimateArgs) -> Result<()> {
    let cfg = a.common.resolve("estimate", FileConfig::default())?;
    let ds = load(&a.data, TreatmentMode::Binary)?;
    let specs = cfg.nuisance_specs()?;
    let with_joint = cfg.estimator == EstimatorKind::RzPlugin;
    let seed = rng::derive_seed(cfg.seed, "estimate-fit", 0);
    let nuis: Box<dyn UnitNuisances> = if cfg.folds <= 1 {
        Box::new(Shared(fit_nuisance_set(&ds, &specs, with_joint, seed)?))
    } else {
        let assignment = assign(ds.len(), cfg.folds, 0.5, rng::derive_seed(cfg.seed, "estimate-folds", 0))?;
        Box::new(fit_folded(&ds, &assignment, Stage::Final, &specs, seed)?)
    };
    let opts = cfg.estimator_options();
    let report = match cfg.estimator {
        EstimatorKind::ExternalWeights => {
            let path = a.weights.as_ref().ok_or_else(|| Error::Config("the external estimator needs --weights".into()))?;
            let file = std::fs::File::open(path).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
            let w = read_weights(&ds, file)?;
            estimate_with_external_weights(&ds, nuis.as_ref(), &w, &opts)?
        }
        kind => {
            let pi = match &a.plan {
                Some(p) => align_plan(&ds, &load_plan_probabilities(p)?)?,
                None if kind == EstimatorKind::RzPlugin => vec![1.0; ds.len()],
                None => return Err(Error::Config("the aipw estimator needs --plan".into())),
            };
            estimate_ate(&ds, nuis.as_ref(), &pi, kind, &opts)?
        }
    };
    prepare_out(&a.common.out, &cfg)?;
    write_json(&a.common.out.join("report.json"), &EstimateOutput { report: &report, config: &cfg })?;
    println!(
        "{}: tau_hat {:.6}, se {:.6}, {:.0}% CI [{:.6}, {:.6}], n {}",
        report.kind,
        report.tau_hat,
        report.std_error,
        100.0 * (1.0 - report.alpha),
        report.ci.0,
        report.ci.1,
        report.n
    );
    Ok(())
}

fn next_action(phase: Phase, dir: &Path) -> String {
    let d = dir.display();
    match phase {
        Phase::Initialized | Phase::Batch1Labeled | Phase::Planned => format!("run `batchcause campaign step --out {d}`"),
        Phase::Batch1Requested | Phase::Batch2Requested => {
            format!("label the ids in {d}/requests.csv into {d}/labels.csv (columns id,y), then run `campaign step`")
        }
        Phase::Batch2Labeled => format!("run `batchcause campaign finalize --out {d}`"),
        Phase::Finalized => format!("done; the report is in {d}/report.json"),
    }
}

pub fn campaign_init(a: &CampaignInitArgs) -> Result<()> {
    let design = match a.design.as_str() {
        "adaptive" => DesignKind::Adaptive,
        "uniform" => DesignKind::Uniform,
        other => return Err(Error::Config(format!("unknown design `{other}` (adaptive, uniform)"))),
    };
    let cfg = a.common.resolve("campaign-init", FileConfig::default())?;
    let out = &a.common.out;
    let state_path = out.join(STATE_FILE);
    if state_path.exists() {
        return Err(Error::Phase(format!("{} already exists; use `campaign step`", state_path.display())));
    }
    let ds = load(&a.data, TreatmentMode::Binary)?;
    let c = Campaign::init(&ds, cfg.campaign_config(design)?, Some(a.data.display().to_string()))?;
    prepare_out(out, &cfg)?;
    c.state().save(&state_path)?;
    println!("campaign initialized with {} units; next: {}", ds.len(), next_action(c.phase(), out));
    Ok(())
}

fn open_campaign(a: &CampaignDirArgs) -> Result<(Campaign, PathBuf)> {
    let state_path = a.out.join(STATE_FILE);
    if !state_path.exists() {
        return Err(Error::Phase(format!("no campaign at {}; run `campaign init` first", state_path.display())));
    }
    let state = CampaignState::load(&state_path)?;
    let data_path = match (&a.data, &state.dataset.path) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => return Err(Error::Config("the campaign records no dataset path; pass --data".into())),
    };
    let ds = load(&data_path, TreatmentMode::Binary)?;
    Ok((Campaign::resume(state, &ds)?, state_path))
}

pub fn campaign_step(a: &CampaignDirArgs) -> Result<()> {
    let (mut c, state_path) = open_campaign(a)?;
    let mut oracle = FileOracle::new(&a.out);
    let mut progressed = false;
    loop {
        match c.phase() {
            Phase::Batch2Labeled | Phase::Finalized if !progressed => {
                return Err(Error::Phase(format!("campaign is {}; {}", c.phase(), next_action(c.phase(), &a.out))))
            }
            Phase::Batch2Labeled => break,
            _ => {}
        }
        match c.step(&mut oracle)? {
            StepOutcome::Advanced(p) => {
                progressed = true;
                c.state().save(&state_path)?;
                println!("-> {p}");
            }
            StepOutcome::Waiting(msg) if !progressed => {
                return Err(Error::Phase(format!("{msg}; {}", next_action(c.phase(), &a.out))));
            }
            StepOutcome::Waiting(msg) => {
                println!("{msg}");
                break;
            }
        }
    }
    println!("phase {}; next: {}", c.phase(), next_action(c.phase(), &a.out));
    Ok(())
}

pub fn campaign_finalize(a: &CampaignFinalizeArgs) -> Result<()> {
    let (mut c, state_path) = open_campaign(&a.dir)?;
    if c.phase() != Phase::Batch2Labeled {
        return Err(Error::Phase(format!(
            "cannot finalize a campaign in phase {}; {}",
            c.phase(),
            next_action(c.phase(), &a.dir.out)
        )));
    }
    let weights = match &a.weights {
        Some(p) => {
            let file = std::fs::File::open(p).map_err(|e| Error::Data(format!("cannot open {}: {e}", p.display())))?;
            Some(read_weights(c.dataset(), file)?)
        }
        None => None,
    };
    let report = c.finalize(weights.as_deref())?.clone();
    c.state().save(&state_path)?;
    write_json(&a.dir.out.join("report.json"), &report)?;
    for e in &report.estimates {
        println!("{}: tau_hat {:.6}, se {:.6}, CI [{:.6}, {:.6}]", e.kind, e.tau_hat, e.std_error, e.ci.0, e.ci.1);
    }
    println!("realized fraction {:.6}, expected {:.6}", report.realized_fraction, report.expected_fraction);
    Ok(())
}

pub fn campaign_status(a: &CampaignDirArgs) -> Result<()> {
    let state_path = a.out.join(STATE_FILE);
    if !state_path.exists() {
        return Err(Error::Phase(format!("no campaign at {}; run `campaign init` first", state_path.display())));
    }
    let s = CampaignState::load(&state_path)?;
    println!("phase {}", s.phase);
    println!("units {}, labels {}, requested {} + {}", s.dataset.n, s.labels.len(), s.batch1_requests.len(), s.batch2_requests.len());
    if let Some(r) = &s.report {
        let e = r.selected_estimate();
        println!("{}: tau_hat {:.6}, CI [{:.6}, {:.6}]", e.kind, e.tau_hat, e.ci.0, e.ci.1);
    }
    println!("next: {}", next_action(s.phase, &a.out));
    Ok(())
}
