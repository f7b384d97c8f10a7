use std::collections::{HashMap, HashSet};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use batchcause_core::campaign::{self, Collected, DesignKind, Oracle, StepOutcome};
use batchcause_core::data::{self, BudgetSpec, ColumnSchema, TreatmentMode, Unit};
use batchcause_core::design;
use batchcause_core::estimator::{self, EstimatorKind, EstimatorOptions, Shared};
use batchcause_core::nuisance::{fit_nuisance_set, NuisanceSpecs, RegressorSpec};
use batchcause_core::sim::{self, DgpSpec, Method, TrialPlan};
use batchcause_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Data(_) | Error::MalformedRow { .. } | Error::EmptyArm { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn mode(continuous: bool) -> TreatmentMode {
    if continuous {
        TreatmentMode::Continuous
    } else {
        TreatmentMode::Binary
    }
}

fn specs(learner: &str) -> PyResult<NuisanceSpecs> {
    let outcome = match learner {
        "ridge" => RegressorSpec::Ridge { lambda: 1.0 },
        "knn" => RegressorSpec::Knn { k: 10 },
        "forest" => RegressorSpec::Forest(Default::default()),
        other => return Err(PyValueError::new_err(format!("unknown learner `{other}`"))),
    };
    Ok(NuisanceSpecs { variance: outcome.clone(), outcome, ..NuisanceSpecs::default() })
}

fn estimator_kind(name: &str) -> PyResult<EstimatorKind> {
    match name {
        "aipw" => Ok(EstimatorKind::Aipw),
        "rz" | "rz-plugin" => Ok(EstimatorKind::RzPlugin),
        other => Err(PyValueError::new_err(format!("unknown estimator `{other}` (aipw, rz)"))),
    }
}

/// Units with covariates, a treatment and an optional outcome.
#[pyclass(module = "batchcause", skip_from_py_object)]
#[derive(Clone)]
struct Dataset {
    inner: data::Dataset,
}

#[pymethods]
impl Dataset {
    #[new]
    #[pyo3(signature = (ids, covariates, treatment, outcome, continuous = false))]
    fn new(
        ids: Vec<u64>,
        covariates: Vec<Vec<f64>>,
        treatment: Vec<f64>,
        outcome: Vec<Option<f64>>,
        continuous: bool,
    ) -> PyResult<Self> {
        if covariates.len() != ids.len() || treatment.len() != ids.len() || outcome.len() != ids.len() {
            return Err(PyValueError::new_err("ids, covariates, treatment and outcome must have equal length"));
        }
        let units = ids
            .into_iter()
            .zip(covariates)
            .zip(treatment.into_iter().zip(outcome))
            .map(|((id, x), (z, y))| Unit::new(id, x, z, y))
            .collect();
        Ok(Dataset { inner: data::Dataset::new(units, mode(continuous)).map_err(py_err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (path, continuous = false))]
    fn load(path: &str, continuous: bool) -> PyResult<Self> {
        let schema = ColumnSchema { mode: mode(continuous), ..ColumnSchema::default() };
        Ok(Dataset { inner: data::load_dataset(path, &schema).map_err(py_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        data::save_dataset(&self.inner, path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn ids(&self) -> Vec<u64> {
        self.inner.units().iter().map(|u| u.id).collect()
    }

    #[getter]
    fn covariates(&self) -> Vec<Vec<f64>> {
        self.inner.units().iter().map(|u| u.covariates.clone()).collect()
    }

    #[getter]
    fn treatment(&self) -> Vec<f64> {
        self.inner.units().iter().map(|u| u.treatment).collect()
    }

    #[getter]
    fn outcome(&self) -> Vec<Option<f64>> {
        self.inner.units().iter().map(|u| u.outcome()).collect()
    }

    fn annotated_count(&self) -> usize {
        self.inner.units().iter().filter(|u| u.annotated()).count()
    }

    fn content_hash(&self) -> String {
        self.inner.content_hash()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n={}, dim={}, annotated={})", self.inner.len(), self.inner.dim(), self.annotated_count())
    }
}

/// Draws from the built-in data-generating process. Returns the dataset
/// without outcomes and a dict of observed outcomes by id.
#[pyfunction]
#[pyo3(signature = (n = 1000, seed = 0, theta = 3.0))]
fn generate(n: usize, seed: u64, theta: f64) -> PyResult<(Dataset, HashMap<u64, f64>)> {
    let s = sim::generate(&DgpSpec { n, seed, theta, ..DgpSpec::default() }).map_err(py_err)?;
    let full = s.sealed.reveal_all(&s.dataset);
    let outcomes = full.units().iter().map(|u| (u.id, u.outcome().expect("revealed"))).collect();
    Ok((Dataset { inner: s.dataset }, outcomes))
}

/// Variance-optimal annotation probabilities, one per unit, from nuisances
/// fitted on the annotated units. Pass both arm budgets for a per-arm plan.
#[pyfunction]
#[pyo3(signature = (dataset, budget = 0.3, control_budget = None, treated_budget = None, learner = "ridge", seed = 0, floor = design::DEFAULT_PI_FLOOR))]
fn plan<'py>(
    py: Python<'py>,
    dataset: &Dataset,
    budget: f64,
    control_budget: Option<f64>,
    treated_budget: Option<f64>,
    learner: &str,
    seed: u64,
    floor: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let ds = &dataset.inner;
    let nuis = fit_nuisance_set(ds, &specs(learner)?, false, seed).map_err(py_err)?;
    let plan = match (control_budget, treated_budget) {
        (Some(b0), Some(b1)) => design::optimal_pi_per_arm(ds, &nuis, b0, b1, floor).map_err(py_err)?.plan,
        (None, None) => design::optimal_pi_global(ds, &nuis, budget, floor).map_err(py_err)?.plan,
        _ => return Err(PyValueError::new_err("give both control_budget and treated_budget or neither")),
    };
    to_py(py, &plan)
}

/// Plug-in relative efficiency of the optimal plan against uniform sampling.
#[pyfunction]
#[pyo3(signature = (dataset, budget, learner = "ridge", seed = 0))]
fn relative_efficiency(dataset: &Dataset, budget: f64, learner: &str, seed: u64) -> PyResult<f64> {
    let ds = &dataset.inner;
    let nuis = fit_nuisance_set(ds, &specs(learner)?, false, seed).map_err(py_err)?;
    design::relative_efficiency(ds, &nuis, design::outcome_contrast_variance(ds, &nuis), budget).map_err(py_err)
}

/// ATE estimate from annotated data and per-unit annotation probabilities.
#[pyfunction]
#[pyo3(signature = (dataset, pi, estimator = "aipw", alpha = 0.05, learner = "ridge", seed = 0))]
fn estimate<'py>(
    py: Python<'py>,
    dataset: &Dataset,
    pi: Vec<f64>,
    estimator: &str,
    alpha: f64,
    learner: &str,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let kind = estimator_kind(estimator)?;
    let ds = &dataset.inner;
    let nuis = fit_nuisance_set(ds, &specs(learner)?, kind == EstimatorKind::RzPlugin, seed).map_err(py_err)?;
    let opts = EstimatorOptions { alpha, ..EstimatorOptions::default() };
    let rep = estimator::estimate_ate(ds, &Shared(nuis), &pi, kind, &opts).map_err(py_err)?;
    to_py(py, &rep)
}

/// Monte Carlo comparison on the built-in process; returns the aggregates.
#[pyfunction]
#[pyo3(signature = (budgets = vec![0.1, 0.2, 0.3, 0.4], trials = 20, n = 1000, seed = 0, methods = None))]
fn simulate<'py>(
    py: Python<'py>,
    budgets: Vec<f64>,
    trials: usize,
    n: usize,
    seed: u64,
    methods: Option<Vec<String>>,
) -> PyResult<Bound<'py, PyAny>> {
    let methods = match methods {
        Some(ms) => ms.iter().map(|m| Method::parse(m)).collect::<Result<Vec<_>, _>>().map_err(py_err)?,
        None => Method::ALL.to_vec(),
    };
    let plan = TrialPlan { budgets, methods, trials, holdout_fraction: 0.0, seed };
    let dgp = DgpSpec { n, ..DgpSpec::default() };
    let metrics = py
        .detach(|| sim::run_trials(&plan, &dgp, &campaign::CampaignConfig::default()))
        .map_err(py_err)?;
    to_py(py, &metrics.aggregates)
}

/// Labels handed over from Python.
#[derive(Default)]
struct MemoryOracle {
    labels: HashMap<u64, f64>,
    requested: HashSet<u64>,
}

impl Oracle for MemoryOracle {
    fn request(&mut self, ids: &[u64]) -> batchcause_core::Result<()> {
        self.requested.extend(ids);
        Ok(())
    }

    fn collect(&mut self, ids: &[u64]) -> batchcause_core::Result<Collected> {
        let missing = ids.iter().filter(|id| !self.labels.contains_key(id)).count();
        if missing > 0 {
            return Ok(Collected::Pending(format!("{missing} of {} requested labels missing", ids.len())));
        }
        Ok(Collected::Ready(ids.iter().map(|id| (*id, self.labels[id])).collect()))
    }
}

/// Two-batch annotation campaign. Call `step` repeatedly; when it returns
/// False, supply the ids in `pending` through `add_labels`.
#[pyclass(module = "batchcause")]
struct Campaign {
    inner: campaign::Campaign,
    oracle: MemoryOracle,
}

#[pymethods]
impl Campaign {
    #[new]
    #[pyo3(signature = (dataset, budget = 0.3, seed = 0, kappa = 0.55, folds = 5, design = "adaptive", learner = "ridge"))]
    fn new(dataset: &Dataset, budget: f64, seed: u64, kappa: f64, folds: usize, design: &str, learner: &str) -> PyResult<Self> {
        let design = match design {
            "adaptive" => DesignKind::Adaptive,
            "uniform" => DesignKind::Uniform,
            other => return Err(PyValueError::new_err(format!("unknown design `{other}`"))),
        };
        let config = campaign::CampaignConfig {
            budget: BudgetSpec::Global { budget },
            seed,
            kappa,
            folds,
            design,
            specs: specs(learner)?,
            ..campaign::CampaignConfig::default()
        };
        let inner = campaign::Campaign::init(&dataset.inner, config, None).map_err(py_err)?;
        Ok(Campaign { inner, oracle: MemoryOracle::default() })
    }

    /// Restores a campaign saved with `state_json`.
    #[staticmethod]
    fn from_state_json(state: &str, dataset: &Dataset) -> PyResult<Self> {
        let s = campaign::CampaignState::from_json(state).map_err(py_err)?;
        let labels = s.labels.iter().map(|(k, v)| (*k, *v)).collect();
        let inner = campaign::Campaign::resume(s, &dataset.inner).map_err(py_err)?;
        Ok(Campaign { inner, oracle: MemoryOracle { labels, ..MemoryOracle::default() } })
    }

    #[getter]
    fn phase(&self) -> String {
        self.inner.phase().to_string()
    }

    /// Requested ids that still lack a label.
    #[getter]
    fn pending(&self) -> Vec<u64> {
        let s = self.inner.state();
        s.batch1_requests
            .iter()
            .chain(&s.batch2_requests)
            .filter(|id| !self.oracle.labels.contains_key(id))
            .copied()
            .collect()
    }

    fn add_labels(&mut self, labels: HashMap<u64, f64>) {
        self.oracle.labels.extend(labels);
    }

    /// One transition; False when waiting for labels.
    fn step(&mut self, py: Python<'_>) -> PyResult<bool> {
        let (inner, oracle) = (&mut self.inner, &mut self.oracle);
        match py.detach(|| inner.step(oracle)).map_err(py_err)? {
            StepOutcome::Advanced(_) => Ok(true),
            StepOutcome::Waiting(_) => Ok(false),
        }
    }

    /// Steps until finished or waiting; True when finalized.
    fn run(&mut self, py: Python<'_>) -> PyResult<bool> {
        let (inner, oracle) = (&mut self.inner, &mut self.oracle);
        let out = py.detach(|| inner.run(oracle)).map_err(py_err)?;
        Ok(matches!(out, StepOutcome::Advanced(campaign::Phase::Finalized)))
    }

    fn report<'py>(&self, py: Python<'py>) -> PyResult<Option<Bound<'py, PyAny>>> {
        self.inner.state().report.as_ref().map(|r| to_py(py, r)).transpose()
    }

    fn state_json(&self) -> PyResult<String> {
        self.inner.state().to_json().map_err(py_err)
    }
}

#[pymodule]
fn batchcause(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Campaign>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(plan, m)?)?;
    m.add_function(wrap_pyfunction!(relative_efficiency, m)?)?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
