//! Units, datasets, CSV persistence and positivity diagnostics.
//!
//! CSV layout: a header row with `id`, `x1..xd`, `z`, `r`, `y` and optional
//! context columns `c1..cm`. An empty `y` cell marks an unrevealed outcome and
//! must coincide with `r = 0`.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Binary treatment arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    Control,
    Treated,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Control, Arm::Treated];

    pub fn index(self) -> usize {
        match self {
            Arm::Control => 0,
            Arm::Treated => 1,
        }
    }

    pub fn from_index(i: usize) -> Arm {
        if i == 0 {
            Arm::Control
        } else {
            Arm::Treated
        }
    }

    pub fn other(self) -> Arm {
        match self {
            Arm::Control => Arm::Treated,
            Arm::Treated => Arm::Control,
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TreatmentMode {
    Binary,
    Continuous,
}

/// One observation. The outcome is stored as an `Option`, so a unit is
/// annotated exactly when its outcome is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub id: u64,
    pub covariates: Vec<f64>,
    pub context: Vec<f64>,
    pub treatment: f64,
    outcome: Option<f64>,
}

impl Unit {
    pub fn new(id: u64, covariates: Vec<f64>, treatment: f64, outcome: Option<f64>) -> Self {
        Unit { id, covariates, context: Vec::new(), treatment, outcome }
    }

    pub fn with_context(mut self, context: Vec<f64>) -> Self {
        self.context = context;
        self
    }

    pub fn annotated(&self) -> bool {
        self.outcome.is_some()
    }

    pub fn outcome(&self) -> Option<f64> {
        self.outcome
    }

    /// Treatment arm in binary mode (`treatment > 0.5`).
    pub fn arm(&self) -> Arm {
        if self.treatment > 0.5 {
            Arm::Treated
        } else {
            Arm::Control
        }
    }

    pub fn is_arm(&self, arm: Arm) -> bool {
        self.arm() == arm
    }

    pub fn reveal(&mut self, y: f64) {
        self.outcome = Some(y);
    }

    pub fn redact(&mut self) {
        self.outcome = None;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    units: Vec<Unit>,
    mode: TreatmentMode,
    dim: usize,
    context_dim: usize,
}

impl Dataset {
    /// Validates ids, covariate arity, finite values and treatment coding.
    pub fn new(units: Vec<Unit>, mode: TreatmentMode) -> Result<Self> {
        let dim = units.first().map(|u| u.covariates.len()).unwrap_or(0);
        let context_dim = units.first().map(|u| u.context.len()).unwrap_or(0);
        let mut seen = HashSet::with_capacity(units.len());
        for (row, u) in units.iter().enumerate() {
            if !seen.insert(u.id) {
                return Err(Error::Data(format!("duplicate id {}", u.id)));
            }
            if u.covariates.len() != dim {
                return Err(Error::Data(format!(
                    "unit {} has {} covariates, expected {dim}",
                    u.id,
                    u.covariates.len()
                )));
            }
            if u.context.len() != context_dim {
                return Err(Error::Data(format!(
                    "unit {} has {} context features, expected {context_dim}",
                    u.id,
                    u.context.len()
                )));
            }
            if u.covariates.iter().chain(&u.context).any(|v| !v.is_finite()) {
                return Err(Error::MalformedRow { row: row + 1, message: "non-finite feature".into() });
            }
            if let Some(y) = u.outcome {
                if !y.is_finite() {
                    return Err(Error::MalformedRow { row: row + 1, message: "non-finite outcome".into() });
                }
            }
            match mode {
                TreatmentMode::Binary if u.treatment != 0.0 && u.treatment != 1.0 => {
                    return Err(Error::Data(format!(
                        "unit {} has treatment {} but binary mode requires 0 or 1",
                        u.id, u.treatment
                    )));
                }
                TreatmentMode::Continuous if !u.treatment.is_finite() => {
                    return Err(Error::Data(format!("unit {} has non-finite treatment", u.id)));
                }
                _ => {}
            }
        }
        Ok(Dataset { units, mode, dim, context_dim })
    }

    pub fn empty(dim: usize, context_dim: usize, mode: TreatmentMode) -> Self {
        Dataset { units: Vec::new(), mode, dim, context_dim }
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn mode(&self) -> TreatmentMode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    /// Copies the units at `indices` (in that order) into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            units: indices.iter().map(|&i| self.units[i].clone()).collect(),
            mode: self.mode,
            dim: self.dim,
            context_dim: self.context_dim,
        }
    }

    pub fn filter<F: Fn(&Unit) -> bool>(&self, keep: F) -> Dataset {
        Dataset {
            units: self.units.iter().filter(|u| keep(u)).cloned().collect(),
            mode: self.mode,
            dim: self.dim,
            context_dim: self.context_dim,
        }
    }

    pub fn annotated_count(&self, arm: Arm) -> usize {
        self.units.iter().filter(|u| u.is_arm(arm) && u.annotated()).count()
    }

    pub fn arm_count(&self, arm: Arm) -> usize {
        self.units.iter().filter(|u| u.is_arm(arm)).count()
    }

    /// Copy with every outcome removed.
    pub fn redacted(&self) -> Dataset {
        let mut out = self.clone();
        out.units.iter_mut().for_each(Unit::redact);
        out
    }

    pub(crate) fn units_mut(&mut self) -> &mut [Unit] {
        &mut self.units
    }

    /// SHA-256 over ids, features and treatments (outcomes excluded).
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.units.len() as u64).to_le_bytes());
        for u in &self.units {
            h.update(u.id.to_le_bytes());
            for v in u.covariates.iter().chain(&u.context) {
                h.update(v.to_bits().to_le_bytes());
            }
            h.update(u.treatment.to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Column names used when reading a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub id: String,
    /// Empty means every `x<k>` column, ordered by `k`.
    pub covariates: Vec<String>,
    /// Empty means every `c<k>` column, ordered by `k`.
    pub context: Vec<String>,
    pub treatment: String,
    /// Optional annotation flag column; when absent, annotation follows the outcome cell.
    pub annotated: Option<String>,
    pub outcome: String,
    pub mode: TreatmentMode,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        ColumnSchema {
            id: "id".into(),
            covariates: Vec::new(),
            context: Vec::new(),
            treatment: "z".into(),
            annotated: Some("r".into()),
            outcome: "y".into(),
            mode: TreatmentMode::Binary,
        }
    }
}

fn numbered_columns(headers: &csv::StringRecord, prefix: char) -> Vec<(usize, usize)> {
    let mut cols: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(pos, name)| {
            let rest = name.strip_prefix(prefix)?;
            rest.parse::<usize>().ok().map(|k| (k, pos))
        })
        .collect();
    cols.sort_unstable();
    cols
}

fn column_positions(headers: &csv::StringRecord, names: &[String], prefix: char) -> Result<Vec<usize>> {
    if names.is_empty() {
        return Ok(numbered_columns(headers, prefix).into_iter().map(|(_, p)| p).collect());
    }
    names.iter().map(|n| find_column(headers, n)).collect()
}

fn find_column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Data(format!("missing column `{name}`")))
}

fn parse_cell(record: &csv::StringRecord, pos: usize, row: usize, what: &str) -> Result<f64> {
    let raw = record.get(pos).unwrap_or("").trim();
    raw.parse::<f64>().map_err(|_| Error::MalformedRow {
        row,
        message: format!("cannot parse {what} value `{raw}`"),
    })
}

pub fn read_dataset<R: Read>(reader: R, schema: &ColumnSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let id_pos = find_column(&headers, &schema.id)?;
    let x_pos = column_positions(&headers, &schema.covariates, 'x')?;
    let c_pos = column_positions(&headers, &schema.context, 'c')?;
    let z_pos = find_column(&headers, &schema.treatment)?;
    let y_pos = find_column(&headers, &schema.outcome)?;
    let r_pos = match &schema.annotated {
        Some(name) => headers.iter().position(|h| h == name),
        None => None,
    };

    let mut units = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        // Row numbers count the header as row 1.
        let row = i + 2;
        let record = record.map_err(|e| Error::MalformedRow { row, message: e.to_string() })?;
        let id_raw = record.get(id_pos).unwrap_or("").trim();
        let id = id_raw.parse::<u64>().map_err(|_| Error::MalformedRow {
            row,
            message: format!("cannot parse id `{id_raw}`"),
        })?;
        let covariates = x_pos
            .iter()
            .map(|&p| parse_cell(&record, p, row, "covariate"))
            .collect::<Result<Vec<_>>>()?;
        let context = c_pos
            .iter()
            .map(|&p| parse_cell(&record, p, row, "context"))
            .collect::<Result<Vec<_>>>()?;
        let treatment = parse_cell(&record, z_pos, row, "treatment")?;
        if schema.mode == TreatmentMode::Binary && treatment != 0.0 && treatment != 1.0 {
            return Err(Error::MalformedRow {
                row,
                message: format!("treatment {treatment} is not binary"),
            });
        }
        let y_raw = record.get(y_pos).unwrap_or("").trim();
        let outcome = if y_raw.is_empty() {
            None
        } else {
            Some(parse_cell(&record, y_pos, row, "outcome")?)
        };
        if let Some(p) = r_pos {
            let r_raw = record.get(p).unwrap_or("").trim();
            let flag = match r_raw {
                "1" => true,
                "0" => false,
                other => {
                    return Err(Error::MalformedRow { row, message: format!("annotation flag `{other}` is not 0/1") })
                }
            };
            if flag != outcome.is_some() {
                return Err(Error::MalformedRow {
                    row,
                    message: "annotation flag disagrees with outcome cell".into(),
                });
            }
        }
        units.push(Unit { id, covariates, context, treatment, outcome });
    }
    if let Some(first) = units.first() {
        let d = first.covariates.len();
        if let Some((row, _)) = units.iter().enumerate().find(|(_, u)| u.covariates.len() != d) {
            return Err(Error::MalformedRow { row: row + 2, message: "inconsistent covariate arity".into() });
        }
    }
    if units.is_empty() {
        return Ok(Dataset::empty(x_pos.len(), c_pos.len(), schema.mode));
    }
    Dataset::new(units, schema.mode)
}

pub fn load_dataset<P: AsRef<Path>>(path: P, schema: &ColumnSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.as_ref().display())))?;
    read_dataset(std::io::BufReader::new(file), schema)
}

/// Writes with shortest round-trip float formatting, so reading back is exact.
pub fn write_dataset<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string()];
    header.extend((1..=ds.dim()).map(|k| format!("x{k}")));
    header.extend(["z", "r", "y"].map(String::from));
    header.extend((1..=ds.context_dim()).map(|k| format!("c{k}")));
    wtr.write_record(&header)?;
    for u in ds.units() {
        let mut rec = Vec::with_capacity(header.len());
        rec.push(u.id.to_string());
        rec.extend(u.covariates.iter().map(|v| v.to_string()));
        rec.push(u.treatment.to_string());
        rec.push(if u.annotated() { "1" } else { "0" }.to_string());
        rec.push(u.outcome.map(|y| y.to_string()).unwrap_or_default());
        rec.extend(u.context.iter().map(|v| v.to_string()));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_dataset<P: AsRef<Path>>(ds: &Dataset, path: P) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_dataset(ds, std::io::BufWriter::new(file))
}

/// Kind of annotation budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BudgetSpec {
    Global { budget: f64 },
    PerArm { control: f64, treated: f64 },
    ContinuousLocal { budget: f64, z0: f64, bandwidth: f64 },
}

impl BudgetSpec {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, b: f64| {
            if b > 0.0 && b <= 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in (0, 1], got {b}")))
            }
        };
        match *self {
            BudgetSpec::Global { budget } => check("budget", budget),
            BudgetSpec::PerArm { control, treated } => {
                check("control budget", control)?;
                check("treated budget", treated)
            }
            BudgetSpec::ContinuousLocal { budget, z0, bandwidth } => {
                check("budget", budget)?;
                if !z0.is_finite() {
                    return Err(Error::Config("evaluation dose must be finite".into()));
                }
                if !(bandwidth > 0.0 && bandwidth.is_finite()) {
                    return Err(Error::Config(format!("bandwidth must be positive, got {bandwidth}")));
                }
                Ok(())
            }
        }
    }

    /// Batch-1 annotation probability for a unit in `arm`.
    pub fn arm_budget(&self, arm: Arm) -> f64 {
        match *self {
            BudgetSpec::Global { budget } | BudgetSpec::ContinuousLocal { budget, .. } => budget,
            BudgetSpec::PerArm { control, treated } => match arm {
                Arm::Control => control,
                Arm::Treated => treated,
            },
        }
    }
}

/// Clip configuration for propensities and annotation probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipBounds {
    pub propensity_low: f64,
    pub propensity_high: f64,
    pub annotation_floor: f64,
}

impl Default for ClipBounds {
    fn default() -> Self {
        ClipBounds { propensity_low: 0.02, propensity_high: 0.98, annotation_floor: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub min_propensity: f64,
    pub max_propensity: f64,
    pub min_annotation_probability: f64,
    pub propensity_below: usize,
    pub propensity_above: usize,
    pub annotation_below: usize,
    /// Units per arm, indexed by [`Arm::index`].
    pub arm_counts: [usize; 2],
    pub annotated_counts: [usize; 2],
}

/// Positivity diagnostics. `propensity` returns the treated-arm propensity of a
/// unit, `annotation` its annotation probability.
pub fn diagnose_overlap(
    ds: &Dataset,
    propensity: &dyn Fn(&Unit) -> f64,
    annotation: &dyn Fn(&Unit) -> f64,
    bounds: &ClipBounds,
) -> OverlapReport {
    let mut report = OverlapReport {
        min_propensity: 1.0,
        max_propensity: 0.0,
        min_annotation_probability: 1.0,
        propensity_below: 0,
        propensity_above: 0,
        annotation_below: 0,
        arm_counts: [0; 2],
        annotated_counts: [0; 2],
    };
    for u in ds.units() {
        let e = propensity(u).clamp(0.0, 1.0);
        let p = annotation(u).clamp(0.0, 1.0);
        report.min_propensity = report.min_propensity.min(e);
        report.max_propensity = report.max_propensity.max(e);
        report.min_annotation_probability = report.min_annotation_probability.min(p);
        if e < bounds.propensity_low {
            report.propensity_below += 1;
        }
        if e > bounds.propensity_high {
            report.propensity_above += 1;
        }
        if p < bounds.annotation_floor {
            report.annotation_below += 1;
        }
        if ds.mode() == TreatmentMode::Binary {
            let a = u.arm().index();
            report.arm_counts[a] += 1;
            if u.annotated() {
                report.annotated_counts[a] += 1;
            }
        }
    }
    if ds.is_empty() {
        report.min_propensity = 0.0;
        report.min_annotation_probability = 0.0;
    }
    report
}
