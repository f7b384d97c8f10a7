//! Annotation oracles: the only components that can reveal outcomes.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Name of the request file written by [`FileOracle`] (single column `id`).
pub const REQUESTS_FILE: &str = "requests.csv";
/// Name of the label file read by [`FileOracle`] (columns `id, y`).
pub const LABELS_FILE: &str = "labels.csv";

#[derive(Debug, Clone, PartialEq)]
pub enum Collected {
    Ready(Vec<(u64, f64)>),
    /// Labels are not available yet; the message says what is missing.
    Pending(String),
}

/// Reveals ground-truth outcomes for requested ids. Re-requesting an id must
/// return the same label.
pub trait Oracle {
    fn request(&mut self, ids: &[u64]) -> Result<()>;
    fn collect(&mut self, ids: &[u64]) -> Result<Collected>;
}

/// In-memory oracle over a sealed table of observed outcomes Y = Y(Z).
#[derive(Debug, Clone)]
pub struct SimulationOracle {
    sealed: HashMap<u64, f64>,
    requested: HashSet<u64>,
}

impl SimulationOracle {
    pub fn new(sealed: HashMap<u64, f64>) -> Self {
        SimulationOracle { sealed, requested: HashSet::new() }
    }

    /// Seals the outcomes present in `ds`.
    pub fn from_dataset(ds: &Dataset) -> Self {
        Self::new(ds.units().iter().filter_map(|u| u.outcome().map(|y| (u.id, y))).collect())
    }

    /// Ids requested so far.
    pub fn requested(&self) -> &HashSet<u64> {
        &self.requested
    }
}

impl Oracle for SimulationOracle {
    fn request(&mut self, ids: &[u64]) -> Result<()> {
        if let Some(id) = ids.iter().find(|id| !self.sealed.contains_key(id)) {
            return Err(Error::Oracle(format!("no sealed outcome for unit {id}")));
        }
        self.requested.extend(ids);
        Ok(())
    }

    fn collect(&mut self, ids: &[u64]) -> Result<Collected> {
        ids.iter()
            .map(|id| {
                if !self.requested.contains(id) {
                    return Err(Error::Oracle(format!("unit {id} was never requested")));
                }
                Ok((*id, self.sealed[id]))
            })
            .collect::<Result<_>>()
            .map(Collected::Ready)
    }
}

/// File-based hand-off to an annotation team: writes `requests.csv` and reads
/// `labels.csv` from a directory. Rows for ids that were not requested are
/// ignored.
#[derive(Debug, Clone)]
pub struct FileOracle {
    dir: PathBuf,
}

impl FileOracle {
    pub fn new<P: AsRef<Path>>(dir: P) -> Self {
        FileOracle { dir: dir.as_ref().to_path_buf() }
    }

    pub fn requests_path(&self) -> PathBuf {
        self.dir.join(REQUESTS_FILE)
    }

    pub fn labels_path(&self) -> PathBuf {
        self.dir.join(LABELS_FILE)
    }
}

pub fn write_requests<P: AsRef<Path>>(path: P, ids: &[u64]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["id"])?;
    for id in ids {
        wtr.write_record([id.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_labels<P: AsRef<Path>>(path: P) -> Result<HashMap<u64, f64>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Data(format!("labels file lacks `{name}` column")))
    };
    let (id_pos, y_pos) = (col("id")?, col("y")?);
    let mut out = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::MalformedRow { row, message: e.to_string() })?;
        let id = rec
            .get(id_pos)
            .and_then(|s| s.trim().parse::<u64>().ok())
            .ok_or_else(|| Error::MalformedRow { row, message: "bad id".into() })?;
        let y = rec
            .get(y_pos)
            .and_then(|s| s.trim().parse::<f64>().ok())
            .filter(|y| y.is_finite())
            .ok_or_else(|| Error::MalformedRow { row, message: "outcome must be a finite number".into() })?;
        if let Some(prev) = out.insert(id, y) {
            if prev != y {
                return Err(Error::MalformedRow { row, message: format!("conflicting labels for unit {id}") });
            }
        }
    }
    Ok(out)
}

impl Oracle for FileOracle {
    fn request(&mut self, ids: &[u64]) -> Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        write_requests(self.requests_path(), ids)
    }

    fn collect(&mut self, ids: &[u64]) -> Result<Collected> {
        let path = self.labels_path();
        if !path.exists() {
            return Ok(Collected::Pending(format!("waiting for {} with columns id,y", path.display())));
        }
        let labels = read_labels(&path)?;
        let missing = ids.iter().filter(|id| !labels.contains_key(id)).count();
        if missing > 0 {
            return Ok(Collected::Pending(format!(
                "{} lacks labels for {missing} of {} requested units",
                path.display(),
                ids.len()
            )));
        }
        Ok(Collected::Ready(ids.iter().map(|id| (*id, labels[id])).collect()))
    }
}
