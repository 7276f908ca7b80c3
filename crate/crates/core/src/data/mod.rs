//! Datasets: CSV ingestion, synthetic generators, cross-validation splits
//! and cluster-to-class matching.

mod matching;
mod split;
mod synthetic;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub use matching::{confusion_matrix, match_clusters_to_classes, Matching};
pub use split::{kfold_split, SplitPlan, HOLDOUT_FRACTION};
pub use synthetic::{gen_pinwheel, gen_surrogate_attribution, PinwheelConfig, SurrogateConfig};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("line {line}: expected {expected} columns, found {found}")]
    ColumnCount { line: usize, expected: usize, found: usize },
    #[error("line {line}: bad label {value:?}")]
    BadLabel { line: usize, value: String },
    #[error("bad header: {0}")]
    Header(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Observations (`N×L`) with optional integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub observations: Tensor,
    pub labels: Option<Vec<usize>>,
    pub name: String,
}

impl Dataset {
    pub fn new(observations: Tensor, labels: Option<Vec<usize>>, name: impl Into<String>) -> Result<Self, DataError> {
        let ds = Self {
            observations,
            labels,
            name: name.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.observations.shape().len() != 2 {
            return Err(DataError::Invalid(format!("observations must be 2-D, got {:?}", self.observations.shape())));
        }
        if !self.observations.is_finite() {
            return Err(DataError::Invalid("observations contain non-finite values".into()));
        }
        if let Some(l) = &self.labels {
            if l.len() != self.len() {
                return Err(DataError::Invalid(format!("{} labels for {} rows", l.len(), self.len())));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.observations.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.observations.cols()
    }

    /// `1 + max label`, or 0 without labels.
    pub fn num_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max().map(|m| m + 1))
            .unwrap_or(0)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            observations: self.observations.select_rows(idx),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            name: self.name.clone(),
        }
    }
}

/// Header `f0,…,f{L-1}[,label]`; values are written with 17 significant digits.
pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_csv(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_csv<W: Write>(ds: &Dataset, w: W) -> Result<(), DataError> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("f{j}")).collect();
    if ds.labels.is_some() {
        header.push("label".into());
    }
    wr.write_record(&header)?;
    let mut rec = Vec::with_capacity(header.len());
    for i in 0..ds.len() {
        rec.clear();
        rec.extend(ds.observations.row_slice(i).iter().map(|v| format!("{v:.16e}")));
        if let Some(l) = &ds.labels {
            rec.push(l[i].to_string());
        }
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    read_csv(File::open(path)?, name)
}

pub fn read_csv<R: std::io::Read>(r: R, name: impl Into<String>) -> Result<Dataset, DataError> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(r);
    let header = rd.headers()?.clone();
    let has_label = header.iter().next_back() == Some("label");
    let l = header.len() - usize::from(has_label);
    for (j, h) in header.iter().take(l).enumerate() {
        if h != format!("f{j}") {
            return Err(DataError::Header(format!("column {j} is {h:?}, expected \"f{j}\"")));
        }
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for (i, rec) in rd.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(DataError::ColumnCount {
                line,
                expected: header.len(),
                found: rec.len(),
            });
        }
        for field in rec.iter().take(l) {
            let v: f64 = field.trim().parse().map_err(|_| DataError::Parse {
                line,
                detail: format!("cannot parse {field:?} as a number"),
            })?;
            if !v.is_finite() {
                return Err(DataError::Parse {
                    line,
                    detail: format!("non-finite value {field:?}"),
                });
            }
            values.push(v);
        }
        if has_label {
            let field = rec.get(l).unwrap_or_default().trim();
            labels.push(field.parse::<usize>().map_err(|_| DataError::BadLabel {
                line,
                value: field.to_string(),
            })?);
        }
        rows += 1;
    }
    Dataset::new(Tensor::matrix(rows, l, values), has_label.then_some(labels), name)
}
