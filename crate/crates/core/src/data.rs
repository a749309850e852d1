//! Datasets and their CSV representation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndmath::DenseArray;
use crate::priors::LabelSpec;

/// Per-row trial membership and within-trial time index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialStructure {
    pub trial: Vec<usize>,
    pub time: Vec<usize>,
    /// Condition (label group) of the trial each row belongs to.
    pub condition: Vec<usize>,
}

impl TrialStructure {
    pub fn len(&self) -> usize {
        self.trial.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trial.is_empty()
    }

    /// Distinct trial ids in first-appearance order with their row indices sorted by time.
    pub fn trials(&self) -> Vec<(usize, Vec<usize>)> {
        let mut out: Vec<(usize, Vec<usize>)> = Vec::new();
        for (row, &t) in self.trial.iter().enumerate() {
            match out.iter_mut().find(|(id, _)| *id == t) {
                Some((_, rows)) => rows.push(row),
                None => out.push((t, vec![row])),
            }
        }
        for (_, rows) in &mut out {
            rows.sort_by_key(|&r| self.time[r]);
        }
        out
    }

    /// Time indices contiguous from 0 within each trial, one condition per trial.
    pub fn validate(&self) -> Result<()> {
        if self.time.len() != self.trial.len() || self.condition.len() != self.trial.len() {
            return Err(Error::Data("trial, time and condition columns differ in length".into()));
        }
        for (id, rows) in self.trials() {
            for (expect, &r) in rows.iter().enumerate() {
                if self.time[r] != expect {
                    return Err(Error::Data(format!("trial {id}: time indices are not contiguous from 0")));
                }
                if self.condition[r] != self.condition[rows[0]] {
                    return Err(Error::Data(format!("trial {id}: condition changes within the trial")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N x n` spike counts.
    pub counts: DenseArray,
    /// `N x d` labels, described by `label_spec`.
    pub labels: Option<DenseArray>,
    pub label_spec: Option<LabelSpec>,
    pub trials: Option<TrialStructure>,
    /// `N x m` ground-truth latents, when known.
    pub true_latents: Option<DenseArray>,
}

impl Dataset {
    pub fn new(counts: DenseArray) -> Self {
        Self { counts, labels: None, label_spec: None, trials: None, true_latents: None }
    }

    pub fn with_labels(mut self, labels: DenseArray, spec: LabelSpec) -> Self {
        self.labels = Some(labels);
        self.label_spec = Some(spec);
        self
    }

    pub fn rows(&self) -> usize {
        self.counts.rows()
    }

    pub fn obs_dim(&self) -> usize {
        self.counts.cols()
    }

    pub fn validate(&self) -> Result<()> {
        validate_counts(&self.counts)?;
        let n = self.rows();
        if let Some(l) = &self.labels {
            if l.rows() != n {
                return Err(Error::Data(format!("{n} count rows but {} label rows", l.rows())));
            }
            if let Some(spec) = &self.label_spec {
                validate_labels(l, spec)?;
            }
        }
        if let Some(t) = &self.trials {
            if t.len() != n {
                return Err(Error::Data(format!("{n} count rows but {} trial rows", t.len())));
            }
            t.validate()?;
        }
        if let Some(z) = &self.true_latents {
            if z.rows() != n {
                return Err(Error::Data(format!("{n} count rows but {} latent rows", z.rows())));
            }
        }
        Ok(())
    }

    /// Restriction to the given rows (trial structure is dropped).
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            counts: self.counts.select_rows(rows),
            labels: self.labels.as_ref().map(|l| l.select_rows(rows)),
            label_spec: self.label_spec.clone(),
            trials: None,
            true_latents: self.true_latents.as_ref().map(|z| z.select_rows(rows)),
        }
    }
}

fn validate_counts(counts: &DenseArray) -> Result<()> {
    for i in 0..counts.rows() {
        for (j, &v) in counts.row_slice(i).iter().enumerate() {
            if !(v >= 0.0 && v.fract() == 0.0) {
                return Err(Error::Data(format!("count at row {i}, column {j} is {v}; expected a nonnegative integer")));
            }
        }
    }
    Ok(())
}

fn validate_labels(labels: &DenseArray, spec: &LabelSpec) -> Result<()> {
    if labels.cols() != spec.width() {
        return Err(Error::Data(format!("label file has {} columns, config declares {}", labels.cols(), spec.width())));
    }
    for i in 0..labels.rows() {
        spec.validate_row(labels.row_slice(i)).map_err(|e| Error::Data(format!("label row {i}: {e}")))?;
    }
    Ok(())
}

/// Reads a headered numeric CSV into its header and an `N x c` array.
pub fn read_matrix_csv(path: &Path) -> Result<(Vec<String>, DenseArray)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = reader.headers().map_err(|e| csv_err(path, e))?.iter().map(str::to_string).collect();
    let cols = header.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Data(format!("{}: row {i}, column {j}: cannot parse {field:?} as a number", path.display()))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!("{}: row {i}, column {j}: non-finite value", path.display())));
            }
            data.push(v);
        }
        rows += 1;
    }
    Ok((header, DenseArray::from_raw(vec![rows, cols], data)))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

/// Writes `values` with the given header; integral arrays are written without a decimal point.
pub fn write_matrix_csv(path: &Path, header: &[String], values: &DenseArray) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for i in 0..values.rows() {
        w.write_record(values.row_slice(i).iter().map(|v| v.to_string())).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// `prefix1..prefixC` column names.
pub fn numbered_header(prefix: &str, count: usize) -> Vec<String> {
    (1..=count).map(|i| format!("{prefix}{i}")).collect()
}

/// Writes `values` with a leading `row` index column and `prefix1..` names.
pub fn write_indexed_csv(path: &Path, prefix: &str, values: &DenseArray) -> Result<()> {
    let mut header = vec!["row".to_string()];
    header.extend(numbered_header(prefix, values.cols()));
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for i in 0..values.rows() {
        let mut rec = vec![i.to_string()];
        rec.extend(values.row_slice(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a matrix written by [`write_indexed_csv`], dropping the index column.
pub fn read_indexed_csv(path: &Path) -> Result<DenseArray> {
    let (header, m) = read_matrix_csv(path)?;
    if header.first().map(String::as_str) != Some("row") {
        return Ok(m);
    }
    Ok(m.col_slice(1, m.cols()))
}

pub fn load_counts(path: &Path) -> Result<DenseArray> {
    let (_, counts) = read_matrix_csv(path)?;
    validate_counts(&counts).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(counts)
}

pub fn load_labels(path: &Path, spec: &LabelSpec) -> Result<DenseArray> {
    let (_, labels) = read_matrix_csv(path)?;
    validate_labels(&labels, spec)?;
    Ok(labels)
}

pub fn load_trials(path: &Path) -> Result<TrialStructure> {
    let (header, m) = read_matrix_csv(path)?;
    let want = ["trial", "time", "condition"];
    if header != want {
        return Err(Error::Data(format!("{}: expected header trial,time,condition, found {}", path.display(), header.join(","))));
    }
    let col = |j: usize| -> Result<Vec<usize>> {
        (0..m.rows())
            .map(|i| {
                let v = m.get(i, j);
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Data(format!("{}: row {i}, column {}: expected a nonnegative integer", path.display(), want[j])))
                }
            })
            .collect()
    };
    let t = TrialStructure { trial: col(0)?, time: col(1)?, condition: col(2)? };
    t.validate()?;
    Ok(t)
}

pub fn save_trials(path: &Path, t: &TrialStructure) -> Result<()> {
    let data = (0..t.len()).flat_map(|i| [t.trial[i] as f64, t.time[i] as f64, t.condition[i] as f64]).collect();
    let header: Vec<String> = ["trial", "time", "condition"].iter().map(|s| s.to_string()).collect();
    write_matrix_csv(path, &header, &DenseArray::from_raw(vec![t.len(), 3], data))
}

/// File locations making up a dataset on disk.
#[derive(Clone, Debug, Default)]
pub struct DatasetPaths {
    pub counts: PathBuf,
    pub labels: Option<PathBuf>,
    pub trials: Option<PathBuf>,
    pub true_latents: Option<PathBuf>,
}

impl DatasetPaths {
    /// Standard file names inside a directory written by [`save_dataset`].
    pub fn in_dir(dir: &Path) -> Self {
        let opt = |name: &str| Some(dir.join(name)).filter(|p| p.exists());
        Self {
            counts: dir.join("counts.csv"),
            labels: opt("labels.csv"),
            trials: opt("trials.csv"),
            true_latents: opt("latents.csv"),
        }
    }
}

/// Loads and validates a dataset. Labels need a declared `spec`.
pub fn load_dataset(paths: &DatasetPaths, spec: Option<&LabelSpec>) -> Result<Dataset> {
    let counts = load_counts(&paths.counts)?;
    let mut ds = Dataset::new(counts);
    if let Some(p) = &paths.labels {
        let spec = spec.ok_or_else(|| Error::Config("label kinds must be declared in the config".into()))?;
        ds.labels = Some(load_labels(p, spec)?);
        ds.label_spec = Some(spec.clone());
    }
    if let Some(p) = &paths.trials {
        ds.trials = Some(load_trials(p)?);
    }
    if let Some(p) = &paths.true_latents {
        ds.true_latents = Some(read_indexed_csv(p)?);
    }
    ds.validate()?;
    Ok(ds)
}

/// Writes `counts.csv`, `labels.csv`, `trials.csv` and `latents.csv` (whichever are present).
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_matrix_csv(&dir.join("counts.csv"), &numbered_header("n", ds.obs_dim()), &ds.counts)?;
    if let Some(l) = &ds.labels {
        write_matrix_csv(&dir.join("labels.csv"), &numbered_header("u", l.cols()), l)?;
    }
    if let Some(t) = &ds.trials {
        save_trials(&dir.join("trials.csv"), t)?;
    }
    if let Some(z) = &ds.true_latents {
        write_indexed_csv(&dir.join("latents.csv"), "z", z)?;
    }
    Ok(())
}
