//! Datasets, CSV ingestion, seeded splits and z-score standardization.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from equally sized rows. `cols` is needed for the empty case.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    fn push_row(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.cols);
        self.data.extend_from_slice(row);
        self.rows += 1;
    }
}

/// Feature matrix plus integer class labels in `0..class_count`.
///
/// Values are immutable once built; every transformation returns a new dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    class_count: usize,
    feature_names: Vec<String>,
    label_names: Vec<String>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.cols() == 0 {
            return Err(Error::invalid("dataset needs at least one feature"));
        }
        if class_count == 0 {
            return Err(Error::invalid("class_count must be positive"));
        }
        if labels.len() != features.rows() {
            return Err(Error::DimensionMismatch {
                expected: features.rows(),
                actual: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::LabelOutOfRange { label, class_count });
        }
        if let Some(pos) = features.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse {
                row: pos / features.cols(),
                column: pos % features.cols(),
                message: "non-finite feature value".into(),
            });
        }
        Ok(Self {
            features,
            labels,
            class_count,
            feature_names: Vec::new(),
            label_names: Vec::new(),
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(
        rows: &[R],
        labels: Vec<usize>,
        n_features: usize,
        class_count: usize,
    ) -> Result<Self> {
        Self::new(Matrix::from_rows(rows, n_features)?, labels, class_count)
    }

    pub fn empty(n_features: usize, class_count: usize) -> Result<Self> {
        Self::new(Matrix::zeros(0, n_features), Vec::new(), class_count)
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Self {
        self.feature_names = names;
        self
    }

    pub fn with_label_names(mut self, names: Vec<String>) -> Self {
        self.label_names = names;
        self
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    #[inline]
    pub fn class_count(&self) -> usize {
        self.class_count
    }

    #[inline]
    pub fn features(&self) -> &Matrix {
        &self.features
    }

    #[inline]
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    #[inline]
    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Original label text for each dense class id, when the data came from a file.
    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Matrix::zeros(0, self.n_features());
        features.data.reserve(indices.len() * self.n_features());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.push_row(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features,
            labels,
            class_count: self.class_count,
            feature_names: self.feature_names.clone(),
            label_names: self.label_names.clone(),
        }
    }

    /// `self` followed by `other`.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if other.n_features() != self.n_features() {
            return Err(Error::DimensionMismatch {
                expected: self.n_features(),
                actual: other.n_features(),
            });
        }
        if other.class_count != self.class_count {
            return Err(Error::invalid(format!(
                "class count mismatch: {} vs {}",
                self.class_count, other.class_count
            )));
        }
        let mut out = self.clone();
        out.features
            .data
            .extend_from_slice(other.features.as_slice());
        out.features.rows += other.len();
        out.labels.extend_from_slice(&other.labels);
        Ok(out)
    }

    /// Returns a copy with every row repeated `times` times (row-major: r0 x times, r1 x times, ...).
    pub fn repeat_rows(&self, times: usize) -> Dataset {
        let idx: Vec<usize> = (0..self.len())
            .flat_map(|i| std::iter::repeat_n(i, times))
            .collect();
        self.subset(&idx)
    }
}

/// Which CSV column carries the class label.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelColumn {
    #[default]
    Last,
    Index(usize),
    Name(String),
}

impl FromStr for LabelColumn {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "last" | "" => LabelColumn::Last,
            _ => match s.parse::<usize>() {
                Ok(i) => LabelColumn::Index(i),
                Err(_) => LabelColumn::Name(s.to_string()),
            },
        })
    }
}

impl fmt::Display for LabelColumn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelColumn::Last => f.write_str("last"),
            LabelColumn::Index(i) => write!(f, "{i}"),
            LabelColumn::Name(n) => f.write_str(n),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvOptions {
    #[serde(default)]
    pub label_column: LabelColumn,
    #[serde(default)]
    pub class_count: Option<usize>,
    #[serde(default = "default_true")]
    pub has_header: bool,
}

fn default_true() -> bool {
    true
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            label_column: LabelColumn::Last,
            class_count: None,
            has_header: true,
        }
    }
}

/// Reads a comma-separated file into a [`Dataset`].
///
/// With `class_count` declared the label column must hold integers in
/// `0..class_count`, kept verbatim. Otherwise labels are arbitrary strings
/// remapped densely in first-occurrence order; the original strings are
/// kept in [`Dataset::label_names`].
pub fn load_csv(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, opts)
}

pub fn read_csv<R: std::io::Read>(reader: R, opts: &CsvOptions) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(opts.has_header)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let header: Option<Vec<String>> = if opts.has_header {
        Some(rdr.headers()?.iter().map(str::to_string).collect())
    } else {
        None
    };

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut raw_labels: Vec<String> = Vec::new();
    let mut width: Option<usize> = header.as_ref().map(Vec::len);
    let mut label_idx: Option<usize> = None;

    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let line = r + 1;
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(Error::Parse {
                row: line,
                column: record.len(),
                message: format!("expected {w} fields"),
            });
        }
        let li = match label_idx {
            Some(li) => li,
            None => {
                let li = resolve_label_column(&opts.label_column, header.as_deref(), w)?;
                label_idx = Some(li);
                li
            }
        };
        let mut row = Vec::with_capacity(w - 1);
        for (c, cell) in record.iter().enumerate() {
            if c == li {
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row: line,
                column: c,
                message: format!("non-numeric feature value {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: line,
                    column: c,
                    message: format!("non-finite feature value {cell:?}"),
                });
            }
            row.push(v);
        }
        rows.push(row);
        raw_labels.push(record[li].to_string());
    }

    let (Some(width), Some(li)) = (width, label_idx) else {
        return Err(Error::InsufficientSamples(
            "csv file contains no data rows".into(),
        ));
    };
    if width < 2 {
        return Err(Error::invalid("csv needs a label and at least one feature"));
    }

    let (labels, class_count, label_names) = match opts.class_count {
        Some(k) => {
            let mut labels = Vec::with_capacity(raw_labels.len());
            for (r, s) in raw_labels.iter().enumerate() {
                let l: usize = s.parse().map_err(|_| Error::Parse {
                    row: r + 1,
                    column: li,
                    message: format!("label {s:?} is not a class index"),
                })?;
                if l >= k {
                    return Err(Error::LabelOutOfRange {
                        label: l,
                        class_count: k,
                    });
                }
                labels.push(l);
            }
            (labels, k, (0..k).map(|c| c.to_string()).collect())
        }
        None => {
            let mut ids: HashMap<&str, usize> = HashMap::new();
            let mut names = Vec::new();
            let labels = raw_labels
                .iter()
                .map(|s| {
                    *ids.entry(s.as_str()).or_insert_with(|| {
                        names.push(s.clone());
                        names.len() - 1
                    })
                })
                .collect();
            let k = names.len();
            (labels, k, names)
        }
    };

    let n_features = width - 1;
    let feature_names = match header {
        Some(h) => h
            .into_iter()
            .enumerate()
            .filter(|&(c, _)| c != li)
            .map(|(_, n)| n)
            .collect(),
        None => (0..n_features).map(|i| format!("f{i}")).collect(),
    };
    Ok(Dataset::from_rows(&rows, labels, n_features, class_count)?
        .with_feature_names(feature_names)
        .with_label_names(label_names))
}

fn resolve_label_column(
    col: &LabelColumn,
    header: Option<&[String]>,
    width: usize,
) -> Result<usize> {
    match col {
        LabelColumn::Last => Ok(width - 1),
        LabelColumn::Index(i) if *i < width => Ok(*i),
        LabelColumn::Index(i) => Err(Error::invalid(format!(
            "label column {i} out of range for {width} columns"
        ))),
        LabelColumn::Name(name) => header
            .and_then(|h| h.iter().position(|c| c == name))
            .ok_or_else(|| Error::invalid(format!("label column {name:?} not found"))),
    }
}

/// `ceil(fraction * n)`, ignoring floating-point noise just above an integer.
pub fn ceil_fraction(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Seeded uniform shuffle of `0..n`, cut after `ceil(fraction * n)` entries.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!(
            "split fraction {fraction} not in (0,1)"
        )));
    }
    let first = ceil_fraction(fraction, n);
    if first == 0 || first >= n {
        return Err(Error::InsufficientSamples(format!(
            "splitting {n} rows at {fraction} leaves an empty side"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let second = idx.split_off(first);
    Ok((idx, second))
}

/// Splits `dataset` into two disjoint sides; see [`split_indices`].
pub fn split(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (a, b) = split_indices(dataset.len(), fraction, seed)?;
    Ok((dataset.subset(&a), dataset.subset(&b)))
}

/// Per-feature mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
}

impl StandardizationStats {
    /// Welford accumulation over the rows of `features`.
    pub fn fit(features: &Matrix) -> Result<Self> {
        let d = features.cols();
        if features.rows() == 0 {
            return Err(Error::InsufficientSamples(
                "cannot standardize an empty matrix".into(),
            ));
        }
        let mut mean = vec![0.0; d];
        let mut m2 = vec![0.0; d];
        for (n, row) in features.iter_rows().enumerate() {
            let count = (n + 1) as f64;
            for j in 0..d {
                let delta = row[j] - mean[j];
                mean[j] += delta / count;
                m2[j] += delta * (row[j] - mean[j]);
            }
        }
        let n = features.rows() as f64;
        let stddev = m2.iter().map(|&s| (s / n).max(0.0).sqrt()).collect();
        Ok(Self { mean, stddev })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: len,
            });
        }
        Ok(())
    }

    /// `(x - mean) / stddev`; zero-variance features are only centered.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x.len())?;
        Ok(x.iter()
            .zip(self.mean.iter().zip(&self.stddev))
            .map(|(&v, (&m, &s))| if s > 0.0 { (v - m) / s } else { v - m })
            .collect())
    }

    pub fn invert(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check(z.len())?;
        Ok(z.iter()
            .zip(self.mean.iter().zip(&self.stddev))
            .map(|(&v, (&m, &s))| if s > 0.0 { v * s + m } else { v + m })
            .collect())
    }

    pub fn apply_matrix(&self, features: &Matrix) -> Result<Matrix> {
        self.check(features.cols())?;
        let mut out = features.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                let s = self.stddev[j];
                *v -= self.mean[j];
                if s > 0.0 {
                    *v /= s;
                }
            }
        }
        Ok(out)
    }
}

/// Convenience wrapper matching the dataset-level entry point.
pub fn standardize_fit(dataset: &Dataset) -> Result<StandardizationStats> {
    StandardizationStats::fit(dataset.features())
}
