//! Pima CSV ingestion, preprocessing and stratified splitting.
//!
//! Pipeline order: load, binarise pregnancies, split, impute zeros with
//! training-split means, fit a normaliser on training rows, apply it to both
//! splits.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

pub const FEATURE_NAMES: [&str; 8] = [
    "pregnancies",
    "glucose",
    "blood_pressure",
    "skin_thickness",
    "insulin",
    "bmi",
    "diabetes_pedigree",
    "age",
];

/// Columns where a literal 0 means "not measured".
pub const IMPUTED_COLUMNS: [usize; 5] = [1, 2, 3, 4, 5];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawRecord {
    pub pregnancies: f64,
    pub glucose: f64,
    pub blood_pressure: f64,
    pub skin_thickness: f64,
    pub insulin: f64,
    pub bmi: f64,
    pub diabetes_pedigree: f64,
    pub age: f64,
    pub label: u8,
}

impl RawRecord {
    pub fn features(&self) -> [f64; 8] {
        [
            self.pregnancies,
            self.glucose,
            self.blood_pressure,
            self.skin_thickness,
            self.insulin,
            self.bmi,
            self.diabetes_pedigree,
            self.age,
        ]
    }

    fn from_values(v: [f64; 8], label: u8) -> Self {
        Self {
            pregnancies: v[0],
            glucose: v[1],
            blood_pressure: v[2],
            skin_thickness: v[3],
            insulin: v[4],
            bmi: v[5],
            diabetes_pedigree: v[6],
            age: v[7],
            label,
        }
    }
}

/// Reads the 9-column Pima CSV (eight features then the 0/1 outcome).
///
/// A first row that does not parse as numbers is taken as a header. Rows are
/// reported 1-based, as they appear in the file.
pub fn load_pima_csv(path: impl AsRef<Path>) -> Result<Vec<RawRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let parse_error = |row: usize, column: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        column,
        message,
    };

    let mut records = Vec::new();
    for (i, result) in reader.records().enumerate() {
        let record = result.map_err(|e| parse_error(i + 1, 0, e.to_string()))?;
        let row = record.position().map_or(i + 1, |p| p.line() as usize);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if i == 0 && record.iter().any(|cell| cell.parse::<f64>().is_err()) {
            continue;
        }
        if record.len() != 9 {
            return Err(parse_error(
                row,
                record.len(),
                format!("expected 9 columns, found {}", record.len()),
            ));
        }
        let mut values = [0.0; 9];
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                parse_error(row, c + 1, format!("cannot parse {cell:?} as a number"))
            })?;
            if !v.is_finite() {
                return Err(parse_error(
                    row,
                    c + 1,
                    format!("non-finite value {cell:?}"),
                ));
            }
            values[c] = v;
        }
        let label = match values[8] {
            0.0 => 0,
            1.0 => 1,
            v => return Err(parse_error(row, 9, format!("label {v} is not 0 or 1"))),
        };
        let mut features = [0.0; 8];
        features.copy_from_slice(&values[..8]);
        records.push(RawRecord::from_values(features, label));
    }
    if records.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    Ok(records)
}

/// Replaces the pregnancy count with a 0/1 indicator.
pub fn binarize_pregnancies(records: &[RawRecord]) -> Vec<RawRecord> {
    records
        .iter()
        .map(|r| RawRecord {
            pregnancies: if r.pregnancies > 0.0 { 1.0 } else { 0.0 },
            ..*r
        })
        .collect()
}

/// Feature matrix with binary labels and a flag marking synthesised rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<u8>,
    pub synthetic: Vec<bool>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<u8>, synthetic: Vec<bool>) -> Result<Self> {
        let rows = features.rows();
        if features.shape().len() < 2 || labels.len() != rows || synthetic.len() != rows {
            return Err(Error::Data(format!(
                "dataset rows disagree: features {:?}, {} labels, {} flags",
                features.shape(),
                labels.len(),
                synthetic.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Data("labels must be 0 or 1".into()));
        }
        Ok(Self {
            features,
            labels,
            synthetic,
        })
    }

    pub fn from_records(records: &[RawRecord]) -> Self {
        let data = records.iter().flat_map(|r| r.features()).collect();
        let features = Tensor::new([records.len(), 8], data).expect("8 features per record");
        Self {
            features,
            labels: records.iter().map(|r| r.label).collect(),
            synthetic: vec![false; records.len()],
        }
    }

    pub fn empty(width: usize) -> Self {
        Self {
            features: Tensor::zeros([0, width]),
            labels: Vec::new(),
            synthetic: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.row_len()
    }

    /// `[count of label 0, count of label 1]`.
    pub fn class_counts(&self) -> [usize; 2] {
        let ones = self.labels.iter().filter(|&&l| l == 1).count();
        [self.labels.len() - ones, ones]
    }

    pub fn indices_with_label(&self, label: u8) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.labels[i] == label)
            .collect()
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            synthetic: indices.iter().map(|&i| self.synthetic[i]).collect(),
        }
    }

    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        Ok(Dataset {
            features: self.features.concat_rows(&other.features)?,
            labels: self.labels.iter().chain(&other.labels).copied().collect(),
            synthetic: self
                .synthetic
                .iter()
                .chain(&other.synthetic)
                .copied()
                .collect(),
        })
    }

    pub fn with_features(&self, features: Tensor) -> Result<Dataset> {
        Dataset::new(features, self.labels.clone(), self.synthetic.clone())
    }

    /// Labels as an `N x 1` tensor of 0.0 / 1.0.
    pub fn label_tensor(&self) -> Tensor {
        Tensor::new(
            [self.len(), 1],
            self.labels.iter().map(|&l| f64::from(l)).collect(),
        )
        .expect("one label per row")
    }
}

/// Per-column means used to fill missing (zero) entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImputationMeans {
    pub columns: Vec<usize>,
    pub means: Vec<f64>,
}

impl ImputationMeans {
    pub fn fit(train: &Dataset) -> Result<Self> {
        let mut means = Vec::with_capacity(IMPUTED_COLUMNS.len());
        for &c in &IMPUTED_COLUMNS {
            let (sum, count) = (0..train.len())
                .map(|r| train.features.row(r)[c])
                .filter(|&v| v != 0.0)
                .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
            if count == 0 {
                return Err(Error::Data(format!(
                    "cannot impute column {} ({}): every training entry is zero",
                    c, FEATURE_NAMES[c]
                )));
            }
            means.push(sum / count as f64);
        }
        Ok(Self {
            columns: IMPUTED_COLUMNS.to_vec(),
            means,
        })
    }

    pub fn apply(&self, data: &Dataset) -> Dataset {
        let mut out = data.clone();
        let width = out.width();
        for row in out.features.data_mut().chunks_exact_mut(width) {
            for (&c, &m) in self.columns.iter().zip(&self.means) {
                if row[c] == 0.0 {
                    row[c] = m;
                }
            }
        }
        out
    }
}

/// Fills zero entries of the imputed columns in both splits using means of
/// the non-zero training entries.
pub fn impute_missing(
    train: &Dataset,
    test: &Dataset,
) -> Result<(Dataset, Dataset, ImputationMeans)> {
    let means = ImputationMeans::fit(train)?;
    Ok((means.apply(train), means.apply(test), means))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizerKind {
    MinMax,
    Standard,
    Log,
}

impl std::str::FromStr for NormalizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minmax" => Ok(Self::MinMax),
            "standard" => Ok(Self::Standard),
            "log" => Ok(Self::Log),
            other => Err(Error::Argument(format!(
                "unknown normalizer {other:?} (minmax, standard, log)"
            ))),
        }
    }
}

/// Fitted per-feature statistics. For min-max `first`/`second` are min/max,
/// for standard they are mean/population standard deviation; log has none.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizerParams {
    pub kind: NormalizerKind,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub fitted_on: usize,
}

fn columns(x: &Tensor) -> Result<(usize, usize)> {
    if x.shape().len() != 2 {
        return Err(Error::Argument(format!(
            "normalizer expects a matrix, got shape {:?}",
            x.shape()
        )));
    }
    Ok((x.shape()[0], x.shape()[1]))
}

pub fn fit_normalizer(x: &Tensor, kind: NormalizerKind) -> Result<NormalizerParams> {
    let (n, d) = columns(x)?;
    let (mut first, mut second) = (Vec::new(), Vec::new());
    match kind {
        NormalizerKind::MinMax | NormalizerKind::Standard if n < 2 => {
            return Err(Error::Argument(format!(
                "{kind:?} normalizer needs at least 2 rows, got {n}"
            )));
        }
        NormalizerKind::MinMax => {
            for c in 0..d {
                let col = (0..n).map(|r| x.row(r)[c]);
                first.push(col.clone().fold(f64::INFINITY, f64::min));
                second.push(col.fold(f64::NEG_INFINITY, f64::max));
            }
        }
        NormalizerKind::Standard => {
            for c in 0..d {
                let mean = (0..n).map(|r| x.row(r)[c]).sum::<f64>() / n as f64;
                let var = (0..n).map(|r| (x.row(r)[c] - mean).powi(2)).sum::<f64>() / n as f64;
                first.push(mean);
                second.push(var.sqrt());
            }
        }
        NormalizerKind::Log => {}
    }
    Ok(NormalizerParams {
        kind,
        first,
        second,
        fitted_on: n,
    })
}

pub fn apply_normalizer(params: &NormalizerParams, x: &Tensor) -> Result<Tensor> {
    let (_, d) = columns(x)?;
    if params.kind != NormalizerKind::Log && params.first.len() != d {
        return Err(Error::shape(
            "apply_normalizer",
            &[params.first.len()],
            x.shape(),
        ));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(d) {
        for (c, v) in row.iter_mut().enumerate() {
            *v = match params.kind {
                NormalizerKind::MinMax => {
                    let (lo, hi) = (params.first[c], params.second[c]);
                    if hi > lo {
                        (*v - lo) / (hi - lo)
                    } else {
                        0.0
                    }
                }
                NormalizerKind::Standard => {
                    let (mean, sd) = (params.first[c], params.second[c]);
                    if sd > 0.0 {
                        (*v - mean) / sd
                    } else {
                        0.0
                    }
                }
                NormalizerKind::Log => {
                    if *v <= 0.0 {
                        return Err(Error::Domain(format!(
                            "log normalizer needs positive values, got {v}"
                        )));
                    }
                    v.ln()
                }
            };
        }
    }
    Ok(out)
}

/// Maps normalised values back. Constant features (which normalise to 0)
/// come back as their fitted constant.
pub fn invert_normalizer(params: &NormalizerParams, x: &Tensor) -> Result<Tensor> {
    let (_, d) = columns(x)?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(d) {
        for (c, v) in row.iter_mut().enumerate() {
            *v = match params.kind {
                NormalizerKind::MinMax => {
                    params.first[c] + *v * (params.second[c] - params.first[c])
                }
                NormalizerKind::Standard => params.first[c] + *v * params.second[c],
                NormalizerKind::Log => v.exp(),
            };
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Stratified, seeded train/test split.
///
/// The training size is `N - ceil(N * (1 - ratio))`. Each class first gets
/// `floor(n_c * train / N)` training rows; rows left over by the flooring go
/// to classes in ascending order of size. Within each class the rows are
/// shuffled with `seed` and the first ones go to training. Both index lists
/// are returned sorted.
pub fn split_train_test(labels: &[u8], ratio: f64, seed: u64) -> Result<SplitIndices> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Argument(format!(
            "split ratio {ratio} must lie in (0, 1)"
        )));
    }
    let n = labels.len();
    let by_class: Vec<Vec<usize>> = (0..2u8)
        .map(|c| (0..n).filter(|&i| labels[i] == c).collect())
        .collect();
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!(
            "class {c} has no rows; cannot stratify"
        )));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Data("labels must be 0 or 1".into()));
    }

    let test_total = ((n as f64) * (1.0 - ratio) - 1e-9).ceil() as usize;
    let train_total = n - test_total;
    let mut quota: Vec<usize> = by_class
        .iter()
        .map(|rows| rows.len() * train_total / n)
        .collect();
    let mut leftover = train_total - quota.iter().sum::<usize>();
    let mut by_size: Vec<usize> = (0..by_class.len()).collect();
    by_size.sort_by_key(|&c| (by_class[c].len(), c));
    for &c in by_size.iter().cycle() {
        if leftover == 0 {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            leftover -= 1;
        }
    }

    let rng = Rng::new(seed);
    let (mut train, mut test) = (
        Vec::with_capacity(train_total),
        Vec::with_capacity(test_total),
    );
    for (c, rows) in by_class.iter().enumerate() {
        let mut rows = rows.clone();
        rng.derive(c as u64).shuffle(&mut rows);
        train.extend_from_slice(&rows[..quota[c]]);
        test.extend_from_slice(&rows[quota[c]..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndices { train, test, seed })
}
