//! Labeled datasets: the synthetic regression problem, CSV ingestion,
//! feature standardization, train/test splitting and power-of-four
//! truncation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamKey;

/// Ordered collection of `(x, y)` pairs with `x` stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    x: Vec<f64>,
    y: Vec<f64>,
    d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_names: Option<Vec<String>>,
}

impl LabeledDataset {
    /// Builds a dataset from a flat row-major covariate buffer.
    pub fn new(x: Vec<f64>, y: Vec<f64>, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::input("covariate dimension must be at least 1"));
        }
        if y.is_empty() {
            return Err(Error::input("dataset must contain at least one row"));
        }
        if x.len() != y.len() * d {
            return Err(Error::input(format!(
                "covariate buffer has {} entries, expected {} rows x {} columns",
                x.len(),
                y.len(),
                d
            )));
        }
        if let Some(p) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!(
                "non-finite covariate at row {}, column {}",
                p / d,
                p % d
            )));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!("non-finite label at row {i}")));
        }
        Ok(LabeledDataset {
            x,
            y,
            d,
            feature_names: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], y: Vec<f64>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch(d, r.len()));
        }
        if rows.len() != y.len() {
            return Err(Error::input(format!(
                "{} covariate rows but {} labels",
                rows.len(),
                y.len()
            )));
        }
        Self::new(rows.concat(), y, d)
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.d {
            return Err(Error::DimensionMismatch(self.d, names.len()));
        }
        self.feature_names = Some(names);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    #[inline]
    pub fn label(&self, i: usize) -> f64 {
        self.y[i]
    }

    pub fn labels(&self) -> &[f64] {
        &self.y
    }

    pub fn covariates(&self) -> &[f64] {
        &self.x
    }

    pub fn feature_names(&self) -> Option<&[String]> {
        self.feature_names.as_deref()
    }

    /// Rows `indices` in the given order, as a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::input("cannot take an empty subset"));
        }
        let mut x = Vec::with_capacity(indices.len() * self.d);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::input(format!(
                    "row index {i} out of range for {} rows",
                    self.len()
                )));
            }
            x.extend_from_slice(self.row(i));
            y.push(self.y[i]);
        }
        Ok(LabeledDataset {
            x,
            y,
            d: self.d,
            feature_names: self.feature_names.clone(),
        })
    }

    pub fn summary(&self) -> DatasetSummary {
        let columns = (0..self.d)
            .map(|j| {
                let col: Vec<f64> = (0..self.len()).map(|i| self.row(i)[j]).collect();
                ColumnSummary::of(
                    self.feature_names
                        .as_ref()
                        .map_or_else(|| format!("x{j}"), |v| v[j].clone()),
                    &col,
                )
            })
            .collect();
        DatasetSummary {
            n: self.len(),
            d: self.d,
            columns,
            target: ColumnSummary::of("y".to_string(), &self.y),
        }
    }
}

/// JSON summary of a dataset: size plus per-column moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n: usize,
    pub d: usize,
    pub columns: Vec<ColumnSummary>,
    pub target: ColumnSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSummary {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl ColumnSummary {
    fn of(name: String, v: &[f64]) -> Self {
        let (mean, std) = mean_std(v);
        ColumnSummary {
            name,
            mean,
            std,
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Population mean and standard deviation (two-pass).
fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Regression function of the synthetic problem: `8 sin(8 pi x) exp(x)`.
pub fn sim_regression_fn(x: f64) -> f64 {
    8.0 * (8.0 * std::f64::consts::PI * x).sin() * x.exp()
}

/// Draws `n` points with `x ~ Unif[-sqrt 3, sqrt 3]` and
/// `y = 8 sin(8 pi x) exp(x) + N(0, 1)`.
pub fn gen_sim(n: usize, seed: u64) -> Result<LabeledDataset> {
    if n == 0 {
        return Err(Error::input("n must be at least 1"));
    }
    let mut rng = StreamKey::new(seed).child(0x5157).rng();
    let a = 3f64.sqrt();
    let ux = Uniform::new_inclusive(-a, a).expect("valid range");
    let noise = Normal::new(0.0, 1.0).expect("valid sigma");
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let xi = ux.sample(&mut rng);
        x.push(xi);
        y.push(sim_regression_fn(xi) + noise.sample(&mut rng));
    }
    LabeledDataset::new(x, y, 1)
}

/// Which CSV column holds the labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TargetColumn {
    Name(String),
    Index(usize),
    Last,
}

impl std::str::FromStr for TargetColumn {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s.parse::<usize>() {
            Ok(i) => TargetColumn::Index(i),
            Err(_) => TargetColumn::Name(s.to_string()),
        })
    }
}

/// Reads a comma-separated numeric file. The target column becomes `y`;
/// all other columns become covariates in file order.
pub fn load_csv(path: impl AsRef<Path>, target: &TargetColumn, has_header: bool) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::input(format!("{}: file not found", path.display())),
        _ => Error::Io(e),
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let malformed = |e: csv::Error| -> Error {
        if e.is_io_error() {
            Error::Csv(e)
        } else {
            Error::input(format!("{}: {e}", path.display()))
        }
    };

    let header: Option<Vec<String>> = if has_header {
        Some(reader.headers().map_err(malformed)?.iter().map(str::to_string).collect())
    } else {
        None
    };

    let mut width: Option<usize> = header.as_ref().map(Vec::len);
    let target_idx = |width: usize| -> Result<usize> {
        match target {
            TargetColumn::Last => Ok(width.saturating_sub(1)),
            TargetColumn::Index(i) if *i < width => Ok(*i),
            TargetColumn::Index(i) => Err(Error::input(format!(
                "target column {i} out of range for {width} columns"
            ))),
            TargetColumn::Name(name) => header
                .as_ref()
                .and_then(|h| h.iter().position(|c| c == name))
                .ok_or_else(|| Error::input(format!("target column '{name}' not found in header"))),
        }
    };

    let mut t: Option<usize> = match width {
        Some(w) => Some(target_idx(w)?),
        None => None,
    };
    let mut x = Vec::new();
    let mut y = Vec::new();
    // 1-based file line numbers in messages
    let first_line = if has_header { 2 } else { 1 };
    for (r, rec) in reader.records().enumerate() {
        let line = r + first_line;
        let rec = rec.map_err(malformed)?;
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(Error::input(format!(
                "{}: line {line} has {} fields, expected {w}",
                path.display(),
                rec.len()
            )));
        }
        let ti = match t {
            Some(ti) => ti,
            None => *t.insert(target_idx(w)?),
        };
        if w < 2 {
            return Err(Error::input("need at least one covariate column besides the target"));
        }
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                Error::input(format!(
                    "{}: line {line}, column {c}: non-numeric value '{field}'",
                    path.display()
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::input(format!(
                    "{}: line {line}, column {c}: non-finite value",
                    path.display()
                )));
            }
            if c == ti {
                y.push(v);
            } else {
                x.push(v);
            }
        }
    }
    if y.is_empty() {
        return Err(Error::input(format!("{}: no data rows", path.display())));
    }
    let w = width.unwrap_or(0);
    let ds = LabeledDataset::new(x, y, w - 1)?;
    match (header, t) {
        (Some(h), Some(ti)) => {
            let names = h
                .into_iter()
                .enumerate()
                .filter(|&(c, _)| c != ti)
                .map(|(_, s)| s)
                .collect();
            ds.with_feature_names(names)
        }
        _ => Ok(ds),
    }
}

/// Per-feature mean and standard deviation used to standardize covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StandardizationStats {
    pub fn apply(&self, data: &LabeledDataset) -> Result<LabeledDataset> {
        self.map(data, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, data: &LabeledDataset) -> Result<LabeledDataset> {
        self.map(data, |v, m, s| v * s + m)
    }

    fn map(&self, data: &LabeledDataset, f: impl Fn(f64, f64, f64) -> f64) -> Result<LabeledDataset> {
        if data.dim() != self.mean.len() {
            return Err(Error::DimensionMismatch(self.mean.len(), data.dim()));
        }
        let d = data.dim();
        let x = data
            .covariates()
            .iter()
            .enumerate()
            .map(|(p, &v)| f(v, self.mean[p % d], self.std[p % d]))
            .collect();
        let mut out = LabeledDataset::new(x, data.labels().to_vec(), d)?;
        out.feature_names = data.feature_names.clone();
        Ok(out)
    }
}

/// Centers and scales every covariate column to mean 0 and standard
/// deviation 1. Constant columns keep a unit scale and become all zero.
/// Labels are untouched.
pub fn standardize(data: &LabeledDataset) -> Result<(LabeledDataset, StandardizationStats)> {
    if data.len() < 2 {
        return Err(Error::input("standardization needs at least 2 rows"));
    }
    let d = data.dim();
    let mut mean = Vec::with_capacity(d);
    let mut std = Vec::with_capacity(d);
    for j in 0..d {
        let col: Vec<f64> = (0..data.len()).map(|i| data.row(i)[j]).collect();
        let (m, s) = mean_std(&col);
        mean.push(m);
        std.push(if s > 0.0 && s.is_finite() { s } else { 1.0 });
    }
    let stats = StandardizationStats { mean, std };
    Ok((stats.apply(data)?, stats))
}

/// Affine label scaling `(y - mean) / std`, fitted on one dataset and
/// applied to others.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScaling {
    pub mean: f64,
    pub std: f64,
}

impl TargetScaling {
    pub fn fit(data: &LabeledDataset) -> Result<Self> {
        if data.len() < 2 {
            return Err(Error::input("label scaling needs at least 2 rows"));
        }
        let (mean, s) = mean_std(data.labels());
        Ok(TargetScaling {
            mean,
            std: if s > 0.0 && s.is_finite() { s } else { 1.0 },
        })
    }

    pub fn apply(&self, data: &LabeledDataset) -> Result<LabeledDataset> {
        let y = data.labels().iter().map(|v| (v - self.mean) / self.std).collect();
        let ds = LabeledDataset::new(data.covariates().to_vec(), y, data.dim())?;
        match data.feature_names() {
            Some(names) => ds.with_feature_names(names.to_vec()),
            None => Ok(ds),
        }
    }
}

/// Seeded random permutation followed by a contiguous cut.
pub fn split(
    data: &LabeledDataset,
    fractions: (f64, f64),
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let (ftrain, ftest) = fractions;
    if !(ftrain > 0.0 && ftest > 0.0) || ((ftrain + ftest) - 1.0).abs() > 1e-9 {
        return Err(Error::input(format!(
            "split fractions must be positive and sum to 1, got ({ftrain}, {ftest})"
        )));
    }
    let n = data.len();
    let n_train = (n as f64 * ftrain).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::input(format!(
            "split of {n} rows with fractions ({ftrain}, {ftest}) leaves an empty part"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut StreamKey::new(seed).child(0x5911).rng());
    Ok((data.subset(&perm[..n_train])?, data.subset(&perm[n_train..])?))
}

/// Largest power of four not exceeding `n` (for `n >= 1`).
pub fn largest_pow4_at_most(n: usize) -> usize {
    let mut p = 1usize;
    while p <= n / 4 {
        p *= 4;
    }
    p
}

/// Uniformly subsamples (without replacement) down to the largest power of
/// four `<= n`, keeping the surviving rows in their original order.
/// Returns the kept row indices alongside the dataset.
pub fn truncate_pow4_indices(data: &LabeledDataset, seed: u64) -> Result<(LabeledDataset, Vec<usize>)> {
    let n = data.len();
    if n < 4 {
        return Err(Error::input(format!("need at least 4 rows to truncate, got {n}")));
    }
    let target = largest_pow4_at_most(n);
    if target == n {
        return Ok((data.clone(), (0..n).collect()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = StreamKey::new(seed).child(0x7a4).rng();
    let (kept, _) = idx.partial_shuffle(&mut rng, target);
    let mut kept = kept.to_vec();
    kept.sort_unstable();
    log::info!("truncated dataset from {n} to {target} rows ({} discarded)", n - target);
    Ok((data.subset(&kept)?, kept))
}

pub fn truncate_pow4(data: &LabeledDataset, seed: u64) -> Result<LabeledDataset> {
    truncate_pow4_indices(data, seed).map(|(d, _)| d)
}

/// Uniform sample of `m` row indices without replacement, in draw order.
pub(crate) fn sample_without_replacement<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let (head, _) = idx.partial_shuffle(rng, m);
    head.to_vec()
}
