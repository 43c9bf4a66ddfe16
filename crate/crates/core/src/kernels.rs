//! Shift-invariant base kernels on covariates and the meta-kernels on
//! `(x, y)` pairs used to drive thinning.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    /// `exp(-r^2 / (2 h^2))`
    Gaussian,
    /// `exp(-r / h)`
    Laplace,
    /// `max(0, 1 - r / h)`
    Wendland0,
}

impl std::str::FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "rbf" => Ok(KernelFamily::Gaussian),
            "laplace" | "laplacian" => Ok(KernelFamily::Laplace),
            "wendland0" | "wendland" => Ok(KernelFamily::Wendland0),
            other => Err(Error::input(format!("unknown kernel family '{other}'"))),
        }
    }
}

impl std::fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KernelFamily::Gaussian => "gaussian",
            KernelFamily::Laplace => "laplace",
            KernelFamily::Wendland0 => "wendland0",
        })
    }
}

/// A base kernel `k(x1, x2) = kappa(||x1 - x2|| / h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    family: KernelFamily,
    bandwidth: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::input(format!("bandwidth must be positive, got {bandwidth}")));
        }
        Ok(KernelSpec { family, bandwidth })
    }

    pub fn gaussian(h: f64) -> Result<Self> {
        Self::new(KernelFamily::Gaussian, h)
    }

    pub fn laplace(h: f64) -> Result<Self> {
        Self::new(KernelFamily::Laplace, h)
    }

    pub fn wendland0(h: f64) -> Result<Self> {
        Self::new(KernelFamily::Wendland0, h)
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Kernel value as a function of the squared Euclidean distance.
    #[inline]
    pub fn eval_sq_dist(&self, sq: f64) -> f64 {
        let h = self.bandwidth;
        match self.family {
            KernelFamily::Gaussian => (-sq / (2.0 * h * h)).exp(),
            KernelFamily::Laplace => (-sq.sqrt() / h).exp(),
            KernelFamily::Wendland0 => (1.0 - sq.sqrt() / h).max(0.0),
        }
    }

    pub fn eval(&self, x1: &[f64], x2: &[f64]) -> Result<f64> {
        if x1.len() != x2.len() {
            return Err(Error::DimensionMismatch(x1.len(), x2.len()));
        }
        if x1.is_empty() {
            return Err(Error::input("kernel arguments must have dimension >= 1"));
        }
        Ok(self.eval_unchecked(x1, x2))
    }

    /// Same as [`eval`](Self::eval) with the length check left to the caller.
    #[inline]
    pub fn eval_unchecked(&self, x1: &[f64], x2: &[f64]) -> f64 {
        self.eval_sq_dist(sq_dist(x1, x2))
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// How labels enter the thinning kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaMode {
    /// `k(x1, x2)`, labels ignored.
    BaseOnly,
    /// `k` applied to the concatenations `(x1, y1)` and `(x2, y2)`.
    Concatenated,
    /// `k(x1, x2) (1 + y1 y2)`
    Nw,
    /// `k(x1, x2)^2 + k(x1, x2) y1 y2`
    Rr,
}

impl MetaMode {
    pub const ALL: [MetaMode; 4] = [MetaMode::BaseOnly, MetaMode::Concatenated, MetaMode::Nw, MetaMode::Rr];
}

impl std::str::FromStr for MetaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "base" | "baseonly" | "base-only" => Ok(MetaMode::BaseOnly),
            "concat" | "concatenated" => Ok(MetaMode::Concatenated),
            "nw" => Ok(MetaMode::Nw),
            "rr" | "krr" => Ok(MetaMode::Rr),
            other => Err(Error::input(format!("unknown meta-kernel mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for MetaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MetaMode::BaseOnly => "base",
            MetaMode::Concatenated => "concat",
            MetaMode::Nw => "nw",
            MetaMode::Rr => "rr",
        })
    }
}

/// A kernel on labeled points built from a base covariate kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaKernelSpec {
    pub mode: MetaMode,
    pub base: KernelSpec,
}

impl MetaKernelSpec {
    pub fn new(mode: MetaMode, base: KernelSpec) -> Self {
        MetaKernelSpec { mode, base }
    }

    pub fn eval(&self, x1: &[f64], y1: f64, x2: &[f64], y2: f64) -> Result<f64> {
        if x1.len() != x2.len() {
            return Err(Error::DimensionMismatch(x1.len(), x2.len()));
        }
        if x1.is_empty() {
            return Err(Error::input("kernel arguments must have dimension >= 1"));
        }
        Ok(self.eval_unchecked(x1, y1, x2, y2))
    }

    #[inline]
    pub fn eval_unchecked(&self, x1: &[f64], y1: f64, x2: &[f64], y2: f64) -> f64 {
        let sq = sq_dist(x1, x2);
        match self.mode {
            MetaMode::BaseOnly => self.base.eval_sq_dist(sq),
            MetaMode::Concatenated => self.base.eval_sq_dist(sq + (y1 - y2) * (y1 - y2)),
            MetaMode::Nw => self.base.eval_sq_dist(sq) * (1.0 + y1 * y2),
            MetaMode::Rr => {
                let k = self.base.eval_sq_dist(sq);
                k * k + k * y1 * y2
            }
        }
    }

    /// Meta-kernel between two rows of the same dataset.
    #[inline]
    pub fn eval_rows(&self, data: &LabeledDataset, i: usize, j: usize) -> f64 {
        self.eval_unchecked(data.row(i), data.label(i), data.row(j), data.label(j))
    }
}

/// Dense symmetric kernel matrix, stored in full row-major form.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl GramMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    /// Upper triangle computed by `f`, lower triangle mirrored.
    pub(crate) fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = f(i, j);
                entries[i * n + j] = v;
                entries[j * n + i] = v;
            }
        }
        GramMatrix { n, entries }
    }
}

/// Gram matrix of `spec` over every row of `data`.
pub fn gram(spec: &MetaKernelSpec, data: &LabeledDataset) -> Result<GramMatrix> {
    let all: Vec<usize> = (0..data.len()).collect();
    gram_indexed(spec, data, &all)
}

/// Gram matrix of `spec` over the rows `indices` (in that order).
pub fn gram_indexed(spec: &MetaKernelSpec, data: &LabeledDataset, indices: &[usize]) -> Result<GramMatrix> {
    if indices.is_empty() {
        return Err(Error::input("gram matrix needs at least one point"));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= data.len()) {
        return Err(Error::input(format!("index {bad} out of range for {} rows", data.len())));
    }
    Ok(GramMatrix::from_fn(indices.len(), |a, b| {
        spec.eval_rows(data, indices[a], indices[b])
    }))
}

/// Gram matrix of a base kernel over covariate rows `indices`.
pub(crate) fn base_gram(base: &KernelSpec, data: &LabeledDataset, indices: &[usize]) -> GramMatrix {
    GramMatrix::from_fn(indices.len(), |a, b| {
        base.eval_unchecked(data.row(indices[a]), data.row(indices[b]))
    })
}
