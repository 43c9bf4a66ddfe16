//! Nadaraya-Watson and kernel ridge regression on full data or a coreset.

use faer::linalg::solvers::Solve;
use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::kernels::{base_gram, KernelSpec, MetaKernelSpec, MetaMode};
use crate::thinning::{kt_compress_pp, Coreset, ThinningConfig};

const MAX_JITTER_RETRIES: usize = 6;
const REFINEMENT_STEPS: usize = 2;

/// A fitted regression function.
pub trait Predictor {
    fn dim(&self) -> usize;

    fn support_len(&self) -> usize;

    /// Prediction plus a flag telling whether the estimator fell back to its
    /// default value.
    fn predict_flagged(&self, x: &[f64]) -> Result<(f64, bool)>;

    fn predict(&self, x: &[f64]) -> Result<f64> {
        self.predict_flagged(x).map(|(v, _)| v)
    }
}

fn check_dim(expected: usize, x: &[f64]) -> Result<()> {
    if x.len() != expected {
        return Err(Error::DimensionMismatch(expected, x.len()));
    }
    Ok(())
}

/// Rows selected by an optional coreset, or all rows.
fn support_rows(data: &LabeledDataset, coreset: Option<&Coreset>) -> Result<Vec<usize>> {
    match coreset {
        None => Ok((0..data.len()).collect()),
        Some(c) => {
            if c.parent_size() != data.len() {
                return Err(Error::input(format!(
                    "coreset was built for {} rows but the dataset has {}",
                    c.parent_size(),
                    data.len()
                )));
            }
            if c.is_empty() {
                return Err(Error::input("empty support"));
            }
            Ok(c.indices().to_vec())
        }
    }
}

fn gather_x(data: &LabeledDataset, rows: &[usize]) -> Vec<f64> {
    rows.iter().flat_map(|&i| data.row(i).iter().copied()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NwModel {
    pub base: KernelSpec,
    d: usize,
    support_x: Vec<f64>,
    support_y: Vec<f64>,
}

impl NwModel {
    pub fn support_x(&self, i: usize) -> &[f64] {
        &self.support_x[i * self.d..(i + 1) * self.d]
    }

    pub fn support_y(&self) -> &[f64] {
        &self.support_y
    }
}

impl Predictor for NwModel {
    fn dim(&self) -> usize {
        self.d
    }

    fn support_len(&self) -> usize {
        self.support_y.len()
    }

    /// Kernel-weighted label average; 0 when every weight vanishes.
    fn predict_flagged(&self, x: &[f64]) -> Result<(f64, bool)> {
        check_dim(self.d, x)?;
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &y) in self.support_y.iter().enumerate() {
            let w = self.base.eval_unchecked(x, self.support_x(i));
            num += w * y;
            den += w;
        }
        if den == 0.0 {
            Ok((0.0, true))
        } else {
            Ok((num / den, false))
        }
    }
}

pub fn fit_nw(data: &LabeledDataset, coreset: Option<&Coreset>, base: KernelSpec) -> Result<NwModel> {
    let rows = support_rows(data, coreset)?;
    Ok(NwModel {
        base,
        d: data.dim(),
        support_x: gather_x(data, &rows),
        support_y: rows.iter().map(|&i| data.label(i)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KrrModel {
    pub base: KernelSpec,
    pub lambda: f64,
    d: usize,
    support_x: Vec<f64>,
    alpha: Vec<f64>,
    /// Diagonal jitter that was needed for the factorization.
    #[serde(default)]
    jitter: f64,
}

impl KrrModel {
    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn support_x(&self, i: usize) -> &[f64] {
        &self.support_x[i * self.d..(i + 1) * self.d]
    }

    /// Model with the given dual coefficients, bypassing the solve.
    pub fn from_parts(base: KernelSpec, lambda: f64, d: usize, support_x: Vec<f64>, alpha: Vec<f64>) -> Result<Self> {
        if d == 0 || support_x.len() != d * alpha.len() || alpha.is_empty() {
            return Err(Error::input("support and alpha sizes disagree"));
        }
        Ok(KrrModel {
            base,
            lambda,
            d,
            support_x,
            alpha,
            jitter: 0.0,
        })
    }
}

impl Predictor for KrrModel {
    fn dim(&self) -> usize {
        self.d
    }

    fn support_len(&self) -> usize {
        self.alpha.len()
    }

    fn predict_flagged(&self, x: &[f64]) -> Result<(f64, bool)> {
        check_dim(self.d, x)?;
        let v = self
            .alpha
            .iter()
            .enumerate()
            .map(|(i, a)| a * self.base.eval_unchecked(x, self.support_x(i)))
            .sum();
        Ok((v, false))
    }
}

/// Solves `(K + m lambda I) alpha = y` over the support rows.
pub fn fit_krr(data: &LabeledDataset, coreset: Option<&Coreset>, base: KernelSpec, lambda: f64) -> Result<KrrModel> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::input(format!("lambda must be positive, got {lambda}")));
    }
    let rows = support_rows(data, coreset)?;
    let m = rows.len();
    let k = base_gram(&base, data, &rows);
    let y: Vec<f64> = rows.iter().map(|&i| data.label(i)).collect();
    let ridge = m as f64 * lambda;
    let a = Mat::<f64>::from_fn(m, m, |i, j| k.get(i, j) + if i == j { ridge } else { 0.0 });
    let (alpha, jitter) = solve_spd(&a, &y, k.trace() / m as f64)?;

    let y_inf = y.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let resid = residual_inf(&a, &alpha, &y);
    if !(resid <= 1e-6 * (1.0 + y_inf)) {
        log::warn!("ridge system residual {resid:e} exceeds tolerance");
        return Err(Error::Factorization { jitter });
    }
    Ok(KrrModel {
        base,
        lambda,
        d: data.dim(),
        support_x: gather_x(data, &rows),
        alpha,
        jitter,
    })
}

fn residual_inf(a: &Mat<f64>, x: &[f64], b: &[f64]) -> f64 {
    residual(a, x, b).iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// `b - a x`
fn residual(a: &Mat<f64>, x: &[f64], b: &[f64]) -> Vec<f64> {
    (0..b.len())
        .map(|i| b[i] - (0..x.len()).map(|j| a[(i, j)] * x[j]).sum::<f64>())
        .collect()
}

/// Cholesky solve with diagonal jitter escalation, followed by iterative
/// refinement against the unjittered matrix. Returns the solution and the
/// jitter used.
fn solve_spd(a: &Mat<f64>, b: &[f64], mean_diag: f64) -> Result<(Vec<f64>, f64)> {
    let m = b.len();
    let mut jitter = 0.0;
    for attempt in 0..=MAX_JITTER_RETRIES {
        if attempt == 1 {
            jitter = 1e-10 * mean_diag.max(f64::MIN_POSITIVE);
        } else if attempt > 1 {
            jitter *= 10.0;
        }
        let shifted;
        let target = if jitter > 0.0 {
            shifted = Mat::<f64>::from_fn(m, m, |i, j| a[(i, j)] + if i == j { jitter } else { 0.0 });
            &shifted
        } else {
            a
        };
        let Ok(llt) = target.llt(Side::Lower) else {
            log::debug!("cholesky failed at jitter {jitter:e}");
            continue;
        };
        let rhs = Mat::<f64>::from_fn(m, 1, |i, _| b[i]);
        let sol = llt.solve(&rhs);
        let mut x: Vec<f64> = (0..m).map(|i| sol[(i, 0)]).collect();
        for _ in 0..REFINEMENT_STEPS {
            let r = residual(a, &x, b);
            let dx = llt.solve(Mat::<f64>::from_fn(m, 1, |i, _| r[i]));
            for (xi, i) in x.iter_mut().zip(0..) {
                *xi += dx[(i, 0)];
            }
        }
        if x.iter().all(|v| v.is_finite()) {
            return Ok((x, jitter));
        }
    }
    Err(Error::Factorization { jitter })
}

fn kt_config(meta: MetaKernelSpec, delta: f64, seed: u64) -> Result<ThinningConfig> {
    ThinningConfig::new(meta, delta, seed)
}

/// Thins with the NW meta-kernel, then fits NW on the coreset.
pub fn fit_kt_nw(data: &LabeledDataset, base: KernelSpec, delta: f64, seed: u64) -> Result<NwModel> {
    let cfg = kt_config(MetaKernelSpec::new(MetaMode::Nw, base), delta, seed)?;
    let coreset = kt_compress_pp(data, &cfg)?;
    fit_nw(data, Some(&coreset), base)
}

/// Thins with the RR meta-kernel, then fits KRR on the coreset with
/// `lambda_prime`.
pub fn fit_kt_krr(data: &LabeledDataset, base: KernelSpec, delta: f64, lambda_prime: f64, seed: u64) -> Result<KrrModel> {
    if !(lambda_prime > 0.0) {
        return Err(Error::input(format!("lambda must be positive, got {lambda_prime}")));
    }
    let cfg = kt_config(MetaKernelSpec::new(MetaMode::Rr, base), delta, seed)?;
    let coreset = kt_compress_pp(data, &cfg)?;
    fit_krr(data, Some(&coreset), base, lambda_prime)
}

/// Mean squared error and number of defaulted predictions over a test set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mse: f64,
    pub defaulted: usize,
}

pub fn evaluate<P: Predictor + ?Sized>(model: &P, test: &LabeledDataset) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::input("empty test set"));
    }
    check_dim(model.dim(), test.row(0))?;
    let mut sse = 0.0;
    let mut defaulted = 0;
    for i in 0..test.len() {
        let (p, flag) = model.predict_flagged(test.row(i))?;
        sse += (p - test.label(i)).powi(2);
        defaulted += usize::from(flag);
    }
    Ok(Evaluation {
        mse: sse / test.len() as f64,
        defaulted,
    })
}

pub fn mse<P: Predictor + ?Sized>(model: &P, test: &LabeledDataset) -> Result<f64> {
    evaluate(model, test).map(|e| e.mse)
}
