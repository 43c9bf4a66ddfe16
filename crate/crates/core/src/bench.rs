//! Seeded trials over {full, st, kt} x {nw, krr}: fitting, timing, grid
//! search, meta-kernel ablations and result emission.

use std::borrow::Cow;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{gen_sim, largest_pow4_at_most, truncate_pow4_indices, LabeledDataset};
use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, KernelSpec, MetaKernelSpec, MetaMode};
use crate::regression::{fit_krr, fit_nw, KrrModel, NwModel, Predictor};
use crate::rng::StreamKey;
use crate::thinning::{kt_compress_pp, standard_thin, Coreset, ThinningConfig, DEFAULT_DELTA};

const ST_STREAM: u64 = 0x57;
const SIM_TRAIN: u64 = 1;
const SIM_VALIDATION: u64 = 2;
const SIM_TEST: u64 = 3;

pub const DEFAULT_H_GRID: [f64; 7] = [0.01, 0.0316, 0.1, 0.316, 1.0, 3.16, 10.0];
pub const DEFAULT_LAMBDA_GRID: [f64; 5] = [1e-5, 1e-4, 1e-3, 1e-2, 1e-1];
pub const DEFAULT_SIM_SIZE: usize = 10_000;

/// `per_decade` log-spaced values per decade from `10^lo` to `10^hi`
/// inclusive.
pub fn log_grid(lo: i32, hi: i32, per_decade: usize) -> Vec<f64> {
    let steps = (hi - lo) as usize * per_decade;
    (0..=steps)
        .map(|i| 10f64.powf(f64::from(lo) + i as f64 / per_decade as f64))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Nw,
    Krr,
}

impl Estimator {
    /// Meta-kernel matched to the estimator.
    pub fn target_mode(self) -> MetaMode {
        match self {
            Estimator::Nw => MetaMode::Nw,
            Estimator::Krr => MetaMode::Rr,
        }
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nw" => Ok(Estimator::Nw),
            "krr" => Ok(Estimator::Krr),
            other => Err(Error::input(format!("unknown estimator '{other}' (expected nw or krr)"))),
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimator::Nw => "nw",
            Estimator::Krr => "krr",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Thinning {
    Full,
    St,
    Kt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Method {
    pub thinning: Thinning,
    pub estimator: Estimator,
}

impl Method {
    pub const fn new(thinning: Thinning, estimator: Estimator) -> Self {
        Method { thinning, estimator }
    }

    pub const ALL: [Method; 6] = [
        Method::new(Thinning::Full, Estimator::Nw),
        Method::new(Thinning::St, Estimator::Nw),
        Method::new(Thinning::Kt, Estimator::Nw),
        Method::new(Thinning::Full, Estimator::Krr),
        Method::new(Thinning::St, Estimator::Krr),
        Method::new(Thinning::Kt, Estimator::Krr),
    ];

    pub fn is_krr(self) -> bool {
        self.estimator == Estimator::Krr
    }

    pub fn is_randomized(self) -> bool {
        self.thinning != Thinning::Full
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let (t, e) = lower
            .split_once('-')
            .ok_or_else(|| Error::input(format!("unknown method '{s}' (expected e.g. kt-krr)")))?;
        let thinning = match t {
            "full" => Thinning::Full,
            "st" => Thinning::St,
            "kt" => Thinning::Kt,
            _ => return Err(Error::input(format!("unknown method '{s}' (expected e.g. kt-krr)"))),
        };
        Ok(Method::new(thinning, e.parse()?))
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = match self.thinning {
            Thinning::Full => "full",
            Thinning::St => "st",
            Thinning::Kt => "kt",
        };
        write!(f, "{t}-{}", self.estimator)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub method: Method,
    pub n: usize,
    pub base: KernelSpec,
    pub lambda: Option<f64>,
    pub delta: f64,
    pub seed: u64,
    /// Thinning meta-kernel mode for ablations; its base kernel is `base`.
    pub meta_override: Option<MetaMode>,
    /// Report the 0.5-threshold classification error instead of MSE.
    #[serde(default)]
    pub binary_labels: bool,
}

impl TrialConfig {
    pub fn new(method: Method, n: usize, base: KernelSpec, lambda: Option<f64>, seed: u64) -> Result<Self> {
        let cfg = TrialConfig {
            method,
            n,
            base,
            lambda,
            delta: DEFAULT_DELTA,
            seed,
            meta_override: None,
            binary_labels: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_delta(mut self, delta: f64) -> Result<Self> {
        self.delta = delta;
        self.validate()?;
        Ok(self)
    }

    pub fn with_meta_override(mut self, mode: MetaMode) -> Result<Self> {
        self.meta_override = Some(mode);
        self.validate()?;
        Ok(self)
    }

    pub fn with_binary_labels(mut self, on: bool) -> Self {
        self.binary_labels = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match (self.method.is_krr(), self.lambda) {
            (true, None) => return Err(Error::input(format!("{} needs a lambda", self.method))),
            (false, Some(_)) => return Err(Error::input(format!("{} takes no lambda", self.method))),
            (true, Some(l)) if !(l > 0.0 && l.is_finite()) => {
                return Err(Error::input(format!("lambda must be positive, got {l}")))
            }
            _ => {}
        }
        if self.meta_override.is_some() && self.method.thinning != Thinning::Kt {
            return Err(Error::input("a meta-kernel override needs a kt-* method"));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::input(format!("delta must lie in (0, 1], got {}", self.delta)));
        }
        if self.n == 0 {
            return Err(Error::input("n must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub config: TrialConfig,
    /// Test MSE, or the classification error rate for binary labels.
    pub mse: f64,
    pub train_seconds: f64,
    pub predict_seconds_per_1k: f64,
    pub n_out: usize,
    pub defaulted_predictions: usize,
}

#[derive(Debug, Clone)]
pub enum FittedModel {
    Nw(NwModel),
    Krr(KrrModel),
}

impl Predictor for FittedModel {
    fn dim(&self) -> usize {
        match self {
            FittedModel::Nw(m) => m.dim(),
            FittedModel::Krr(m) => m.dim(),
        }
    }

    fn support_len(&self) -> usize {
        match self {
            FittedModel::Nw(m) => m.support_len(),
            FittedModel::Krr(m) => m.support_len(),
        }
    }

    fn predict_flagged(&self, x: &[f64]) -> Result<(f64, bool)> {
        match self {
            FittedModel::Nw(m) => m.predict_flagged(x),
            FittedModel::Krr(m) => m.predict_flagged(x),
        }
    }
}

fn fit_on(est: Estimator, data: &LabeledDataset, coreset: Option<&Coreset>, base: KernelSpec, lambda: Option<f64>) -> Result<FittedModel> {
    Ok(match est {
        Estimator::Nw => FittedModel::Nw(fit_nw(data, coreset, base)?),
        Estimator::Krr => FittedModel::Krr(fit_krr(data, coreset, base, lambda.expect("validated"))?),
    })
}

/// Rows the configured method fits on: the training set (or its power-of-4
/// truncation for kt-*) and, for thinned methods, the selected coreset.
pub fn select_support<'a>(config: &TrialConfig, train: &'a LabeledDataset) -> Result<(Cow<'a, LabeledDataset>, Option<Coreset>)> {
    config.validate()?;
    match config.method.thinning {
        Thinning::Full => Ok((Cow::Borrowed(train), None)),
        Thinning::St => {
            let n_out = largest_pow4_at_most(train.len()).isqrt();
            let mut rng = StreamKey::new(config.seed).child(ST_STREAM).rng();
            let coreset = standard_thin(train, n_out, &mut rng)?;
            Ok((Cow::Borrowed(train), Some(coreset)))
        }
        Thinning::Kt => {
            let work = if largest_pow4_at_most(train.len()) == train.len() {
                Cow::Borrowed(train)
            } else {
                Cow::Owned(truncate_pow4_indices(train, config.seed)?.0)
            };
            let mode = config.meta_override.unwrap_or(config.method.estimator.target_mode());
            let cfg = ThinningConfig::new(MetaKernelSpec::new(mode, config.base), config.delta, config.seed)?;
            let coreset = kt_compress_pp(&work, &cfg)?;
            Ok((work, Some(coreset)))
        }
    }
}

/// Fits the configured method on `train`.
pub fn fit_method(config: &TrialConfig, train: &LabeledDataset) -> Result<FittedModel> {
    let (work, coreset) = select_support(config, train)?;
    fit_on(config.method.estimator, &work, coreset.as_ref(), config.base, config.lambda)
}

/// Test loss (MSE or 0.5-threshold error rate), defaulted prediction count
/// and prediction wall time in seconds.
fn score(model: &FittedModel, test: &LabeledDataset, binary_labels: bool) -> Result<(f64, usize, f64)> {
    let mut preds = Vec::with_capacity(test.len());
    let t = Instant::now();
    for i in 0..test.len() {
        preds.push(model.predict_flagged(test.row(i))?);
    }
    let seconds = t.elapsed().as_secs_f64();
    let defaulted = preds.iter().filter(|(_, d)| *d).count();
    let loss: f64 = preds
        .iter()
        .zip(test.labels())
        .map(|(&(p, _), &y)| {
            if binary_labels {
                f64::from(u8::from((p > 0.5) != (y > 0.5)))
            } else {
                (p - y).powi(2)
            }
        })
        .sum();
    Ok((loss / test.len() as f64, defaulted, seconds))
}

fn check_trial_data(config: &TrialConfig, train: &LabeledDataset, test: &LabeledDataset) -> Result<()> {
    config.validate()?;
    if train.len() != config.n {
        return Err(Error::input(format!(
            "trial configured for n = {} but the training set has {} rows",
            config.n,
            train.len()
        )));
    }
    if test.is_empty() {
        return Err(Error::input("empty test set"));
    }
    if train.dim() != test.dim() {
        return Err(Error::DimensionMismatch(train.dim(), test.dim()));
    }
    Ok(())
}

/// Fits, times and evaluates one configured trial.
pub fn run_trial(config: &TrialConfig, train: &LabeledDataset, test: &LabeledDataset) -> Result<TrialResult> {
    check_trial_data(config, train, test)?;
    let t0 = Instant::now();
    let model = fit_method(config, train)?;
    let train_seconds = t0.elapsed().as_secs_f64();
    let (mse, defaulted, predict_seconds) = score(&model, test, config.binary_labels)?;
    Ok(TrialResult {
        config: config.clone(),
        mse,
        train_seconds,
        predict_seconds_per_1k: predict_seconds / test.len() as f64 * 1000.0,
        n_out: model.support_len(),
        defaulted_predictions: defaulted,
    })
}

/// Synthetic train/validation/test draws for one seed.
#[derive(Debug, Clone)]
pub struct SimData {
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
    pub test: LabeledDataset,
}

pub fn sim_data(n: usize, seed: u64, validation_size: usize, test_size: usize) -> Result<SimData> {
    let key = StreamKey::new(seed);
    Ok(SimData {
        train: gen_sim(n, key.child(SIM_TRAIN).seed())?,
        validation: gen_sim(validation_size, key.child(SIM_VALIDATION).seed())?,
        test: gen_sim(test_size, key.child(SIM_TEST).seed())?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub h_values: Vec<f64>,
    pub lambda_values: Option<Vec<f64>>,
    pub trials_per_cell: usize,
    pub validation_size: usize,
}

impl GridSpec {
    /// Default grids; lambda values only for KRR.
    pub fn default_for(estimator: Estimator) -> Self {
        GridSpec {
            h_values: DEFAULT_H_GRID.to_vec(),
            lambda_values: (estimator == Estimator::Krr).then(|| DEFAULT_LAMBDA_GRID.to_vec()),
            trials_per_cell: 100,
            validation_size: DEFAULT_SIM_SIZE,
        }
    }

    pub fn validate(&self, method: Method) -> Result<()> {
        let positive = |v: &[f64]| !v.is_empty() && v.iter().all(|x| *x > 0.0 && x.is_finite());
        if !positive(&self.h_values) {
            return Err(Error::input("bandwidth grid must be non-empty and positive"));
        }
        match (&self.lambda_values, method.is_krr()) {
            (Some(l), true) if positive(l) => {}
            (_, true) => return Err(Error::input("KRR needs a non-empty positive lambda grid")),
            (Some(_), false) => return Err(Error::input("NW takes no lambda grid")),
            (None, false) => {}
        }
        if self.trials_per_cell == 0 {
            return Err(Error::input("trials_per_cell must be at least 1"));
        }
        Ok(())
    }
}

/// What a grid search tunes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridTarget {
    pub method: Method,
    pub family: KernelFamily,
    pub delta: f64,
    pub meta_override: Option<MetaMode>,
}

impl GridTarget {
    pub fn new(method: Method, family: KernelFamily) -> Self {
        GridTarget {
            method,
            family,
            delta: DEFAULT_DELTA,
            meta_override: None,
        }
    }

    pub fn trial(&self, n: usize, h: f64, lambda: Option<f64>, seed: u64) -> Result<TrialConfig> {
        let mut cfg = TrialConfig::new(self.method, n, KernelSpec::new(self.family, h)?, lambda, seed)?.with_delta(self.delta)?;
        if let Some(mode) = self.meta_override {
            cfg = cfg.with_meta_override(mode)?;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub h: f64,
    pub lambda: Option<f64>,
    pub mean_mse: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    pub best_h: f64,
    pub best_lambda: Option<f64>,
    pub table: Vec<GridCell>,
}

/// Trial seed `t` of a randomized experiment rooted at `seed`.
pub fn trial_seed(seed: u64, t: usize) -> u64 {
    StreamKey::new(seed).child(t as u64).seed()
}

/// Validation MSE of the estimator fitted on one support, for each lambda.
/// KRR predictions share one validation-by-support kernel matrix.
fn validation_losses(
    est: Estimator,
    data: &LabeledDataset,
    coreset: Option<&Coreset>,
    base: KernelSpec,
    lambdas: &[Option<f64>],
    validation: &LabeledDataset,
) -> Result<Vec<f64>> {
    if est == Estimator::Nw {
        let model = fit_on(est, data, coreset, base, None)?;
        return Ok(vec![score(&model, validation, false)?.0]);
    }
    let rows: Vec<usize> = match coreset {
        Some(c) => c.indices().to_vec(),
        None => (0..data.len()).collect(),
    };
    let m = rows.len();
    let mut cross = Vec::with_capacity(validation.len() * m);
    for i in 0..validation.len() {
        cross.extend(rows.iter().map(|&r| base.eval_unchecked(validation.row(i), data.row(r))));
    }
    lambdas
        .iter()
        .map(|&lambda| {
            let model = fit_krr(data, coreset, base, lambda.expect("validated"))?;
            let sse: f64 = cross
                .chunks(m)
                .zip(validation.labels())
                .map(|(k, y)| {
                    let p: f64 = model.alpha().iter().zip(k).map(|(a, kv)| a * kv).sum();
                    (p - y).powi(2)
                })
                .sum();
            Ok(sse / validation.len() as f64)
        })
        .collect()
}

/// Mean validation MSE for every (h, lambda) cell. Full methods are
/// deterministic and run once per cell. Ties go to the smaller h, then the
/// smaller lambda.
pub fn grid_search(target: &GridTarget, grid: &GridSpec, train: &LabeledDataset, validation: &LabeledDataset, seed: u64) -> Result<GridOutcome> {
    grid.validate(target.method)?;
    let trials = if target.method.is_randomized() { grid.trials_per_cell } else { 1 };
    let lambdas: Vec<Option<f64>> = match &grid.lambda_values {
        Some(l) => l.iter().copied().map(Some).collect(),
        None => vec![None],
    };
    // thinning does not depend on lambda, so each (h, trial) support is
    // selected once and shared by every lambda
    let mut totals = vec![0.0; grid.h_values.len() * lambdas.len()];
    for (hi, &h) in grid.h_values.iter().enumerate() {
        for t in 0..trials {
            let seed_t = trial_seed(seed, t);
            let probe = target.trial(train.len(), h, lambdas[0], seed_t)?;
            check_trial_data(&probe, train, validation)?;
            let (work, coreset) = select_support(&probe, train)?;
            let losses = validation_losses(target.method.estimator, &work, coreset.as_ref(), probe.base, &lambdas, validation)?;
            for (li, loss) in losses.into_iter().enumerate() {
                totals[hi * lambdas.len() + li] += loss;
            }
        }
    }
    let mut table = Vec::with_capacity(totals.len());
    for (hi, &h) in grid.h_values.iter().enumerate() {
        for (li, &lambda) in lambdas.iter().enumerate() {
            table.push(GridCell {
                h,
                lambda,
                mean_mse: totals[hi * lambdas.len() + li] / trials as f64,
                trials,
            });
        }
    }
    let key = |c: &GridCell| (c.h, c.lambda.unwrap_or(0.0));
    let best = table
        .iter()
        .min_by(|a, b| {
            a.mean_mse
                .total_cmp(&b.mean_mse)
                .then_with(|| key(a).0.total_cmp(&key(b).0))
                .then_with(|| key(a).1.total_cmp(&key(b).1))
        })
        .expect("non-empty grid");
    log::debug!("{}: best h = {}, lambda = {:?}", target.method, best.h, best.lambda);
    Ok(GridOutcome {
        best_h: best.h,
        best_lambda: best.lambda,
        table,
    })
}

/// Mean and sample standard deviation of per-seed test MSEs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseSummary {
    pub label: String,
    pub n: usize,
    pub h: f64,
    pub lambda: Option<f64>,
    pub mean_mse: f64,
    pub std_mse: f64,
    pub per_seed: Vec<f64>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Settings shared by the simulated comparison and ablation drivers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimProtocol {
    pub grid: GridSpec,
    pub test_size: usize,
    /// Seed of the tuning draw used by the grid searches.
    pub tune_seed: u64,
}

/// Grid-searches `target` on a tuning draw of size `n`, then evaluates the
/// chosen cell on fresh train/test draws for every seed.
pub fn tune_and_evaluate(target: &GridTarget, n: usize, protocol: &SimProtocol, seeds: &[u64]) -> Result<MseSummary> {
    if seeds.is_empty() {
        return Err(Error::input("need at least one seed"));
    }
    let tune = sim_data(n, protocol.tune_seed, protocol.grid.validation_size, 1)?;
    let best = grid_search(target, &protocol.grid, &tune.train, &tune.validation, protocol.tune_seed)?;
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &s in seeds {
        let data = sim_data(n, s, 1, protocol.test_size)?;
        let cfg = target.trial(n, best.best_h, best.best_lambda, s)?;
        per_seed.push(run_trial(&cfg, &data.train, &data.test)?.mse);
    }
    let (mean_mse, std_mse) = mean_std(&per_seed);
    let label = match target.meta_override {
        Some(mode) => format!("{}[{mode}]", target.method),
        None => target.method.to_string(),
    };
    Ok(MseSummary {
        label,
        n,
        h: best.best_h,
        lambda: best.best_lambda,
        mean_mse,
        std_mse,
        per_seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub estimator: Estimator,
    pub n: usize,
    pub mode: MetaMode,
    pub h: f64,
    pub lambda: Option<f64>,
    pub mean_mse: f64,
    pub std_mse: f64,
    pub seeds: usize,
}

/// KT variant of `estimator` thinned with each meta-kernel mode in
/// `modes` (default: base, concatenated, and the estimator's target), each
/// with its own grid search.
pub fn run_ablation(
    estimator: Estimator,
    family: KernelFamily,
    n_list: &[usize],
    modes: &[MetaMode],
    protocol: &SimProtocol,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if n_list.is_empty() || modes.is_empty() {
        return Err(Error::input("ablation needs at least one n and one mode"));
    }
    let mut rows = Vec::new();
    for &n in n_list {
        for &mode in modes {
            let mut target = GridTarget::new(Method::new(Thinning::Kt, estimator), family);
            target.meta_override = Some(mode);
            let s = tune_and_evaluate(&target, n, protocol, seeds)?;
            log::info!("ablation {estimator} n={n} {mode}: mean mse {:.6} (h = {})", s.mean_mse, s.h);
            rows.push(AblationRow {
                estimator,
                n,
                mode,
                h: s.h,
                lambda: s.lambda,
                mean_mse: s.mean_mse,
                std_mse: s.std_mse,
                seeds: seeds.len(),
            });
        }
    }
    Ok(rows)
}

pub fn default_ablation_modes(estimator: Estimator) -> [MetaMode; 3] {
    [MetaMode::BaseOnly, MetaMode::Concatenated, estimator.target_mode()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputFormat {
    Csv,
    Json,
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::input(format!("unknown format '{other}' (expected csv or json)"))),
        }
    }
}

/// `x` with `digits` significant digits, in the shorter of fixed and
/// scientific notation, trailing zeros removed.
pub fn format_sig(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, x);
    let (mant, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if exp < -5 || exp >= digits as i32 {
        format!("{}e{exp}", trim(mant))
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim(&format!("{x:.decimals$}"))
    }
}

fn round_sig(x: f64) -> f64 {
    format_sig(x, 9).parse().unwrap_or(x)
}

/// One emitted result line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    pub n: usize,
    pub n_out: usize,
    pub h: f64,
    pub lambda: Option<f64>,
    pub seed: u64,
    pub mse: f64,
    pub train_seconds: f64,
    pub predict_seconds_per_1k: f64,
    pub defaulted_predictions: usize,
}

impl From<&TrialResult> for ResultRow {
    fn from(r: &TrialResult) -> Self {
        ResultRow {
            method: r.config.method,
            n: r.config.n,
            n_out: r.n_out,
            h: round_sig(r.config.base.bandwidth()),
            lambda: r.config.lambda.map(round_sig),
            seed: r.config.seed,
            mse: round_sig(r.mse),
            train_seconds: round_sig(r.train_seconds),
            predict_seconds_per_1k: round_sig(r.predict_seconds_per_1k),
            defaulted_predictions: r.defaulted_predictions,
        }
    }
}

pub const RESULT_COLUMNS: [&str; 10] = [
    "method",
    "n",
    "n_out",
    "h",
    "lambda",
    "seed",
    "mse",
    "train_seconds",
    "predict_seconds_per_1k",
    "defaulted_predictions",
];

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Rows sorted by (method, n, seed) with floats at 9 significant digits.
pub fn result_rows(results: &[TrialResult]) -> Vec<ResultRow> {
    let mut rows: Vec<ResultRow> = results.iter().map(ResultRow::from).collect();
    rows.sort_by_key(|r| (r.method, r.n, r.seed));
    rows
}

pub fn write_results<W: Write>(results: &[TrialResult], format: OutputFormat, mut w: W) -> Result<()> {
    if results.is_empty() {
        return Err(Error::input("no results to emit"));
    }
    let rows = result_rows(results);
    match format {
        OutputFormat::Csv => {
            let mut csv = csv::Writer::from_writer(&mut w);
            csv.write_record(RESULT_COLUMNS)?;
            for r in &rows {
                csv.write_record([
                    r.method.to_string(),
                    r.n.to_string(),
                    r.n_out.to_string(),
                    format_sig(r.h, 9),
                    r.lambda.map(|l| format_sig(l, 9)).unwrap_or_default(),
                    r.seed.to_string(),
                    format_sig(r.mse, 9),
                    format_sig(r.train_seconds, 9),
                    format_sig(r.predict_seconds_per_1k, 9),
                    r.defaulted_predictions.to_string(),
                ])?;
            }
            csv.flush()?;
        }
        OutputFormat::Json => {
            serde_json::to_writer_pretty(&mut w, &rows)?;
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn emit_results(results: &[TrialResult], format: OutputFormat, path: impl AsRef<Path>) -> Result<()> {
    if results.is_empty() {
        return Err(Error::input("no results to emit"));
    }
    write_results(results, format, create(path.as_ref())?)
}

pub fn emit_ablation(rows: &[AblationRow], path: impl AsRef<Path>) -> Result<()> {
    let mut csv = csv::Writer::from_writer(create(path.as_ref())?);
    csv.write_record(["estimator", "n", "mode", "h", "lambda", "mean_mse", "std_mse", "seeds"])?;
    for r in rows {
        csv.write_record([
            r.estimator.to_string(),
            r.n.to_string(),
            r.mode.to_string(),
            format_sig(r.h, 9),
            r.lambda.map(|l| format_sig(l, 9)).unwrap_or_default(),
            format_sig(r.mean_mse, 9),
            format_sig(r.std_mse, 9),
            r.seeds.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

pub fn emit_grid(outcome: &GridOutcome, path: impl AsRef<Path>) -> Result<()> {
    let mut csv = csv::Writer::from_writer(create(path.as_ref())?);
    csv.write_record(["h", "lambda", "mean_mse", "trials", "best"])?;
    for c in &outcome.table {
        let best = c.h == outcome.best_h && c.lambda == outcome.best_lambda;
        csv.write_record([
            format_sig(c.h, 9),
            c.lambda.map(|l| format_sig(l, 9)).unwrap_or_default(),
            format_sig(c.mean_mse, 9),
            c.trials.to_string(),
            u8::from(best).to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gauss(h: f64) -> KernelSpec {
        KernelSpec::gaussian(h).unwrap()
    }

    #[test]
    fn log_grid_endpoints() {
        let g = log_grid(-2, 1, 8);
        assert_eq!(g.len(), 25);
        assert!((g[0] - 0.01).abs() < 1e-15 && (g[24] - 10.0).abs() < 1e-12);
        assert!((g[4] - 10f64.powf(-1.5)).abs() < 1e-15);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn method_parsing() {
        for m in Method::ALL {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("kt".parse::<Method>().is_err());
        assert!("xx-nw".parse::<Method>().is_err());
        assert!("kt-svm".parse::<Method>().is_err());
    }

    #[test]
    fn config_validation() {
        let kt_nw = Method::new(Thinning::Kt, Estimator::Nw);
        let full_krr = Method::new(Thinning::Full, Estimator::Krr);
        assert!(TrialConfig::new(kt_nw, 16, gauss(1.0), Some(1e-3), 0).is_err());
        assert!(TrialConfig::new(full_krr, 16, gauss(1.0), None, 0).is_err());
        assert!(TrialConfig::new(full_krr, 16, gauss(1.0), Some(-1.0), 0).is_err());
        let full = TrialConfig::new(full_krr, 16, gauss(1.0), Some(1e-3), 0).unwrap();
        assert!(full.with_meta_override(MetaMode::Rr).is_err());
        let kt = TrialConfig::new(kt_nw, 16, gauss(1.0), None, 0).unwrap();
        assert!(kt.clone().with_meta_override(MetaMode::Concatenated).is_ok());
        assert!(kt.with_delta(0.0).is_err());
    }

    #[test]
    fn full_nw_on_single_point() {
        let d = gen_sim(1, 3).unwrap();
        let cfg = TrialConfig::new(Method::new(Thinning::Full, Estimator::Nw), 1, gauss(0.1), None, 0).unwrap();
        let r = run_trial(&cfg, &d, &d).unwrap();
        assert_eq!(r.mse, 0.0);
        assert_eq!(r.n_out, 1);
        assert!(r.train_seconds >= 0.0 && r.predict_seconds_per_1k >= 0.0);
    }

    #[test]
    fn size_laws() {
        let data = sim_data(256, 1, 10, 50).unwrap();
        for m in Method::ALL {
            let lam = m.is_krr().then_some(1e-3);
            let cfg = TrialConfig::new(m, 256, gauss(0.3), lam, 4).unwrap();
            let r = run_trial(&cfg, &data.train, &data.test).unwrap();
            let want = if m.is_randomized() { 16 } else { 256 };
            assert_eq!(r.n_out, want, "{m}");
        }
        // non-power-of-4 input is truncated for kt and matched for st
        let data = sim_data(300, 1, 10, 50).unwrap();
        for t in [Thinning::St, Thinning::Kt] {
            let cfg = TrialConfig::new(Method::new(t, Estimator::Nw), 300, gauss(0.3), None, 4).unwrap();
            assert_eq!(run_trial(&cfg, &data.train, &data.test).unwrap().n_out, 16);
        }
    }

    #[test]
    fn trial_rejects_size_mismatch() {
        let data = sim_data(16, 1, 10, 10).unwrap();
        let cfg = TrialConfig::new(Method::new(Thinning::Full, Estimator::Nw), 15, gauss(0.3), None, 0).unwrap();
        assert!(run_trial(&cfg, &data.train, &data.test).is_err());
    }

    #[test]
    fn binary_labels_error_rate() {
        let train = LabeledDataset::new(vec![0.0, 1.0], vec![0.0, 1.0], 1).unwrap();
        let test = LabeledDataset::new(vec![0.0, 1.0], vec![1.0, 1.0], 1).unwrap();
        let cfg = TrialConfig::new(Method::new(Thinning::Full, Estimator::Nw), 2, KernelSpec::wendland0(0.5).unwrap(), None, 0)
            .unwrap()
            .with_binary_labels(true);
        assert_eq!(run_trial(&cfg, &train, &test).unwrap().mse, 0.5);
    }

    #[test]
    fn grid_single_cell_and_ties() {
        let data = sim_data(64, 2, 200, 1).unwrap();
        let target = GridTarget::new(Method::new(Thinning::Kt, Estimator::Nw), KernelFamily::Gaussian);
        let grid = GridSpec {
            h_values: vec![0.2],
            lambda_values: None,
            trials_per_cell: 2,
            validation_size: 200,
        };
        let out = grid_search(&target, &grid, &data.train, &data.validation, 1).unwrap();
        assert_eq!((out.best_h, out.best_lambda, out.table.len()), (0.2, None, 1));
        assert_eq!(out, grid_search(&target, &grid, &data.train, &data.validation, 1).unwrap());

        // Wendland with a tiny bandwidth defaults every prediction to 0, so
        // both cells tie and the smaller h wins
        let target = GridTarget::new(Method::new(Thinning::Full, Estimator::Nw), KernelFamily::Wendland0);
        let far = LabeledDataset::new(vec![100.0, 200.0], vec![1.0, 2.0], 1).unwrap();
        let grid = GridSpec {
            h_values: vec![1e-3, 1e-4],
            ..grid
        };
        let out = grid_search(&target, &grid, &far, &data.validation, 1).unwrap();
        assert_eq!(out.best_h, 1e-4);
        assert!(grid_search(&target, &GridSpec { h_values: vec![], ..grid }, &far, &data.validation, 1).is_err());
    }

    #[test]
    fn grid_prefers_moderate_ridge_over_extreme() {
        let data = sim_data(1024, 11, 2000, 1).unwrap();
        let target = GridTarget::new(Method::new(Thinning::Full, Estimator::Krr), KernelFamily::Gaussian);
        let grid = GridSpec {
            h_values: vec![0.3],
            lambda_values: Some(vec![1e9, 1e-3]),
            trials_per_cell: 1,
            validation_size: 2000,
        };
        let out = grid_search(&target, &grid, &data.train, &data.validation, 0).unwrap();
        assert_eq!(out.best_lambda, Some(1e-3));
        let huge = out.table.iter().find(|c| c.lambda == Some(1e9)).unwrap();
        let mean_sq = data.validation.labels().iter().map(|y| y * y).sum::<f64>() / 2000.0;
        assert!((huge.mean_mse - mean_sq).abs() < 1e-3 * mean_sq);
    }

    #[test]
    fn ablation_single_mode_single_n() {
        let protocol = SimProtocol {
            grid: GridSpec {
                h_values: vec![0.3],
                lambda_values: None,
                trials_per_cell: 1,
                validation_size: 50,
            },
            test_size: 50,
            tune_seed: 1,
        };
        let rows = run_ablation(Estimator::Nw, KernelFamily::Gaussian, &[64], &[MetaMode::Nw], &protocol, &[0, 1]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!((rows[0].n, rows[0].mode, rows[0].seeds), (64, MetaMode::Nw, 2));
    }

    #[test]
    fn grid_cells_match_independent_trials() {
        let data = sim_data(64, 5, 100, 1).unwrap();
        for method in [Method::new(Thinning::Kt, Estimator::Krr), Method::new(Thinning::St, Estimator::Krr)] {
            let target = GridTarget::new(method, KernelFamily::Gaussian);
            let grid = GridSpec {
                h_values: vec![0.1, 0.5],
                lambda_values: Some(vec![1e-3, 1e-1]),
                trials_per_cell: 2,
                validation_size: 100,
            };
            let out = grid_search(&target, &grid, &data.train, &data.validation, 8).unwrap();
            for cell in &out.table {
                let mean = (0..2)
                    .map(|t| {
                        let cfg = target.trial(64, cell.h, cell.lambda, trial_seed(8, t)).unwrap();
                        run_trial(&cfg, &data.train, &data.validation).unwrap().mse
                    })
                    .sum::<f64>()
                    / 2.0;
                assert!((mean - cell.mean_mse).abs() <= 1e-12 * mean.abs().max(1.0));
            }
        }
    }

    #[test]
    fn kt_trial_matches_regression_entry_points() {
        use crate::regression::{fit_kt_krr, fit_kt_nw};
        let data = sim_data(256, 6, 1, 10).unwrap();
        let base = gauss(0.2);
        let nw = TrialConfig::new(Method::new(Thinning::Kt, Estimator::Nw), 256, base, None, 3).unwrap();
        let krr = TrialConfig::new(Method::new(Thinning::Kt, Estimator::Krr), 256, base, Some(1e-3), 3).unwrap();
        let want_nw = fit_kt_nw(&data.train, base, DEFAULT_DELTA, 3).unwrap();
        let want_krr = fit_kt_krr(&data.train, base, DEFAULT_DELTA, 1e-3, 3).unwrap();
        for i in 0..data.test.len() {
            let x = data.test.row(i);
            assert_eq!(fit_method(&nw, &data.train).unwrap().predict(x).unwrap(), want_nw.predict(x).unwrap());
            assert_eq!(fit_method(&krr, &data.train).unwrap().predict(x).unwrap(), want_krr.predict(x).unwrap());
        }
    }

    #[test]
    fn st_with_identity_support_matches_full() {
        let data = sim_data(16, 7, 1, 30).unwrap();
        let base = gauss(0.4);
        let full = TrialConfig::new(Method::new(Thinning::Full, Estimator::Krr), 16, base, Some(1e-2), 0).unwrap();
        let coreset = Coreset::full(16);
        let a = run_trial(&full, &data.train, &data.test).unwrap().mse;
        let model = fit_on(Estimator::Krr, &data.train, Some(&coreset), base, Some(1e-2)).unwrap();
        let b = score(&model, &data.test, false).unwrap().0;
        assert!((a - b).abs() <= 1e-10);
    }

    #[test]
    fn format_sig_cases() {
        assert_eq!(format_sig(0.0, 9), "0");
        assert_eq!(format_sig(1.0, 9), "1");
        assert_eq!(format_sig(0.123456789012, 9), "0.123456789");
        assert_eq!(format_sig(123456.7891234, 9), "123456.789");
        assert_eq!(format_sig(1.5e-7, 9), "1.5e-7");
        assert_eq!(format_sig(-2.0e12, 9), "-2e12");
        assert_eq!(format_sig(9.9999999999, 9), "10");
        for x in [1.234567891234e-3, 98765.4321987, -0.000314159265358] {
            let back: f64 = format_sig(x, 9).parse().unwrap();
            assert!(((back - x) / x).abs() < 5e-9);
        }
    }

    fn sample_results(k: usize) -> Vec<TrialResult> {
        let data = sim_data(16, 0, 1, 20).unwrap();
        (0..k)
            .map(|s| {
                let cfg = TrialConfig::new(Method::new(Thinning::St, Estimator::Krr), 16, gauss(0.5), Some(1e-3), s as u64).unwrap();
                run_trial(&cfg, &data.train, &data.test).unwrap()
            })
            .collect()
    }

    #[test]
    fn emit_csv_and_json() {
        let one = sample_results(1);
        let mut buf = Vec::new();
        write_results(&one, OutputFormat::Csv, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.ends_with('\n'));
        assert_eq!(text.lines().count(), 2);
        assert_eq!(text.lines().next().unwrap(), RESULT_COLUMNS.join(","));

        let many = sample_results(100);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        emit_results(&many, OutputFormat::Csv, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 101);

        let p = dir.path().join("r.json");
        emit_results(&many, OutputFormat::Json, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.ends_with('\n'));
        let back: Vec<ResultRow> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, result_rows(&many));
        assert!(back.windows(2).all(|w| w[0].seed <= w[1].seed));

        assert!(write_results(&[], OutputFormat::Csv, Vec::new()).is_err());
        assert!(emit_results(&one, OutputFormat::Csv, dir.path().join("missing/x.csv")).unwrap_err().exit_code() == 4);
    }
}
