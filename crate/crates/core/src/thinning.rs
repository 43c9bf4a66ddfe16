//! Kernel thinning: kt-split, kt-swap, symmetrized halving, the recursive
//! Compress step and the Compress++ driver that returns a `sqrt(n)` coreset.
//! Also the i.i.d. standard-thinning baseline and empirical MMD.
//!
//! Every routine works on an ordered list of dataset row indices. Inside a
//! halving call, rows are addressed by their position in that list, and the
//! meta-kernel Gram matrix over the list is precomputed when the list is at
//! most `gram_cap` long.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{largest_pow4_at_most, sample_without_replacement, LabeledDataset};
use crate::error::{Error, Result};
use crate::kernels::{GramMatrix, MetaKernelSpec};
use crate::rng::StreamKey;

pub const DEFAULT_GRAM_CAP: usize = 4096;
pub const DEFAULT_DELTA: f64 = 0.5;

/// Ordered, duplicate-free list of row indices into a dataset of
/// `parent_size` rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coreset {
    indices: Vec<usize>,
    parent_size: usize,
}

impl Coreset {
    pub fn new(indices: Vec<usize>, parent_size: usize) -> Result<Self> {
        let mut seen = vec![false; parent_size];
        for &i in &indices {
            if i >= parent_size {
                return Err(Error::input(format!(
                    "coreset index {i} out of range for {parent_size} rows"
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::input(format!("duplicate coreset index {i}")));
            }
        }
        Ok(Coreset { indices, parent_size })
    }

    /// The identity coreset `0..n`.
    pub fn full(n: usize) -> Self {
        Coreset {
            indices: (0..n).collect(),
            parent_size: n,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn parent_size(&self) -> usize {
        self.parent_size
    }

    /// Re-expresses the coreset through a row map, e.g. from a truncated
    /// dataset back to the rows of the original file.
    pub fn remap(&self, rows: &[usize], parent_size: usize) -> Result<Self> {
        if rows.len() != self.parent_size {
            return Err(Error::DimensionMismatch(self.parent_size, rows.len()));
        }
        Coreset::new(self.indices.iter().map(|&i| rows[i]).collect(), parent_size)
    }

    /// One line per element: `position_in_coreset,dataset_index`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for (pos, idx) in self.indices.iter().enumerate() {
            writeln!(w, "{pos},{idx}")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Settings for one Compress++ run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThinningConfig {
    pub meta: MetaKernelSpec,
    pub delta: f64,
    pub seed: u64,
    pub g_override: Option<u32>,
    pub gram_cap: usize,
}

impl ThinningConfig {
    pub fn new(meta: MetaKernelSpec, delta: f64, seed: u64) -> Result<Self> {
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(Error::input(format!("delta must lie in (0, 1], got {delta}")));
        }
        Ok(ThinningConfig {
            meta,
            delta,
            seed,
            g_override: None,
            gram_cap: DEFAULT_GRAM_CAP,
        })
    }

    pub fn with_compression_level(mut self, g: u32) -> Self {
        self.g_override = Some(g);
        self
    }

    pub fn with_gram_cap(mut self, cap: usize) -> Self {
        self.gram_cap = cap;
        self
    }

    /// Compression level used for an input of `n` points, capped at
    /// `log4 n` (beyond which Compress is the identity).
    pub fn compression_level(&self, n: usize) -> u32 {
        self.g_override
            .unwrap_or_else(|| default_compression_level(n))
            .min(log4_floor(n))
    }
}

/// `ceil(log2(log2 n) + 3.1)`, or 0 for `n < 2`.
pub fn default_compression_level(n: usize) -> u32 {
    if n < 2 {
        return 0;
    }
    let v = ((n as f64).log2().log2() + 3.1).ceil();
    v.max(0.0) as u32
}

fn log4_floor(n: usize) -> u32 {
    largest_pow4_at_most(n.max(1)).trailing_zeros() / 2
}

/// Squared MMD between two equal-weight empirical measures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdValue {
    /// Clamped at zero.
    pub mmd_squared: f64,
    /// Unclamped value, possibly slightly negative from round-off.
    pub raw: f64,
    pub n_a: usize,
    pub n_b: usize,
}

pub fn mmd_sq(meta: &MetaKernelSpec, data: &LabeledDataset, a: &[usize], b: &[usize]) -> Result<MmdValue> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::input("mmd needs two non-empty point sets"));
    }
    if let Some(&bad) = a.iter().chain(b).find(|&&i| i >= data.len()) {
        return Err(Error::input(format!("index {bad} out of range for {} rows", data.len())));
    }
    let block = |p: &[usize], q: &[usize]| -> f64 {
        let mut s = 0.0;
        for &i in p {
            for &j in q {
                s += meta.eval_rows(data, i, j);
            }
        }
        s / (p.len() as f64 * q.len() as f64)
    };
    let raw = block(a, a) - 2.0 * block(a, b) + block(b, b);
    Ok(MmdValue {
        mmd_squared: raw.max(0.0),
        raw,
        n_a: a.len(),
        n_b: b.len(),
    })
}

/// Swap threshold and updated sub-Gaussian parameter for one kt-split round.
///
/// `c = max(vmax sigma sqrt(2 ln(2/delta)), vmax^2)` and
/// `sigma^2 += vmax^2 (1 + (vmax^2 - 2c) sigma^2 / c^2)_+` when `c > 0`.
/// Returns `(c, new_sigma)`.
pub fn get_swap_params(sigma: f64, vmax: f64, delta: f64) -> (f64, f64) {
    let log_term = (2.0 / delta).ln().max(0.0);
    let c = (vmax * sigma * (2.0 * log_term).sqrt()).max(vmax * vmax);
    if c > 0.0 {
        let s2 = sigma * sigma;
        let v2 = vmax * vmax;
        let inc = v2 * (1.0 + (v2 - 2.0 * c) * s2 / (c * c)).max(0.0);
        (c, (s2 + inc).sqrt())
    } else {
        (c, sigma)
    }
}

/// Meta-kernel restricted to an ordered index list, addressed by position.
struct LocalKernel<'a> {
    meta: &'a MetaKernelSpec,
    data: &'a LabeledDataset,
    idx: &'a [usize],
    gram: Option<GramMatrix>,
}

impl<'a> LocalKernel<'a> {
    fn new(meta: &'a MetaKernelSpec, data: &'a LabeledDataset, idx: &'a [usize], gram_cap: usize) -> Self {
        let gram = (idx.len() <= gram_cap)
            .then(|| GramMatrix::from_fn(idx.len(), |a, b| meta.eval_rows(data, idx[a], idx[b])));
        LocalKernel { meta, data, idx, gram }
    }

    fn len(&self) -> usize {
        self.idx.len()
    }

    #[inline]
    fn k(&self, a: usize, b: usize) -> f64 {
        match &self.gram {
            Some(g) => g.get(a, b),
            None => self.meta.eval_rows(self.data, self.idx[a], self.idx[b]),
        }
    }

    /// `out[j] += sign * k(j, a)` for every position `j`.
    fn axpy_column(&self, a: usize, sign: f64, out: &mut [f64]) {
        match &self.gram {
            Some(g) => {
                for (o, v) in out.iter_mut().zip(g.row(a)) {
                    *o += sign * v;
                }
            }
            None => {
                for (j, o) in out.iter_mut().enumerate() {
                    *o += sign * self.k(j, a);
                }
            }
        }
    }

    fn to_rows(&self, positions: &[usize]) -> Vec<usize> {
        positions.iter().map(|&p| self.idx[p]).collect()
    }
}

fn split_local<R: Rng + ?Sized>(lk: &LocalKernel, delta: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let n = lk.len();
    let rounds = n / 2;
    let round_delta = delta / n as f64;
    let mut s1 = Vec::with_capacity(rounds);
    let mut s2 = Vec::with_capacity(rounds);
    let mut sigma = 0.0;
    for i in 0..rounds {
        let (mut a, mut b) = (2 * i, 2 * i + 1);
        let vmax2 = (lk.k(a, a) + lk.k(b, b) - 2.0 * lk.k(a, b)).max(0.0);
        let (c, new_sigma) = get_swap_params(sigma, vmax2.sqrt(), round_delta);
        sigma = new_sigma;

        // sum over all earlier points minus twice the sum over S1,
        // i.e. sum over S2 minus sum over S1
        let mut theta = 0.0;
        for (&w1, &w2) in s1.iter().zip(&s2) {
            theta += (lk.k(w2, a) - lk.k(w2, b)) - (lk.k(w1, a) - lk.k(w1, b));
        }
        let ratio = if c > 0.0 { theta / c } else { 0.0 };
        let prob = (0.5 * (1.0 - ratio).max(0.0)).min(1.0);
        if rng.random::<f64>() < prob {
            std::mem::swap(&mut a, &mut b);
        }
        s1.push(a);
        s2.push(b);
    }
    (s1, s2)
}

/// Every other position of the input: 1, 3, 5, ...
fn baseline_local(n: usize) -> Vec<usize> {
    (0..n / 2).map(|i| 2 * i + 1).collect()
}

/// Cached sums for MMD between the full local list and a subset of it.
struct SwapState {
    n: usize,
    m: usize,
    /// `row_sums[j] = sum_i k(j, i)` over the whole list
    row_sums: Vec<f64>,
    total: f64,
    diag: Vec<f64>,
}

impl SwapState {
    fn new(lk: &LocalKernel, m: usize) -> Self {
        let n = lk.len();
        let mut row_sums = vec![0.0; n];
        for i in 0..n {
            lk.axpy_column(i, 1.0, &mut row_sums);
        }
        let total = row_sums.iter().sum();
        let diag = (0..n).map(|j| lk.k(j, j)).collect();
        SwapState {
            n,
            m,
            row_sums,
            total,
            diag,
        }
    }

    fn mmd_raw(&self, lk: &LocalKernel, core: &[usize]) -> f64 {
        let (n, m) = (self.n as f64, core.len() as f64);
        let cross: f64 = core.iter().map(|&c| self.row_sums[c]).sum();
        let mut within = 0.0;
        for &c in core {
            for &e in core {
                within += lk.k(c, e);
            }
        }
        self.total / (n * n) - 2.0 * cross / (n * m) + within / (m * m)
    }
}

/// Selects the best of baseline, `s1`, `s2` by MMD to the full list, then
/// sweeps once over coreset positions replacing each element by the
/// MMD-minimizing choice among itself and the non-coreset points.
/// When `trace` is given, the MMD after selection and after each position is
/// appended to it.
fn swap_local(lk: &LocalKernel, s1: &[usize], s2: &[usize], mut trace: Option<&mut Vec<f64>>) -> Vec<usize> {
    let n = lk.len();
    let m = n / 2;
    let st = SwapState::new(lk, m);
    let baseline = baseline_local(n);

    // differences below round-off count as ties, which go to the earlier
    // candidate (baseline, S1, S2) or to the current element in the sweep
    let scale = st.diag.iter().fold(1.0f64, |a, &d| a.max(d.abs()));
    let select_tol = 64.0 * f64::EPSILON * scale;
    let sweep_tol = 256.0 * f64::EPSILON * scale / m as f64;

    let mut best: Option<(f64, &[usize])> = None;
    for cand in [baseline.as_slice(), s1, s2] {
        let v = st.mmd_raw(lk, cand);
        if best.is_none_or(|(bv, _)| v < bv - select_tol) {
            best = Some((v, cand));
        }
    }
    let (mut current_mmd, chosen) = best.expect("three candidates");
    let mut core = chosen.to_vec();
    if let Some(t) = trace.as_deref_mut() {
        t.push(current_mmd);
    }

    let mut in_core = vec![false; n];
    for &c in &core {
        in_core[c] = true;
    }
    // core_sums[j] = sum over the coreset of k(j, c)
    let mut core_sums = vec![0.0; n];
    for &c in &core {
        lk.axpy_column(c, 1.0, &mut core_sums);
    }

    let (nf, mf) = (n as f64, st.m as f64);
    let cross_w = 2.0 / (nf * mf);
    let within_w = 1.0 / (mf * mf);
    for pos in 0..m {
        let old = core[pos];
        // MMD^2 as a function of the replacement z, up to a constant shared
        // by all candidates at this position
        let objective = |z: usize, k_zo: f64| -> f64 {
            -cross_w * st.row_sums[z] + within_w * (2.0 * core_sums[z] - 2.0 * k_zo + st.diag[z])
        };
        let current = objective(old, st.diag[old]);
        let mut best_z = old;
        let mut best_val = current;
        for z in 0..n {
            if in_core[z] {
                continue;
            }
            let v = objective(z, lk.k(z, old));
            if v < best_val - sweep_tol {
                best_val = v;
                best_z = z;
            }
        }
        if best_z != old {
            lk.axpy_column(best_z, 1.0, &mut core_sums);
            lk.axpy_column(old, -1.0, &mut core_sums);
            in_core[old] = false;
            in_core[best_z] = true;
            core[pos] = best_z;
            current_mmd += best_val - current;
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(current_mmd);
        }
    }
    core
}

fn halve_local<R: Rng + ?Sized>(lk: &LocalKernel, delta: f64, rng: &mut R) -> Vec<usize> {
    let n = lk.len();
    let (s1, s2) = split_local(lk, delta, rng);
    let core = swap_local(lk, &s1, &s2, None);
    if rng.random::<f64>() < 0.5 {
        core
    } else {
        let mut in_core = vec![false; n];
        for &c in &core {
            in_core[c] = true;
        }
        (0..n).filter(|&p| !in_core[p]).take(n / 2).collect()
    }
}

/// Thinning routines bound to a meta-kernel and a dataset.
pub struct Thinner<'a> {
    meta: MetaKernelSpec,
    data: &'a LabeledDataset,
    gram_cap: usize,
}

impl<'a> Thinner<'a> {
    pub fn new(meta: MetaKernelSpec, data: &'a LabeledDataset) -> Self {
        Thinner {
            meta,
            data,
            gram_cap: DEFAULT_GRAM_CAP,
        }
    }

    pub fn with_gram_cap(mut self, cap: usize) -> Self {
        self.gram_cap = cap;
        self
    }

    pub fn meta(&self) -> &MetaKernelSpec {
        &self.meta
    }

    fn check(&self, indices: &[usize], min_len: usize) -> Result<()> {
        if indices.len() < min_len {
            return Err(Error::input(format!(
                "need at least {min_len} points, got {}",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.data.len()) {
            return Err(Error::input(format!(
                "index {bad} out of range for {} rows",
                self.data.len()
            )));
        }
        Ok(())
    }

    fn local<'b>(&'b self, indices: &'b [usize]) -> LocalKernel<'b> {
        LocalKernel::new(&self.meta, self.data, indices, self.gram_cap)
    }

    fn coreset(&self, rows: Vec<usize>) -> Result<Coreset> {
        Coreset::new(rows, self.data.len())
    }

    pub fn mmd_sq(&self, a: &[usize], b: &[usize]) -> Result<MmdValue> {
        mmd_sq(&self.meta, self.data, a, b)
    }

    /// Pairs consecutive points and assigns one of each pair to each of two
    /// candidate coresets, swapping with a probability that balances their
    /// kernel mean embeddings. A trailing odd point is dropped.
    pub fn kt_split<R: Rng + ?Sized>(&self, indices: &[usize], delta: f64, rng: &mut R) -> Result<(Coreset, Coreset)> {
        self.check(indices, 2)?;
        let lk = LocalKernel::new(&self.meta, self.data, indices, self.gram_cap);
        let (s1, s2) = split_local(&lk, delta, rng);
        Ok((self.coreset(lk.to_rows(&s1))?, self.coreset(lk.to_rows(&s2))?))
    }

    /// Picks the best of the baseline and the two candidates, then refines
    /// it by greedy single-point swaps.
    pub fn kt_swap(&self, indices: &[usize], candidates: (&Coreset, &Coreset)) -> Result<Coreset> {
        let (core, _) = self.kt_swap_traced(indices, candidates)?;
        Ok(core)
    }

    /// As [`kt_swap`](Self::kt_swap), also returning the MMD^2 after the
    /// initial selection and after each swap position.
    pub fn kt_swap_traced(&self, indices: &[usize], candidates: (&Coreset, &Coreset)) -> Result<(Coreset, Vec<f64>)> {
        self.check(indices, 2)?;
        let m = indices.len() / 2;
        let (c1, c2) = candidates;
        if c1.len() != m || c2.len() != m {
            return Err(Error::input(format!(
                "candidate coresets must have {m} points, got {} and {}",
                c1.len(),
                c2.len()
            )));
        }
        let lk = LocalKernel::new(&self.meta, self.data, indices, self.gram_cap);
        let to_local = |c: &Coreset| -> Result<Vec<usize>> {
            c.indices()
                .iter()
                .map(|r| {
                    indices
                        .iter()
                        .position(|i| i == r)
                        .ok_or_else(|| Error::input(format!("candidate row {r} is not in the input")))
                })
                .collect()
        };
        let (l1, l2) = (to_local(c1)?, to_local(c2)?);
        let mut trace = Vec::with_capacity(m + 1);
        let core = swap_local(&lk, &l1, &l2, Some(&mut trace));
        Ok((self.coreset(lk.to_rows(&core))?, trace))
    }

    /// kt-split followed by kt-swap; returns the result or, with
    /// probability one half, its complement in input order.
    pub fn kt_halve<R: Rng + ?Sized>(&self, indices: &[usize], delta: f64, rng: &mut R) -> Result<Coreset> {
        self.check(indices, 2)?;
        let rows = self.halve_rows(indices, delta, rng);
        self.coreset(rows)
    }

    fn halve_rows<R: Rng + ?Sized>(&self, indices: &[usize], delta: f64, rng: &mut R) -> Vec<usize> {
        let lk = self.local(indices);
        let local = halve_local(&lk, delta, rng);
        lk.to_rows(&local)
    }

    /// Recursive Compress: splits into four consecutive blocks, compresses
    /// each, and halves the concatenation. Requires `|indices| = 4^g 4^a`.
    /// Branch `i` draws from `key.child(i)`; the halving uses `key.child(4)`.
    pub fn compress(&self, indices: &[usize], g: u32, delta: f64, key: StreamKey) -> Result<Coreset> {
        self.check(indices, 1)?;
        let base = 4usize
            .checked_pow(g)
            .ok_or_else(|| Error::input(format!("compression level {g} too large")))?;
        let n = indices.len();
        let mut p = base;
        while p < n {
            p *= 4;
        }
        if p != n {
            let mut largest = base;
            while largest * 4 <= n {
                largest *= 4;
            }
            return Err(Error::input(if n < base {
                format!("compress at level {g} needs at least {base} points, got {n}")
            } else {
                format!("compress at level {g} needs 4^{g} * 4^a points, got {n}; largest admissible truncation is {largest}")
            }));
        }
        let rows = self.compress_rows(indices, base, delta, key);
        self.coreset(rows)
    }

    fn compress_rows(&self, indices: &[usize], base: usize, delta: f64, key: StreamKey) -> Vec<usize> {
        if indices.len() == base {
            return indices.to_vec();
        }
        let q = indices.len() / 4;
        let mut merged = Vec::with_capacity(2 * base.isqrt() * indices.len().isqrt());
        for (i, block) in indices.chunks(q).enumerate() {
            merged.extend(self.compress_rows(block, base, delta, key.child(i as u64)));
        }
        let budget = delta * (merged.len() as f64).powi(2);
        self.halve_rows(&merged, budget, &mut key.child(4).rng())
    }
}

/// Compress++: Compress at level `g` to `2^g sqrt(n)` points, then `g`
/// symmetrized halvings down to `sqrt(n)`. `n` must be a power of four.
///
/// Half of `delta` goes to Compress (through its root budget
/// `delta / (n 4^(g+1) (log4 n - g))`); the other half is split evenly over
/// the final halvings.
pub fn kt_compress_pp(data: &LabeledDataset, config: &ThinningConfig) -> Result<Coreset> {
    let n = data.len();
    if !(config.delta > 0.0 && config.delta <= 1.0) {
        return Err(Error::input(format!("delta must lie in (0, 1], got {}", config.delta)));
    }
    let p = largest_pow4_at_most(n);
    if p != n {
        return Err(Error::input(format!(
            "kernel thinning needs a power-of-4 number of points, got {n}; truncate to {p}"
        )));
    }
    let thinner = Thinner::new(config.meta, data).with_gram_cap(config.gram_cap);
    let root = StreamKey::new(config.seed);
    let all: Vec<usize> = (0..n).collect();
    if n == 1 {
        return Coreset::new(all, n);
    }
    let log4n = log4_floor(n);
    let g = config.compression_level(n);

    let mut rows = if g < log4n {
        let root_budget = 0.5 * config.delta / (n as f64 * 4f64.powi(g as i32 + 1) * f64::from(log4n - g));
        thinner.compress_rows(&all, 4usize.pow(g), root_budget, root.child(0))
    } else {
        all
    };
    let stage_delta = 0.5 * config.delta / f64::from(g.max(1));
    for t in 0..g {
        rows = thinner.halve_rows(&rows, stage_delta, &mut root.child(1).child(u64::from(t)).rng());
    }
    debug_assert_eq!(rows.len(), n.isqrt());
    Coreset::new(rows, n)
}

/// `n_out` rows drawn uniformly without replacement, in draw order.
pub fn standard_thin<R: Rng + ?Sized>(data: &LabeledDataset, n_out: usize, rng: &mut R) -> Result<Coreset> {
    let n = data.len();
    if n_out == 0 || n_out > n {
        return Err(Error::input(format!("n_out must lie in [1, {n}], got {n_out}")));
    }
    Coreset::new(sample_without_replacement(n, n_out, rng), n)
}
