//! Oracles and invariant checks shared by the integration and acceptance
//! targets. Each `check_*` builds a random instance from a case seed and
//! returns a description of the first violation found.

#![allow(dead_code)]

use ktreg::data::LabeledDataset;
use ktreg::kernels::{KernelFamily, KernelSpec, MetaKernelSpec, MetaMode};
use ktreg::regression::{fit_krr, Predictor};
use ktreg::rng::StreamKey;
use ktreg::thinning::{kt_compress_pp, Coreset, Thinner, ThinningConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Check = std::result::Result<(), String>;

pub fn case_rng(tag: u64, case: u64) -> ChaCha8Rng {
    StreamKey::new(tag).child(case).rng()
}

pub fn random_family(rng: &mut impl Rng) -> KernelFamily {
    [KernelFamily::Gaussian, KernelFamily::Laplace, KernelFamily::Wendland0][rng.random_range(0..3)]
}

pub fn random_meta(rng: &mut impl Rng) -> MetaKernelSpec {
    let base = KernelSpec::new(random_family(rng), rng.random_range(0.2..2.0)).unwrap();
    MetaKernelSpec::new(MetaMode::ALL[rng.random_range(0..4)], base)
}

pub fn random_data(rng: &mut impl Rng, n: usize, d: usize) -> LabeledDataset {
    let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    LabeledDataset::new(x, y, d).unwrap()
}

/// Base kernel written out from its closed form.
pub fn base_oracle(family: KernelFamily, h: f64, a: &[f64], b: &[f64]) -> f64 {
    let r = a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    match family {
        KernelFamily::Gaussian => (-(r / h).powi(2) / 2.0).exp(),
        KernelFamily::Laplace => (-r / h).exp(),
        KernelFamily::Wendland0 => {
            if r < h {
                1.0 - r / h
            } else {
                0.0
            }
        }
    }
}

pub fn meta_oracle(meta: &MetaKernelSpec, x1: &[f64], y1: f64, x2: &[f64], y2: f64) -> f64 {
    let (f, h) = (meta.base.family(), meta.base.bandwidth());
    let k = base_oracle(f, h, x1, x2);
    match meta.mode {
        MetaMode::BaseOnly => k,
        MetaMode::Concatenated => {
            let mut a = x1.to_vec();
            a.push(y1);
            let mut b = x2.to_vec();
            b.push(y2);
            base_oracle(f, h, &a, &b)
        }
        MetaMode::Nw => k + k * y1 * y2,
        MetaMode::Rr => k * (k + y1 * y2),
    }
}

/// MMD^2 as one double sum over the signed measure `P_a - P_b`.
pub fn mmd_double_loop(meta: &MetaKernelSpec, data: &LabeledDataset, a: &[usize], b: &[usize]) -> f64 {
    let pts: Vec<(usize, f64)> = a
        .iter()
        .map(|&i| (i, 1.0 / a.len() as f64))
        .chain(b.iter().map(|&i| (i, -1.0 / b.len() as f64)))
        .collect();
    let mut s = 0.0;
    for &(i, wi) in &pts {
        for &(j, wj) in &pts {
            s += wi * wj * meta_oracle(meta, data.row(i), data.label(i), data.row(j), data.label(j));
        }
    }
    s
}

/// Gaussian elimination with partial pivoting.
pub fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let p = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, p);
        b.swap(col, p);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

fn sorted(v: &[usize]) -> Vec<usize> {
    let mut v = v.to_vec();
    v.sort_unstable();
    v
}

fn random_indices(rng: &mut impl Rng, n_rows: usize, len: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..n_rows).collect();
    for i in 0..len {
        let j = rng.random_range(i..n_rows);
        all.swap(i, j);
    }
    all.truncate(len);
    all
}

pub fn check_krr_oracle(case: u64) -> Check {
    let mut rng = case_rng(6, case);
    let m = rng.random_range(1..=32);
    let d = rng.random_range(1..=4);
    let data = random_data(&mut rng, m, d);
    let base = KernelSpec::new(random_family(&mut rng), rng.random_range(0.2..2.0)).unwrap();
    let lam = 10f64.powf(rng.random_range(-5.0..0.0));
    let model = fit_krr(&data, None, base, lam).map_err(|e| e.to_string())?;
    let (fam, h) = (base.family(), base.bandwidth());
    let a: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            (0..m)
                .map(|j| base_oracle(fam, h, data.row(i), data.row(j)) + if i == j { m as f64 * lam } else { 0.0 })
                .collect()
        })
        .collect();
    let y = data.labels().to_vec();
    let want = dense_solve(a, y.clone());
    let scale = want.iter().fold(f64::MIN_POSITIVE, |s, v| s.max(v.abs()));
    for (j, (g, w)) in model.alpha().iter().zip(&want).enumerate() {
        if (g - w).abs() > 1e-8 * scale {
            return Err(format!("case {case}: alpha[{j}] = {g}, oracle {w}"));
        }
    }
    for j in 0..m {
        let f = model.predict(data.row(j)).map_err(|e| e.to_string())?;
        let r = f + m as f64 * lam * model.alpha()[j] - y[j];
        if r.abs() > 1e-6 {
            return Err(format!("case {case}: normal-equation residual {r} at {j}"));
        }
    }
    Ok(())
}

pub fn check_mmd_oracle(case: u64) -> Check {
    let mut rng = case_rng(7, case);
    let n = rng.random_range(1..=10);
    let d = rng.random_range(1..=3);
    let data = random_data(&mut rng, n, d);
    let meta = random_meta(&mut rng);
    let la = rng.random_range(1..=n);
    let lb = rng.random_range(1..=n);
    let a = random_indices(&mut rng, n, la);
    let b = random_indices(&mut rng, n, lb);
    let got = ktreg::thinning::mmd_sq(&meta, &data, &a, &b).map_err(|e| e.to_string())?;
    let want = mmd_double_loop(&meta, &data, &a, &b);
    if (got.raw - want).abs() > 1e-12 {
        return Err(format!("case {case}: mmd_sq {} vs oracle {want}", got.raw));
    }
    Ok(())
}

pub fn check_split_partition(case: u64) -> Check {
    let mut rng = case_rng(81, case);
    let rows = rng.random_range(2..=80);
    let d = rng.random_range(1..=3);
    let data = random_data(&mut rng, rows, d);
    let meta = random_meta(&mut rng);
    let len = rng.random_range(2..=rows);
    let idx = random_indices(&mut rng, rows, len);
    let delta = rng.random_range(0.01..1.0);
    let (s1, s2) = Thinner::new(meta, &data).kt_split(&idx, delta, &mut rng).map_err(|e| e.to_string())?;
    let m = len / 2;
    if s1.len() != m || s2.len() != m {
        return Err(format!("case {case}: sizes {} and {} for {len} inputs", s1.len(), s2.len()));
    }
    let mut union = s1.indices().to_vec();
    union.extend_from_slice(s2.indices());
    if sorted(&union) != sorted(&idx[..2 * m]) {
        return Err(format!("case {case}: candidates do not partition the input"));
    }
    for k in 0..m {
        let pair = sorted(&[s1.indices()[k], s2.indices()[k]]);
        if pair != sorted(&idx[2 * k..2 * k + 2]) {
            return Err(format!("case {case}: pair {k} not split across candidates"));
        }
    }
    Ok(())
}

pub fn check_swap_monotone(case: u64) -> Check {
    let mut rng = case_rng(82, case);
    let rows = rng.random_range(2..=64);
    let d = rng.random_range(1..=3);
    let data = random_data(&mut rng, rows, d);
    let meta = random_meta(&mut rng);
    let len = rng.random_range(2..=rows);
    let idx = random_indices(&mut rng, rows, len);
    let th = Thinner::new(meta, &data);
    let (s1, s2) = th.kt_split(&idx, 0.5, &mut rng).map_err(|e| e.to_string())?;
    let (core, trace) = th.kt_swap_traced(&idx, (&s1, &s2)).map_err(|e| e.to_string())?;
    let baseline: Vec<usize> = idx.iter().skip(1).step_by(2).copied().collect();
    let scale = (0..rows).map(|i| meta.eval_rows(&data, i, i).abs()).fold(1.0f64, f64::max);
    let tol = 1e-12 * scale;
    let mmd = |c: &[usize]| th.mmd_sq(c, &idx).map(|v| v.raw).map_err(|e| e.to_string());
    let initial = [mmd(&baseline)?, mmd(s1.indices())?, mmd(s2.indices())?];
    let fin = mmd(core.indices())?;
    if let Some(c) = initial.iter().find(|&&c| fin > c + tol) {
        return Err(format!("case {case}: final MMD^2 {fin} exceeds candidate {c}"));
    }
    if let Some(w) = trace.windows(2).find(|w| w[1] > w[0] + tol) {
        return Err(format!("case {case}: sweep increased MMD^2 from {} to {}", w[0], w[1]));
    }
    if (trace.last().unwrap() - fin).abs() > 1e-9 * scale {
        return Err(format!("case {case}: traced MMD^2 {} vs recomputed {fin}", trace.last().unwrap()));
    }
    check_nested(&core, &idx).map_err(|e| format!("case {case}: {e}"))
}

fn check_nested(core: &Coreset, input: &[usize]) -> Check {
    let s = sorted(core.indices());
    if s.windows(2).any(|w| w[0] == w[1]) {
        return Err("duplicate index in coreset".into());
    }
    if let Some(i) = s.iter().find(|i| !input.contains(i)) {
        return Err(format!("coreset index {i} not in input"));
    }
    Ok(())
}

/// Compress++ on a random power-of-4 dataset.
fn random_pp_case(tag: u64, case: u64) -> (LabeledDataset, ThinningConfig) {
    let mut rng = case_rng(tag, case);
    let n = 4usize.pow(rng.random_range(1..=5));
    let d = rng.random_range(1..=3);
    let data = random_data(&mut rng, n, d);
    let cfg = ThinningConfig::new(random_meta(&mut rng), rng.random_range(0.05..1.0), rng.random()).unwrap();
    let g = rng.random_range(0..=4);
    let cfg = if rng.random_bool(0.5) { cfg.with_compression_level(g) } else { cfg };
    (data, cfg)
}

pub fn check_size_law(case: u64) -> Check {
    let (data, cfg) = random_pp_case(83, case);
    let n = data.len();
    let c = kt_compress_pp(&data, &cfg).map_err(|e| e.to_string())?;
    if c.len() * c.len() != n {
        return Err(format!("case {case}: {} points kept from {n}", c.len()));
    }
    let mut rng = case_rng(831, case);
    let len = rng.random_range(2..=n.max(2)).min(n);
    if len >= 2 {
        let idx = random_indices(&mut rng, n, len);
        let h = Thinner::new(cfg.meta, &data).kt_halve(&idx, 0.5, &mut rng).map_err(|e| e.to_string())?;
        if h.len() != len / 2 {
            return Err(format!("case {case}: halving {len} gave {}", h.len()));
        }
    }
    Ok(())
}

pub fn check_no_duplicates_nesting(case: u64) -> Check {
    let (data, cfg) = random_pp_case(84, case);
    let n = data.len();
    let all: Vec<usize> = (0..n).collect();
    let c = kt_compress_pp(&data, &cfg).map_err(|e| e.to_string())?;
    check_nested(&c, &all).map_err(|e| format!("case {case}: compress++ {e}"))?;
    let mut rng = case_rng(841, case);
    let len = 2 * rng.random_range(1..=n / 2);
    let idx = random_indices(&mut rng, n, len);
    let h = Thinner::new(cfg.meta, &data).kt_halve(&idx, 0.5, &mut rng).map_err(|e| e.to_string())?;
    check_nested(&h, &idx).map_err(|e| format!("case {case}: halve {e}"))?;
    let g = rng.random_range(0..=2u32);
    if 4usize.pow(g) <= n {
        let c = Thinner::new(cfg.meta, &data)
            .compress(&all, g, 0.5, StreamKey::new(case))
            .map_err(|e| e.to_string())?;
        check_nested(&c, &all).map_err(|e| format!("case {case}: compress {e}"))?;
    }
    Ok(())
}

pub fn check_determinism(case: u64) -> Check {
    let (data, cfg) = random_pp_case(85, case);
    let a = kt_compress_pp(&data, &cfg).map_err(|e| e.to_string())?;
    let b = kt_compress_pp(&data, &cfg).map_err(|e| e.to_string())?;
    if a != b {
        return Err(format!("case {case}: repeated compress++ differs"));
    }
    let th = Thinner::new(cfg.meta, &data);
    let idx: Vec<usize> = (0..data.len()).collect();
    let run = || th.kt_split(&idx, 0.5, &mut StreamKey::new(case).rng());
    if run().map_err(|e| e.to_string())? != run().map_err(|e| e.to_string())? {
        return Err(format!("case {case}: repeated kt_split differs"));
    }
    Ok(())
}

/// Runs `check` on `cases` case seeds and collects every violation.
pub fn run_cases(cases: u64, check: fn(u64) -> Check) -> Vec<String> {
    (0..cases).filter_map(|c| check(c).err()).collect()
}
