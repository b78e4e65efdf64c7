//! Independent oracles shared by the integration tests and the acceptance
//! runner. Nothing here calls into the kernels it is used to check.

#![allow(dead_code)]

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wjmmd::diffcore::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

pub fn random_rows(rng: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

pub fn rows_tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

/// `|a − b| / max(|a|, |b|, 1e-6)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between the tape gradient of `f` with respect to
/// every input entry and a central difference with step [`FD_STEP`].
///
/// `f` receives one leaf per input and must return a scalar node.
pub fn grad_check(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &vars);
        t.value(out).item()
    };
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| t.leaf(x.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut t, &vars);
    t.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = t.grad(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);
        for i in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[k].values_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].values_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    worst
}

/// Reduces any node to a scalar with fixed random weights, so every output
/// entry contributes a distinct amount to the checked gradient.
pub fn weighted_sum(t: &mut Tape, v: Var, seed: u64) -> Var {
    let n = t.value(v).len();
    let mut r = rng(seed);
    let w: Vec<f64> = (0..n).map(|_| r.gen_range(0.5..1.5)).collect();
    let m = t.mul_const(v, w).unwrap();
    t.sum(m)
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `Σ_u w_u exp(−γ_u ‖a − b‖²)`, evaluated directly.
pub fn kernel(a: &[f64], b: &[f64], terms: &[(f64, f64)]) -> f64 {
    let d = sq_dist(a, b);
    terms.iter().map(|&(w, g)| w * (-g * d).exp()).sum()
}

/// Biased squared MMD by explicit double loops over sample pairs.
pub fn naive_mmd2(xs: &[Vec<f64>], xt: &[Vec<f64>], terms: &[(f64, f64)]) -> f64 {
    let (m, n) = (xs.len() as f64, xt.len() as f64);
    let mut ss = 0.0;
    for a in xs {
        for b in xs {
            ss += kernel(a, b, terms);
        }
    }
    let mut tt = 0.0;
    for a in xt {
        for b in xt {
            tt += kernel(a, b, terms);
        }
    }
    let mut st = 0.0;
    for a in xs {
        for b in xt {
            st += kernel(a, b, terms);
        }
    }
    ss / (m * m) + tt / (n * n) - 2.0 * st / (m * n)
}

/// Joint MMD with the product of per-layer kernels, by double loops.
/// `s[l][i]` is row `i` of layer `l`.
pub fn naive_jmmd(s: &[Vec<Vec<f64>>], t: &[Vec<Vec<f64>>], terms: &[Vec<(f64, f64)>]) -> f64 {
    let m = s[0].len();
    let n = t[0].len();
    let k = |a: &[Vec<Vec<f64>>], i: usize, b: &[Vec<Vec<f64>>], j: usize| -> f64 {
        (0..terms.len())
            .map(|l| kernel(&a[l][i], &b[l][j], &terms[l]))
            .product()
    };
    let mut ss = 0.0;
    for i in 0..m {
        for j in 0..m {
            ss += k(s, i, s, j);
        }
    }
    let mut tt = 0.0;
    for i in 0..n {
        for j in 0..n {
            tt += k(t, i, t, j);
        }
    }
    let mut st = 0.0;
    for i in 0..m {
        for j in 0..n {
            st += k(s, i, t, j);
        }
    }
    ss / (m * m) as f64 + tt / (n * n) as f64 - 2.0 * st / (m * n) as f64
}

/// Median of squared pairwise distances over `i < j`, 1.0 when zero.
pub fn naive_median(rows: &[Vec<f64>]) -> f64 {
    let mut d = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(sq_dist(&rows[i], &rows[j]));
        }
    }
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = d.len();
    let med = if k % 2 == 1 { d[k / 2] } else { 0.5 * (d[k / 2 - 1] + d[k / 2]) };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// `(w, γ)` pairs of an equal-weight ladder `σ² 2^k`, `k ∈ exps`.
pub fn ladder_terms(sigma2: f64, exps: &[i32]) -> Vec<(f64, f64)> {
    let w = 1.0 / exps.len() as f64;
    exps.iter()
        .map(|&k| (w, 1.0 / (2.0 * sigma2 * 2f64.powi(k))))
        .collect()
}

/// Magnitudes of DFT bins `0..n/2` by the defining O(n²) sum.
pub fn naive_dft_magnitude(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (j, &v) in x.iter().enumerate() {
                let a = -2.0 * PI * (k * j % n) as f64 / n as f64;
                re += v * a.cos();
                im += v * a.sin();
            }
            re.hypot(im)
        })
        .collect()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Registers plain check functions as unit tests. The acceptance runner
/// calls the same functions directly.
#[allow(unused_macros)]
macro_rules! unit_tests {
    ($($name:ident),* $(,)?) => {
        mod unit {
            $(
                #[test]
                fn $name() {
                    super::$name()
                }
            )*
        }
    };
}
