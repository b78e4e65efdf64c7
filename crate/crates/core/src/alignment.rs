//! Kernel two-sample statistics and the loss stack built on them.
//!
//! All discrepancies use Gaussian kernels evaluated through the kernel trick;
//! the feature map itself is never formed. Estimators are the biased
//! (V-statistic) form, so they are non-negative by construction.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{contract_err, dim_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Heuristic {
    Median,
}

/// Base squared bandwidth σ²: a fixed value or resolved per batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bandwidth {
    Fixed(f64),
    Auto(Heuristic),
}

/// Gaussian kernel family `Σ_u w_u · exp(−‖x − y‖² / (2 σ² 2^{k_u}))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub base_bandwidth: Bandwidth,
    pub ladder_exponents: Vec<i32>,
    pub kernel_weights: Vec<f64>,
}

impl KernelSpec {
    /// One kernel of squared bandwidth `sigma2`.
    pub fn single(sigma2: f64) -> Self {
        KernelSpec {
            base_bandwidth: Bandwidth::Fixed(sigma2),
            ladder_exponents: vec![0],
            kernel_weights: vec![1.0],
        }
    }

    /// One kernel with the median-heuristic bandwidth.
    pub fn median() -> Self {
        KernelSpec {
            base_bandwidth: Bandwidth::Auto(Heuristic::Median),
            ladder_exponents: vec![0],
            kernel_weights: vec![1.0],
        }
    }

    /// Equal-weight ladder `σ² · 2^k` for `k ∈ {−2, …, 2}`.
    pub fn ladder(base: Bandwidth) -> Self {
        let ladder_exponents: Vec<i32> = (-2..=2).collect();
        let w = 1.0 / ladder_exponents.len() as f64;
        KernelSpec {
            base_bandwidth: base,
            kernel_weights: vec![w; ladder_exponents.len()],
            ladder_exponents,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ladder_exponents.is_empty()
            || self.ladder_exponents.len() != self.kernel_weights.len()
        {
            return Err(contract_err!(
                "kernel ladder has {} exponents and {} weights",
                self.ladder_exponents.len(),
                self.kernel_weights.len()
            ));
        }
        if self.kernel_weights.iter().any(|&w| !(w > 0.0)) {
            return Err(contract_err!("kernel weights must be positive"));
        }
        let total: f64 = self.kernel_weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(contract_err!("kernel weights sum to {}, not 1", total));
        }
        if let Bandwidth::Fixed(s) = self.base_bandwidth {
            if !(s > 0.0) || !s.is_finite() {
                return Err(contract_err!("bandwidth {} must be positive", s));
            }
        }
        Ok(())
    }

    /// Resolves to `(weight, γ)` pairs with `γ = 1 / (2σ²_u)`. `pooled`
    /// supplies the sample for the median heuristic.
    pub fn resolve(&self, pooled: &Tensor) -> Result<Vec<(f64, f64)>> {
        self.validate()?;
        let base = match self.base_bandwidth {
            Bandwidth::Fixed(s) => s,
            Bandwidth::Auto(Heuristic::Median) => median_bandwidth(pooled)?,
        };
        Ok(self
            .ladder_exponents
            .iter()
            .zip(&self.kernel_weights)
            .map(|(&k, &w)| (w, 1.0 / (2.0 * base * 2f64.powi(k))))
            .collect())
    }
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::ladder(Bandwidth::Auto(Heuristic::Median))
    }
}

/// Median of the `n(n−1)/2` squared pairwise distances between rows of
/// `z`, or 1.0 when that median is zero.
pub fn median_bandwidth(z: &Tensor) -> Result<f64> {
    let n = z.rows();
    if z.shape().len() != 2 || n < 2 {
        return Err(contract_err!(
            "median bandwidth needs an [n ≥ 2, d] matrix, got {:?}",
            z.shape()
        ));
    }
    let mut d2 = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d2.push(
                z.row(i)
                    .iter()
                    .zip(z.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>(),
            );
        }
    }
    d2.sort_by(f64::total_cmp);
    let m = d2.len();
    let median = if m % 2 == 1 {
        d2[m / 2]
    } else {
        0.5 * (d2[m / 2 - 1] + d2[m / 2])
    };
    Ok(if median > 0.0 { median } else { 1.0 })
}

fn stack_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut v = a.values().to_vec();
    v.extend_from_slice(b.values());
    Tensor::new(vec![a.rows() + b.rows(), a.row_len()], v)
}

fn check_pair(tape: &Tape, xs: Var, xt: Var) -> Result<()> {
    match (tape.shape(xs), tape.shape(xt)) {
        ([m, d], [n, e]) if d == e => {
            if *m == 0 || *n == 0 {
                Err(contract_err!("empty batch"))
            } else {
                Ok(())
            }
        }
        (a, b) => Err(dim_err!("discrepancy needs [m, d] and [n, d], got {:?} and {:?}", a, b)),
    }
}

/// `K[i, j] = exp(−‖x_i − y_j‖² / (2σ²))`.
pub fn gaussian_gram(tape: &mut Tape, x: Var, y: Var, sigma2: f64) -> Result<Var> {
    if !(sigma2 > 0.0) {
        return Err(contract_err!("bandwidth {} must be positive", sigma2));
    }
    let d = tape.sq_dist(x, y)?;
    tape.rbf_mix(d, &[(1.0, 1.0 / (2.0 * sigma2))])
}

/// Within-source, within-target and cross Gram matrices under `terms`.
fn grams(tape: &mut Tape, xs: Var, xt: Var, terms: &[(f64, f64)]) -> Result<[Var; 3]> {
    let dss = tape.sq_dist(xs, xs)?;
    let dtt = tape.sq_dist(xt, xt)?;
    let dst = tape.sq_dist(xs, xt)?;
    Ok([
        tape.rbf_mix(dss, terms)?,
        tape.rbf_mix(dtt, terms)?,
        tape.rbf_mix(dst, terms)?,
    ])
}

fn combine(tape: &mut Tape, [kss, ktt, kst]: [Var; 3]) -> Result<Var> {
    let a = tape.mean(kss);
    let b = tape.mean(ktt);
    let c = tape.mean(kst);
    let ab = tape.add(a, b)?;
    let c2 = tape.scale(c, 2.0);
    tape.sub(ab, c2)
}

/// Biased squared MMD, `mean(K_ss) + mean(K_tt) − 2·mean(K_st)`, summed over
/// the kernel ladder with its weights. A median bandwidth is taken on the
/// pooled batch and not differentiated.
pub fn mmd2(tape: &mut Tape, xs: Var, xt: Var, k: &KernelSpec) -> Result<Var> {
    check_pair(tape, xs, xt)?;
    let terms = k.resolve(&stack_rows(tape.value(xs), tape.value(xt))?)?;
    let g = grams(tape, xs, xt, &terms)?;
    combine(tape, g)
}

/// Multi-kernel MMD. Same estimator as [`mmd2`]; use it with a ladder such
/// as [`KernelSpec::ladder`].
pub fn mk_mmd(tape: &mut Tape, xs: Var, xt: Var, k: &KernelSpec) -> Result<Var> {
    mmd2(tape, xs, xt, k)
}

/// Joint MMD over several layers. Per-layer Gram matrices are multiplied
/// elementwise, which is the Gram matrix of the tensor-product embedding.
pub fn jmmd(tape: &mut Tape, s: &[Var], t: &[Var], ks: &[KernelSpec]) -> Result<Var> {
    if s.is_empty() || s.len() != t.len() || s.len() != ks.len() {
        return Err(contract_err!(
            "jmmd needs matching layer lists, got {} source, {} target, {} kernels",
            s.len(),
            t.len(),
            ks.len()
        ));
    }
    let (m, n) = (tape.shape(s[0])[0], tape.shape(t[0])[0]);
    let mut joint: Option<[Var; 3]> = None;
    for ((&zs, &zt), k) in s.iter().zip(t).zip(ks) {
        check_pair(tape, zs, zt)?;
        if tape.shape(zs)[0] != m || tape.shape(zt)[0] != n {
            return Err(dim_err!("jmmd layers disagree on batch size"));
        }
        let terms = k.resolve(&stack_rows(tape.value(zs), tape.value(zt))?)?;
        let g = grams(tape, zs, zt, &terms)?;
        joint = Some(match joint {
            None => g,
            Some(acc) => [
                tape.mul(acc[0], g[0])?,
                tape.mul(acc[1], g[1])?,
                tape.mul(acc[2], g[2])?,
            ],
        });
    }
    combine(tape, joint.expect("at least one layer"))
}

fn covariance(tape: &mut Tape, x: Var) -> Result<Var> {
    let m = tape.shape(x)[0];
    let c = tape.center_cols(x)?;
    let ct = tape.transpose(c)?;
    let prod = tape.matmul(ct, c)?;
    Ok(tape.scale(prod, 1.0 / (m as f64 - 1.0)))
}

/// `‖C_s − C_t‖²_F / (4d²)` with unbiased sample covariances.
pub fn coral_loss(tape: &mut Tape, fs: Var, ft: Var) -> Result<Var> {
    check_pair(tape, fs, ft)?;
    let (m, d) = (tape.shape(fs)[0], tape.shape(fs)[1]);
    let n = tape.shape(ft)[0];
    if m < 2 || n < 2 {
        return Err(contract_err!("coral needs at least two rows per side"));
    }
    let cs = covariance(tape, fs)?;
    let ct = covariance(tape, ft)?;
    let diff = tape.sub(cs, ct)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / (4.0 * (d * d) as f64)))
}

/// Softmax over every cell of a source × target grid:
/// `W[i][j] = exp(J[i][j]) / Σ exp(J)`. Larger discrepancies get larger
/// weights.
pub fn pair_weights(j: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let h = j.first().map(Vec::len).unwrap_or(0);
    if h == 0 || j.iter().any(|r| r.len() != h) {
        return Err(dim_err!("pair grid must be a non-empty rectangle"));
    }
    if j.iter().flatten().any(|v| !v.is_finite()) {
        return Err(contract_err!("pair grid has non-finite entries"));
    }
    let flat: Vec<f64> = j.concat();
    let w = crate::diffcore::softmax_rows(&flat, flat.len());
    Ok(w.chunks(h).map(<[f64]>::to_vec).collect())
}

/// Whether gradients flow through the pair weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightFlow {
    /// Weights are per-step constants.
    #[default]
    Detached,
    /// Weights are differentiated as a function of the grid.
    Through,
}

/// Source × target discrepancy values and the weights assigned to them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyReport {
    pub jmmd: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
}

/// `L_dis = Σ_ij W[i][j] · J[i][j]` with `W = pair_weights(J)`.
pub fn weighted_distance(
    tape: &mut Tape,
    grid: &[Vec<Var>],
    flow: WeightFlow,
) -> Result<(Var, DiscrepancyReport)> {
    let values: Vec<Vec<f64>> = grid
        .iter()
        .map(|row| row.iter().map(|&v| tape.value(v).item()).collect())
        .collect();
    let weights = pair_weights(&values)?;
    let cells: Vec<Var> = grid.concat();
    let stacked = tape.stack(&cells)?;
    let loss = match flow {
        WeightFlow::Detached => {
            let w = tape.mul_const(stacked, weights.concat())?;
            tape.sum(w)
        }
        WeightFlow::Through => {
            let w = tape.softmax(stacked)?;
            let wj = tape.mul(w, stacked)?;
            tape.sum(wj)
        }
    };
    Ok((
        loss,
        DiscrepancyReport {
            jmmd: values,
            weights,
        },
    ))
}

/// `L_c = Σ_i cross_entropy(logits_i, labels_i)` over source domains.
pub fn classification_loss(tape: &mut Tape, logits: &[Var], labels: &[&[usize]]) -> Result<Var> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(contract_err!(
            "{} logit batches for {} label batches",
            logits.len(),
            labels.len()
        ));
    }
    let mut total: Option<Var> = None;
    for (&l, y) in logits.iter().zip(labels) {
        let ce = tape.cross_entropy(l, y)?;
        total = Some(match total {
            None => ce,
            Some(acc) => tape.add(acc, ce)?,
        });
    }
    Ok(total.expect("non-empty"))
}

/// `L = λ·L_c + (1 − λ)·L_dis`.
pub fn overall_loss(tape: &mut Tape, lambda: f64, l_c: Var, l_dis: Var) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(contract_err!("lambda {} outside [0, 1]", lambda));
    }
    let a = tape.scale(l_c, lambda);
    let b = tape.scale(l_dis, 1.0 - lambda);
    tape.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(tape: &mut Tape, rows: &[&[f64]]) -> Var {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        tape.leaf(Tensor::from_rows(&rows).unwrap())
    }

    fn val(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item()
    }

    #[test]
    fn gram_diagonal_and_hand_value() {
        let mut t = Tape::new();
        let x = m(&mut t, &[&[0.0, 1.0], &[2.0, -1.0]]);
        let k = gaussian_gram(&mut t, x, x, 0.7).unwrap();
        assert_eq!(t.value(k).at2(0, 0), 1.0);
        assert_eq!(t.value(k).at2(1, 1), 1.0);

        let a = m(&mut t, &[&[0.0]]);
        let b = m(&mut t, &[&[1.0]]);
        let k = gaussian_gram(&mut t, a, b, 0.5).unwrap();
        assert!((t.value(k).item() - (-1f64).exp()).abs() < 1e-15);
        assert!(gaussian_gram(&mut t, a, b, 0.0).is_err());
    }

    #[test]
    fn median_bandwidth_cases() {
        let z = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(median_bandwidth(&z).unwrap(), 4.0);
        let same = Tensor::full(&[4, 2], 3.3);
        assert_eq!(median_bandwidth(&same).unwrap(), 1.0);
        let shifted = Tensor::from_rows(&[vec![10.0], vec![11.0], vec![13.0]]).unwrap();
        assert_eq!(median_bandwidth(&shifted).unwrap(), 4.0);
        assert!(median_bandwidth(&Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn mmd2_hand_value_and_identity() {
        let mut t = Tape::new();
        let a = m(&mut t, &[&[0.0]]);
        let b = m(&mut t, &[&[1.0]]);
        let d = mmd2(&mut t, a, b, &KernelSpec::single(0.5)).unwrap();
        assert!((val(&t, d) - (2.0 - 2.0 * (-1f64).exp())).abs() < 1e-12);
        assert!((val(&t, d) - 1.264241).abs() < 1e-6);

        let x = m(&mut t, &[&[0.3, 1.0], &[2.0, -1.0], &[0.0, 0.0]]);
        let y = m(&mut t, &[&[0.3, 1.0], &[2.0, -1.0], &[0.0, 0.0]]);
        let d = mmd2(&mut t, x, y, &KernelSpec::default()).unwrap();
        assert!(val(&t, d).abs() < 1e-12);
    }

    #[test]
    fn mk_mmd_is_weighted_sum_of_single_kernels() {
        let mut t = Tape::new();
        let x = m(&mut t, &[&[0.3, 1.0], &[2.0, -1.0], &[0.0, 0.5]]);
        let y = m(&mut t, &[&[1.3, 0.0], &[-2.0, -1.0]]);
        let spec = KernelSpec::ladder(Bandwidth::Fixed(1.7));
        let total = mk_mmd(&mut t, x, y, &spec).unwrap();
        let mut sum = 0.0;
        for (&k, &w) in spec.ladder_exponents.iter().zip(&spec.kernel_weights) {
            let single = mmd2(&mut t, x, y, &KernelSpec::single(1.7 * 2f64.powi(k))).unwrap();
            sum += w * val(&t, single);
        }
        assert!((val(&t, total) - sum).abs() < 1e-12);

        let one = KernelSpec::single(1.7);
        let a = mk_mmd(&mut t, x, y, &one).unwrap();
        let b = mmd2(&mut t, x, y, &one).unwrap();
        assert_eq!(val(&t, a), val(&t, b));
    }

    #[test]
    fn empty_or_mismatched_batches_rejected() {
        let mut t = Tape::new();
        let x = m(&mut t, &[&[0.0, 1.0]]);
        let y = m(&mut t, &[&[0.0, 1.0, 2.0]]);
        assert!(mmd2(&mut t, x, y, &KernelSpec::single(1.0)).is_err());
    }

    #[test]
    fn jmmd_single_layer_is_mmd2() {
        let mut t = Tape::new();
        let x = m(&mut t, &[&[0.3, 1.0], &[2.0, -1.0], &[0.0, 0.5]]);
        let y = m(&mut t, &[&[1.3, 0.0], &[-2.0, -1.0]]);
        let k = KernelSpec::default();
        let a = jmmd(&mut t, &[x], &[y], std::slice::from_ref(&k)).unwrap();
        let b = mmd2(&mut t, x, y, &k).unwrap();
        assert!((val(&t, a) - val(&t, b)).abs() < 1e-12);
    }

    #[test]
    fn coral_cases() {
        let mut t = Tape::new();
        let fs = m(&mut t, &[&[1.0], &[-1.0], &[1.0], &[-1.0]]);
        // Population variance 1 over four points is sample variance 4/3;
        // use two points at ±1/√2 for sample variance 1.
        let r = 0.5f64.sqrt();
        let fs1 = m(&mut t, &[&[r], &[-r]]);
        let ft0 = m(&mut t, &[&[2.0], &[2.0], &[2.0]]);
        let c = coral_loss(&mut t, fs1, ft0).unwrap();
        assert!((val(&t, c) - 0.25).abs() < 1e-12);

        let same = coral_loss(&mut t, fs, fs).unwrap();
        assert_eq!(val(&t, same), 0.0);

        let a = m(&mut t, &[&[1.0, 0.0], &[0.0, 2.0], &[3.0, 1.0]]);
        let b = m(&mut t, &[&[0.0, 0.0], &[1.0, 5.0], &[2.0, 1.0], &[4.0, 4.0]]);
        let a2 = m(&mut t, &[&[11.0, -5.0], &[10.0, -3.0], &[13.0, -4.0]]);
        let b2 = m(&mut t, &[&[10.0, -5.0], &[11.0, 0.0], &[12.0, -4.0], &[14.0, -1.0]]);
        let c1 = coral_loss(&mut t, a, b).unwrap();
        let c2 = coral_loss(&mut t, a2, b2).unwrap();
        assert!((val(&t, c1) - val(&t, c2)).abs() < 1e-12);
        let one = m(&mut t, &[&[1.0, 2.0]]);
        assert!(coral_loss(&mut t, one, b).is_err());
    }

    #[test]
    fn pair_weight_cases() {
        let w = pair_weights(&[vec![0.3, 0.3], vec![0.3, 0.3]]).unwrap();
        assert!(w.iter().flatten().all(|&v| (v - 0.25).abs() < 1e-15));

        let w = pair_weights(&[vec![2f64.ln(), 0.0], vec![0.0, 0.0]]).unwrap();
        let expect = [[0.4, 0.2], [0.2, 0.2]];
        for (r, e) in w.iter().zip(expect) {
            for (a, b) in r.iter().zip(e) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        assert!(pair_weights(&[vec![1.0], vec![]]).is_err());
        assert!(pair_weights(&[]).is_err());
    }

    #[test]
    fn weighted_distance_single_and_uniform() {
        let mut t = Tape::new();
        let j = t.leaf(Tensor::scalar(0.37));
        let (l, rep) = weighted_distance(&mut t, &[vec![j]], WeightFlow::Detached).unwrap();
        assert_eq!(val(&t, l), 0.37);
        assert_eq!(rep.weights, vec![vec![1.0]]);

        let cells: Vec<Vec<Var>> = (0..2)
            .map(|_| (0..3).map(|_| t.leaf(Tensor::scalar(0.8))).collect())
            .collect();
        let (l, _) = weighted_distance(&mut t, &cells, WeightFlow::Detached).unwrap();
        assert!((val(&t, l) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn classification_loss_sums_sources() {
        let mut t = Tape::new();
        let a = m(&mut t, &[&[1.0, 2.0, 0.5], &[0.0, -1.0, 3.0]]);
        let labels: &[usize] = &[1, 2];
        let one = classification_loss(&mut t, &[a], &[labels]).unwrap();
        let ce = t.cross_entropy(a, labels).unwrap();
        assert_eq!(val(&t, one), val(&t, ce));
        let two = classification_loss(&mut t, &[a, a], &[labels, labels]).unwrap();
        assert_eq!(val(&t, two), 2.0 * val(&t, ce));
    }

    #[test]
    fn overall_loss_cases() {
        let mut t = Tape::new();
        let lc = t.leaf(Tensor::scalar(2.0));
        let ld = t.leaf(Tensor::scalar(4.0));
        let l = overall_loss(&mut t, 0.5, lc, ld).unwrap();
        assert_eq!(val(&t, l), 3.0);
        let l = overall_loss(&mut t, 1.0, lc, ld).unwrap();
        assert_eq!(val(&t, l), 2.0);
        let l0 = overall_loss(&mut t, 0.0, lc, ld).unwrap();
        assert_eq!(val(&t, l0), 4.0);
        for lam in [0.1, 0.25, 0.9] {
            let l = overall_loss(&mut t, lam, lc, ld).unwrap();
            assert!((val(&t, l) - (lam * 2.0 + (1.0 - lam) * 4.0)).abs() < 1e-15);
        }
        assert!(overall_loss(&mut t, 1.5, lc, ld).is_err());
    }

    #[test]
    fn kernel_spec_serde_forms() {
        let k = KernelSpec::default();
        let s = serde_json::to_string(&k).unwrap();
        assert!(s.contains("\"median\""));
        assert_eq!(serde_json::from_str::<KernelSpec>(&s).unwrap(), k);
        let f: KernelSpec = serde_json::from_str(
            r#"{"base_bandwidth": 2.5, "ladder_exponents": [0], "kernel_weights": [1.0]}"#,
        )
        .unwrap();
        assert_eq!(f, KernelSpec::single(2.5));
    }
}
