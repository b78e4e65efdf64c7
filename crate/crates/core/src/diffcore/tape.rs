//! Reverse-mode tape.
//!
//! Every differentiable op appends one node holding its output value and a
//! record of its inputs. Nodes are appended in execution order, so the node
//! vector is already topologically sorted and `backward` is a single reverse
//! sweep. Callers start a fresh tape (or call [`Tape::clear`]) for every
//! optimisation step.

use std::collections::HashMap;

use super::params::ParameterStore;
use super::tensor::Tensor;
use crate::error::{contract_err, dim_err, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    Stack(Vec<Var>),
    CenterCols(Var),
    Conv1d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    MaxPool1d {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPoolGlobal(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SqDist(Var, Var),
    RbfMix {
        dist: Var,
        terms: Vec<(f64, f64)>,
    },
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    len_in: usize,
    c_out: usize,
    kernel: usize,
    len_out: usize,
    stride: usize,
    padding: usize,
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

fn out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let value = value.with_requires_grad(requires_grad);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Records an input tensor; its own `requires_grad` flag decides whether
    /// gradients are collected for it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Loads a parameter from the store. Repeated loads of one name on the
    /// same tape return the same node, so every forward pass in a step reads
    /// identical weights and their gradients meet in one place.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| contract_err!("unknown parameter '{}'", name))?;
        let mut value = t.clone();
        value.zero_grad();
        let v = self.push(value, Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub(crate) fn param_vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn vals(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
    }

    fn mat_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            s => Err(dim_err!("{} expects a matrix, got shape {:?}", what, s)),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(dim_err!("matmul inner extents differ: {}×{} · {}×{}", m, k, k2, n));
        }
        let out = matmul_raw(self.vals(a), self.vals(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat_dims(a, "transpose")?;
        let out = transpose_raw(self.vals(a), m, n);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{}: shapes {:?} and {:?} differ",
                what,
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let out: Vec<f64> = self
            .vals(a)
            .iter()
            .zip(self.vals(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = t.values().iter().map(|v| v * c).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(
            Tensor::new(shape, out).expect("shape preserved"),
            Op::Scale(a, c),
            rg,
        )
    }

    /// Multiplies elementwise by a constant array (no gradient to the constant).
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(dim_err!("mul_const: {} factors for {} values", c.len(), self.value(a).len()));
        }
        let out = self.vals(a).iter().zip(&c).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::MulConst(a, c), rg))
    }

    /// `[m, n] + [n]`, broadcasting the bias over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.mat_dims(x, "add_bias")?;
        if self.shape(b) != [n] {
            return Err(dim_err!("bias shape {:?} does not match {} columns", self.shape(b), n));
        }
        let xb = self.vals(x);
        let bb = self.vals(b);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            out.extend(xb[i * n..(i + 1) * n].iter().zip(bb).map(|(p, q)| p + q));
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::AddBias(x, b), rg))
    }

    /// `x · w + b` with `w` of shape `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// `max(x, 0)`; NaN passes through so divergence stays visible.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |v| if v > 0.0 || v.is_nan() { v } else { 0.0 })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let out = t.values().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out).expect("shape preserved"), op, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.vals(a).iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.vals(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Concatenates along the leading axis; trailing shapes must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| contract_err!("concat_rows of nothing"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != tail.len() + 1 || s[1..] != tail[..] {
                return Err(dim_err!("concat_rows: incompatible shape {:?}", s));
            }
            rows += s[0];
            out.extend_from_slice(self.vals(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Packs scalars into a vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Result<Var> {
        if scalars.is_empty() {
            return Err(contract_err!("stack of nothing"));
        }
        let mut out = Vec::with_capacity(scalars.len());
        for &s in scalars {
            if !self.value(s).is_scalar() {
                return Err(dim_err!("stack expects scalars, got {:?}", self.shape(s)));
            }
            out.push(self.vals(s)[0]);
        }
        let rg = scalars.iter().any(|&s| self.rg(s));
        Ok(self.push(Tensor::vector(out), Op::Stack(scalars.to_vec()), rg))
    }

    /// Subtracts each column's mean.
    pub fn center_cols(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat_dims(a, "center_cols")?;
        let v = self.vals(a);
        let means = col_means(v, m, n);
        let mut out = v.to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] -= means[j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::CenterCols(a), rg))
    }

    /// Cross-correlation. `x` is `[C_in, L]` or `[B, C_in, L]`, `w` is
    /// `[C_out, C_in, K]`; the output keeps the batch axis when given.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (batch, c_in, len_in, batched) = match xs[..] {
            [c, l] => (1, c, l, false),
            [b, c, l] => (b, c, l, true),
            _ => return Err(dim_err!("conv1d input must be [C, L] or [B, C, L], got {:?}", xs)),
        };
        let (c_out, wc, kernel) = match self.shape(w) {
            &[o, c, k] => (o, c, k),
            s => return Err(dim_err!("conv1d weight must be [C_out, C_in, K], got {:?}", s)),
        };
        if wc != c_in {
            return Err(dim_err!("conv1d: input has {} channels, weight expects {}", c_in, wc));
        }
        let len_out = out_len(len_in, kernel, stride, padding)
            .ok_or_else(|| dim_err!("conv1d: no valid output positions (L={}, K={}, stride={}, padding={})", len_in, kernel, stride, padding))?;
        let geom = ConvGeom {
            batch,
            c_in,
            len_in,
            c_out,
            kernel,
            len_out,
            stride,
            padding,
        };
        let out = conv_forward(self.vals(x), self.vals(w), &geom);
        let shape = if batched {
            vec![batch, c_out, len_out]
        } else {
            vec![c_out, len_out]
        };
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv1d { x, w, geom }, rg))
    }

    /// Max pooling over the last axis; padded positions never win and ties
    /// go to the lowest index.
    pub fn max_pool1d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let len_in = *xs.last().ok_or_else(|| dim_err!("max_pool1d on a scalar"))?;
        if xs.len() < 2 || kernel == 0 || 2 * padding > kernel {
            return Err(dim_err!("max_pool1d: bad geometry {:?}, k={}, padding={}", xs, kernel, padding));
        }
        let len_out = out_len(len_in, kernel, stride, padding)
            .ok_or_else(|| dim_err!("max_pool1d: no valid output positions"))?;
        let lanes: usize = xs[..xs.len() - 1].iter().product();
        let v = self.vals(x);
        let mut out = Vec::with_capacity(lanes * len_out);
        let mut argmax = Vec::with_capacity(lanes * len_out);
        for lane in 0..lanes {
            let base = lane * len_in;
            for t in 0..len_out {
                let start = (t * stride) as isize - padding as isize;
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for k in 0..kernel {
                    let pos = start + k as isize;
                    if pos < 0 || pos as usize >= len_in {
                        continue;
                    }
                    let val = v[base + pos as usize];
                    if best_i == usize::MAX || val > best {
                        best = val;
                        best_i = base + pos as usize;
                    }
                }
                out.push(best);
                argmax.push(best_i);
            }
        }
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = len_out;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxPool1d { x, argmax }, rg))
    }

    /// Mean over the last axis: `[B, C, L] -> [B, C]`, `[C, L] -> [C]`.
    pub fn avg_pool_global(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(dim_err!("avg_pool_global needs at least 2 axes, got {:?}", xs));
        }
        let len = xs[xs.len() - 1];
        let out: Vec<f64> = self
            .vals(x)
            .chunks(len)
            .map(|c| c.iter().sum::<f64>() / len as f64)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(xs[..xs.len() - 1].to_vec(), out)?,
            Op::AvgPoolGlobal(x),
            rg,
        ))
    }

    /// Row-wise softmax of a `[B, C]` matrix (a vector counts as one row).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = match xs[..] {
            [c] | [_, c] => c,
            _ => return Err(dim_err!("softmax expects a vector or matrix, got {:?}", xs)),
        };
        let out = softmax_rows(self.vals(x), c);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(xs, out)?, Op::Softmax(x), rg))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.mat_dims(logits, "cross_entropy")?;
        if labels.len() != b {
            return Err(dim_err!("cross_entropy: {} labels for batch of {}", labels.len(), b));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(contract_err!("label {} outside [0, {})", bad, c));
        }
        let v = self.vals(logits);
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = &v[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|r| (r - mx).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        loss /= b as f64;
        let probs = softmax_rows(v, c);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `D[i, j] = ‖x_i − y_j‖²` for `x: [m, d]`, `y: [n, d]`.
    pub fn sq_dist(&mut self, x: Var, y: Var) -> Result<Var> {
        let (m, d) = self.mat_dims(x, "sq_dist")?;
        let (n, d2) = self.mat_dims(y, "sq_dist")?;
        if d != d2 {
            return Err(dim_err!("sq_dist: feature dims {} and {} differ", d, d2));
        }
        let xv = self.vals(x);
        let yv = self.vals(y);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let xi = &xv[i * d..(i + 1) * d];
            for j in 0..n {
                let yj = &yv[j * d..(j + 1) * d];
                out.push(xi.iter().zip(yj).map(|(a, b)| (a - b) * (a - b)).sum());
            }
        }
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::SqDist(x, y), rg))
    }

    /// `Σ_u w_u · exp(−γ_u · D)` elementwise, for `terms = [(w_u, γ_u)]`.
    pub fn rbf_mix(&mut self, dist: Var, terms: &[(f64, f64)]) -> Result<Var> {
        if terms.is_empty() {
            return Err(contract_err!("rbf_mix needs at least one kernel"));
        }
        let out = self
            .vals(dist)
            .iter()
            .map(|&dv| terms.iter().map(|&(w, g)| w * (-g * dv).exp()).sum())
            .collect();
        let shape = self.shape(dist).to_vec();
        let rg = self.rg(dist);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::RbfMix {
                dist,
                terms: terms.to_vec(),
            },
            rg,
        ))
    }

    /// Accumulates `∂loss/∂v` into every node that requires a gradient.
    /// Calling it again without clearing adds to the existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.rg(v) {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.shape(*a));
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    // g · bᵀ
                    send(*a, gemm(g, (n, 1), self.vals(*b), (1, n), m, n, k));
                }
                if self.rg(*b) {
                    // aᵀ · g
                    send(*b, gemm(self.vals(*a), (1, k), g, (n, 1), k, m, n));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = dims2(self.shape(*a));
                send(*a, transpose_raw(g, n, m));
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let av = self.vals(*a);
                let bv = self.vals(*b);
                send(*a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                send(*b, g.iter().zip(av).map(|(x, y)| x * y).collect());
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|v| v * c).collect()),
            Op::MulConst(a, c) => send(*a, g.iter().zip(c).map(|(x, y)| x * y).collect()),
            Op::AddBias(x, b) => {
                let n = self.shape(*b)[0];
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                }
                send(*x, g.to_vec());
                send(*b, gb);
            }
            Op::Relu(a) => {
                let av = self.vals(*a);
                send(
                    *a,
                    g.iter()
                        .zip(av)
                        .map(|(gv, &x)| if x > 0.0 || x.is_nan() { *gv } else { 0.0 })
                        .collect(),
                );
            }
            Op::Exp(a) => {
                let out = node.value.values();
                send(*a, g.iter().zip(out).map(|(x, y)| x * y).collect());
            }
            Op::Sum(a) => send(*a, vec![g[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                send(*a, vec![g[0] / n as f64; n]);
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    send(p, g[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::Stack(scalars) => {
                for (k, &s) in scalars.iter().enumerate() {
                    send(s, vec![g[k]]);
                }
            }
            Op::CenterCols(a) => {
                let (m, n) = dims2(self.shape(*a));
                let gm = col_means(g, m, n);
                let mut out = g.to_vec();
                for r in 0..m {
                    for c in 0..n {
                        out[r * n + c] -= gm[c];
                    }
                }
                send(*a, out);
            }
            Op::Conv1d { x, w, geom } => {
                let (gx, gw) = conv_backward(
                    self.vals(*x),
                    self.vals(*w),
                    g,
                    geom,
                    self.rg(*x),
                    self.rg(*w),
                );
                if let Some(gx) = gx {
                    send(*x, gx);
                }
                if let Some(gw) = gw {
                    send(*w, gw);
                }
            }
            Op::MaxPool1d { x, argmax } => {
                let mut gx = vec![0.0; self.value(*x).len()];
                for (gv, &src) in g.iter().zip(argmax) {
                    gx[src] += gv;
                }
                send(*x, gx);
            }
            Op::AvgPoolGlobal(x) => {
                let len = *self.shape(*x).last().unwrap();
                let mut gx = Vec::with_capacity(self.value(*x).len());
                for gv in g {
                    gx.extend(std::iter::repeat_n(gv / len as f64, len));
                }
                send(*x, gx);
            }
            Op::Softmax(x) => {
                let c = *self.shape(*x).last().unwrap();
                let y = node.value.values();
                let mut gx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(c).zip(g.chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    gx.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                }
                send(*x, gx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (b, c) = dims2(self.shape(*logits));
                let scale = g[0] / b as f64;
                let mut gx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    gx[r * c + l] -= scale;
                }
                send(*logits, gx);
            }
            Op::SqDist(x, y) => {
                let (m, d) = dims2(self.shape(*x));
                let n = self.shape(*y)[0];
                let xv = self.vals(*x);
                let yv = self.vals(*y);
                let mut gx = vec![0.0; m * d];
                let mut gy = vec![0.0; n * d];
                for i in 0..m {
                    for j in 0..n {
                        let gij = 2.0 * g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let diff = gij * (xv[i * d + k] - yv[j * d + k]);
                            gx[i * d + k] += diff;
                            gy[j * d + k] -= diff;
                        }
                    }
                }
                // sq_dist(x, x) feeds both gradients into the same node.
                send(*x, gx);
                send(*y, gy);
            }
            Op::RbfMix { dist, terms } => {
                let dv = self.vals(*dist);
                send(
                    *dist,
                    g.iter()
                        .zip(dv)
                        .map(|(gv, &d)| {
                            gv * terms
                                .iter()
                                .map(|&(w, gam)| -w * gam * (-gam * d).exp())
                                .sum::<f64>()
                        })
                        .collect(),
                );
            }
        }
    }
}

fn dims2(s: &[usize]) -> (usize, usize) {
    (s[0], s[1])
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    gemm(a, (k, 1), b, (n, 1), m, k, n)
}

/// `m×n` product of an `m×k` and a `k×n` operand given as (row, column)
/// strides, so transposed views need no copy.
fn gemm(
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    assert!(a.len() >= m * k && b.len() >= k * n);
    // SAFETY: the strides address exactly the m×k and k×n elements checked
    // above, and `out` is a fresh contiguous m×n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn col_means(v: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut means = vec![0.0; n];
    for row in v.chunks(n) {
        means.iter_mut().zip(row).for_each(|(a, r)| *a += r);
    }
    means.iter_mut().for_each(|a| *a /= m as f64);
    means
}

pub(crate) fn softmax_rows(v: &[f64], c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(v.len());
    for row in v.chunks(c) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|r| (r - mx).exp()));
        let z: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|e| *e /= z);
    }
    out
}

/// Source position in the unpadded input for output `t` and tap `k`.
#[inline]
fn tap(t: usize, k: usize, g: &ConvGeom) -> Option<usize> {
    let pos = (t * g.stride + k) as isize - g.padding as isize;
    (pos >= 0 && (pos as usize) < g.len_in).then_some(pos as usize)
}

fn conv_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.c_out * g.len_out];
    for b in 0..g.batch {
        for o in 0..g.c_out {
            let orow = &mut out[(b * g.c_out + o) * g.len_out..][..g.len_out];
            for c in 0..g.c_in {
                let xrow = &x[(b * g.c_in + c) * g.len_in..][..g.len_in];
                let wrow = &w[(o * g.c_in + c) * g.kernel..][..g.kernel];
                for (k, &wv) in wrow.iter().enumerate() {
                    if wv == 0.0 {
                        continue;
                    }
                    for (t, ov) in orow.iter_mut().enumerate() {
                        if let Some(p) = tap(t, k, g) {
                            *ov += wv * xrow[p];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: &ConvGeom,
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut gx = want_x.then(|| vec![0.0; x.len()]);
    let mut gw = want_w.then(|| vec![0.0; w.len()]);
    for b in 0..g.batch {
        for o in 0..g.c_out {
            let grow = &gout[(b * g.c_out + o) * g.len_out..][..g.len_out];
            for c in 0..g.c_in {
                let xoff = (b * g.c_in + c) * g.len_in;
                let woff = (o * g.c_in + c) * g.kernel;
                for k in 0..g.kernel {
                    let wv = w[woff + k];
                    let mut acc = 0.0;
                    for (t, &gv) in grow.iter().enumerate() {
                        if let Some(p) = tap(t, k, g) {
                            if let Some(gx) = gx.as_mut() {
                                gx[xoff + p] += gv * wv;
                            }
                            acc += gv * x[xoff + p];
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        gw[woff + k] += acc;
                    }
                }
            }
        }
    }
    (gx, gw)
}
