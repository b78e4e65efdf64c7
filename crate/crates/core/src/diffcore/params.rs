use std::collections::BTreeMap;

use super::tape::Tape;
use super::tensor::Tensor;
use crate::error::{contract_err, Result};

/// Named trainable tensors shared by every forward pass of a model.
///
/// Iteration order is the lexicographic order of names, which fixes the
/// checkpoint layout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(contract_err!("duplicate parameter '{}'", name));
        }
        self.params.insert(name, t.with_requires_grad(true));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Adds the gradients collected on `tape` into the stored tensors.
    pub fn accumulate_grads(&mut self, tape: &Tape) {
        for (name, var) in tape.param_vars() {
            if let (Some(g), Some(p)) = (tape.grad(var), self.params.get_mut(name)) {
                p.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }
}

/// Plain gradient descent: `p ← p − lr · grad(p)`, then clears every gradient.
/// Parameters without a gradient are left untouched.
pub fn sgd_step(store: &mut ParameterStore, lr: f64) {
    for p in store.params.values_mut() {
        if let Some(g) = p.grad().map(<[f64]>::to_vec) {
            p.values_mut()
                .iter_mut()
                .zip(&g)
                .for_each(|(v, gv)| *v -= lr * gv);
        }
        p.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_store(x0: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("x", Tensor::vector(vec![x0])).unwrap();
        s
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = quadratic_store(0.0);
        assert!(s.insert("x", Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn zero_rate_leaves_parameters() {
        let mut s = quadratic_store(1.5);
        s.get_mut("x").unwrap().accumulate_grad(&[3.0]);
        sgd_step(&mut s, 0.0);
        assert_eq!(s.get("x").unwrap().values(), &[1.5]);
        assert!(s.get("x").unwrap().grad().is_none());
    }

    #[test]
    fn descends_to_quadratic_minimiser() {
        // loss = (x - 3)^2; the fixed point error shrinks by 0.8 per step.
        let mut s = quadratic_store(-2.0);
        for _ in 0..100 {
            let mut t = Tape::new();
            let x = t.param(&s, "x").unwrap();
            let c = t.constant(Tensor::vector(vec![3.0]));
            let d = t.sub(x, c).unwrap();
            let sq = t.mul(d, d).unwrap();
            let l = t.sum(sq);
            t.backward(l).unwrap();
            s.accumulate_grads(&t);
            sgd_step(&mut s, 0.1);
            assert!(s.get("x").unwrap().grad().is_none());
        }
        assert!((s.get("x").unwrap().values()[0] - 3.0).abs() < 1e-6);
    }
}
