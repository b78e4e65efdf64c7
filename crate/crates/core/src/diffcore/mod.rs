//! Minimal reverse-mode differentiation over dense `f64` tensors, plus the
//! layer primitives the models and losses are built from.

mod params;
mod tape;
mod tensor;

pub use params::{sgd_step, ParameterStore};
pub use tape::{Tape, Var};
pub(crate) use tape::softmax_rows;
pub use tensor::Tensor;

use rand::Rng;

use crate::error::{contract_err, Result};

/// Inverted dropout. In training mode each entry is zeroed with probability
/// `p` and survivors are scaled by `1 / (1 − p)`; otherwise the identity.
pub fn dropout<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    p: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(contract_err!("dropout probability {} outside [0, 1)", p));
    }
    if !training || p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let mask = (0..tape.value(x).len())
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    tape.mul_const(x, mask)
}
