//! Dense tensors, reverse-mode differentiation and gradient checking.

pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, gradcheck_with, GradCheckOptions, GradCheckReport};
pub use params::{Bound, Parameter, ParameterStore};
pub use tape::{ElementwiseKind, Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;

use rand::Rng;

use crate::error::Result;

/// Dense layer `y = x·W + b` with `W: [in×out]`, bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            weight: bound.get(&format!("{prefix}.weight"))?,
            bias: bound.get(&format!("{prefix}.bias"))?,
        })
    }

    /// `x: [B×in] -> [B×out]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add_bias(y, self.bias)
    }
}

/// Registers `{prefix}.weight` (uniform in `±weight_bound`) and a zero
/// `{prefix}.bias`.
pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParameterStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    weight_bound: f64,
    rng: &mut R,
) -> Result<()> {
    let w = if weight_bound > 0.0 {
        Tensor::uniform(&[fan_in, fan_out], weight_bound, rng)
    } else {
        Tensor::zeros(&[fan_in, fan_out])
    };
    store.insert(format!("{prefix}.weight"), w)?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]))
}
