use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Scalar;

/// Affine map whose outputs are read as logits of a softmax.
#[derive(Clone, Debug)]
pub struct LinearSoftmax {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl LinearSoftmax {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (1.0 / inputs as f64).sqrt();
        let weight = store.add_uniform(format!("{prefix}.w"), &[inputs, outputs], bound, rng);
        let bias = store.add_uniform(format!("{prefix}.b"), &[1, outputs], bound, rng);
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    /// Pre-softmax scores, one row per input row.
    pub fn logits<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.linear(x, w, b)
    }

    pub fn probabilities<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let z = self.logits(tape, x)?;
        tape.softmax_rows(z)
    }
}
