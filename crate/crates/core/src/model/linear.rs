use rand::Rng;

use crate::autograd::{Bound, ParamId, ParamSet, Scalar, Tape, Tensor, Var};
use crate::error::Result;

/// Affine map `x·W + b` with `W` of shape `[in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub input_size: usize,
    pub output_size: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<S: Scalar>(
        name: &str,
        input_size: usize,
        output_size: usize,
        params: &mut ParamSet<S>,
        rng: &mut impl Rng,
    ) -> Self {
        let w = Tensor::uniform(
            &[input_size, output_size],
            1.0 / (input_size as f64).sqrt(),
            rng,
        );
        Linear {
            input_size,
            output_size,
            weight: params.add(format!("{name}.weight"), w),
            bias: params.add(format!("{name}.bias"), Tensor::zeros(&[output_size])),
        }
    }

    pub fn parameter_count(&self) -> usize {
        (self.input_size + 1) * self.output_size
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound.var(self.weight))?;
        tape.add_bias(y, bound.var(self.bias))
    }
}
