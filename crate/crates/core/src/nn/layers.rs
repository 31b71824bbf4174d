use rand::Rng;

use crate::error::Result;
use crate::tensor::{ParamSet, Tape, Tensor, Var};

/// A convolution whose weight and bias live in a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: usize,
    bias: usize,
    padding: usize,
}

impl Conv2d {
    /// Square `kernel`, stride 1, "same" padding; He-uniform weights and zero bias.
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let w = Tensor::he_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng);
        let weight = params.insert(format!("{name}.weight"), w);
        let bias = params.insert(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Conv2d { weight, bias, padding: kernel / 2 }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<Var> {
        tape.conv2d(x, bound[self.weight], bound[self.bias], 1, self.padding)
    }

    pub fn forward_relu(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<Var> {
        let y = self.forward(tape, bound, x)?;
        tape.relu(y)
    }
}
