//! Pixel, perceptual and composite training objectives.
//!
//! Both terms use the per-element mean of squared differences, so their
//! magnitudes do not depend on image or feature-map size. The perceptual
//! weight therefore lives on a different absolute scale than a sum-based
//! formulation would give, but the perceptual-influence curve keeps its shape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::VggEncoder;
use crate::tensor::{Tape, Tensor, Var};

/// Identifier recorded in reports for the normalization used by both loss terms.
pub const LOSS_CONVENTION: &str = "per-element-mean";

/// Both raw loss terms of one evaluation, before and after weighting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub perceptual_raw: f64,
    pub lambda: f64,
    /// `mse + lambda * perceptual_raw`
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(mse: f64, perceptual_raw: f64, lambda: f64) -> Self {
        LossBreakdown { mse, perceptual_raw, lambda, total: mse + lambda * perceptual_raw }
    }
}

/// A frozen encoder read at one tap.
pub struct PerceptualLoss<'a> {
    encoder: &'a VggEncoder,
    tap: String,
}

impl<'a> PerceptualLoss<'a> {
    pub fn new(encoder: &'a VggEncoder, tap: &str) -> Result<Self> {
        encoder.tap_index(tap)?;
        Ok(PerceptualLoss { encoder, tap: tap.to_owned() })
    }

    pub fn encoder(&self) -> &VggEncoder {
        self.encoder
    }

    pub fn tap(&self) -> &str {
        &self.tap
    }

    /// Binds the encoder weights as constants; gradients still flow through
    /// the activations into whatever produced the inputs.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.encoder.params().bind(tape, false)
    }

    /// Mean squared difference of tap activations.
    pub fn forward(&self, tape: &mut Tape, bound: &[Var], a: Var, b: Var) -> Result<Var> {
        if tape.value(a).shape() != tape.value(b).shape() {
            return Err(Error::shape(format!(
                "perceptual loss: shapes {:?} and {:?} differ",
                tape.value(a).shape(),
                tape.value(b).shape()
            )));
        }
        let fa = self.encoder.forward_to_tap(tape, bound, a, &self.tap)?;
        let fb = self.encoder.forward_to_tap(tape, bound, b, &self.tap)?;
        tape.mse_mean(fa, fb)
    }

    pub fn value(&self, a: &Tensor, b: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let loss = self.forward(&mut tape, &bound, av, bv)?;
        tape.value(loss).item()
    }
}

/// Pixel-wise mean squared error.
pub fn mse_loss(tape: &mut Tape, yhat: Var, y: Var) -> Result<Var> {
    tape.mse_mean(yhat, y)
}

/// `mse(yhat, y) + lambda * perceptual(yhat, y)` and its breakdown.
pub fn total_loss(
    tape: &mut Tape,
    perceptual: &PerceptualLoss<'_>,
    bound_encoder: &[Var],
    lambda: f64,
    yhat: Var,
    y: Var,
) -> Result<(Var, LossBreakdown)> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!("perceptual weight must be finite and non-negative, got {lambda}")));
    }
    let mse = tape.mse_mean(yhat, y)?;
    let pl = perceptual.forward(tape, bound_encoder, yhat, y)?;
    let weighted = tape.scale(pl, lambda)?;
    let total = tape.add(mse, weighted)?;
    let breakdown = LossBreakdown::new(tape.value(mse).item()?, tape.value(pl).item()?, lambda);
    Ok((total, breakdown))
}

/// Pixel-wise mean squared error of two tensors, without a tape.
pub fn mse_value(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b, "mse")?;
    Ok(crate::tensor::mse_slices(a.data(), b.data()))
}
