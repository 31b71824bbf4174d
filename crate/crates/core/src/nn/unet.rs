use serde::{Deserialize, Serialize};

use super::layers::Conv2d;
use super::seeded_rng;
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Number of 2× downsampling stages.
    pub depth: usize,
    /// Channels in the first stage; each deeper stage doubles them.
    pub base_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig { depth: 3, base_channels: 32 }
    }
}

struct DoubleConv {
    first: Conv2d,
    second: Conv2d,
}

impl DoubleConv {
    fn new(params: &mut ParamSet, name: &str, cin: usize, cout: usize, rng: &mut impl rand::Rng) -> Self {
        DoubleConv {
            first: Conv2d::new(params, &format!("{name}.conv1"), cin, cout, 3, rng),
            second: Conv2d::new(params, &format!("{name}.conv2"), cout, cout, 3, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<Var> {
        let h = self.first.forward_relu(tape, bound, x)?;
        self.second.forward_relu(tape, bound, h)
    }
}

struct UpStage {
    up_conv: Conv2d,
    block: DoubleConv,
}

/// Single-channel U-Net: `depth` pooling stages with skip connections at every resolution.
pub struct UNetDenoiser {
    config: UNetConfig,
    params: ParamSet,
    down: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    up: Vec<UpStage>,
    head: Conv2d,
}

impl UNetDenoiser {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        if config.depth == 0 || config.base_channels == 0 {
            return Err(Error::invalid("U-Net depth and base_channels must be positive"));
        }
        let mut rng = seeded_rng(seed);
        let mut params = ParamSet::new();
        let width = |level: usize| config.base_channels << level;

        let mut down = Vec::with_capacity(config.depth);
        let mut cin = 1;
        for level in 0..config.depth {
            down.push(DoubleConv::new(&mut params, &format!("down{level}"), cin, width(level), &mut rng));
            cin = width(level);
        }
        let bottleneck =
            DoubleConv::new(&mut params, "bottleneck", cin, width(config.depth), &mut rng);
        let mut up = Vec::with_capacity(config.depth);
        for level in (0..config.depth).rev() {
            let name = format!("up{level}");
            let up_conv =
                Conv2d::new(&mut params, &format!("{name}.upconv"), width(level + 1), width(level), 3, &mut rng);
            let block = DoubleConv::new(&mut params, &name, 2 * width(level), width(level), &mut rng);
            up.push(UpStage { up_conv, block });
        }
        let head = Conv2d::new(&mut params, "head", width(0), 1, 1, &mut rng);
        Ok(UNetDenoiser { config, params, down, bottleneck, up, head })
    }

    pub fn config(&self) -> UNetConfig {
        self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Spatial extents must be multiples of this.
    pub fn required_multiple(&self) -> usize {
        1 << self.config.depth
    }

    pub fn check_input_shape(&self, shape: &[usize]) -> Result<()> {
        let m = self.required_multiple();
        match *shape {
            [_, 1, h, w] if h % m == 0 && w % m == 0 && h > 0 && w > 0 => Ok(()),
            [_, 1, h, w] => Err(Error::shape(format!(
                "U-Net of depth {} needs spatial extents divisible by {m}, got {h}x{w}",
                self.config.depth
            ))),
            _ => Err(Error::shape(format!(
                "U-Net expects a single-channel [N, 1, H, W] input, got {shape:?}"
            ))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<Var> {
        self.check_input_shape(tape.value(x).shape())?;
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = x;
        for stage in &self.down {
            let s = stage.forward(tape, bound, h)?;
            skips.push(s);
            h = tape.maxpool2d(s, 2)?;
        }
        h = self.bottleneck.forward(tape, bound, h)?;
        for (stage, skip) in self.up.iter().zip(skips.into_iter().rev()) {
            let u = tape.upsample_nearest(h, 2)?;
            let u = stage.up_conv.forward_relu(tape, bound, u)?;
            let merged = tape.concat_channels(skip, u)?;
            h = stage.block.forward(tape, bound, merged)?;
        }
        self.head.forward(tape, bound, h)
    }

    /// Inference without gradient tracking.
    pub fn denoise(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &bound, xv)?;
        let out = tape.value(y).clone();
        if !out.is_finite() {
            return Err(Error::Numerical("denoiser produced non-finite output".into()));
        }
        Ok(out)
    }
}
