use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::layers::Conv2d;
use super::seeded_rng;
use crate::error::{Error, Result};
use crate::tensor::{read_checkpoint, write_checkpoint, ParamSet, Tape, Tensor, Var};

/// Mid-level tap: texture-scale features after two poolings.
pub const SHALLOW_TAP: &str = "block3_conv2";
/// Deepest tap: last convolution of the last block.
pub const DEEP_TAP: &str = "block5_conv4";

/// Images enter the encoder on an 8-bit pixel scale, as VGG-style encoders expect.
pub const INPUT_SCALE: f64 = 255.0;

/// Channel widths of the five blocks.
const BLOCK_WIDTHS: [usize; 5] = [8, 16, 32, 64, 64];
/// Convolutions per block, following the VGG-19 topology.
const BLOCK_DEPTHS: [usize; 5] = [2, 2, 4, 4, 4];

/// Pretraining context of an encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Context {
    /// Natural-texture classification.
    Generic,
    /// Reconstruction of normal-dose CT slices.
    Domain,
}

impl fmt::Display for Context {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Context::Generic => "generic",
            Context::Domain => "domain",
        })
    }
}

impl FromStr for Context {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generic" => Ok(Context::Generic),
            "domain" => Ok(Context::Domain),
            other => Err(Error::Config(format!("unknown context `{other}` (generic|domain)"))),
        }
    }
}

/// A perceptual-loss feature extractor: pretraining context, tap and checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub context: Context,
    pub tap: String,
    pub checkpoint: PathBuf,
}

impl EncoderConfig {
    /// Loads the checkpoint into a fresh encoder and validates the tap.
    pub fn load(&self) -> Result<VggEncoder> {
        let enc = VggEncoder::load(&self.checkpoint)?;
        enc.tap_index(&self.tap)?;
        Ok(enc)
    }
}

/// JSON written beside an encoder checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSidecar {
    pub architecture_hash: String,
    pub context: Context,
    pub seed: u64,
    pub epochs: usize,
    pub summary: serde_json::Value,
}

impl EncoderSidecar {
    /// `<checkpoint>.json`
    pub fn path_for(checkpoint: &Path) -> PathBuf {
        let mut name = checkpoint.as_os_str().to_owned();
        name.push(".json");
        PathBuf::from(name)
    }

    pub fn write(&self, checkpoint: &Path) -> Result<()> {
        fs::write(Self::path_for(checkpoint), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// `None` when the checkpoint has no sidecar.
    pub fn read(checkpoint: &Path) -> Result<Option<Self>> {
        let path = Self::path_for(checkpoint);
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&fs::read(path)?)?))
    }
}

struct Block {
    convs: Vec<Conv2d>,
}

/// Five-block VGG-style encoder with a 2× max pooling after every block.
pub struct VggEncoder {
    params: ParamSet,
    blocks: Vec<Block>,
    taps: Vec<String>,
}

impl VggEncoder {
    pub fn new(seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let mut params = ParamSet::new();
        let mut blocks = Vec::new();
        let mut taps = Vec::new();
        let mut cin = 1;
        for (b, (&width, &depth)) in BLOCK_WIDTHS.iter().zip(&BLOCK_DEPTHS).enumerate() {
            let mut convs = Vec::new();
            for c in 0..depth {
                let name = format!("block{}_conv{}", b + 1, c + 1);
                convs.push(Conv2d::new(&mut params, &name, cin, width, 3, &mut rng));
                taps.push(name);
                cin = width;
            }
            blocks.push(Block { convs });
        }
        VggEncoder { params, blocks, taps }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut enc = VggEncoder::new(0);
        let stored = read_checkpoint(path)?;
        enc.params.load_from(&stored)?;
        Ok(enc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.params)
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn tap_names(&self) -> &[String] {
        &self.taps
    }

    /// Width of the final block.
    pub fn output_channels(&self) -> usize {
        BLOCK_WIDTHS[BLOCK_WIDTHS.len() - 1]
    }

    /// `(block, conv)` position of a registered tap.
    pub(crate) fn tap_index(&self, tap: &str) -> Result<(usize, usize)> {
        let mut flat = 0;
        for (b, block) in self.blocks.iter().enumerate() {
            for c in 0..block.convs.len() {
                if self.taps[flat] == tap {
                    return Ok((b, c));
                }
                flat += 1;
            }
        }
        Err(Error::UnknownTap { tap: tap.to_owned(), registered: self.taps.clone() })
    }

    /// Activation shape at `tap` for a `[N, 1, H, W]` input.
    pub fn tap_shape(&self, tap: &str, input_shape: &[usize]) -> Result<[usize; 4]> {
        let (b, _) = self.tap_index(tap)?;
        let [n, 1, h, w] = *input_shape else {
            return Err(Error::shape(format!(
                "encoder expects a single-channel [N, 1, H, W] input, got {input_shape:?}"
            )));
        };
        let factor = 1 << b;
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::shape(format!(
                "tap `{tap}` follows {b} poolings; input {h}x{w} must be divisible by {factor}"
            )));
        }
        Ok([n, BLOCK_WIDTHS[b], h / factor, w / factor])
    }

    /// Post-ReLU activation at `tap`.
    pub fn forward_to_tap(&self, tape: &mut Tape, bound: &[Var], x: Var, tap: &str) -> Result<Var> {
        let (tb, tc) = self.tap_index(tap)?;
        self.tap_shape(tap, tape.value(x).shape())?;
        let mut h = tape.scale(x, INPUT_SCALE)?;
        for (b, block) in self.blocks.iter().enumerate() {
            if b > 0 {
                h = tape.maxpool2d(h, 2)?;
            }
            for (c, conv) in block.convs.iter().enumerate() {
                h = conv.forward_relu(tape, bound, h)?;
                if (b, c) == (tb, tc) {
                    return Ok(h);
                }
            }
        }
        unreachable!("tap index resolved above")
    }

    /// Output of the last convolution of the last block.
    pub fn forward_full(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<Var> {
        self.forward_to_tap(tape, bound, x, DEEP_TAP)
    }

    /// Activations at `tap`, without gradients.
    pub fn extract_features(&self, tap: &str, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let f = self.forward_to_tap(&mut tape, &bound, xv, tap)?;
        Ok(tape.value(f).clone())
    }
}
