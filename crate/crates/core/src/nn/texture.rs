//! Procedural texture classes used for generic-context pretraining.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::seeded_rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TextureClass {
    Stripes,
    Checker,
    Blobs,
    Noise,
}

impl TextureClass {
    pub const ALL: [TextureClass; 4] =
        [TextureClass::Stripes, TextureClass::Checker, TextureClass::Blobs, TextureClass::Noise];

    pub fn label(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug)]
pub struct TextureSample {
    /// `[1, 1, size, size]`, values in `[0, 1]`.
    pub image: Tensor,
    pub class: TextureClass,
}

/// `per_class` samples of each class, interleaved so labels are balanced in any prefix
/// of length divisible by four.
pub fn texture_dataset(per_class: usize, size: usize, seed: u64) -> Vec<TextureSample> {
    let mut rng = seeded_rng(seed);
    let mut out = Vec::with_capacity(per_class * 4);
    for _ in 0..per_class {
        for class in TextureClass::ALL {
            out.push(TextureSample { image: render(class, size, &mut rng), class });
        }
    }
    out
}

fn render<R: Rng>(class: TextureClass, size: usize, rng: &mut R) -> Tensor {
    let mut img = vec![0.0; size * size];
    match class {
        TextureClass::Stripes => {
            let freq = rng.gen_range(0.08..0.25);
            let theta = rng.gen_range(0.0..PI);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let (c, s) = (theta.cos(), theta.sin());
            for (i, v) in img.iter_mut().enumerate() {
                let (y, x) = ((i / size) as f64, (i % size) as f64);
                *v = (2.0 * PI * freq * (x * c + y * s) + phase).sin();
            }
        }
        TextureClass::Checker => {
            let period = rng.gen_range(3.0..8.0);
            let (px, py) = (rng.gen_range(0.0..PI), rng.gen_range(0.0..PI));
            for (i, v) in img.iter_mut().enumerate() {
                let (y, x) = ((i / size) as f64, (i % size) as f64);
                let s = (PI * x / period + px).sin() * (PI * y / period + py).sin();
                *v = s.signum();
            }
        }
        TextureClass::Blobs => {
            let count = rng.gen_range(3..7);
            for _ in 0..count {
                let (cy, cx) = (rng.gen_range(0.0..size as f64), rng.gen_range(0.0..size as f64));
                let sigma: f64 = rng.gen_range(2.0..5.0);
                let amp = rng.gen_range(0.5..1.0);
                for (i, v) in img.iter_mut().enumerate() {
                    let (y, x) = ((i / size) as f64, (i % size) as f64);
                    let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                    *v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
        TextureClass::Noise => {
            for v in img.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
    }

    // random contrast and offset, then mild sensor noise
    let (lo, hi) = img.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = (hi - lo).max(1e-12);
    let contrast = rng.gen_range(0.3..1.0);
    let offset = rng.gen_range(0.0..1.0 - contrast);
    let jitter = Normal::new(0.0, 0.03).unwrap();
    for v in img.iter_mut() {
        let scaled = offset + contrast * (*v - lo) / span + jitter.sample(rng);
        *v = scaled.clamp(0.0, 1.0);
    }
    Tensor::new(&[1, 1, size, size], img).expect("texture extents")
}
