use super::conv;
use super::tape::Op;
use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(out, Op::Sub(a, b))
    }

    /// Elementwise product. A one-element operand broadcasts over the other.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = if va.shape() == vb.shape() {
            va.zip_map(vb, |x, y| x * y)?
        } else if vb.numel() == 1 {
            let s = vb.data()[0];
            va.map(|x| x * s)
        } else if va.numel() == 1 {
            let s = va.data()[0];
            vb.map(|y| s * y)
        } else {
            return Err(Error::shape(format!(
                "mul: shapes {:?} and {:?} are neither equal nor broadcastable",
                va.shape(),
                vb.shape()
            )));
        };
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor))
    }

    /// `max(0, x)`; the subgradient at zero is zero.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(out, Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).mean());
        self.push(out, Op::Mean(a))
    }

    /// 2-D cross-correlation of `[N, C, H, W]` input with `[F, C, kH, kW]` weights.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out =
            conv::conv2d_forward(self.value(input), self.value(weight), self.value(bias), stride, padding)?;
        self.push(out, Op::Conv2d { input, weight, bias, stride, padding })
    }

    /// Non-overlapping `k×k` max pooling. Ties route to the first maximum in row-major order.
    pub fn maxpool2d(&mut self, input: Var, k: usize) -> Result<Var> {
        let (out, argmax) = conv::maxpool2d_forward(self.value(input), k)?;
        self.push(out, Op::MaxPool2d { input, argmax })
    }

    pub fn upsample_nearest(&mut self, input: Var, k: usize) -> Result<Var> {
        let out = conv::upsample_forward(self.value(input), k)?;
        self.push(out, Op::Upsample { input, k })
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = conv::concat_forward(self.value(a), self.value(b))?;
        self.push(out, Op::Concat { a, b })
    }

    /// Mean of squared elementwise differences.
    pub fn mse_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.expect_same_shape(vb, "mse_mean")?;
        let out = Tensor::scalar(mse(va.data(), vb.data()));
        self.push(out, Op::MseMean { a, b })
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        let out: Vec<f64> =
            x.data().chunks(hw).map(|plane| plane.iter().sum::<f64>() / hw as f64).collect();
        let out = Tensor::new(&[n, c], out)?;
        self.push(out, Op::GlobalAvgPool(a))
    }

    /// `[N, D] · [K, D]ᵀ + [K] -> [N, K]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let (n, d, k) = match (x.shape(), w.shape(), b.shape()) {
            (&[n, d], &[k, wd], &[bk]) if wd == d && bk == k => (n, d, k),
            _ => {
                return Err(Error::shape(format!(
                    "linear: incompatible shapes input {:?}, weight {:?}, bias {:?}",
                    x.shape(),
                    w.shape(),
                    b.shape()
                )))
            }
        };
        let mut out = Vec::with_capacity(n * k);
        for r in 0..n {
            let xrow = &x.data()[r * d..(r + 1) * d];
            for o in 0..k {
                let wrow = &w.data()[o * d..(o + 1) * d];
                out.push(b.data()[o] + xrow.iter().zip(wrow).map(|(p, q)| p * q).sum::<f64>());
            }
        }
        let out = Tensor::new(&[n, k], out)?;
        self.push(out, Op::Linear { input, weight, bias })
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        let (n, k) = match z.shape() {
            &[n, k] if n == labels.len() => (n, k),
            s => {
                return Err(Error::shape(format!(
                    "softmax_cross_entropy: logits {s:?} vs {} labels",
                    labels.len()
                )))
            }
        };
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::shape(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &z.data()[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            loss -= row[label] - max - denom.ln();
            probs.extend(row.iter().map(|v| (v - max).exp() / denom));
        }
        let out = Tensor::scalar(loss / n as f64);
        self.push(out, Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs })
    }
}

pub(crate) fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}
