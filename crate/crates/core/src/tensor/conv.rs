//! Spatial kernels over `[N, C, H, W]` buffers.
//!
//! Convolution lowers each sample to an im2col matrix and multiplies with
//! `matrixmultiply::dgemm`. Samples are processed in order and per-sample
//! weight gradients are summed in sample order, so results do not depend on
//! scheduling.

use super::Tensor;
use crate::error::{Error, Result};

pub(crate) fn output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

pub(crate) fn check_conv_shapes(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = input.dims4()?;
    let (f, wc, kh, kw) = weight.dims4()?;
    if stride == 0 {
        return Err(Error::shape("conv2d: stride must be at least 1"));
    }
    if wc != c {
        return Err(Error::shape(format!(
            "conv2d: input has {c} channels but weight expects {wc}"
        )));
    }
    if bias.shape() != [f] {
        return Err(Error::shape(format!(
            "conv2d: bias shape {:?} does not match {f} filters",
            bias.shape()
        )));
    }
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(Error::shape(format!(
            "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    Ok((n, f, output_extent(h, kh, stride, padding), output_extent(w, kw, stride, padding)))
}

fn geometry(input: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Geometry {
    let s = input.shape();
    let k = weight.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let (kh, kw) = (k[2], k[3]);
    Geometry {
        c,
        h,
        w,
        kh,
        kw,
        ho: output_extent(h, kh, stride, padding),
        wo: output_extent(w, kw, stride, padding),
        stride,
        padding,
    }
}

fn im2col(x: &[f64], g: &Geometry, cols: &mut [f64]) {
    let p = g.cols();
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let out = &mut cols[row * p..(row + 1) * p];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    let dst = &mut out[oi * g.wo..(oi + 1) * g.wo];
                    if ii < 0 || ii >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * g.h + ii as usize) * g.w..(ci * g.h + ii as usize + 1) * g.w];
                    for (oj, d) in dst.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        *d = if jj < 0 || jj >= g.w as isize { 0.0 } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &Geometry, dx: &mut [f64]) {
    let p = g.cols();
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let base = (ci * g.h + ii as usize) * g.w;
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        if jj >= 0 && (jj as usize) < g.w {
                            dx[base + jj as usize] += src[oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] = a[m×k] · b[k×n] + beta·c`, all row-major unless strides say otherwise.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe in-bounds views of `a`, `b` and `c`, checked
    // by the debug assertions in the callers' slicing.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (n, f, ho, wo) = check_conv_shapes(input, weight, bias, stride, padding)?;
    let g = geometry(input, weight, stride, padding);
    let (k, p) = (g.rows(), g.cols());
    let in_stride = g.c * g.h * g.w;
    let mut out = vec![0.0; n * f * p];
    let mut cols = vec![0.0; k * p];
    for s in 0..n {
        let x = &input.data()[s * in_stride..(s + 1) * in_stride];
        let y = &mut out[s * f * p..(s + 1) * f * p];
        for (fi, &b) in bias.data().iter().enumerate() {
            y[fi * p..(fi + 1) * p].fill(b);
        }
        im2col(x, &g, &mut cols);
        gemm(f, k, p, weight.data(), (k as isize, 1), &cols, (p as isize, 1), 1.0, y);
    }
    Tensor::new(&[n, f, ho, wo], out)
}

pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
}

pub(crate) fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    stride: usize,
    padding: usize,
    need_input: bool,
    need_weight: bool,
) -> ConvGrads {
    let g = geometry(input, weight, stride, padding);
    let n = input.shape()[0];
    let f = weight.shape()[0];
    let (k, p) = (g.rows(), g.cols());
    let in_stride = g.c * g.h * g.w;

    let mut dx = need_input.then(|| vec![0.0; input.numel()]);
    let mut dw = need_weight.then(|| vec![0.0; weight.numel()]);
    let mut cols = vec![0.0; k * p];
    let mut dw_sample = vec![0.0; if need_weight { k * f } else { 0 }];

    for s in 0..n {
        let dys = &dy.data()[s * f * p..(s + 1) * f * p];
        if let Some(dw) = dw.as_mut() {
            let x = &input.data()[s * in_stride..(s + 1) * in_stride];
            im2col(x, &g, &mut cols);
            // dW_s[f×k] = dY_s[f×p] · colsᵀ[p×k]
            gemm(f, p, k, dys, (p as isize, 1), &cols, (1, p as isize), 0.0, &mut dw_sample);
            for (acc, v) in dw.iter_mut().zip(&dw_sample) {
                *acc += v;
            }
        }
        if let Some(dx) = dx.as_mut() {
            // dcols[k×p] = Wᵀ[k×f] · dY_s[f×p]
            gemm(k, f, p, weight.data(), (1, k as isize), dys, (p as isize, 1), 0.0, &mut cols);
            col2im(&cols, &g, &mut dx[s * in_stride..(s + 1) * in_stride]);
        }
    }

    ConvGrads {
        input: dx.map(|d| Tensor::new(input.shape(), d).expect("input gradient shape")),
        weight: dw.map(|d| Tensor::new(weight.shape(), d).expect("weight gradient shape")),
    }
}

pub(crate) fn bias_grad(dy: &Tensor) -> Result<Tensor> {
    let (n, f, h, w) = dy.dims4()?;
    let p = h * w;
    let mut db = vec![0.0; f];
    for s in 0..n {
        for (fi, acc) in db.iter_mut().enumerate() {
            let start = (s * f + fi) * p;
            *acc += dy.data()[start..start + p].iter().sum::<f64>();
        }
    }
    Tensor::new(&[f], db)
}

/// Window maxima and the flat source index of each (first maximum in row-major order).
pub(crate) fn maxpool2d_forward(input: &Tensor, k: usize) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = input.dims4()?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::shape(format!(
            "maxpool2d: extents {h}x{w} are not divisible by window {k}"
        )));
    }
    let (ho, wo) = (h / k, w / k);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oi in 0..ho {
            for oj in 0..wo {
                let mut best = base + oi * k * w + oj * k;
                for di in 0..k {
                    for dj in 0..k {
                        let idx = base + (oi * k + di) * w + oj * k + dj;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(&[n, c, ho, wo], out)?, argmax))
}

pub(crate) fn upsample_forward(input: &Tensor, k: usize) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    if k == 0 {
        return Err(Error::shape("upsample_nearest: factor must be at least 1"));
    }
    let (ho, wo) = (h * k, w * k);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        for i in 0..ho {
            let row = &x[(plane * h + i / k) * w..(plane * h + i / k + 1) * w];
            for j in 0..wo {
                out.push(row[j / k]);
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

pub(crate) fn upsample_backward(dy: &Tensor, input_shape: &[usize], k: usize) -> Result<Tensor> {
    let (n, c, ho, wo) = dy.dims4()?;
    let (h, w) = (ho / k, wo / k);
    let mut dx = Tensor::zeros(input_shape);
    let buf = dx.data_mut();
    let d = dy.data();
    for plane in 0..n * c {
        for i in 0..ho {
            for j in 0..wo {
                buf[(plane * h + i / k) * w + j / k] += d[(plane * ho + i) * wo + j];
            }
        }
    }
    Ok(dx)
}

pub(crate) fn concat_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (na, ca, ha, wa) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(Error::shape(format!(
            "concat_channels: batch/spatial extents {:?} and {:?} differ",
            (na, ha, wa),
            (nb, hb, wb)
        )));
    }
    let plane = ha * wa;
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    for s in 0..na {
        out.extend_from_slice(&a.data()[s * ca * plane..(s + 1) * ca * plane]);
        out.extend_from_slice(&b.data()[s * cb * plane..(s + 1) * cb * plane]);
    }
    Tensor::new(&[na, ca + cb, ha, wa], out)
}

/// Splits a gradient of a channel concatenation back into its two operands.
pub(crate) fn split_channels(dy: &Tensor, first: usize) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = dy.dims4()?;
    let second = c - first;
    let plane = h * w;
    let mut da = Vec::with_capacity(n * first * plane);
    let mut db = Vec::with_capacity(n * second * plane);
    for s in 0..n {
        let chunk = &dy.data()[s * c * plane..(s + 1) * c * plane];
        da.extend_from_slice(&chunk[..first * plane]);
        db.extend_from_slice(&chunk[first * plane..]);
    }
    Ok((Tensor::new(&[n, first, h, w], da)?, Tensor::new(&[n, second, h, w], db)?))
}
