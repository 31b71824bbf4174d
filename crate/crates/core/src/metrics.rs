//! Full-image quality metrics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn plane<'a>(t: &'a Tensor, op: &str) -> Result<(usize, usize, &'a [f64])> {
    let s = t.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().any(|&e| e != 1) {
        return Err(Error::shape(format!("{op}: expected a single image, got shape {s:?}")));
    }
    Ok((s[s.len() - 2], s[s.len() - 1], t.data()))
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// `20·log10(max_val / sqrt(mse))`; `+inf` for identical images.
pub fn psnr(yhat: &Tensor, y: &Tensor, max_val: f64) -> Result<f64> {
    same_shape(yhat, y, "psnr")?;
    if !(max_val > 0.0) {
        return Err(Error::invalid(format!("psnr: max value must be positive, got {max_val}")));
    }
    let mse = crate::loss::mse_value(yhat, y)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (max_val / mse.sqrt()).log10())
}

/// `‖yhat − y‖ / ‖y‖`.
pub fn nrmse(yhat: &Tensor, y: &Tensor) -> Result<f64> {
    same_shape(yhat, y, "nrmse")?;
    let num: f64 = yhat.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = y.data().iter().map(|v| v * v).sum();
    if den == 0.0 {
        return Err(Error::Numerical("nrmse: reference image has zero norm".into()));
    }
    Ok((num / den).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, data_range: 1.0 }
    }
}

impl SsimParams {
    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn kernel(&self) -> Vec<f64> {
        let c = (self.window as f64 - 1.0) / 2.0;
        let g: Vec<f64> = (0..self.window)
            .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..n).map(|t| k[t] * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..n).map(|t| k[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean structural similarity over every full window position.
pub fn ssim(yhat: &Tensor, y: &Tensor, params: &SsimParams) -> Result<f64> {
    same_shape(yhat, y, "ssim")?;
    let (h, w, a) = plane(yhat, "ssim")?;
    let b = y.data();
    if h < params.window || w < params.window {
        return Err(Error::shape(format!(
            "ssim: image {h}x{w} is smaller than the {0}x{0} window",
            params.window
        )));
    }
    let k = params.kernel();
    let c1 = (params.k1 * params.data_range).powi(2);
    let c2 = (params.k2 * params.data_range).powi(2);
    let prod = |f: fn(f64, f64) -> f64| a.iter().zip(b).map(|(&p, &q)| f(p, q)).collect::<Vec<f64>>();

    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let aa = filter_valid(&prod(|p, _| p * p), h, w, &k);
    let bb = filter_valid(&prod(|_, q| q * q), h, w, &k);
    let ab = filter_valid(&prod(|p, q| p * q), h, w, &k);

    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// JSON has no infinity; identical-image PSNR is written as the string `"inf"`.
mod psnr_json {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            Repr::Num(*v)
        } else {
            Repr::Text(if *v > 0.0 { "inf" } else { "-inf" }.into())
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Metrics of one full test slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub patient_id: String,
    pub slice: usize,
    #[serde(with = "psnr_json")]
    pub psnr: f64,
    pub ssim: f64,
    pub nrmse: f64,
}

impl MetricRecord {
    pub fn compute(patient_id: &str, slice: usize, yhat: &Tensor, y: &Tensor) -> Result<Self> {
        Ok(MetricRecord {
            patient_id: patient_id.to_owned(),
            slice,
            psnr: psnr(yhat, y, 1.0)?,
            ssim: ssim(yhat, y, &SsimParams::default())?,
            nrmse: nrmse(yhat, y)?,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct MetricRow {
    experiment_id: String,
    patient_id: String,
    slice: usize,
    psnr: f64,
    ssim: f64,
    nrmse: f64,
}

pub fn write_metrics_csv(path: &Path, experiment_id: &str, records: &[MetricRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(MetricRow {
            experiment_id: experiment_id.to_owned(),
            patient_id: r.patient_id.clone(),
            slice: r.slice,
            psnr: r.psnr,
            ssim: r.ssim,
            nrmse: r.nrmse,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Returns the experiment id (empty when the file has no rows) and its records.
pub fn read_metrics_csv(path: &Path) -> Result<(String, Vec<MetricRecord>)> {
    let mut r = csv::Reader::from_path(path)?;
    let mut id = String::new();
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: MetricRow = row?;
        if id.is_empty() {
            id = row.experiment_id.clone();
        } else if id != row.experiment_id {
            return Err(Error::Format {
                path: path.to_owned(),
                msg: format!("mixed experiment ids `{id}` and `{}`", row.experiment_id),
            });
        }
        out.push(MetricRecord { patient_id: row.patient_id, slice: row.slice, psnr: row.psnr, ssim: row.ssim, nrmse: row.nrmse });
    }
    Ok((id, out))
}
