//! Perceptual influence: the share of the composite loss carried by the
//! weighted perceptual term, its λ sweep, and its inversion.
//!
//! Two aggregations are provided. [`psi_of_lambda`] divides the summed
//! weighted perceptual loss by the summed total; [`psi_per_sample_mean`]
//! averages the per-sample fractions. Calibration defaults to the former,
//! which has a closed-form inverse.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::PatchPair;
use crate::error::{Error, Result};
use crate::loss::PerceptualLoss;
use crate::nn::{EncoderConfig, UNetDenoiser};
use crate::tensor::Tensor;

/// Bisection stops once `|Ψ - target|` drops below this.
pub const BISECTION_TOLERANCE: f64 = 1e-9;
const BISECTION_MAX_ITERS: usize = 4000;

/// Raw (unweighted) loss terms of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleLoss {
    pub sample_id: String,
    pub mse: f64,
    pub perceptual_raw: f64,
}

/// Loss sums over a sample set, optionally with the per-sample terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossAggregates {
    pub n: usize,
    pub s_mse: f64,
    pub s_pl: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_sample: Option<Vec<SampleLoss>>,
}

impl LossAggregates {
    /// Sums only; per-sample influence is unavailable.
    pub fn new(n: usize, s_mse: f64, s_pl: f64) -> Result<Self> {
        let agg = LossAggregates { n, s_mse, s_pl, per_sample: None };
        agg.validate()?;
        Ok(agg)
    }

    /// Sums accumulated in sample order.
    pub fn from_samples(samples: Vec<SampleLoss>) -> Result<Self> {
        let (mut s_mse, mut s_pl) = (0.0, 0.0);
        for s in &samples {
            s_mse += s.mse;
            s_pl += s.perceptual_raw;
        }
        let agg = LossAggregates { n: samples.len(), s_mse, s_pl, per_sample: Some(samples) };
        agg.validate()?;
        Ok(agg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("loss aggregates need at least one sample"));
        }
        if !(self.s_mse >= 0.0 && self.s_mse.is_finite() && self.s_pl >= 0.0 && self.s_pl.is_finite()) {
            return Err(Error::invalid(format!(
                "loss sums must be finite and non-negative, got s_mse={} s_pl={}",
                self.s_mse, self.s_pl
            )));
        }
        if let Some(samples) = &self.per_sample {
            if samples.len() != self.n {
                return Err(Error::invalid(format!("n={} but {} per-sample entries", self.n, samples.len())));
            }
            if let Some(bad) = samples.iter().find(|s| !(s.mse >= 0.0 && s.perceptual_raw >= 0.0)) {
                return Err(Error::invalid(format!("sample `{}` has a negative or NaN loss", bad.sample_id)));
            }
            let mse: f64 = samples.iter().map(|s| s.mse).sum();
            let pl: f64 = samples.iter().map(|s| s.perceptual_raw).sum();
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
            if !close(mse, self.s_mse) || !close(pl, self.s_pl) {
                return Err(Error::invalid("per-sample columns do not sum to the aggregates"));
            }
        }
        Ok(())
    }

    fn samples(&self) -> Result<&[SampleLoss]> {
        self.per_sample
            .as_deref()
            .ok_or_else(|| Error::invalid("per-sample influence needs per-sample losses"))
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!("λ must be finite and non-negative, got {lambda}")));
    }
    Ok(())
}

/// `λ·S_pl / (S_mse + λ·S_pl)`.
pub fn psi_of_lambda(agg: &LossAggregates, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    let weighted = lambda * agg.s_pl;
    let denom = agg.s_mse + weighted;
    if !(denom > 0.0) {
        return Err(Error::Numerical(format!(
            "perceptual influence undefined: s_mse={} and λ·s_pl={} leave a zero total",
            agg.s_mse, weighted
        )));
    }
    Ok(weighted / denom)
}

/// Mean over samples of `λ·pl / (mse + λ·pl)`.
pub fn psi_per_sample_mean(agg: &LossAggregates, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    let samples = agg.samples()?;
    let mut acc = 0.0;
    for s in samples {
        let weighted = lambda * s.perceptual_raw;
        let denom = s.mse + weighted;
        if !(denom > 0.0) {
            return Err(Error::Numerical(format!("perceptual influence undefined for sample `{}`", s.sample_id)));
        }
        acc += weighted / denom;
    }
    Ok(acc / samples.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiMode {
    #[default]
    RatioOfSums,
    PerSampleMean,
}

pub fn psi(agg: &LossAggregates, lambda: f64, mode: PsiMode) -> Result<f64> {
    match mode {
        PsiMode::RatioOfSums => psi_of_lambda(agg, lambda),
        PsiMode::PerSampleMean => psi_per_sample_mean(agg, lambda),
    }
}

/// λ with `psi(agg, λ, mode) == target`.
///
/// Closed form for [`PsiMode::RatioOfSums`]; geometric bisection otherwise.
pub fn solve_lambda(agg: &LossAggregates, target: f64, mode: PsiMode) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::invalid(format!("target influence must lie in (0, 1), got {target}")));
    }
    if !(agg.s_pl > 0.0) {
        return Err(Error::Numerical("perceptual term vanishes on every sample; no λ reaches the target".into()));
    }
    match mode {
        PsiMode::RatioOfSums => {
            if agg.s_mse == 0.0 {
                return Err(Error::Numerical("pixel term vanishes; influence is 1 for every λ > 0".into()));
            }
            Ok(target / (1.0 - target) * (agg.s_mse / agg.s_pl))
        }
        PsiMode::PerSampleMean => bisect(agg, target),
    }
}

fn bisect(agg: &LossAggregates, target: f64) -> Result<f64> {
    let samples = agg.samples()?;
    let n = samples.len() as f64;
    let floor = samples.iter().filter(|s| s.mse == 0.0 && s.perceptual_raw > 0.0).count() as f64 / n;
    let ceiling = samples.iter().filter(|s| s.perceptual_raw > 0.0).count() as f64 / n;
    if !(target > floor && target < ceiling) {
        return Err(Error::Numerical(format!(
            "target {target} outside the reachable per-sample influence range ({floor}, {ceiling})"
        )));
    }
    let f = |l: f64| psi_per_sample_mean(agg, l);

    let guess = if agg.s_mse > 0.0 { target / (1.0 - target) * (agg.s_mse / agg.s_pl) } else { 1.0 };
    let (mut lo, mut hi) = (guess, guess);
    while f(lo)? > target {
        lo *= 0.5;
    }
    while f(hi)? < target {
        hi *= 2.0;
    }
    // Narrow the bracket to machine precision, then keep the closer endpoint.
    for _ in 0..BISECTION_MAX_ITERS {
        let mid = if lo > 0.0 { (lo * hi).sqrt() } else { 0.5 * hi };
        if mid <= lo || mid >= hi || hi - lo <= 4.0 * f64::EPSILON * hi {
            break;
        }
        if f(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (dlo, dhi) = ((f(lo)? - target).abs(), (f(hi)? - target).abs());
    let (best, err) = if dlo <= dhi { (lo, dlo) } else { (hi, dhi) };
    if err < BISECTION_TOLERANCE {
        return Ok(best);
    }
    Err(Error::Numerical(format!("bisection for target {target} stalled in [{lo}, {hi}]")))
}

/// `10^(-7 + k/8)` for `k = 0..=56`.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..=56).map(|k| 10f64.powf(-7.0 + k as f64 / 8.0)).collect()
}

/// Anything that maps a `[N, 1, H, W]` batch to a same-shaped batch without learning.
pub trait Denoiser {
    fn denoise(&self, x: &Tensor) -> Result<Tensor>;
}

impl Denoiser for UNetDenoiser {
    fn denoise(&self, x: &Tensor) -> Result<Tensor> {
        UNetDenoiser::denoise(self, x)
    }
}

const COLLECT_BATCH: usize = 16;

/// One forward pass per sample; records both raw loss terms.
pub fn collect_aggregates(
    model: &dyn Denoiser,
    perceptual: &PerceptualLoss<'_>,
    samples: &[PatchPair],
) -> Result<LossAggregates> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot collect loss aggregates over an empty sample set"));
    }
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(COLLECT_BATCH) {
        let x = Tensor::stack(&chunk.iter().map(|p| &p.ldct).collect::<Vec<_>>())?;
        let yhat = model.denoise(&x)?;
        for (i, pair) in chunk.iter().enumerate() {
            let pred = yhat.select(i)?;
            let mse = crate::loss::mse_value(&pred, &pair.ndct)?;
            let pl = perceptual.value(&pred, &pair.ndct)?;
            if !mse.is_finite() || !pl.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss (mse {mse}, perceptual {pl}) on sample `{}`",
                    pair.sample_id()
                )));
            }
            out.push(SampleLoss { sample_id: pair.sample_id(), mse, perceptual_raw: pl });
        }
    }
    LossAggregates::from_samples(out)
}

pub fn write_samples_csv(path: &Path, samples: &[SampleLoss]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in samples {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples_csv(path: &Path) -> Result<Vec<SampleLoss>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// A sampled influence curve and the data behind it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub config: EncoderConfig,
    pub seed: u64,
    /// Hash of the denoiser architecture the aggregates were collected with.
    pub architecture_hash: String,
    pub lambda_grid: Vec<f64>,
    pub psi_values: Vec<f64>,
    pub psi_per_sample_mean: Option<Vec<f64>>,
    pub aggregates: LossAggregates,
}

pub fn sweep_curve(
    agg: &LossAggregates,
    lambda_grid: &[f64],
    config: EncoderConfig,
    seed: u64,
    architecture_hash: String,
) -> Result<CalibrationCurve> {
    if lambda_grid.is_empty() {
        return Err(Error::invalid("λ grid is empty"));
    }
    if lambda_grid.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        return Err(Error::invalid("λ grid values must be finite and positive"));
    }
    if lambda_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("λ grid must be strictly increasing"));
    }
    agg.validate()?;
    let psi_values = lambda_grid.iter().map(|&l| psi_of_lambda(agg, l)).collect::<Result<Vec<_>>>()?;
    let psi_per_sample_mean = match agg.per_sample {
        Some(_) => Some(lambda_grid.iter().map(|&l| psi_per_sample_mean(agg, l)).collect::<Result<Vec<_>>>()?),
        None => None,
    };
    Ok(CalibrationCurve {
        config,
        seed,
        architecture_hash,
        lambda_grid: lambda_grid.to_vec(),
        psi_values,
        psi_per_sample_mean,
        aggregates: agg.clone(),
    })
}

impl CalibrationCurve {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    /// Log-x line plot of both curves.
    pub fn to_svg(&self) -> String {
        let (w, h, m) = (640.0, 400.0, 50.0);
        let lx: Vec<f64> = self.lambda_grid.iter().map(|l| l.log10()).collect();
        let (x0, x1) = (lx[0], lx[lx.len() - 1].max(lx[0] + 1e-9));
        let px = |v: f64| m + (v - x0) / (x1 - x0) * (w - 2.0 * m);
        let py = |p: f64| h - m - p * (h - 2.0 * m);
        let path = |ys: &[f64]| {
            lx.iter()
                .zip(ys)
                .enumerate()
                .map(|(i, (&x, &y))| format!("{}{:.2},{:.2}", if i == 0 { "M" } else { " L" }, px(x), py(y)))
                .collect::<String>()
        };

        let mut s = String::new();
        let _ = writeln!(s, r##"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"##);
        let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="white"/>"##);
        let _ = writeln!(
            s,
            r##"<path d="M{m},{m} L{m},{} L{},{}" fill="none" stroke="black"/>"##,
            h - m,
            w - m,
            h - m
        );
        for tick in [0.0, 0.25, 0.5, 0.75, 0.95, 1.0] {
            let _ = writeln!(
                s,
                r##"<text x="{}" y="{:.2}" text-anchor="end">{tick}</text><line x1="{m}" x2="{}" y1="{:.2}" y2="{:.2}" stroke="#ddd"/>"##,
                m - 4.0,
                py(tick) + 4.0,
                w - m,
                py(tick),
                py(tick)
            );
        }
        let mut decade = x0.ceil() as i32;
        while decade as f64 <= x1 {
            let _ = writeln!(
                s,
                r##"<text x="{:.2}" y="{}" text-anchor="middle">1e{decade}</text>"##,
                px(decade as f64),
                h - m + 16.0
            );
            decade += 1;
        }
        let _ = writeln!(s, r##"<path d="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##, path(&self.psi_values));
        if let Some(per) = &self.psi_per_sample_mean {
            let _ = writeln!(
                s,
                r##"<path d="{}" fill="none" stroke="#d62728" stroke-width="1.5" stroke-dasharray="5,3"/>"##,
                path(per)
            );
        }
        let _ = writeln!(
            s,
            r##"<text x="{}" y="20" text-anchor="middle">{} / {}: ratio of sums (solid), per-sample mean (dashed)</text>"##,
            w / 2.0,
            self.config.context,
            self.config.tap
        );
        let _ = writeln!(s, r##"<text x="{}" y="{}" text-anchor="middle">λ</text>"##, w / 2.0, h - 10.0);
        s.push_str("</svg>\n");
        s
    }

    pub fn write_svg(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_svg())?;
        Ok(())
    }
}
