use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, LambdaSpec, TargetPsi, BASELINE_LAMBDA, CODE_VERSION};
use crate::data::{Dataset, PatchPair, SlicePair, Split};
use crate::error::{Error, Result};
use crate::influence::{
    collect_aggregates, default_lambda_grid, psi_of_lambda, psi_per_sample_mean, solve_lambda, sweep_curve,
    write_samples_csv, CalibrationCurve, LossAggregates,
};
use crate::loss::{mse_value, total_loss, PerceptualLoss, LOSS_CONVENTION};
use crate::metrics::{write_metrics_csv, MetricRecord, SsimParams};
use crate::nn::{EncoderSidecar, UNetConfig, UNetDenoiser, VggEncoder};
use crate::tensor::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Adam, AdamConfig, ParamSet, Tape, Tensor};

/// File layout of a run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.txt")
    }
    pub fn log(&self) -> PathBuf {
        self.root.join("log.jsonl")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("model.pcal")
    }
    pub fn curve_json(&self) -> PathBuf {
        self.root.join("curve.json")
    }
    pub fn curve_svg(&self) -> PathBuf {
        self.root.join("curve.svg")
    }
    pub fn samples_csv(&self) -> PathBuf {
        self.root.join("samples.csv")
    }
    pub fn metrics_csv(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn input_metrics_csv(&self) -> PathBuf {
        self.root.join("input_metrics.csv")
    }
    /// Denoised test slices, stored as a tensor archive keyed `<patient>:<slice>`.
    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions.pcal")
    }
    pub fn heatmaps(&self) -> PathBuf {
        self.root.join("heatmaps")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEvent {
    pub seq: usize,
    pub unix_ms: u128,
    pub event: String,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub detail: serde_json::Value,
}

struct RunLog {
    events: Vec<RunEvent>,
    file: File,
}

impl RunLog {
    fn create(path: &Path) -> Result<Self> {
        Ok(RunLog { events: Vec::new(), file: File::create(path)? })
    }

    fn record(&mut self, event: &str, detail: serde_json::Value) -> Result<()> {
        let unix_ms = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
        let e = RunEvent { seq: self.events.len(), unix_ms, event: event.to_owned(), detail };
        writeln!(self.file, "{}", serde_json::to_string(&e)?)?;
        self.events.push(e);
        Ok(())
    }
}

/// Per-sample means over one pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub mse: f64,
    pub perceptual_raw: Option<f64>,
    pub total: f64,
    /// Share of `total` carried by the weighted perceptual term.
    pub psi: Option<f64>,
}

impl LossStats {
    fn from_sums(n: usize, s_mse: f64, s_pl: Option<f64>, lambda: f64) -> Self {
        let n = n as f64;
        let mse = s_mse / n;
        match s_pl {
            None => LossStats { mse, perceptual_raw: None, total: mse, psi: None },
            Some(s_pl) => {
                let pl = s_pl / n;
                let weighted = lambda * pl;
                let total = mse + weighted;
                LossStats { mse, perceptual_raw: Some(pl), total, psi: (total > 0.0).then(|| weighted / total) }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train: LossStats,
    pub validation: Option<LossStats>,
}

/// Influence of the untrained model at one weight, under both aggregations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsiSnapshot {
    pub lambda: f64,
    pub ratio_of_sums: f64,
    pub per_sample_mean: f64,
}

impl PsiSnapshot {
    fn at(agg: &LossAggregates, lambda: f64) -> Result<Self> {
        Ok(PsiSnapshot {
            lambda,
            ratio_of_sums: psi_of_lambda(agg, lambda)?,
            per_sample_mean: psi_per_sample_mean(agg, lambda)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    pub loss_convention: String,
    pub ssim_params: SsimParams,
    /// `explicit`, `target_psi`, or `none` for a pixel-loss-only run.
    pub lambda_source: String,
    pub resolved_lambda: Option<f64>,
    /// Untrained-model influence at the resolved weight.
    pub pretraining_psi: Option<PsiSnapshot>,
    /// Untrained-model influence at the literature baseline weight.
    pub baseline_psi: Option<PsiSnapshot>,
    pub curve_file: Option<String>,
    pub architecture_hash: String,
    pub initial_checksum: String,
    pub final_checksum: String,
    pub epochs: Vec<EpochRecord>,
    /// Composite loss of every optimizer step, in order.
    pub loss_trace: Vec<f64>,
    pub metrics: Vec<MetricRecord>,
    /// The same metrics for the undenoised low-dose input.
    pub input_metrics: Vec<MetricRecord>,
    pub events: Vec<RunEvent>,
}

fn mean_of(records: &[MetricRecord], f: impl Fn(&MetricRecord) -> f64) -> f64 {
    let v: Vec<f64> = records.iter().map(f).filter(|v| v.is_finite()).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

impl ExperimentReport {
    pub fn id(&self) -> &str {
        &self.config.id
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// Mean (PSNR, SSIM, NRMSE) over the test slices; infinite PSNR is skipped.
    pub fn mean_metrics(&self) -> (f64, f64, f64) {
        (mean_of(&self.metrics, |r| r.psnr), mean_of(&self.metrics, |r| r.ssim), mean_of(&self.metrics, |r| r.nrmse))
    }

    pub fn mean_input_metrics(&self) -> (f64, f64, f64) {
        (
            mean_of(&self.input_metrics, |r| r.psnr),
            mean_of(&self.input_metrics, |r| r.ssim),
            mean_of(&self.input_metrics, |r| r.nrmse),
        )
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "experiment {}", self.id());
        let _ = writeln!(s, "config hash {}", self.config_hash);
        let _ = writeln!(s, "seed {}  version {}  loss convention {}", self.seed, self.code_version, self.loss_convention);
        match &self.config.encoder {
            Some(e) => {
                let _ = writeln!(s, "encoder {} / {}", e.context, e.tap);
            }
            None => {
                let _ = writeln!(s, "pixel loss only");
            }
        }
        if let Some(l) = self.resolved_lambda {
            let _ = writeln!(s, "lambda {l:.6e} ({})", self.lambda_source);
        }
        for (label, snap) in [("at lambda", self.pretraining_psi), ("at baseline lambda", self.baseline_psi)] {
            if let Some(p) = snap {
                let _ = writeln!(
                    s,
                    "untrained psi {label} {:.3e}: ratio of sums {:.6}, per-sample mean {:.6}",
                    p.lambda, p.ratio_of_sums, p.per_sample_mean
                );
            }
        }
        let _ = writeln!(s, "\n{:>5} {:>12} {:>12} {:>12} {:>12} {:>8}", "epoch", "train mse", "train total", "val mse", "val total", "psi");
        for e in &self.epochs {
            let (vm, vt) = e.validation.map(|v| (v.mse, v.total)).unwrap_or((f64::NAN, f64::NAN));
            let psi = e.train.psi.map(|p| format!("{p:.4}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(s, "{:>5} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e} {:>8}", e.epoch, e.train.mse, e.train.total, vm, vt, psi);
        }
        let (p, ss, n) = self.mean_metrics();
        let (ip, is, inr) = self.mean_input_metrics();
        let _ = writeln!(s, "\n{:<10} {:>10} {:>8} {:>8}", "", "PSNR", "SSIM", "NRMSE");
        let _ = writeln!(s, "{:<10} {:>10.2} {:>8.4} {:>8.4}", "input", ip, is, inr);
        let _ = writeln!(s, "{:<10} {:>10.2} {:>8.4} {:>8.4}", "denoised", p, ss, n);
        let infinite = self.metrics.iter().filter(|r| r.psnr.is_infinite()).count();
        if infinite > 0 {
            let _ = writeln!(s, "PSNR mean excludes {infinite} identical slices");
        }
        s
    }
}

/// Aggregates of an untrained model, the swept curve, and the weight for `target`.
#[derive(Clone, Debug)]
pub struct CalibrationOutcome {
    pub curve: CalibrationCurve,
    pub target: Option<f64>,
    pub lambda: Option<f64>,
}

fn load_encoder(cfg: &ExperimentConfig) -> Result<Option<VggEncoder>> {
    let Some(ec) = &cfg.encoder else { return Ok(None) };
    if let Some(side) = EncoderSidecar::read(&ec.checkpoint)? {
        if side.context != ec.context {
            return Err(Error::Config(format!(
                "{}: checkpoint {} was pretrained in the {} context, config says {}",
                cfg.id,
                ec.checkpoint.display(),
                side.context,
                ec.context
            )));
        }
    }
    ec.load().map(Some)
}

fn new_model(cfg: &ExperimentConfig) -> Result<UNetDenoiser> {
    let h = &cfg.hyperparams;
    UNetDenoiser::new(UNetConfig { depth: h.depth, base_channels: h.base_channels }, h.seed)
}

fn calibrate_with(
    cfg: &ExperimentConfig,
    model: &UNetDenoiser,
    encoder: &VggEncoder,
    train: &[PatchPair],
    target: Option<f64>,
) -> Result<CalibrationOutcome> {
    let ec = cfg.encoder.as_ref().expect("perceptual config");
    let pl = PerceptualLoss::new(encoder, &ec.tap)?;
    let agg = collect_aggregates(model, &pl, train)?;
    let curve = sweep_curve(
        &agg,
        &default_lambda_grid(),
        ec.clone(),
        cfg.hyperparams.seed,
        model.params().architecture_hash(),
    )?;
    let lambda = target.map(|t| solve_lambda(&agg, t, cfg.psi_mode)).transpose()?;
    Ok(CalibrationOutcome { curve, target, lambda })
}

/// Collects aggregates with the untrained model of `cfg` and sweeps the default grid.
///
/// `target` overrides the config's target influence; without either, no weight is solved.
pub fn calibrate(cfg: &ExperimentConfig, target: Option<f64>) -> Result<CalibrationOutcome> {
    cfg.validate()?;
    let encoder = load_encoder(cfg)?
        .ok_or_else(|| Error::Config(format!("{}: calibration needs an encoder", cfg.id)))?;
    let dataset = Dataset::load(&cfg.dataset, cfg.split_manifest.as_deref())?;
    let h = &cfg.hyperparams;
    let train = dataset.patch_pairs(Split::Train, h.patch_size, h.patch_skip)?;
    let target = target.or(match cfg.lambda {
        Some(LambdaSpec::Target(TargetPsi { target_psi })) => Some(target_psi),
        _ => None,
    });
    calibrate_with(cfg, &new_model(cfg)?, &encoder, &train, target)
}

fn batch_tensors(batch: &[&PatchPair]) -> Result<(Tensor, Tensor)> {
    let x = Tensor::stack(&batch.iter().map(|p| &p.ldct).collect::<Vec<_>>())?;
    let y = Tensor::stack(&batch.iter().map(|p| &p.ndct).collect::<Vec<_>>())?;
    Ok((x, y))
}

/// Batch-mean loss terms without gradients.
fn evaluate_losses(
    model: &UNetDenoiser,
    perceptual: Option<&PerceptualLoss<'_>>,
    patches: &[PatchPair],
    batch_size: usize,
    lambda: f64,
) -> Result<Option<LossStats>> {
    if patches.is_empty() {
        return Ok(None);
    }
    let (mut s_mse, mut s_pl) = (0.0, 0.0);
    for chunk in patches.chunks(batch_size) {
        let refs: Vec<&PatchPair> = chunk.iter().collect();
        let (x, y) = batch_tensors(&refs)?;
        let yhat = model.denoise(&x)?;
        let k = chunk.len() as f64;
        s_mse += mse_value(&yhat, &y)? * k;
        if let Some(pl) = perceptual {
            s_pl += pl.value(&yhat, &y)? * k;
        }
    }
    Ok(Some(LossStats::from_sums(patches.len(), s_mse, perceptual.map(|_| s_pl), lambda)))
}

fn evaluate_slices(model: &UNetDenoiser, slices: &[SlicePair]) -> Result<(Vec<MetricRecord>, Vec<MetricRecord>, ParamSet)> {
    let mut metrics = Vec::with_capacity(slices.len());
    let mut input = Vec::with_capacity(slices.len());
    let mut predictions = ParamSet::new();
    for s in slices {
        model.check_input_shape(s.ldct.shape())?;
        let yhat = model.denoise(&s.ldct)?;
        metrics.push(MetricRecord::compute(&s.patient_id, s.index, &yhat, &s.ndct)?);
        input.push(MetricRecord::compute(&s.patient_id, s.index, &s.ldct, &s.ndct)?);
        predictions.insert(format!("{}:{}", s.patient_id, s.index), yhat);
    }
    Ok((metrics, input, predictions))
}

/// Calibrates (when a target is configured), trains for the configured epochs,
/// and evaluates every full test slice. Artifacts go to `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    cfg.validate()?;
    let dataset = Dataset::load(&cfg.dataset, cfg.split_manifest.as_deref())?;
    let encoder = load_encoder(cfg)?;

    let paths = RunPaths::new(out);
    fs::create_dir_all(&paths.root)?;
    cfg.save(&paths.config())?;
    let mut log = RunLog::create(&paths.log())?;
    let h = cfg.hyperparams;
    log.record("start", serde_json::json!({ "id": cfg.id, "seed": h.seed, "config_hash": cfg.hash() }))?;

    let train = dataset.patch_pairs(Split::Train, h.patch_size, h.patch_skip)?;
    let validation = dataset.patch_pairs(Split::Validation, h.patch_size, h.patch_skip)?;
    let test = dataset.slice_pairs(Split::Test)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config(format!("{}: training or test split is empty", cfg.id)));
    }

    let mut model = new_model(cfg)?;
    let initial_checksum = model.params().checksum();
    let perceptual = match (&encoder, &cfg.encoder) {
        (Some(enc), Some(ec)) => Some(PerceptualLoss::new(enc, &ec.tap)?),
        _ => None,
    };

    // The weight is fixed from the untrained model before any update.
    let (mut lambda, mut lambda_source) = (0.0, "none");
    let (mut pretraining_psi, mut baseline_psi, mut curve_file) = (None, None, None);
    if let (Some(enc), Some(spec)) = (&encoder, cfg.lambda) {
        let target = match spec {
            LambdaSpec::Target(TargetPsi { target_psi }) => Some(target_psi),
            LambdaSpec::Explicit(_) => None,
        };
        let cal = calibrate_with(cfg, &model, enc, &train, target)?;
        (lambda, lambda_source) = match spec {
            LambdaSpec::Explicit(l) => (l, "explicit"),
            LambdaSpec::Target(_) => (cal.lambda.expect("solved"), "target_psi"),
        };
        let agg = &cal.curve.aggregates;
        pretraining_psi = Some(PsiSnapshot::at(agg, lambda)?);
        baseline_psi = Some(PsiSnapshot::at(agg, BASELINE_LAMBDA)?);
        cal.curve.write_json(&paths.curve_json())?;
        cal.curve.write_svg(&paths.curve_svg())?;
        if let Some(samples) = &agg.per_sample {
            write_samples_csv(&paths.samples_csv(), samples)?;
        }
        curve_file = Some("curve.json".to_owned());
        log.record(
            "lambda_resolved",
            serde_json::json!({ "lambda": lambda, "source": lambda_source, "target_psi": target, "psi": pretraining_psi }),
        )?;
    }

    let adam = AdamConfig { lr: h.lr, beta1: h.beta1, beta2: h.beta2, eps: h.eps };
    let mut opt = Adam::new(adam, model.params());
    let mut rng = crate::seeded_rng(h.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(h.epochs);
    let mut loss_trace = Vec::new();
    let mut step = 0;

    for epoch in 1..=h.epochs {
        order.shuffle(&mut rng);
        let (mut s_mse, mut s_pl) = (0.0, 0.0);
        let mut epoch_steps = 0;
        for idx in order.chunks(h.batch_size) {
            let batch: Vec<&PatchPair> = idx.iter().map(|&i| &train[i]).collect();
            let (x, y) = batch_tensors(&batch)?;
            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape, true);
            let xv = tape.constant(x);
            let yv = tape.constant(y);
            let yhat = model.forward(&mut tape, &bound, xv)?;
            let (loss, mse, pl) = match &perceptual {
                Some(p) => {
                    let enc_bound = p.bind(&mut tape);
                    let (loss, b) = total_loss(&mut tape, p, &enc_bound, lambda, yhat, yv)?;
                    (loss, b.mse, Some(b.perceptual_raw))
                }
                None => {
                    let loss = tape.mse_mean(yhat, yv)?;
                    let v = tape.value(loss).item()?;
                    (loss, v, None)
                }
            };
            let total = tape.value(loss).item()?;
            step += 1;
            if !total.is_finite() {
                return Err(Error::Numerical(format!(
                    "{}: non-finite loss {total} at epoch {epoch}, step {step}, seed {}",
                    cfg.id, h.seed
                )));
            }
            let grads = tape.backward(loss)?;
            model.params_mut().accumulate_grads(&bound, &grads);
            if step == 1 {
                log.record("first_optimizer_step", serde_json::json!({ "epoch": epoch }))?;
            }
            opt.step(model.params_mut()).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("{m} (epoch {epoch}, step {step}, seed {})", h.seed)),
                other => other,
            })?;
            loss_trace.push(total);
            let k = batch.len() as f64;
            s_mse += mse * k;
            s_pl += pl.unwrap_or(0.0) * k;
            epoch_steps += 1;
        }
        let record = EpochRecord {
            epoch,
            steps: epoch_steps,
            train: LossStats::from_sums(train.len(), s_mse, perceptual.as_ref().map(|_| s_pl), lambda),
            validation: evaluate_losses(&model, perceptual.as_ref(), &validation, h.batch_size, lambda)?,
        };
        log.record("epoch", serde_json::to_value(&record)?)?;
        epochs.push(record);
    }

    write_checkpoint(&paths.checkpoint(), model.params())?;
    let (metrics, input_metrics, predictions) = evaluate_slices(&model, &test)?;
    log.record("evaluated", serde_json::json!({ "slices": metrics.len() }))?;

    let report = ExperimentReport {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        seed: h.seed,
        code_version: CODE_VERSION.to_owned(),
        loss_convention: LOSS_CONVENTION.to_owned(),
        ssim_params: SsimParams::default(),
        lambda_source: lambda_source.to_owned(),
        resolved_lambda: cfg.lambda.map(|_| lambda),
        pretraining_psi,
        baseline_psi,
        curve_file,
        architecture_hash: model.params().architecture_hash(),
        initial_checksum,
        final_checksum: model.params().checksum(),
        epochs,
        loss_trace,
        metrics,
        input_metrics,
        events: log.events.clone(),
    };
    write_outputs(&paths, &report, &predictions, &test)?;
    Ok(report)
}

fn write_outputs(paths: &RunPaths, report: &ExperimentReport, predictions: &ParamSet, test: &[SlicePair]) -> Result<()> {
    write_metrics_csv(&paths.metrics_csv(), report.id(), &report.metrics)?;
    write_metrics_csv(&paths.input_metrics_csv(), report.id(), &report.input_metrics)?;
    fs::write(paths.predictions(), encode_checkpoint(predictions))?;
    report.write(&paths.report())?;
    fs::write(paths.summary(), report.render())?;
    let maps = super::suite::error_maps(report.id(), predictions, test)?;
    super::emit_heatmaps(&maps, &paths.heatmaps())?;
    Ok(())
}

/// Re-evaluates a finished run from its checkpoint and refreshes its metric artifacts.
pub fn evaluate_run(dir: &Path) -> Result<ExperimentReport> {
    let paths = RunPaths::new(dir);
    let mut report = ExperimentReport::read(&paths.report())?;
    let cfg = &report.config;
    let dataset = Dataset::load(&cfg.dataset, cfg.split_manifest.as_deref())?;
    let mut model = new_model(cfg)?;
    model.params_mut().load_from(&read_checkpoint(&paths.checkpoint())?)?;
    let test = dataset.slice_pairs(Split::Test)?;
    let (metrics, input_metrics, predictions) = evaluate_slices(&model, &test)?;
    report.metrics = metrics;
    report.input_metrics = input_metrics;
    write_outputs(&paths, &report, &predictions, &test)?;
    Ok(report)
}

pub(super) fn read_predictions(dir: &Path) -> Result<ParamSet> {
    let path = RunPaths::new(dir).predictions();
    let bytes = fs::read(&path)?;
    decode_checkpoint(&bytes).map_err(|msg| Error::Format { path, msg })
}
