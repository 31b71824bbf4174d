//! Experiment configuration, single runs, and multi-run comparison.

mod experiment;
mod suite;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::influence::PsiMode;
use crate::nn::EncoderConfig;

pub use experiment::{
    calibrate, evaluate_run, run_experiment, CalibrationOutcome, EpochRecord, ExperimentReport, LossStats, PsiSnapshot,
    RunEvent, RunPaths,
};
pub use suite::{compare_runs, emit_heatmaps, run_suite, ErrorMap, HeatmapScale, SuiteReport};

/// The weight commonly used in the literature, reported for reference.
pub const BASELINE_LAMBDA: f64 = 0.1;
pub const DEFAULT_TARGET_PSI: f64 = 0.95;
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetPsi {
    pub target_psi: f64,
}

/// Either a fixed weight or an influence to calibrate for.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaSpec {
    Explicit(f64),
    Target(TargetPsi),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub patch_size: usize,
    pub patch_skip: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub base_channels: usize,
    pub depth: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            patch_size: 96,
            patch_skip: 96,
            batch_size: 16,
            epochs: 10,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
            seed: 5,
            base_channels: 32,
            depth: 3,
        }
    }
}

impl Hyperparams {
    /// Small enough to train in about a minute on one core.
    pub fn desk() -> Self {
        Hyperparams { patch_size: 32, patch_skip: 32, epochs: 3, base_channels: 16, ..Hyperparams::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: String,
    /// Absent for a pixel-loss-only run.
    #[serde(default)]
    pub encoder: Option<EncoderConfig>,
    #[serde(default)]
    pub lambda: Option<LambdaSpec>,
    #[serde(default)]
    pub psi_mode: PsiMode,
    #[serde(default)]
    pub hyperparams: Hyperparams,
    pub dataset: PathBuf,
    #[serde(default)]
    pub split_manifest: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Reads a config; relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_slice(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| if p.is_relative() { base.join(p) } else { p.to_path_buf() };
        cfg.dataset = resolve(&cfg.dataset);
        cfg.split_manifest = cfg.split_manifest.as_deref().map(resolve);
        if let Some(enc) = &mut cfg.encoder {
            enc.checkpoint = resolve(&enc.checkpoint);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.id.contains(['/', '\\']) {
            return Err(Error::Config(format!("experiment id `{}` must be a non-empty file-name-safe string", self.id)));
        }
        match (&self.encoder, &self.lambda) {
            (Some(_), None) => return Err(Error::Config(format!("{}: a perceptual run needs `lambda`", self.id))),
            (None, Some(_)) => return Err(Error::Config(format!("{}: `lambda` given without an `encoder`", self.id))),
            _ => {}
        }
        match self.lambda {
            Some(LambdaSpec::Explicit(l)) if !(l >= 0.0) || !l.is_finite() => {
                return Err(Error::Config(format!("{}: λ must be finite and non-negative, got {l}", self.id)))
            }
            Some(LambdaSpec::Target(TargetPsi { target_psi: t })) if !(t > 0.0 && t < 1.0) => {
                return Err(Error::Config(format!("{}: target_psi must lie in (0, 1), got {t}", self.id)))
            }
            _ => {}
        }
        let h = &self.hyperparams;
        if h.patch_size == 0 || h.patch_skip == 0 || h.batch_size == 0 || h.base_channels == 0 || h.depth == 0 {
            return Err(Error::Config(format!("{}: patch, batch, width and depth settings must be positive", self.id)));
        }
        if !h.patch_size.is_multiple_of(1 << h.depth) {
            return Err(Error::Config(format!(
                "{}: patch_size {} must be a multiple of {} for a depth-{} U-Net",
                self.id,
                h.patch_size,
                1 << h.depth,
                h.depth
            )));
        }
        if !(h.lr > 0.0) || !(0.0..1.0).contains(&h.beta1) || !(0.0..1.0).contains(&h.beta2) || !(h.eps > 0.0) {
            return Err(Error::Config(format!("{}: invalid optimizer settings", self.id)));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}
