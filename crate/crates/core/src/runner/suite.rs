use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::experiment::read_predictions;
use super::{run_experiment, ExperimentConfig, ExperimentReport, RunPaths, BASELINE_LAMBDA};
use crate::data::{Dataset, SlicePair, Split};
use crate::error::{Error, Result};
use crate::stats::{
    paired_comparison, rank_experiments, render_tests, ExperimentMetrics, PairedTestResult, RankTable, DEFAULT_ALPHA,
};
use crate::tensor::{ParamSet, Tensor};

/// `|yhat − y|` of one test slice.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorMap {
    pub experiment_id: String,
    pub patient_id: String,
    pub slice: usize,
    pub error: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapScale {
    /// Error mapped to white; zero is black.
    pub max_error: f64,
    pub files: Vec<String>,
}

pub(super) fn error_maps(experiment_id: &str, predictions: &ParamSet, test: &[SlicePair]) -> Result<Vec<ErrorMap>> {
    test.iter()
        .map(|s| {
            let key = format!("{}:{}", s.patient_id, s.index);
            let pred = predictions
                .by_name(&key)
                .ok_or_else(|| Error::Config(format!("{experiment_id}: no prediction stored for slice {key}")))?;
            Ok(ErrorMap {
                experiment_id: experiment_id.to_owned(),
                patient_id: s.patient_id.clone(),
                slice: s.index,
                error: pred.value.zip_map(&s.ndct, |a, b| (a - b).abs())?,
            })
        })
        .collect()
}

/// Writes one 8-bit PGM per map, all on the scale `[0, max error over every map]`.
pub fn emit_heatmaps(maps: &[ErrorMap], dir: &Path) -> Result<HeatmapScale> {
    fs::create_dir_all(dir)?;
    let max_error = maps.iter().flat_map(|m| m.error.data()).fold(0.0f64, |a, &b| a.max(b));
    let mut files = Vec::with_capacity(maps.len());
    for m in maps {
        let s = m.error.shape();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
        bytes.extend(m.error.data().iter().map(|&e| {
            if max_error > 0.0 {
                (e / max_error * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        }));
        let name = format!("{}_{}_{:03}.pgm", m.experiment_id, m.patient_id, m.slice);
        fs::write(dir.join(&name), bytes)?;
        files.push(name);
    }
    let scale = HeatmapScale { max_error, files };
    fs::write(dir.join("scale.json"), serde_json::to_vec_pretty(&scale)?)?;
    Ok(scale)
}

/// Weight and untrained-model influence of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRow {
    pub experiment_id: String,
    pub lambda: Option<f64>,
    pub psi_at_lambda: Option<f64>,
    pub psi_at_baseline: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub reference: String,
    pub rank_table: RankTable,
    /// Reference against every other run, on per-slice SSIM.
    pub tests: Vec<PairedTestResult>,
    pub influence: Vec<InfluenceRow>,
    pub heatmap_scale: f64,
}

impl SuiteReport {
    pub fn render(&self) -> String {
        let mut s = self.rank_table.render();
        if !self.tests.is_empty() {
            s.push('\n');
            s.push_str(&render_tests(&self.tests));
        }
        let _ = writeln!(s, "\n{:<12} {:>12} {:>12} {:>16}", "Experiment", "lambda", "psi", format!("psi@{BASELINE_LAMBDA}"));
        let opt = |v: Option<f64>, p: usize| v.map(|v| format!("{v:.p$e}")).unwrap_or_else(|| "-".into());
        for r in &self.influence {
            let _ = writeln!(
                s,
                "{:<12} {:>12} {:>12} {:>16}",
                r.experiment_id,
                opt(r.lambda, 3),
                r.psi_at_lambda.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into()),
                r.psi_at_baseline.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into())
            );
        }
        let _ = writeln!(s, "\nheatmap scale: 0 to {:.4}", self.heatmap_scale);
        s
    }
}

/// Ranks finished runs, tests `reference` against each other run, and writes
/// `stats.json`, `summary.txt` and shared-scale heatmaps into `out`.
pub fn compare_runs(run_dirs: &[PathBuf], reference: &str, out: &Path) -> Result<SuiteReport> {
    if run_dirs.is_empty() {
        return Err(Error::Config("compare needs at least one run".into()));
    }
    let reports = run_dirs
        .iter()
        .map(|d| ExperimentReport::read(&RunPaths::new(d).report()))
        .collect::<Result<Vec<_>>>()?;
    for (i, r) in reports.iter().enumerate() {
        if reports[..i].iter().any(|o| o.id() == r.id()) {
            return Err(Error::Config(format!("experiment id `{}` appears twice", r.id())));
        }
    }
    let Some(ref_report) = reports.iter().find(|r| r.id() == reference) else {
        return Err(Error::Config(format!("reference `{reference}` is not among the compared runs")));
    };

    let experiments: Vec<ExperimentMetrics> = reports
        .iter()
        .map(|r| ExperimentMetrics { experiment_id: r.id().to_owned(), records: r.metrics.clone() })
        .collect();
    let rank_table = rank_experiments(&experiments)?;

    let ref_ssim: Vec<f64> = ref_report.metrics.iter().map(|m| m.ssim).collect();
    let tests = reports
        .iter()
        .filter(|r| r.id() != reference)
        .map(|r| {
            let other: Vec<f64> = r.metrics.iter().map(|m| m.ssim).collect();
            paired_comparison(&format!("{reference} vs {}", r.id()), &ref_ssim, &other, DEFAULT_ALPHA)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut maps = Vec::new();
    for (dir, r) in run_dirs.iter().zip(&reports) {
        let cfg = &r.config;
        let test = Dataset::load(&cfg.dataset, cfg.split_manifest.as_deref())?.slice_pairs(Split::Test)?;
        maps.extend(error_maps(r.id(), &read_predictions(dir)?, &test)?);
    }
    fs::create_dir_all(out)?;
    let scale = emit_heatmaps(&maps, &out.join("heatmaps"))?;

    let influence = reports
        .iter()
        .map(|r| InfluenceRow {
            experiment_id: r.id().to_owned(),
            lambda: r.resolved_lambda,
            psi_at_lambda: r.pretraining_psi.map(|p| p.ratio_of_sums),
            psi_at_baseline: r.baseline_psi.map(|p| p.ratio_of_sums),
        })
        .collect();
    let suite = SuiteReport { reference: reference.to_owned(), rank_table, tests, influence, heatmap_scale: scale.max_error };
    fs::write(out.join("stats.json"), serde_json::to_vec_pretty(&suite)?)?;
    fs::write(out.join("summary.txt"), suite.render())?;
    Ok(suite)
}

/// Runs every config into `root/<id>` in order, then compares them into `root/comparison`.
pub fn run_suite(configs: &[ExperimentConfig], reference: &str, root: &Path) -> Result<SuiteReport> {
    let Some(first) = configs.first() else {
        return Err(Error::Config("empty suite".into()));
    };
    for c in configs {
        if c.dataset != first.dataset
            || c.split_manifest != first.split_manifest
            || c.hyperparams.seed != first.hyperparams.seed
        {
            return Err(Error::Config(format!(
                "suite members must share dataset, splits and seed; `{}` differs from `{}`",
                c.id, first.id
            )));
        }
    }
    let mut dirs = Vec::with_capacity(configs.len());
    for c in configs {
        let dir = root.join(&c.id);
        run_experiment(c, &dir)?;
        dirs.push(dir);
    }
    compare_runs(&dirs, reference, &root.join("comparison"))
}
