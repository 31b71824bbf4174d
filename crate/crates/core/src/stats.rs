//! Paired comparisons of per-slice metric vectors and experiment ranking.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::metrics::MetricRecord;

/// Largest effective sample size handled by exact enumeration.
pub const EXACT_MAX_N: usize = 25;
pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    NormalApprox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub n_effective: usize,
    pub zeros_dropped: usize,
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(w_plus, w_minus)`
    pub statistic: f64,
    pub p_value: f64,
    pub method: WilcoxonMethod,
}

/// Average ranks (1-based) of `values`.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let avg = (start + 1 + end) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = avg;
        }
        start = end;
    }
    ranks
}

/// Two-sided signed-rank test of `a − b`; exact for small samples.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    let diffs = nonzero_differences(a, b)?;
    let method = if diffs.len() <= EXACT_MAX_N { WilcoxonMethod::Exact } else { WilcoxonMethod::NormalApprox };
    wilcoxon_with_method(a, b, method)
}

fn nonzero_differences(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Stats(format!("paired test needs equal non-empty lengths, got {} and {}", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Stats("paired test inputs must be finite".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|&d| d != 0.0).collect();
    if diffs.is_empty() {
        return Err(Error::Stats("every paired difference is zero; the signed-rank test is degenerate".into()));
    }
    Ok(diffs)
}

/// As [`wilcoxon_signed_rank`] with the p-value method forced.
pub fn wilcoxon_with_method(a: &[f64], b: &[f64], method: WilcoxonMethod) -> Result<WilcoxonResult> {
    let diffs = nonzero_differences(a, b)?;
    let n = diffs.len();
    let ranks = average_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let statistic = w_plus.min(w_minus);

    let p = match method {
        WilcoxonMethod::Exact => {
            if n > 62 {
                return Err(Error::Stats(format!("exact signed-rank distribution unavailable for n = {n}")));
            }
            exact_p(&ranks, statistic)
        }
        WilcoxonMethod::NormalApprox => {
            let mean = total / 2.0;
            let mut var = (n * (n + 1) * (2 * n + 1)) as f64 / 24.0;
            let mut sorted = ranks.clone();
            sorted.sort_by(f64::total_cmp);
            for group in sorted.chunk_by(|x, y| x == y) {
                let t = group.len() as f64;
                var -= (t * t * t - t) / 48.0;
            }
            if var <= 0.0 {
                1.0
            } else {
                let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
                erfc(z / std::f64::consts::SQRT_2)
            }
        }
    };

    Ok(WilcoxonResult {
        n_effective: n,
        zeros_dropped: a.len() - n,
        w_plus,
        w_minus,
        statistic,
        p_value: p.clamp(0.0, 1.0),
        method,
    })
}

/// `min(1, 2·P(T ≤ stat))` under the sign-flip null, counted over doubled ranks.
fn exact_p(ranks: &[f64], stat: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0u64; max + 1];
    counts[0] = 1;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] > 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let limit = (stat * 2.0).round() as usize;
    let below: u64 = counts[..=limit.min(max)].iter().sum();
    let p = 2.0 * below as f64 / (2.0f64).powi(ranks.len() as i32);
    p.min(1.0)
}

/// `mean(a − b) / sd(a − b)` with the `n − 1` denominator.
pub fn cohens_d_paired(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Stats(format!("effect size needs equal lengths of at least 2, got {} and {}", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if !(var > 0.0) {
        return Err(Error::Stats("paired differences have zero variance; effect size undefined".into()));
    }
    Ok(mean / var.sqrt())
}

/// One row of the hypothesis-testing table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTestResult {
    pub label: String,
    pub mean_a: f64,
    pub mean_b: f64,
    pub n_effective: usize,
    pub zeros_dropped: usize,
    pub statistic: f64,
    pub p_value: f64,
    pub effect_size_d: f64,
    pub alpha: f64,
    pub significant: bool,
    pub method: WilcoxonMethod,
}

/// Signed-rank test plus effect size of `a` against `b`.
pub fn paired_comparison(label: &str, a: &[f64], b: &[f64], alpha: f64) -> Result<PairedTestResult> {
    let w = wilcoxon_signed_rank(a, b)?;
    let d = cohens_d_paired(a, b)?;
    Ok(PairedTestResult {
        label: label.to_owned(),
        mean_a: a.iter().sum::<f64>() / a.len() as f64,
        mean_b: b.iter().sum::<f64>() / b.len() as f64,
        n_effective: w.n_effective,
        zeros_dropped: w.zeros_dropped,
        statistic: w.statistic,
        p_value: w.p_value,
        effect_size_d: d,
        alpha,
        significant: w.p_value < alpha,
        method: w.method,
    })
}

/// Four decimals; scientific below `1e-3`; `< 1e-30` below that.
pub fn format_p_value(p: f64) -> String {
    if p < 1e-30 {
        "< 1e-30".into()
    } else if p < 1e-3 {
        format!("{p:.3e}")
    } else {
        format!("{p:.4}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    if values.is_empty() {
        return MeanStd { mean: f64::NAN, std: f64::NAN };
    }
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub experiment_id: String,
    pub ssim: MeanStd,
    /// Over finite values only.
    pub psnr: MeanStd,
    pub psnr_infinite: usize,
    pub nrmse: MeanStd,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    /// Ordered by rank.
    pub rows: Vec<RankRow>,
}

/// Metric records of one experiment over the test set.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentMetrics {
    pub experiment_id: String,
    pub records: Vec<MetricRecord>,
}

impl ExperimentMetrics {
    pub fn column(&self, f: impl Fn(&MetricRecord) -> f64) -> Vec<f64> {
        self.records.iter().map(f).collect()
    }
}

/// Errors unless every experiment covers the same (patient, slice) sequence.
pub fn check_aligned(experiments: &[ExperimentMetrics]) -> Result<()> {
    let Some(first) = experiments.first() else { return Ok(()) };
    for e in &experiments[1..] {
        let same = e.records.len() == first.records.len()
            && e.records.iter().zip(&first.records).all(|(x, y)| x.patient_id == y.patient_id && x.slice == y.slice);
        if !same {
            return Err(Error::Stats(format!(
                "experiments `{}` and `{}` were evaluated on different test slices",
                first.experiment_id, e.experiment_id
            )));
        }
    }
    Ok(())
}

/// Ranks by mean SSIM (descending), then mean PSNR (descending).
pub fn rank_experiments(experiments: &[ExperimentMetrics]) -> Result<RankTable> {
    if experiments.is_empty() {
        return Err(Error::Stats("nothing to rank".into()));
    }
    check_aligned(experiments)?;
    let mut rows: Vec<RankRow> = experiments
        .iter()
        .map(|e| {
            let psnr = e.column(|r| r.psnr);
            let finite: Vec<f64> = psnr.iter().copied().filter(|v| v.is_finite()).collect();
            RankRow {
                experiment_id: e.experiment_id.clone(),
                ssim: mean_std(&e.column(|r| r.ssim)),
                psnr: mean_std(&finite),
                psnr_infinite: psnr.len() - finite.len(),
                nrmse: mean_std(&e.column(|r| r.nrmse)),
                rank: 0,
            }
        })
        .collect();
    rows.sort_by(|x, y| {
        y.ssim
            .mean
            .total_cmp(&x.ssim.mean)
            .then_with(|| y.psnr.mean.total_cmp(&x.psnr.mean))
            .then_with(|| x.experiment_id.cmp(&y.experiment_id))
    });
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(RankTable { rows })
}

impl RankTable {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>18} {:>18} {:>18} {:>5}", "Experiment", "SSIM", "PSNR (dB)", "NRMSE", "Rank");
        for r in &self.rows {
            let cell = |m: MeanStd, p: usize| format!("{:.p$} ({:.p$})", m.mean, m.std);
            let _ = writeln!(
                s,
                "{:<12} {:>18} {:>18} {:>18} {:>5}",
                r.experiment_id,
                cell(r.ssim, 4),
                cell(r.psnr, 2),
                cell(r.nrmse, 4),
                r.rank
            );
        }
        let infinite: Vec<String> = self
            .rows
            .iter()
            .filter(|r| r.psnr_infinite > 0)
            .map(|r| format!("{} ({})", r.experiment_id, r.psnr_infinite))
            .collect();
        if !infinite.is_empty() {
            let _ = writeln!(s, "PSNR means exclude identical slices: {}", infinite.join(", "));
        }
        s
    }
}

pub fn render_tests(tests: &[PairedTestResult]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<24} {:>18} {:>12} {:>10} {:>12} {:>6} {:>8}",
        "Comparison", "SSIM", "p-value", "Cohen's d", "Significant", "n", "method"
    );
    for t in tests {
        let method = match t.method {
            WilcoxonMethod::Exact => "exact",
            WilcoxonMethod::NormalApprox => "normal",
        };
        let _ = writeln!(
            s,
            "{:<24} {:>18} {:>12} {:>10.3} {:>12} {:>6} {:>8}",
            t.label,
            format!("{:.4} vs {:.4}", t.mean_a, t.mean_b),
            format_p_value(t.p_value),
            t.effect_size_d,
            if t.significant { "yes" } else { "no" },
            t.n_effective,
            method
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    use super::*;
    use crate::seeded_rng;

    /// Two-sided p by enumerating every sign assignment of the ranks.
    fn enumerate_p(ranks: &[f64], observed: f64) -> f64 {
        let n = ranks.len();
        let total: f64 = ranks.iter().sum();
        let mut hits = 0u64;
        for mask in 0u64..(1 << n) {
            let wp: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if wp.min(total - wp) <= observed + 1e-9 {
                hits += 1;
            }
        }
        hits as f64 / (1u64 << n) as f64
    }

    /// Distinct non-zero integer magnitudes with random signs.
    fn tie_free(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        let mut mags: Vec<i64> = (1..=(3 * n as i64)).collect();
        mags.shuffle(rng);
        mags.truncate(n);
        mags.into_iter().map(|m| if rng.gen_bool(0.5) { m as f64 } else { -(m as f64) }).collect()
    }

    #[test]
    fn five_positive_differences() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let r = wilcoxon_signed_rank(&a, &[0.0; 5]).unwrap();
        assert_eq!(r.method, WilcoxonMethod::Exact);
        assert_eq!((r.w_plus, r.w_minus, r.statistic), (15.0, 0.0, 0.0));
        assert_eq!(r.p_value, 0.0625);
        let r = wilcoxon_signed_rank(&[1.0; 10], &[0.0; 10]).unwrap();
        assert_eq!(r.p_value, 2.0 / 1024.0);
    }

    #[test]
    fn exact_matches_enumeration() {
        let mut rng = seeded_rng(0);
        for n in 1..=12 {
            for _ in 0..20 {
                let d = tie_free(n, &mut rng);
                let r = wilcoxon_with_method(&d, &vec![0.0; n], WilcoxonMethod::Exact).unwrap();
                let ranks: Vec<f64> = {
                    let mut abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
                    abs.sort_by(f64::total_cmp);
                    d.iter().map(|v| abs.iter().position(|&x| x == v.abs()).unwrap() as f64 + 1.0).collect()
                };
                let want = enumerate_p(&ranks, r.statistic);
                assert!((r.p_value - want).abs() < 1e-15, "n {n}: {} vs {want}", r.p_value);
            }
        }
    }

    #[test]
    fn exact_with_ties_matches_enumeration() {
        let d = [1.0, -1.0, 2.0, 2.0, 3.0, -4.0, 4.0, 5.0];
        let r = wilcoxon_with_method(&d, &[0.0; 8], WilcoxonMethod::Exact).unwrap();
        let ranks = average_ranks(&d.iter().map(|v: &f64| v.abs()).collect::<Vec<_>>());
        assert_eq!(ranks, vec![1.5, 1.5, 3.5, 3.5, 5.0, 6.5, 6.5, 8.0]);
        assert!((r.p_value - enumerate_p(&ranks, r.statistic)).abs() < 1e-15);
    }

    #[test]
    fn normal_approximation_tracks_exact_at_25() {
        let mut rng = seeded_rng(1);
        for _ in 0..200 {
            let d = tie_free(25, &mut rng);
            let zeros = vec![0.0; 25];
            let e = wilcoxon_with_method(&d, &zeros, WilcoxonMethod::Exact).unwrap();
            let a = wilcoxon_with_method(&d, &zeros, WilcoxonMethod::NormalApprox).unwrap();
            assert!((e.p_value - a.p_value).abs() < 0.01, "{} vs {}", e.p_value, a.p_value);
        }
        let big: Vec<f64> = (1..=30).map(|i| i as f64).collect();
        assert_eq!(wilcoxon_signed_rank(&big, &[0.0; 30]).unwrap().method, WilcoxonMethod::NormalApprox);
    }

    #[test]
    fn zeros_are_dropped_and_degenerate_inputs_rejected() {
        let r = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 0.5], &[0.0, 0.0, 0.0, 0.5]).unwrap();
        assert_eq!((r.n_effective, r.zeros_dropped), (3, 1));
        assert_eq!(r.p_value, 0.25);
        assert!(wilcoxon_signed_rank(&[1.0], &[1.0]).is_err());
        assert!(wilcoxon_signed_rank(&[1.0, 2.0], &[1.0]).is_err());
        assert!(wilcoxon_signed_rank(&[], &[]).is_err());
        assert!(wilcoxon_signed_rank(&[f64::NAN], &[0.0]).is_err());
    }

    #[test]
    fn cohens_d_cases() {
        assert_eq!(cohens_d_paired(&[2.0, 4.0, 6.0], &[1.0, 2.0, 3.0]).unwrap(), 2.0);
        assert_eq!(cohens_d_paired(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap(), -2.0);
        assert!(cohens_d_paired(&[1.0, 2.0], &[0.0, 1.0]).is_err());
        assert!(cohens_d_paired(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn p_value_formatting() {
        assert_eq!(format_p_value(0.0625), "0.0625");
        assert_eq!(format_p_value(2.5e-4), "2.500e-4");
        assert_eq!(format_p_value(1e-40), "< 1e-30");
    }

    fn exp(id: &str, ssim: &[f64], psnr: &[f64]) -> ExperimentMetrics {
        ExperimentMetrics {
            experiment_id: id.into(),
            records: ssim
                .iter()
                .zip(psnr)
                .enumerate()
                .map(|(i, (&s, &p))| MetricRecord { patient_id: "P".into(), slice: i, psnr: p, ssim: s, nrmse: 0.1 })
                .collect(),
        }
    }

    #[test]
    fn ranking_orders_by_ssim_then_psnr() {
        let t = rank_experiments(&[
            exp("A", &[0.8, 0.8], &[30.0, 31.0]),
            exp("B", &[0.9, 0.9], &[29.0, 29.0]),
            exp("C", &[0.85, 0.85], &[40.0, f64::INFINITY]),
            exp("D", &[0.9, 0.9], &[30.0, 30.0]),
        ])
        .unwrap();
        let order: Vec<&str> = t.rows.iter().map(|r| r.experiment_id.as_str()).collect();
        assert_eq!(order, ["D", "B", "C", "A"]);
        assert_eq!(t.rows.iter().map(|r| r.rank).collect::<Vec<_>>(), [1, 2, 3, 4]);
        let c = &t.rows[2];
        assert_eq!((c.psnr.mean, c.psnr_infinite), (40.0, 1));
        assert_eq!(t.rows[3].ssim.std, 0.0);
        assert!((t.rows[3].psnr.std - (0.5f64).sqrt()).abs() < 1e-12);
        let text = t.render();
        assert_eq!(text.lines().count(), 6);
        assert!(text.contains("C (1)"));
    }

    #[test]
    fn ranking_needs_aligned_slices() {
        let mut b = exp("B", &[0.9], &[30.0]);
        b.records[0].slice = 5;
        assert!(rank_experiments(&[exp("A", &[0.9], &[30.0]), b]).is_err());
        assert!(rank_experiments(&[]).is_err());
    }

    #[test]
    fn paired_comparison_reports_both_sides() {
        let a: Vec<f64> = (0..8).map(|i| 0.9 + 0.001 * i as f64).collect();
        let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v - 0.01 - 0.001 * (i % 3) as f64).collect();
        let t = paired_comparison("A vs B", &a, &b, DEFAULT_ALPHA).unwrap();
        assert_eq!(t.p_value, 2.0 / 256.0);
        assert!(t.significant && t.effect_size_d > 0.0);
        assert!(render_tests(&[t]).contains("A vs B"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn swapping_sides_keeps_p_and_flips_d(seed in 0u64..10_000, n in 3usize..30) {
            let mut rng = seeded_rng(seed);
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let (x, y) = (wilcoxon_signed_rank(&a, &b).unwrap(), wilcoxon_signed_rank(&b, &a).unwrap());
            prop_assert_eq!(x.p_value, y.p_value);
            prop_assert_eq!(x.w_plus, y.w_minus);
            prop_assert!(x.p_value > 0.0 && x.p_value <= 1.0);
            let (d1, d2) = (cohens_d_paired(&a, &b).unwrap(), cohens_d_paired(&b, &a).unwrap());
            prop_assert!((d1 + d2).abs() < 1e-12);
        }
    }
}
