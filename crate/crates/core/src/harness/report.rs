//! Sweep plots and summary.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::evaluate::{MetricsRow, MEAN_ID};
use crate::harness::plot::line_chart;

pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    /// `psnr_vs_snr` or `psnr_vs_cbr`.
    pub kind: String,
    pub key: String,
    pub file: String,
    /// `(x, mean PSNR)` sorted by `x`.
    pub points: Vec<(f64, f64)>,
    /// PSNR never drops as `x` grows.
    pub monotone_non_decreasing: bool,
    /// Largest PSNR drop between consecutive points, in dB.
    pub max_drop_db: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub curves: Vec<CurveSummary>,
    pub warnings: Vec<String>,
}

impl SweepSummary {
    /// Every PSNR-vs-SNR curve degrades gracefully.
    pub fn graceful_degradation(&self) -> bool {
        self.curves
            .iter()
            .filter(|c| c.kind == "psnr_vs_snr")
            .all(|c| c.monotone_non_decreasing)
    }
}

fn key_f(v: f64) -> String {
    format!("{v}")
}

/// Dataset means per `(lambda, feedback, snr, alpha)`. Uses the mean rows
/// when present, otherwise averages the per-image rows.
fn cell_means(rows: &[MetricsRow]) -> Vec<(f64, bool, f64, f64, f64, f64)> {
    let means: Vec<&MetricsRow> = rows.iter().filter(|r| r.image_id == MEAN_ID).collect();
    let src: Vec<&MetricsRow> = if means.is_empty() { rows.iter().collect() } else { means };
    let mut acc: BTreeMap<(String, bool, String, String), (f64, f64, f64, f64, f64, usize)> = BTreeMap::new();
    for r in src {
        let e = acc
            .entry((key_f(r.lambda), r.feedback, key_f(r.snr_db), key_f(r.alpha)))
            .or_insert((r.lambda, r.snr_db, r.alpha, 0.0, 0.0, 0));
        e.3 += r.cbr_total;
        e.4 += r.psnr_db;
        e.5 += 1;
    }
    acc.into_iter()
        .map(|((_, fb, _, _), (lambda, snr, alpha, cbr, psnr, n))| {
            let n = n as f64;
            (lambda, fb, snr, alpha, cbr / n, psnr / n)
        })
        .collect()
}

fn monotonicity(points: &[(f64, f64)]) -> (bool, f64) {
    let drop = points
        .windows(2)
        .map(|w| w[0].1 - w[1].1)
        .fold(0.0f64, f64::max);
    (drop <= 0.0, drop)
}

/// PSNR-vs-SNR curves (one per `lambda, alpha, feedback`) and PSNR-vs-CBR
/// curves (one per `lambda, SNR, feedback`), each written as a PNG in
/// `out_dir` with a `summary.json` alongside. Curves with fewer than two
/// points are skipped with a warning; no input means no files.
pub fn sweep_report(rows: &[MetricsRow], out_dir: &Path) -> Result<SweepSummary> {
    let mut summary = SweepSummary::default();
    if rows.is_empty() {
        summary.warnings.push("no metric rows".into());
        log::warn!("no metric rows; nothing to plot");
        return Ok(summary);
    }
    let cells = cell_means(rows);
    let mut by_snr: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let mut by_cbr: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for &(lambda, fb, snr, alpha, cbr, psnr) in &cells {
        let fb_tag = if fb { "_fb" } else { "" };
        by_snr
            .entry(format!("lambda{lambda}_alpha{alpha}{fb_tag}"))
            .or_default()
            .push((snr, psnr));
        by_cbr
            .entry(format!("lambda{lambda}_snr{snr}{fb_tag}"))
            .or_default()
            .push((cbr, psnr));
    }
    let mut planned = Vec::new();
    for (kind, groups) in [("psnr_vs_snr", by_snr), ("psnr_vs_cbr", by_cbr)] {
        for (key, mut pts) in groups {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            if pts.len() < 2 {
                let w = format!("{kind} {key}: {} point(s), curve skipped", pts.len());
                log::warn!("{w}");
                summary.warnings.push(w);
                continue;
            }
            planned.push((kind, key, pts));
        }
    }
    if planned.is_empty() {
        return Ok(summary);
    }
    std::fs::create_dir_all(out_dir)?;
    for (kind, key, pts) in planned {
        let file = format!("{kind}_{key}.png");
        line_chart(&out_dir.join(&file), std::slice::from_ref(&pts))?;
        let (mono, drop) = monotonicity(&pts);
        summary.curves.push(CurveSummary {
            kind: kind.to_string(),
            key,
            file,
            points: pts,
            monotone_non_decreasing: mono,
            max_drop_db: drop,
        });
    }
    std::fs::write(out_dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monotonicity_reports_largest_drop() {
        assert_eq!(monotonicity(&[(0.0, 10.0), (5.0, 12.0), (10.0, 12.0)]), (true, 0.0));
        let (ok, drop) = monotonicity(&[(0.0, 10.0), (5.0, 9.5), (10.0, 9.0), (15.0, 11.0)]);
        assert!(!ok);
        assert!((drop - 0.5).abs() < 1e-12);
    }
}
