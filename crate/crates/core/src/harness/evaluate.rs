//! Evaluation sweeps over SNR and rate scale.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HjsccError, Result};
use crate::harness::dataset::EvalImage;
use crate::harness::train::{csv_err, mix_seed};
use crate::hvae::Phase;
use crate::model::HjsccModel;
use crate::pipeline::{forward, ForwardOptions, Mode, NoiseStreams};
use crate::rate_match::RatePlanSidecar;

/// Id used for dataset-mean rows.
pub const MEAN_ID: &str = "mean";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub image_id: String,
    pub snr_db: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub feedback: bool,
    pub cbr_total: f64,
    pub cbr_payload: f64,
    pub cbr_side_info: f64,
    pub psnr_db: f64,
    pub rate_nats: f64,
    pub rate_term: f64,
    pub d_compress: f64,
    pub d_transmit: f64,
    pub loss_total: f64,
}

#[derive(Clone, Debug)]
pub struct EvalSettings {
    pub snr_db: Vec<f64>,
    pub alpha: Vec<f64>,
    pub feedback: bool,
    /// Base seed for channel and posterior noise.
    pub seed: u64,
    /// Turn rate matching off (full-length transmission).
    pub full_length: bool,
}

/// Per-image rows followed by a dataset-mean row for every `(SNR, alpha)`
/// cell. Each image uses the same noise seed in every cell, so curves over
/// SNR or alpha compare like with like.
pub fn evaluate(
    model: &HjsccModel,
    images: &[EvalImage],
    settings: &EvalSettings,
) -> Result<(Vec<MetricsRow>, Vec<RatePlanSidecar>)> {
    if images.is_empty() {
        return Err(HjsccError::Dataset("no evaluation images".into()));
    }
    let lambda = model.config.loss.lambda;
    let mode = if settings.feedback { Mode::Feedback } else { Mode::NoFeedback };
    let mut rows = Vec::new();
    let mut sidecars = Vec::new();
    for &snr in &settings.snr_db {
        for &alpha in &settings.alpha {
            let channel = model.config.channel.with_snr(snr);
            let mut cell = Vec::with_capacity(images.len());
            for (i, img) in images.iter().enumerate() {
                let mut opts = ForwardOptions::new(Phase::Eval, alpha, channel.clone(), mode);
                opts.extents = Some(vec![img.extent]);
                opts.rate_matching = !settings.full_length;
                let mut noise = NoiseStreams::new(mix_seed(settings.seed, i as u64));
                let out = forward(model, std::slice::from_ref(&img.image), &opts, &mut noise)?;
                let rep = &out.reports[0];
                let b = out.breakdown;
                if snr == settings.snr_db[0] {
                    sidecars.push(RatePlanSidecar::new(format!("{}@alpha={alpha}", img.id), &rep.plans));
                }
                cell.push(MetricsRow {
                    image_id: img.id.clone(),
                    snr_db: snr,
                    alpha,
                    lambda,
                    feedback: settings.feedback,
                    cbr_total: rep.cbr.total,
                    cbr_payload: rep.cbr.payload,
                    cbr_side_info: rep.cbr.side_info,
                    psnr_db: rep.psnr,
                    rate_nats: rep.rate_nats,
                    rate_term: b.rate_term,
                    d_compress: b.d_compress,
                    d_transmit: b.d_transmit,
                    loss_total: b.total,
                });
            }
            let mean = mean_row(&cell);
            rows.extend(cell);
            rows.push(mean);
        }
    }
    Ok((rows, sidecars))
}

fn mean_row(rows: &[MetricsRow]) -> MetricsRow {
    let n = rows.len() as f64;
    let avg = |f: fn(&MetricsRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let payload = avg(|r| r.cbr_payload);
    let side = avg(|r| r.cbr_side_info);
    MetricsRow {
        image_id: MEAN_ID.to_string(),
        snr_db: rows[0].snr_db,
        alpha: rows[0].alpha,
        lambda: rows[0].lambda,
        feedback: rows[0].feedback,
        cbr_total: payload + side,
        cbr_payload: payload,
        cbr_side_info: side,
        psnr_db: avg(|r| r.psnr_db),
        rate_nats: avg(|r| r.rate_nats),
        rate_term: avg(|r| r.rate_term),
        d_compress: avg(|r| r.d_compress),
        d_transmit: avg(|r| r.d_transmit),
        loss_total: avg(|r| r.loss_total),
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub fn write_metrics_json(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(rows)?)?;
    Ok(())
}

/// Dataset-mean rows only.
pub fn mean_rows(rows: &[MetricsRow]) -> Vec<&MetricsRow> {
    rows.iter().filter(|r| r.image_id == MEAN_ID).collect()
}
