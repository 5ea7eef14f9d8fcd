//! Training loop.

use std::path::{Path, PathBuf};

use hjscc_nn::{cosine_lr, Adam, AdamConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{HjsccError, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::dataset::Dataset;
use crate::hvae::Phase;
use crate::model::HjsccModel;
use crate::pipeline::{forward, ForwardOptions, Mode, NoiseStreams};
use crate::source::ImageTensor;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CURVE_FILE: &str = "loss_curve.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub total: f64,
    pub rate_term: f64,
    pub d_compress: f64,
    pub d_transmit: f64,
    pub alpha: f64,
    pub snr_db: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// SplitMix64 finaliser, used to derive per-step seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub struct Trainer {
    pub model: HjsccModel,
    pub adam: Adam,
    /// Completed steps.
    pub step: u64,
    dataset: Dataset,
}

impl Trainer {
    pub fn new(config: &RunConfig, dataset: Dataset) -> Result<Self> {
        let model = HjsccModel::new(config)?;
        let adam = Adam::new(&model.params, AdamConfig::default());
        Ok(Self {
            model,
            adam,
            step: 0,
            dataset,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dataset: Dataset) -> Result<Self> {
        let model = ckpt.model()?;
        let adam = ckpt.optimizer(&model.params)?;
        Ok(Self {
            model,
            adam,
            step: ckpt.step,
            dataset,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.model.config
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, self.step, Some(&self.adam))
    }

    /// Batch, rate scale and SNR used at step `step`.
    pub fn step_inputs(&self, step: u64) -> Result<(Vec<ImageTensor>, f64, f64)> {
        let cfg = self.config();
        let t = &cfg.train;
        let batch = self.dataset.train_batch(t.seed, step, t.batch_size, t.crop_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(t.seed, step.wrapping_add(1 << 40)));
        let grid = &cfg.loss.alpha_grid;
        let alpha = grid[rng.random_range(0..grid.len())];
        let snr = match &t.snr_grid_db {
            Some(g) if !g.is_empty() => g[rng.random_range(0..g.len())],
            _ => cfg.channel.snr_db,
        };
        Ok((batch, alpha, snr))
    }

    /// One optimisation step. A non-finite loss aborts before the update and
    /// dumps the batch under `dump_dir`.
    pub fn step_once(&mut self, dump_dir: Option<&Path>) -> Result<LossRecord> {
        let step = self.step;
        let (batch, alpha, snr) = self.step_inputs(step)?;
        let cfg = self.config().clone();
        let mode = if cfg.train.feedback { Mode::Feedback } else { Mode::NoFeedback };
        let opts = ForwardOptions::new(Phase::Train, alpha, cfg.channel.with_snr(snr), mode);
        let mut noise = NoiseStreams::new(mix_seed(cfg.train.seed, step));
        let out = forward(&self.model, &batch, &opts, &mut noise)?;
        let b = out.breakdown;
        if !b.total.is_finite() {
            let dump = match dump_dir {
                Some(d) => Some(dump_batch(d, step, &batch, &b)?),
                None => None,
            };
            return Err(HjsccError::NonFinite { step, dump });
        }
        let grads = out.graph.backward(out.loss);
        let lr = cosine_lr(cfg.train.learning_rate, step, cfg.train.steps, cfg.train.lr_floor);
        let grad_norm = self.adam.update(&mut self.model.params, &grads, lr);
        self.step += 1;
        Ok(LossRecord {
            step,
            total: b.total,
            rate_term: b.rate_term,
            d_compress: b.d_compress,
            d_transmit: b.d_transmit,
            alpha,
            snr_db: snr,
            lr,
            grad_norm,
        })
    }

    /// Train until `config.train.steps`, writing checkpoints and the loss
    /// curve into `out_dir`.
    pub fn run(&mut self, out_dir: &Path) -> Result<Vec<LossRecord>> {
        std::fs::create_dir_all(out_dir)?;
        let total = self.config().train.steps;
        let log_every = self.config().train.log_every.max(1);
        let ckpt_every = self.config().train.checkpoint_every;
        let mut records = Vec::new();
        let curve = out_dir.join(CURVE_FILE);
        let mut logged = read_curve(&curve)?
            .into_iter()
            .filter(|r| r.step < self.step)
            .collect::<Vec<_>>();
        while self.step < total {
            let rec = self.step_once(Some(out_dir))?;
            if rec.step % log_every == 0 || self.step == total {
                log::info!(
                    "step {} loss {:.5} rate {:.4} d_tx {:.5} lr {:.2e}",
                    rec.step,
                    rec.total,
                    rec.rate_term,
                    rec.d_transmit,
                    rec.lr
                );
                logged.push(rec.clone());
            }
            records.push(rec);
            if ckpt_every > 0 && self.step.is_multiple_of(ckpt_every) && self.step < total {
                self.checkpoint().save(&out_dir.join(format!("checkpoint_{:06}.bin", self.step)))?;
                write_curve(&curve, &logged)?;
            }
        }
        self.checkpoint().save(&out_dir.join(CHECKPOINT_FILE))?;
        write_curve(&curve, &logged)?;
        Ok(records)
    }
}

fn dump_batch(dir: &Path, step: u64, batch: &[ImageTensor], b: &crate::pipeline::LossBreakdown) -> Result<PathBuf> {
    let d = dir.join(format!("nonfinite_step_{step:06}"));
    std::fs::create_dir_all(&d)?;
    for (i, img) in batch.iter().enumerate() {
        img.to_rgb8().save(d.join(format!("input_{i}.png")))?;
    }
    std::fs::write(d.join("breakdown.json"), serde_json::to_string_pretty(&DumpInfo { step, breakdown: *b })?)?;
    Ok(d)
}

#[derive(Serialize)]
struct DumpInfo {
    step: u64,
    breakdown: crate::pipeline::LossBreakdown,
}

pub fn read_curve(path: &Path) -> Result<Vec<LossRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub fn write_curve(path: &Path, rows: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> HjsccError {
    HjsccError::Io(std::io::Error::other(e.to_string()))
}

/// Train from `config`, resuming from `resume` when given.
pub fn train(config: &RunConfig, resume: Option<&Path>) -> Result<PathBuf> {
    let dir = config
        .data
        .train_dir
        .as_ref()
        .ok_or_else(|| HjsccError::Config("data.train_dir is not set".into()))?;
    let dataset = Dataset::load(dir)?;
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.config.model != config.model {
                return Err(HjsccError::Incompatible(
                    "checkpoint architecture differs from the config".into(),
                ));
            }
            let mut t = Trainer::from_checkpoint(&ck, dataset)?;
            t.model.config = config.clone();
            t
        }
        None => Trainer::new(config, dataset)?,
    };
    trainer.run(&config.output_dir)?;
    Ok(config.output_dir.join(CHECKPOINT_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::DatasetItem;
    use crate::harness::synth::synth_image;

    #[test]
    fn mixed_seeds_are_distinct() {
        let s: std::collections::HashSet<u64> = (0..1000).map(|i| mix_seed(7, i)).collect();
        assert_eq!(s.len(), 1000);
        assert_ne!(mix_seed(7, 1), mix_seed(8, 1));
    }

    #[test]
    fn step_inputs_are_reproducible_and_from_the_grid() {
        let mut cfg = RunConfig::default();
        cfg.train.crop_size = 16;
        cfg.model.channels = vec![4, 4];
        cfg.model.downsampling = vec![4, 2];
        cfg.model.width = 8;
        let ds = Dataset::from_images(vec![DatasetItem {
            id: "a".into(),
            image: synth_image(1, 24, 24),
        }])
        .unwrap();
        let t = Trainer::new(&cfg, ds).unwrap();
        let (b1, a1, s1) = t.step_inputs(3).unwrap();
        let (b2, a2, s2) = t.step_inputs(3).unwrap();
        assert_eq!((b1, a1, s1), (b2, a2, s2));
        assert!(cfg.loss.alpha_grid.contains(&a1));
        assert_eq!(s1, cfg.channel.snr_db);
    }
}
