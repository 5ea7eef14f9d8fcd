#![allow(dead_code)]

use hjscc::config::{ModelConfig, RunConfig};
use hjscc::harness::dataset::{Dataset, DatasetItem};
use hjscc::harness::synth::synth_image;
use hjscc::source::ImageTensor;

/// Two-level model small enough for finite differences.
pub fn micro_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        channels: vec![4, 4],
        downsampling: vec![4, 2],
        width: 8,
        blocks: 1,
        jscc_blocks: 2,
        rate_attention: true,
    };
    cfg.train.crop_size = 8;
    cfg.train.batch_size = 2;
    cfg
}

pub fn synth_dataset(n: usize, size: usize, seed: u64) -> Dataset {
    let items = (0..n)
        .map(|i| DatasetItem {
            id: format!("img{i:03}"),
            image: synth_image(seed * 1000 + i as u64, size, size),
        })
        .collect();
    Dataset::from_images(items).unwrap()
}

pub fn synth(seed: u64, size: usize) -> ImageTensor {
    synth_image(seed, size, size)
}

/// Asymptotic p-value of the two-sample Kolmogorov-Smirnov statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < n && j < m {
        let x = a[i].min(b[j]);
        while i < n && a[i] <= x {
            i += 1;
        }
        while j < m && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        p += 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
    }
    (d, p.clamp(0.0, 1.0))
}
