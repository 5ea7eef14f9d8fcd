//! Procedural image generator for tests and offline runs.
//!
//! Images mix a smooth background with a random number of filled shapes,
//! striped textures and grain, so that content complexity varies a lot from
//! one image to the next.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::source::ImageTensor;

fn color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// One image of size `height x width` determined by `seed`.
pub fn synth_image(seed: u64, height: usize, width: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height as f64, width as f64);
    let c0 = color(&mut rng);
    let c1 = color(&mut rng);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut px = vec![[0.0f64; 3]; height * width];
    for y in 0..height {
        for x in 0..width {
            let t = 0.5 + 0.5 * ((x as f64 / w - 0.5) * ca + (y as f64 / h - 0.5) * sa);
            let p = &mut px[y * width + x];
            for c in 0..3 {
                p[c] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }
    let busy: f64 = rng.random::<f64>().powi(2);
    let shapes = (busy * 14.0).round() as usize;
    for _ in 0..shapes {
        let col = color(&mut rng);
        let cy = rng.random_range(0.0..h);
        let cx = rng.random_range(0.0..w);
        let r = rng.random_range(0.08..0.4) * h.min(w);
        let kind = rng.random_range(0..3u8);
        let freq = rng.random_range(0.3..1.6);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        for y in 0..height {
            for x in 0..width {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let inside = match kind {
                    0 => dy * dy + dx * dx <= r * r,
                    1 => dy.abs() <= r && dx.abs() <= 0.6 * r,
                    _ => (dx + dy).abs() <= r * 0.3 && dx.abs() <= r,
                };
                if inside {
                    let p = &mut px[y * width + x];
                    let stripe = if kind == 1 {
                        0.5 + 0.5 * (freq * x as f64 + phase).sin()
                    } else {
                        1.0
                    };
                    for c in 0..3 {
                        p[c] = col[c] * stripe + p[c] * (1.0 - stripe) * 0.3;
                    }
                }
            }
        }
    }
    let grain = busy * 0.08;
    let mut data = vec![0.0; 3 * height * width];
    for (i, p) in px.iter().enumerate() {
        for c in 0..3 {
            let n = if grain > 0.0 { rng.random_range(-grain..grain) } else { 0.0 };
            data[c * height * width + i] = (p[c] + n).clamp(0.0, 1.0);
        }
    }
    ImageTensor::new(height, width, data).expect("values clamped to [0, 1]")
}

/// Write `count` PNG images named `synth_XXXX.png` into `dir`.
pub fn write_synth_dataset(
    dir: &Path,
    count: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let img = synth_image(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), height, width);
        let path = dir.join(format!("synth_{i:04}.png"));
        img.to_rgb8().save(&path)?;
        out.push(path);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = synth_image(7, 16, 24);
        let b = synth_image(7, 16, 24);
        assert_eq!(a, b);
        assert_eq!((a.height(), a.width()), (16, 24));
        assert_ne!(a, synth_image(8, 16, 24));
    }
}
