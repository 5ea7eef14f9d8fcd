//! Image folder ingestion.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{HjsccError, Result};
use crate::source::ImageTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    /// Random crops.
    Train,
    /// Center crops, or whole images, padded to divisibility.
    Eval,
}

#[derive(Clone, Debug)]
pub struct DatasetItem {
    /// File stem.
    pub id: String,
    pub image: ImageTensor,
}

/// Evaluation image padded to the model's divisibility.
#[derive(Clone, Debug)]
pub struct EvalImage {
    pub id: String,
    pub image: ImageTensor,
    /// Size before padding.
    pub extent: (usize, usize),
}

impl EvalImage {
    pub fn original(&self) -> Result<ImageTensor> {
        self.image.crop(0, 0, self.extent.0, self.extent.1)
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub items: Vec<DatasetItem>,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

impl Dataset {
    /// Every decodable PNG/JPEG in `dir`, sorted by file name. Unreadable
    /// files are skipped with a warning.
    pub fn load(dir: &Path) -> Result<Self> {
        let entries = std::fs::read_dir(dir)
            .map_err(|e| HjsccError::Dataset(format!("cannot read {}: {e}", dir.display())))?;
        let mut paths: Vec<_> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        paths.sort();
        let mut items = Vec::with_capacity(paths.len());
        for p in paths {
            match image::open(&p) {
                Ok(img) => items.push(DatasetItem {
                    id: p
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default(),
                    image: ImageTensor::from_rgb8(&img.to_rgb8()),
                }),
                Err(e) => log::warn!("skipping {}: {e}", p.display()),
            }
        }
        if items.is_empty() {
            return Err(HjsccError::Dataset(format!(
                "no readable images in {}",
                dir.display()
            )));
        }
        Ok(Self { items })
    }

    pub fn from_images(items: Vec<DatasetItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(HjsccError::Dataset("empty dataset".into()));
        }
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// A random `crop x crop` patch of image `idx`. Images smaller than the
    /// crop are edge-padded first.
    pub fn random_crop<R: Rng + ?Sized>(&self, idx: usize, crop: usize, rng: &mut R) -> Result<ImageTensor> {
        let img = &self.items[idx].image;
        let img = if img.height() < crop || img.width() < crop {
            pad_to_at_least(img, crop)
        } else {
            img.clone()
        };
        let top = rng.random_range(0..=img.height() - crop);
        let left = rng.random_range(0..=img.width() - crop);
        img.crop(top, left, crop, crop)
    }

    /// Training batch for `step`, fully determined by `(seed, step)`.
    pub fn train_batch(&self, seed: u64, step: u64, batch: usize, crop: usize) -> Result<Vec<ImageTensor>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
        rng.set_stream(step);
        (0..batch)
            .map(|_| {
                let idx = rng.random_range(0..self.len());
                self.random_crop(idx, crop, &mut rng)
            })
            .collect()
    }

    /// Evaluation images; `crop` takes a center crop first.
    pub fn eval_images(&self, divisibility: usize, crop: Option<usize>) -> Result<Vec<EvalImage>> {
        self.items
            .iter()
            .map(|it| {
                let img = match crop {
                    Some(c) if it.image.height() >= c && it.image.width() >= c => {
                        let top = (it.image.height() - c) / 2;
                        let left = (it.image.width() - c) / 2;
                        it.image.crop(top, left, c, c)?
                    }
                    _ => it.image.clone(),
                };
                Ok(EvalImage {
                    id: it.id.clone(),
                    extent: (img.height(), img.width()),
                    image: img.pad_to_multiple(divisibility),
                })
            })
            .collect()
    }
}

fn pad_to_at_least(img: &ImageTensor, size: usize) -> ImageTensor {
    let (h, w) = (img.height().max(size), img.width().max(size));
    let mut data = Vec::with_capacity(3 * h * w);
    let d = img.data();
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let sy = y.min(img.height() - 1);
                let sx = x.min(img.width() - 1);
                data.push(d[(c * img.height() + sy) * img.width() + sx]);
            }
        }
    }
    ImageTensor::new(h, w, data).expect("copied pixels")
}

/// Images of `dir` as tensors. Training yields one random crop per image in
/// a seeded shuffled order; evaluation yields padded center crops (or whole
/// images when `crop` is `None`).
pub fn ingest_dataset(
    dir: &Path,
    crop: Option<usize>,
    split: Split,
    divisibility: usize,
    seed: u64,
) -> Result<Vec<ImageTensor>> {
    let ds = Dataset::load(dir)?;
    match split {
        Split::Train => {
            let crop = crop.ok_or_else(|| HjsccError::Config("training needs a crop size".into()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut order: Vec<usize> = (0..ds.len()).collect();
            order.shuffle(&mut rng);
            order.into_iter().map(|i| ds.random_crop(i, crop, &mut rng)).collect()
        }
        Split::Eval => Ok(ds
            .eval_images(divisibility, crop)?
            .into_iter()
            .map(|e| e.image)
            .collect()),
    }
}
