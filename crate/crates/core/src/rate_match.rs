//! Entropy-to-bandwidth rate matching.
//!
//! Each spatial position `o` of a latent level gets a target symbol count
//! `k = alpha * sum_c -ln p(z[c, o])`. Targets are averaged over spatial
//! patches so that one length index covers a whole patch, rounded up to the
//! next entry of a finite option set, and turned into prefix masks over the
//! channel dimension of the encoder output. The receiver needs one `N_q`-bit
//! index per patch as error-free side information.

use hjscc_nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{HjsccError, Result};

/// Sorted, de-duplicated set of admissible symbol-vector lengths.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionSet(Vec<usize>);

impl OptionSet {
    pub fn new(mut options: Vec<usize>) -> Result<Self> {
        if options.is_empty() {
            return Err(HjsccError::Config("length option set is empty".into()));
        }
        options.sort_unstable();
        options.dedup();
        Ok(Self(options))
    }

    /// Up to `2^n_q` evenly spaced even lengths in `[0, channels]`.
    ///
    /// Lengths are kept even so that every transmitted prefix pairs into whole
    /// complex symbols. `channels` must be even.
    pub fn uniform_even(channels: usize, n_q: u32) -> Result<Self> {
        if !channels.is_multiple_of(2) || channels == 0 {
            return Err(HjsccError::Config(format!(
                "channel count {channels} must be even and positive"
            )));
        }
        let slots = 1usize << n_q;
        if slots < 2 {
            return Err(HjsccError::Config("n_q must be at least 1".into()));
        }
        let half = channels / 2;
        let options = (0..slots)
            .map(|i| 2 * ((i * half) as f64 / (slots - 1) as f64).round() as usize)
            .collect();
        Self::new(options)
    }

    pub fn values(&self) -> &[usize] {
        &self.0
    }

    pub fn max(&self) -> usize {
        *self.0.last().expect("non-empty")
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, k: usize) -> bool {
        self.0.binary_search(&k).is_ok()
    }

    /// Bits needed to index every option.
    pub fn index_bits(&self) -> u32 {
        usize::BITS - (self.0.len() - 1).leading_zeros()
    }

    pub fn validate_for(&self, channels: usize, n_q: u32) -> Result<()> {
        if self.max() > channels {
            return Err(HjsccError::Config(format!(
                "length option {} exceeds channel count {channels}",
                self.max()
            )));
        }
        if self.index_bits() > n_q {
            return Err(HjsccError::Config(format!(
                "{} length options do not fit in {n_q} side-information bits",
                self.len()
            )));
        }
        Ok(())
    }
}

/// `k[o] = alpha * sum_c neg_log_p[c, o]` for a `[C, H, W]` map of
/// per-element negative log-likelihoods in nats.
pub fn lengths_from_prior(neg_log_p: &Tensor, alpha: f64) -> Result<Tensor> {
    if !(alpha > 0.0) {
        return Err(HjsccError::Domain(format!("alpha must be positive, got {alpha}")));
    }
    let s = neg_log_p.shape();
    let (c, h, w) = match s {
        [c, h, w] | [1, c, h, w] => (*c, *h, *w),
        _ => return Err(HjsccError::Contract(format!("expected [C, H, W], got {s:?}"))),
    };
    let d = neg_log_p.data();
    let mut out = vec![0.0; h * w];
    for ch in 0..c {
        for (o, acc) in out.iter_mut().enumerate() {
            *acc += d[ch * h * w + o];
        }
    }
    for v in &mut out {
        *v *= alpha;
    }
    Ok(Tensor::from_vec(&[h, w], out)?)
}

/// Spatial patch index layout for an `H x W` grid. Edge patches that do not
/// fit cover only the remaining positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub height: usize,
    pub width: usize,
    pub patch: (usize, usize),
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch: (usize, usize)) -> Result<Self> {
        if patch.0 == 0 || patch.1 == 0 {
            return Err(HjsccError::Config("patch size must be positive".into()));
        }
        Ok(Self {
            height,
            width,
            patch,
        })
    }

    pub fn rows(&self) -> usize {
        self.height.div_ceil(self.patch.0)
    }

    pub fn cols(&self) -> usize {
        self.width.div_ceil(self.patch.1)
    }

    pub fn num_groups(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn group_of(&self, y: usize, x: usize) -> usize {
        (y / self.patch.0) * self.cols() + x / self.patch.1
    }
}

/// Replace each position by the mean of its patch.
pub fn group_lengths(real_lengths: &Tensor, patch: (usize, usize)) -> Result<Tensor> {
    let (h, w) = match real_lengths.shape() {
        [h, w] => (*h, *w),
        s => return Err(HjsccError::Contract(format!("expected [H, W], got {s:?}"))),
    };
    let grid = PatchGrid::new(h, w, patch)?;
    let mut sums = vec![0.0; grid.num_groups()];
    let mut counts = vec![0usize; grid.num_groups()];
    let d = real_lengths.data();
    for y in 0..h {
        for x in 0..w {
            let gi = grid.group_of(y, x);
            sums[gi] += d[y * w + x];
            counts[gi] += 1;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let gi = grid.group_of(y, x);
            out[y * w + x] = sums[gi] / counts[gi] as f64;
        }
    }
    Ok(Tensor::from_vec(&[h, w], out)?)
}

/// Smallest option `>= k`, clamped to the largest option. Never exceeds
/// `channels` for a validated option set.
pub fn quantize_length(k: f64, options: &OptionSet, channels: usize) -> Result<usize> {
    if options.max() > channels {
        return Err(HjsccError::Config(format!(
            "length option {} exceeds channel count {channels}",
            options.max()
        )));
    }
    if k.is_nan() || k < 0.0 {
        return Err(HjsccError::Domain(format!("length target {k} must be >= 0")));
    }
    let v = options.values();
    Ok(v.iter().copied().find(|&q| q as f64 >= k).unwrap_or(options.max()))
}

/// Prefix mask with `k_hat` leading ones.
pub fn make_mask(k_hat: usize, channels: usize) -> Result<Vec<bool>> {
    if k_hat > channels {
        return Err(HjsccError::Contract(format!(
            "length {k_hat} exceeds channel count {channels}"
        )));
    }
    Ok((0..channels).map(|i| i < k_hat).collect())
}

pub fn apply_mask(r: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if r.len() != mask.len() {
        return Err(HjsccError::Contract(format!(
            "mask length {} does not match symbol length {}",
            mask.len(),
            r.len()
        )));
    }
    Ok(r.iter()
        .zip(mask)
        .map(|(&v, &m)| if m { v } else { 0.0 })
        .collect())
}

/// Channel symbols spent on error-free side information:
/// `num_groups * n_q / capacity`, with `capacity` in bits per symbol.
pub fn side_info_overhead(num_groups: usize, n_q: u32, capacity: f64) -> Result<f64> {
    if !(capacity > 0.0) {
        return Err(HjsccError::Domain(format!(
            "side-information capacity must be positive, got {capacity}"
        )));
    }
    Ok(num_groups as f64 * f64::from(n_q) / capacity)
}

/// Rate plan for one latent level of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatePlan {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: (usize, usize),
    pub alpha: f64,
    /// `k[o]`, row-major `H x W`.
    pub real_lengths: Vec<f64>,
    /// Patch means of `real_lengths`, broadcast back to every position.
    pub merged_lengths: Vec<f64>,
    /// Lengths drawn from `option_set`, constant within each patch.
    pub quantized_lengths: Vec<usize>,
    pub option_set: OptionSet,
    /// Bits per side-information index (`N_q`).
    pub side_info_bits: u32,
    pub num_groups: usize,
}

impl RatePlan {
    /// Builds the plan from a `[C, H, W]` map of `-ln p` values.
    pub fn build(
        neg_log_p: &Tensor,
        alpha: f64,
        options: &OptionSet,
        patch: (usize, usize),
        n_q: u32,
    ) -> Result<Self> {
        let s = neg_log_p.shape();
        let (c, h, w) = match s {
            [c, h, w] | [1, c, h, w] => (*c, *h, *w),
            _ => return Err(HjsccError::Contract(format!("expected [C, H, W], got {s:?}"))),
        };
        options.validate_for(c, n_q)?;
        let real = lengths_from_prior(neg_log_p, alpha)?;
        let merged = group_lengths(&real, patch)?;
        let quantized = merged
            .data()
            .iter()
            .map(|&k| quantize_length(k, options, c))
            .collect::<Result<Vec<_>>>()?;
        let grid = PatchGrid::new(h, w, patch)?;
        Ok(Self {
            channels: c,
            height: h,
            width: w,
            patch,
            alpha,
            real_lengths: real.into_data(),
            merged_lengths: merged.into_data(),
            quantized_lengths: quantized,
            option_set: options.clone(),
            side_info_bits: n_q,
            num_groups: grid.num_groups(),
        })
    }

    /// Every position at the full length `C` (no rate matching).
    pub fn full(channels: usize, height: usize, width: usize, options: &OptionSet, n_q: u32) -> Self {
        Self {
            channels,
            height,
            width,
            patch: (height.max(1), width.max(1)),
            alpha: 1.0,
            real_lengths: vec![channels as f64; height * width],
            merged_lengths: vec![channels as f64; height * width],
            quantized_lengths: vec![channels; height * width],
            option_set: options.clone(),
            side_info_bits: n_q,
            num_groups: 1,
        }
    }

    /// Total transmitted real values, `sum_o k_hat[o]`.
    pub fn payload_reals(&self) -> usize {
        self.quantized_lengths.iter().sum()
    }

    pub fn side_info_symbols(&self, capacity: f64) -> Result<f64> {
        side_info_overhead(self.num_groups, self.side_info_bits, capacity)
    }

    /// `[C, H, W]` tensor of 0/1 prefix masks.
    pub fn mask_tensor(&self) -> Tensor {
        lengths_to_mask(&self.quantized_lengths, self.channels, self.height, self.width)
    }

    /// Real lengths divided by `C`, as a `[1, H, W]` map.
    pub fn real_map(&self) -> Tensor {
        self.normalized(&self.real_lengths)
    }

    pub fn merged_map(&self) -> Tensor {
        self.normalized(&self.merged_lengths)
    }

    pub fn quantized_map(&self) -> Tensor {
        let v: Vec<f64> = self.quantized_lengths.iter().map(|&k| k as f64).collect();
        self.normalized(&v)
    }

    fn normalized(&self, v: &[f64]) -> Tensor {
        let c = self.channels as f64;
        Tensor::from_vec(&[1, self.height, self.width], v.iter().map(|x| x / c).collect())
            .expect("shape")
    }
}

/// `[C, H, W]` 0/1 tensor from per-position lengths.
pub fn lengths_to_mask(lengths: &[usize], channels: usize, height: usize, width: usize) -> Tensor {
    let hw = height * width;
    let mut m = vec![0.0; channels * hw];
    for (o, &k) in lengths.iter().enumerate() {
        for c in 0..k.min(channels) {
            m[c * hw + o] = 1.0;
        }
    }
    Tensor::from_vec(&[channels, height, width], m).expect("shape")
}

/// Per-image rate plans for every level, serializable as a debugging sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatePlanSidecar {
    pub image: String,
    pub levels: Vec<SidecarLevel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SidecarLevel {
    pub level: usize,
    pub height: usize,
    pub width: usize,
    pub patch: (usize, usize),
    pub quantized_lengths: Vec<usize>,
}

impl RatePlanSidecar {
    pub fn new(image: impl Into<String>, plans: &[RatePlan]) -> Self {
        Self {
            image: image.into(),
            levels: plans
                .iter()
                .enumerate()
                .map(|(i, p)| SidecarLevel {
                    level: i + 1,
                    height: p.height,
                    width: p.width,
                    patch: p.patch,
                    quantized_lengths: p.quantized_lengths.clone(),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
