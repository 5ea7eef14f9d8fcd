//! AWGN forward channel, optional noisy feedback link, power and bandwidth
//! bookkeeping.
//!
//! Conventions: network outputs are real; two consecutive real values form one
//! complex channel use. Power `P` and noise variance `sigma^2` are both per
//! real dimension, so `SNR = 10 log10(P / sigma^2)`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{HjsccError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelSpec {
    pub snr_db: f64,
    pub power: f64,
    /// `None` is a noiseless feedback link.
    pub feedback_snr_db: Option<f64>,
}

impl Default for ChannelSpec {
    fn default() -> Self {
        Self {
            snr_db: 10.0,
            power: 1.0,
            feedback_snr_db: None,
        }
    }
}

impl ChannelSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.power > 0.0) {
            return Err(HjsccError::Config(format!(
                "power budget must be positive, got {}",
                self.power
            )));
        }
        Ok(())
    }

    pub fn noise_variance(&self) -> Result<f64> {
        sigma_from_snr(self.snr_db, self.power)
    }

    pub fn with_snr(&self, snr_db: f64) -> Self {
        Self {
            snr_db,
            ..self.clone()
        }
    }
}

/// `sigma^2 = P * 10^(-snr_db / 10)`.
pub fn sigma_from_snr(snr_db: f64, power: f64) -> Result<f64> {
    if !(power > 0.0) {
        return Err(HjsccError::Domain(format!("power must be positive, got {power}")));
    }
    Ok(power * 10f64.powf(-snr_db / 10.0))
}

/// Shannon capacity `log2(1 + SNR)` in bits per complex channel use.
pub fn shannon_capacity(snr_db: f64) -> f64 {
    (1.0 + 10f64.powf(snr_db / 10.0)).log2()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PowerNormalized {
    pub symbols: Vec<f64>,
    /// Multiplier applied to the unmasked entries.
    pub scale: f64,
    /// No energy in the unmasked entries; input returned unchanged.
    pub degenerate: bool,
}

/// Scale `s` so that the mean square over unmasked entries equals `power`.
/// Masked entries are zeroed.
pub fn power_normalize(s: &[f64], mask: &[bool], power: f64) -> Result<PowerNormalized> {
    if s.len() != mask.len() {
        return Err(HjsccError::Contract(format!(
            "mask length {} does not match symbol length {}",
            mask.len(),
            s.len()
        )));
    }
    if !(power > 0.0) {
        return Err(HjsccError::Domain(format!("power must be positive, got {power}")));
    }
    let count = mask.iter().filter(|&&m| m).count();
    let energy: f64 = s.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| v * v).sum();
    if count == 0 || energy == 0.0 {
        return Ok(PowerNormalized {
            symbols: s.to_vec(),
            scale: 1.0,
            degenerate: true,
        });
    }
    let scale = (power * count as f64 / energy).sqrt();
    let symbols = s
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { v * scale } else { 0.0 })
        .collect();
    Ok(PowerNormalized {
        symbols,
        scale,
        degenerate: false,
    })
}

/// `s + n` on unmasked entries with `n ~ N(0, sigma_sq)` i.i.d.; masked
/// entries are never transmitted and come out as exactly zero.
pub fn awgn_transmit<R: Rng + ?Sized>(
    s: &[f64],
    mask: &[bool],
    sigma_sq: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if sigma_sq < 0.0 || sigma_sq.is_nan() {
        return Err(HjsccError::Domain(format!(
            "noise variance must be >= 0, got {sigma_sq}"
        )));
    }
    if s.len() != mask.len() {
        return Err(HjsccError::Contract("mask length mismatch".into()));
    }
    let sigma = sigma_sq.sqrt();
    Ok(s.iter()
        .zip(mask)
        .map(|(&v, &m)| {
            if !m {
                0.0
            } else if sigma == 0.0 {
                v
            } else {
                let n: f64 = rng.sample(StandardNormal);
                v + sigma * n
            }
        })
        .collect())
}

/// Gaussian noise samples scaled to `sigma_sq`, drawn for every entry.
pub fn gaussian_noise<R: Rng + ?Sized>(len: usize, sigma_sq: f64, rng: &mut R) -> Vec<f64> {
    let sigma = sigma_sq.max(0.0).sqrt();
    (0..len)
        .map(|_| {
            let n: f64 = rng.sample(StandardNormal);
            sigma * n
        })
        .collect()
}

/// Return path from receiver to transmitter. `None` is noiseless.
pub fn feedback_link<R: Rng + ?Sized>(
    s_tilde: &[f64],
    feedback_snr_db: Option<f64>,
    power: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    match feedback_snr_db {
        None => Ok(s_tilde.to_vec()),
        Some(snr) => {
            let var = sigma_from_snr(snr, power)?;
            let noise = gaussian_noise(s_tilde.len(), var, rng);
            Ok(s_tilde.iter().zip(noise).map(|(a, n)| a + n).collect())
        }
    }
}

/// `K / N` with `N = 3 * H * W`.
pub fn compute_cbr(total_complex_symbols: f64, height: usize, width: usize) -> f64 {
    let n = 3 * height * width;
    if n == 0 {
        0.0
    } else {
        total_complex_symbols / n as f64
    }
}

/// Bandwidth split into payload symbols and side information.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CbrBreakdown {
    pub payload: f64,
    pub side_info: f64,
    pub total: f64,
}

impl CbrBreakdown {
    /// `payload_reals` are unmasked real values (two per complex symbol);
    /// `side_symbols` are complex symbols spent on length indices.
    pub fn new(payload_reals: usize, side_symbols: f64, height: usize, width: usize) -> Self {
        let payload = compute_cbr(payload_reals as f64 / 2.0, height, width);
        let side_info = compute_cbr(side_symbols, height, width);
        Self {
            payload,
            side_info,
            total: payload + side_info,
        }
    }
}
