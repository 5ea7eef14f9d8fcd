//! End-to-end forward passes and loss assembly.
//!
//! Without feedback, the image is encoded once: every level's posterior mean
//! is rate matched, JSCC encoded and masked. Each level's symbols are brought
//! to unit mean square, then one power scale per image is applied across all
//! levels before the channel. The receiver rebuilds the hierarchy from
//! its estimates `mu_tilde`. The loss adds the rate of the sampled latents to
//! the distortion of both the compression branch and the transmission branch.
//!
//! With feedback, levels are sent in coarse-to-fine phases. After each phase
//! the transmitter gets the received symbols back, decodes them with its own
//! decoder replica and continues the top-down pass from those estimates, so
//! later phases are conditioned on what the receiver actually has.

use hjscc_nn::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{gaussian_noise, sigma_from_snr, CbrBreakdown, ChannelSpec};
use crate::error::{HjsccError, Result};
use crate::hvae::{nll_op, sample_op, Phase, TopDownInput};
use crate::model::HjsccModel;
use crate::rate_match::RatePlan;
use crate::source::ImageTensor;

/// Upper bound reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// Peak signal-to-noise ratio with peak 1.0, capped at 100 dB.
pub fn psnr(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    if x.tensor().shape() != y.tensor().shape() {
        return Err(HjsccError::Contract(format!(
            "psnr of {:?} against {:?}",
            x.tensor().shape(),
            y.tensor().shape()
        )));
    }
    let n = x.data().len().max(1) as f64;
    let mse = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    Ok(psnr_from_mse(mse))
}

fn check_nonneg(vals: &[(&str, f64)]) -> Result<()> {
    for (name, v) in vals {
        if !(*v >= 0.0) {
            return Err(HjsccError::Contract(format!("{name} must be >= 0, got {v}")));
        }
    }
    Ok(())
}

/// `alpha * rate + lambda * (d_compress + d_transmit)`.
pub fn loss_no_feedback(
    rate: f64,
    d_compress: f64,
    d_transmit: f64,
    lambda: f64,
    alpha: f64,
) -> Result<f64> {
    check_nonneg(&[
        ("rate", rate),
        ("d_compress", d_compress),
        ("d_transmit", d_transmit),
        ("lambda", lambda),
        ("alpha", alpha),
    ])?;
    Ok(alpha * rate + lambda * (d_compress + d_transmit))
}

/// `rate + lambda * d_transmit`. The `-ln beta` offset carries no gradient
/// and stays out of the optimised total.
pub fn loss_feedback(rate: f64, d_transmit: f64, lambda: f64, beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(HjsccError::Domain(format!("beta must be positive, got {beta}")));
    }
    Ok(rate + lambda * d_transmit)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Latent rate in nats per source dimension.
    pub rate_term: f64,
    /// Compression-branch MSE; zero in the feedback variant.
    pub d_compress: f64,
    pub d_transmit: f64,
    pub total: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Per-image outcome of one transmission.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransmissionReport {
    pub snr_db: f64,
    pub alpha: f64,
    pub feedback: bool,
    pub height: usize,
    pub width: usize,
    /// PSNR of the received reconstruction over the original extent.
    pub psnr: f64,
    /// PSNR of the compression-branch reconstruction, when there is one.
    pub psnr_compress: Option<f64>,
    pub cbr: CbrBreakdown,
    pub level_payload_cbr: Vec<f64>,
    /// Rate of the sampled latents in nats; in the feedback variant this
    /// includes the `-L ln beta` offset.
    pub rate_nats: f64,
    pub payload_reals: usize,
    pub side_info_symbols: f64,
    pub plans: Vec<RatePlan>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    NoFeedback,
    /// Phased transmission with live feedback conditioning.
    Feedback,
    /// Feedback objective, but the transmitter ignores the returned symbols
    /// and conditions on its own latents instead.
    FeedbackWithheld,
}

#[derive(Clone, Debug)]
pub struct ForwardOptions {
    pub phase: Phase,
    pub alpha: f64,
    pub channel: ChannelSpec,
    pub mode: Mode,
    /// `false` sends every level at full length with no side information.
    pub rate_matching: bool,
    /// Frozen plans, indexed `[level][image]`, used instead of recomputing
    /// them from the current likelihoods.
    pub plans: Option<Vec<Vec<RatePlan>>>,
    /// Original image sizes before padding, for PSNR and CBR.
    pub extents: Option<Vec<(usize, usize)>>,
    /// Record gradients.
    pub grad: bool,
}

impl ForwardOptions {
    pub fn new(phase: Phase, alpha: f64, channel: ChannelSpec, mode: Mode) -> Self {
        Self {
            phase,
            alpha,
            channel,
            mode,
            rate_matching: true,
            plans: None,
            extents: None,
            grad: phase == Phase::Train,
        }
    }
}

/// Independent random streams for posterior noise, channel noise and
/// feedback noise.
#[derive(Clone, Debug)]
pub struct NoiseStreams {
    pub latent: ChaCha8Rng,
    pub channel: ChaCha8Rng,
    pub feedback: ChaCha8Rng,
}

impl NoiseStreams {
    pub fn new(seed: u64) -> Self {
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        Self {
            latent: stream(1),
            channel: stream(2),
            feedback: stream(3),
        }
    }
}

/// Graph handles of one level.
#[derive(Clone, Debug)]
pub struct LevelTrace {
    pub mu: Var,
    pub mu_hat: Var,
    pub sigma_hat: Var,
    pub z: Var,
    pub nll: Var,
    /// Encoder output before masking.
    pub r: Var,
    /// Masked, power-normalised symbols.
    pub s: Var,
    pub s_tilde: Var,
    pub mu_tilde: Var,
    pub plans: Vec<RatePlan>,
}

pub struct ForwardOutput {
    pub graph: Graph,
    pub loss: Var,
    /// Sum of `-ln p` over all latents and images.
    pub rate: Var,
    pub d_compress: Option<Var>,
    pub d_transmit: Var,
    pub x_hat: Option<Var>,
    pub x_hat_h: Var,
    pub levels: Vec<LevelTrace>,
    pub breakdown: LossBreakdown,
    pub reports: Vec<TransmissionReport>,
}

impl ForwardOutput {
    /// Received reconstruction of image `n`, cropped to its original extent.
    pub fn reconstruction(&self, n: usize) -> Result<ImageTensor> {
        let full = ImageTensor::from_tensor(self.graph.value(self.x_hat_h).select(n))?;
        match self.reports.get(n) {
            Some(r) => full.crop(0, 0, r.height, r.width),
            None => Ok(full),
        }
    }
}

fn batch_tensor(images: &[ImageTensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| HjsccError::Contract("empty batch".into()))?;
    if images
        .iter()
        .any(|i| i.height() != first.height() || i.width() != first.width())
    {
        return Err(HjsccError::Contract("batch images differ in size".into()));
    }
    let t = ImageTensor::batch(images)?;
    Ok(t.reshape(&[images.len(), 3, first.height(), first.width()])?)
}

struct LevelMasks {
    plans: Vec<RatePlan>,
    mask: Tensor,
    real: Tensor,
    merged: Tensor,
    quantized: Tensor,
}

fn stack_maps(maps: Vec<Tensor>, h: usize, w: usize) -> Result<Tensor> {
    let n = maps.len();
    Ok(Tensor::stack(&maps)?.reshape(&[n, 1, h, w])?)
}

fn level_masks(
    model: &HjsccModel,
    opts: &ForwardOptions,
    level: usize,
    nll: &Tensor,
) -> Result<LevelMasks> {
    let s = nll.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let options = &model.option_sets()[level];
    let n_q = model.config.rate.n_q;
    let plans = match &opts.plans {
        Some(p) => {
            let p = p
                .get(level)
                .ok_or_else(|| HjsccError::Contract(format!("no frozen plan for level {level}")))?;
            if p.len() != n || p.iter().any(|p| (p.channels, p.height, p.width) != (c, h, w)) {
                return Err(HjsccError::Contract("frozen plans do not match the batch".into()));
            }
            p.clone()
        }
        None if !opts.rate_matching => (0..n).map(|_| RatePlan::full(c, h, w, options, n_q)).collect(),
        None => (0..n)
            .map(|i| RatePlan::build(&nll.select(i), opts.alpha, options, model.config.rate.patch, n_q))
            .collect::<Result<Vec<_>>>()?,
    };
    let mask = Tensor::stack(&plans.iter().map(|p| p.mask_tensor()).collect::<Vec<_>>())?
        .reshape(&[n, c, h, w])?;
    let real = stack_maps(plans.iter().map(|p| p.real_map()).collect(), h, w)?;
    let merged = stack_maps(plans.iter().map(|p| p.merged_map()).collect(), h, w)?;
    let quantized = stack_maps(plans.iter().map(|p| p.quantized_map()).collect(), h, w)?;
    Ok(LevelMasks {
        plans,
        mask,
        real,
        merged,
        quantized,
    })
}

/// Scale `syms` jointly so each image's mean square over unmasked entries is
/// `power`. `counts[n]` is the number of unmasked reals of image `n`.
fn normalize_power(g: &mut Graph, syms: &[Var], counts: &[f64], power: f64) -> Vec<Var> {
    let mut energy: Option<Var> = None;
    for &s in syms {
        let sq = g.square(s);
        let e = g.sum_per_sample(sq);
        energy = Some(match energy {
            Some(acc) => g.add(acc, e),
            None => e,
        });
    }
    let energy = energy.expect("at least one level");
    let k = g.constant(Tensor::from_vec(&[counts.len()], counts.to_vec()).expect("shape"));
    let scale = g.map_n(&[energy, k], |x, d| {
        d[1] = 0.0;
        if x[0] > 0.0 && x[1] > 0.0 {
            let s = (power * x[1] / x[0]).sqrt();
            d[0] = -0.5 * s / x[0];
            s
        } else {
            d[0] = 0.0;
            1.0
        }
    });
    syms.iter().map(|&s| g.mul_per_sample(s, scale)).collect()
}

fn masked_noise(mask: &Tensor, sigma_sq: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = gaussian_noise(mask.len(), sigma_sq, rng);
    let data = n.iter().zip(mask.data()).map(|(a, m)| a * m).collect();
    Tensor::from_vec(mask.shape(), data).expect("shape")
}

fn payload_counts(masks: &[&Tensor]) -> Vec<f64> {
    let n = masks[0].batch();
    (0..n)
        .map(|i| masks.iter().map(|m| m.sample(i).iter().sum::<f64>()).sum())
        .collect()
}

/// Runs one batch through the pipeline selected by `opts.mode`.
pub fn forward(
    model: &HjsccModel,
    images: &[ImageTensor],
    opts: &ForwardOptions,
    noise: &mut NoiseStreams,
) -> Result<ForwardOutput> {
    if !(opts.alpha > 0.0) {
        return Err(HjsccError::Domain(format!("alpha must be positive, got {}", opts.alpha)));
    }
    opts.channel.validate()?;
    let x_t = batch_tensor(images)?;
    let (n, h, w) = (images.len(), images[0].height(), images[0].width());
    let mut g = if opts.grad { Graph::new() } else { Graph::inference() };
    let x = g.constant(x_t);
    let feats = model.hvae.bottom_up(&mut g, &model.params, x)?;
    let sigma_sq = opts.channel.noise_variance()?;
    let use_attention = model.config.model.rate_attention;
    let store = &model.params;
    let levels_n = model.levels();

    let mut levels = Vec::with_capacity(levels_n);
    let x_hat;
    let x_hat_h;
    match opts.mode {
        Mode::NoFeedback | Mode::FeedbackWithheld => {
            let td = model.hvae.top_down(
                &mut g,
                store,
                TopDownInput::Posterior(&feats),
                n,
                h,
                w,
                opts.phase,
                &mut noise.latent,
            )?;
            x_hat = Some(td.x_hat);
            let mut masks = Vec::with_capacity(levels_n);
            let mut rs = Vec::with_capacity(levels_n);
            let mut ss = Vec::with_capacity(levels_n);
            for (l, lv) in td.levels.iter().enumerate() {
                let lm = level_masks(model, opts, l, g.value(lv.nll))?;
                let lengths = if use_attention {
                    Some((g.constant(lm.real.clone()), g.constant(lm.merged.clone())))
                } else {
                    None
                };
                let mu = lv.mu.expect("posterior");
                let r = model.jscc.encoders[l].forward(
                    &mut g,
                    store,
                    mu,
                    lv.mu_hat,
                    lv.sigma_hat,
                    lengths,
                    None,
                );
                let m = g.constant(lm.mask.clone());
                rs.push(r);
                let masked = g.mul(r, m);
                let counts = payload_counts(&[&lm.mask]);
                ss.push(normalize_power(&mut g, &[masked], &counts, 1.0)[0]);
                masks.push(lm);
            }
            let counts = payload_counts(&masks.iter().map(|m| &m.mask).collect::<Vec<_>>());
            let normed = normalize_power(&mut g, &ss, &counts, opts.channel.power);
            let mut state = model.hvae.initial_state(&mut g, store, n, h, w);
            for (l, lm) in masks.into_iter().enumerate() {
                let nz = g.constant(masked_noise(&lm.mask, sigma_sq, &mut noise.channel));
                let s_tilde = g.add(normed[l], nz);
                let qmap = g.constant(lm.quantized.clone());
                let mu_tilde = model.receive(&mut g, l, s_tilde, qmap, state);
                state = model.hvae.advance(&mut g, store, l, state, mu_tilde);
                let lv = td.levels[l];
                levels.push(LevelTrace {
                    mu: lv.mu.expect("posterior"),
                    mu_hat: lv.mu_hat,
                    sigma_hat: lv.sigma_hat,
                    z: lv.z,
                    nll: lv.nll,
                    r: rs[l],
                    s: normed[l],
                    s_tilde,
                    mu_tilde,
                    plans: lm.plans,
                });
            }
            x_hat_h = model.hvae.head(&mut g, store, state);
        }
        Mode::Feedback => {
            x_hat = None;
            let fb_var = match opts.channel.feedback_snr_db {
                Some(snr) => Some(sigma_from_snr(snr, opts.channel.power)?),
                None => None,
            };
            let mut tx = model.hvae.initial_state(&mut g, store, n, h, w);
            let mut rx = tx;
            for l in 0..levels_n {
                let (mu_hat, sigma_hat) = model.hvae.prior(&mut g, store, l, tx);
                let mu = model.hvae.posterior(&mut g, store, l, tx, feats[l]);
                let z = sample_op(&mut g, mu, opts.phase, &mut noise.latent);
                let nll = nll_op(&mut g, z, mu_hat, sigma_hat);
                let lm = level_masks(model, opts, l, g.value(nll))?;
                let lengths = if use_attention {
                    Some((g.constant(lm.real.clone()), g.constant(lm.merged.clone())))
                } else {
                    None
                };
                let r = model.jscc.encoders[l].forward(&mut g, store, mu, mu_hat, sigma_hat, lengths, Some(tx));
                let m = g.constant(lm.mask.clone());
                let masked = g.mul(r, m);
                let counts = payload_counts(&[&lm.mask]);
                let s = normalize_power(&mut g, &[masked], &counts, opts.channel.power)[0];
                let nz = g.constant(masked_noise(&lm.mask, sigma_sq, &mut noise.channel));
                let s_tilde = g.add(s, nz);
                let qmap = g.constant(lm.quantized.clone());
                let mu_tilde = model.receive(&mut g, l, s_tilde, qmap, rx);
                let rx_next = model.hvae.advance(&mut g, store, l, rx, mu_tilde);
                tx = match fb_var {
                    None => rx_next,
                    Some(v) => {
                        let fb = gaussian_noise(lm.mask.len(), v, &mut noise.feedback);
                        let fb = g.constant(Tensor::from_vec(lm.mask.shape(), fb)?);
                        let back = g.add(s_tilde, fb);
                        let back = g.mul(back, m);
                        let replica = model.receive(&mut g, l, back, qmap, tx);
                        model.hvae.advance(&mut g, store, l, tx, replica)
                    }
                };
                rx = rx_next;
                levels.push(LevelTrace {
                    mu,
                    mu_hat,
                    sigma_hat,
                    z,
                    nll,
                    r,
                    s,
                    s_tilde,
                    mu_tilde,
                    plans: lm.plans,
                });
            }
            x_hat_h = model.hvae.head(&mut g, store, rx);
        }
    }

    // loss
    let dims = (3 * h * w * n) as f64;
    let mut rate_per_image: Option<Var> = None;
    for lv in &levels {
        let r = g.sum_per_sample(lv.nll);
        rate_per_image = Some(match rate_per_image {
            Some(acc) => g.add(acc, r),
            None => r,
        });
    }
    let rate_per_image = rate_per_image.expect("levels");
    let rate = g.sum(rate_per_image);
    let rate_term = g.scale(rate, 1.0 / dims);
    let d_transmit = g.mse(x_hat_h, x);
    let lambda = model.config.loss.lambda;
    let beta = model.config.loss.beta;
    let (loss, d_compress) = match opts.mode {
        Mode::NoFeedback => {
            let d_c = g.mse(x_hat.expect("compression branch"), x);
            let d = g.add(d_c, d_transmit);
            let a = g.scale(rate_term, opts.alpha);
            let b = g.scale(d, lambda);
            (g.add(a, b), Some(d_c))
        }
        Mode::Feedback | Mode::FeedbackWithheld => {
            let b = g.scale(d_transmit, lambda);
            (g.add(rate_term, b), None)
        }
    };
    let rt = g.value(rate_term).data()[0];
    let dt = g.value(d_transmit).data()[0];
    let dc = d_compress.map(|v| g.value(v).data()[0]);
    let total = match opts.mode {
        Mode::NoFeedback => loss_no_feedback(rt, dc.unwrap_or(0.0), dt, lambda, opts.alpha),
        _ => loss_feedback(rt, dt, lambda, beta),
    };
    let breakdown = LossBreakdown {
        rate_term: rt,
        d_compress: dc.unwrap_or(0.0),
        d_transmit: dt,
        total: total.unwrap_or(f64::NAN),
        lambda,
        alpha: opts.alpha,
        beta,
    };

    // per-image reports
    let feedback = opts.mode != Mode::NoFeedback;
    let capacity = model.config.rate.capacity(opts.channel.snr_db);
    let mut reports = Vec::with_capacity(n);
    for i in 0..n {
        let (eh, ew) = opts
            .extents
            .as_ref()
            .and_then(|e| e.get(i).copied())
            .unwrap_or((h, w));
        let orig = images[i].crop(0, 0, eh, ew)?;
        let rec = ImageTensor::from_tensor(g.value(x_hat_h).select(i))?.crop(0, 0, eh, ew)?;
        let psnr_compress = match (opts.mode, x_hat) {
            (Mode::NoFeedback, Some(xh)) => {
                let c = ImageTensor::from_tensor(g.value(xh).select(i))?.crop(0, 0, eh, ew)?;
                Some(psnr(&orig, &c)?)
            }
            _ => None,
        };
        let plans: Vec<RatePlan> = levels.iter().map(|l| l.plans[i].clone()).collect();
        let payload_reals: usize = plans.iter().map(|p| p.payload_reals()).sum();
        let side_info_symbols = if opts.rate_matching {
            plans
                .iter()
                .map(|p| p.side_info_symbols(capacity))
                .sum::<Result<f64>>()?
        } else {
            0.0
        };
        let level_payload_cbr = plans
            .iter()
            .map(|p| CbrBreakdown::new(p.payload_reals(), 0.0, eh, ew).payload)
            .collect();
        let mut rate_nats = g.value(rate_per_image).data()[i];
        if feedback {
            rate_nats -= levels_n as f64 * beta.ln();
        }
        reports.push(TransmissionReport {
            snr_db: opts.channel.snr_db,
            alpha: opts.alpha,
            feedback,
            height: eh,
            width: ew,
            psnr: psnr(&orig, &rec)?,
            psnr_compress,
            cbr: CbrBreakdown::new(payload_reals, side_info_symbols, eh, ew),
            level_payload_cbr,
            rate_nats,
            payload_reals,
            side_info_symbols,
            plans,
        });
    }

    Ok(ForwardOutput {
        graph: g,
        loss,
        rate,
        d_compress,
        d_transmit,
        x_hat,
        x_hat_h,
        levels,
        breakdown,
        reports,
    })
}

/// `ln N(s_tilde; s, sigma_sq)` summed over the `sent` transmitted reals.
/// Silent entries have `s_tilde == s == 0` and contribute only through the
/// normaliser, which is why `sent` is passed explicitly.
pub fn channel_log_density(g: &mut Graph, s: Var, s_tilde: Var, sigma_sq: f64, sent: usize) -> Result<Var> {
    if !(sigma_sq > 0.0) {
        return Err(HjsccError::Domain(format!("noise variance must be positive, got {sigma_sq}")));
    }
    let d = g.sub(s_tilde, s);
    let sq = g.square(d);
    let e = g.sum(sq);
    let e = g.scale(e, -0.5 / sigma_sq);
    Ok(g.add_scalar(e, -0.5 * sent as f64 * (2.0 * std::f64::consts::PI * sigma_sq).ln()))
}

pub fn forward_no_feedback(
    model: &HjsccModel,
    images: &[ImageTensor],
    channel: &ChannelSpec,
    alpha: f64,
    phase: Phase,
    noise: &mut NoiseStreams,
) -> Result<ForwardOutput> {
    let opts = ForwardOptions::new(phase, alpha, channel.clone(), Mode::NoFeedback);
    forward(model, images, &opts, noise)
}

pub fn forward_feedback(
    model: &HjsccModel,
    images: &[ImageTensor],
    channel: &ChannelSpec,
    alpha: f64,
    phase: Phase,
    noise: &mut NoiseStreams,
) -> Result<ForwardOutput> {
    let opts = ForwardOptions::new(phase, alpha, channel.clone(), Mode::Feedback);
    forward(model, images, &opts, noise)
}

/// Transmit one image at evaluation settings, padding it to the model's
/// divisibility first. PSNR and CBR refer to the unpadded image.
pub fn transmit_image(
    model: &HjsccModel,
    image: &ImageTensor,
    channel: &ChannelSpec,
    alpha: f64,
    feedback: bool,
    seed: u64,
) -> Result<TransmissionReport> {
    let padded = image.pad_to_multiple(model.config.model.divisibility());
    let mode = if feedback { Mode::Feedback } else { Mode::NoFeedback };
    let mut opts = ForwardOptions::new(Phase::Eval, alpha, channel.clone(), mode);
    opts.extents = Some(vec![(image.height(), image.width())]);
    let mut noise = NoiseStreams::new(seed);
    let out = forward(model, std::slice::from_ref(&padded), &opts, &mut noise)?;
    Ok(out.reports.into_iter().next().expect("one report"))
}
