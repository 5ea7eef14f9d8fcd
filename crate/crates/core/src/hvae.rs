//! Hierarchical VAE backbone.
//!
//! The bottom-up path turns an image into one feature map per level. The
//! top-down path walks the levels coarse to fine, carrying a state that only
//! ever sees latents of coarser levels: at level `l` it emits the prior
//! parameters `(mu_hat, sigma_hat)` from the state alone, the posterior mean
//! `mu` from the state and the bottom-up feature, then folds the sampled `z`
//! back into the state. Running the same path on a given list of latents is
//! the image decoder.
//!
//! Posterior: `z ~ U(mu - 1/2, mu + 1/2)` during training, `round(mu)` at
//! evaluation. Prior: a Gaussian convolved with a unit-width uniform, so the
//! likelihood of `z` is the Gaussian mass of the bin `[z - 1/2, z + 1/2]`.

use hjscc_nn::graph::{sigmoid, softplus};
use hjscc_nn::{Conv2d, Graph, ParamStore, ResBlock, Tensor, Var};
use rand::Rng;

use crate::config::{ModelConfig, P_FLOOR, SIGMA_FLOOR};
use crate::error::{HjsccError, Result};

const HEAD_SHARPNESS: f64 = 32.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Unclamped mass of `N(mu_hat, sigma_hat^2) * U(-1/2, 1/2)` at `z`, i.e.
/// `Phi((z - mu_hat + 1/2) / sigma) - Phi((z - mu_hat - 1/2) / sigma)`.
///
/// Evaluated on the lower tail (the density is symmetric in `z - mu_hat`) so
/// far-out bins keep their relative precision.
pub fn bin_mass(z: f64, mu_hat: f64, sigma_hat: f64) -> f64 {
    let a = -(z - mu_hat).abs();
    normal_cdf((a + 0.5) / sigma_hat) - normal_cdf((a - 0.5) / sigma_hat)
}

/// Unit-bin probability of `z` under the prior, floored at `2^-64`.
pub fn prior_likelihood(z: f64, mu_hat: f64, sigma_hat: f64) -> Result<f64> {
    if !(sigma_hat > 0.0) {
        return Err(HjsccError::Domain(format!(
            "prior scale must be positive, got {sigma_hat}"
        )));
    }
    Ok(bin_mass(z, mu_hat, sigma_hat).max(P_FLOOR))
}

/// `-ln p(z)` and its partials with respect to `(z, mu_hat, sigma_hat)`.
/// Partials are zero where the floor is active.
pub fn neg_log_likelihood(z: f64, mu_hat: f64, sigma_hat: f64) -> (f64, [f64; 3]) {
    let p = bin_mass(z, mu_hat, sigma_hat);
    if !(p > P_FLOOR) {
        return (-P_FLOOR.ln(), [0.0; 3]);
    }
    let d = z - mu_hat;
    let u = (d + 0.5) / sigma_hat;
    let l = (d - 0.5) / sigma_hat;
    let (pu, pl) = (normal_pdf(u), normal_pdf(l));
    let dp_dd = (pu - pl) / sigma_hat;
    let dp_ds = -(u * pu - l * pl) / sigma_hat;
    (-p.ln(), [-dp_dd / p, dp_dd / p, -dp_ds / p])
}

/// Round half away from zero.
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// Draw `z` given the posterior mean.
pub fn posterior_sample<R: Rng + ?Sized>(mu: &Tensor, phase: Phase, rng: &mut R) -> Tensor {
    match phase {
        Phase::Train => {
            let noise = uniform_noise(mu.shape(), rng);
            let data = mu.data().iter().zip(noise.data()).map(|(m, u)| m + u).collect();
            Tensor::from_vec(mu.shape(), data).expect("shape")
        }
        Phase::Eval => mu.map(round_half_away),
    }
}

/// I.i.d. samples on `(-1/2, 1/2)`.
pub fn uniform_noise<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let u: f64 = rng.random::<f64>() - 0.5;
            if u > -0.5 {
                break u;
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape")
}

/// Per-level `[N, C, H, W]` tensors of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentLevel {
    pub mu: Tensor,
    pub prior_mean: Tensor,
    pub prior_std: Tensor,
    pub z: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentStack {
    pub levels: Vec<LatentLevel>,
}

/// Rate of a latent stack in nats.
#[derive(Clone, Debug, PartialEq)]
pub struct RateSummary {
    pub per_level: Vec<f64>,
    pub total: f64,
    /// Element-wise `-ln p` for each level.
    pub maps: Vec<Tensor>,
}

/// `sum_l sum_i -ln p(z_l[i] | z_<l)` with per-level and element-wise detail.
pub fn rate_nats(stack: &LatentStack) -> Result<RateSummary> {
    let mut per_level = Vec::with_capacity(stack.levels.len());
    let mut maps = Vec::with_capacity(stack.levels.len());
    for lvl in &stack.levels {
        if lvl.z.shape() != lvl.prior_mean.shape() || lvl.z.shape() != lvl.prior_std.shape() {
            return Err(HjsccError::Contract("latent and prior shapes differ".into()));
        }
        let mut map = Vec::with_capacity(lvl.z.len());
        for ((&z, &m), &s) in lvl.z.data().iter().zip(lvl.prior_mean.data()).zip(lvl.prior_std.data()) {
            map.push(-prior_likelihood(z, m, s)?.ln());
        }
        let t = Tensor::from_vec(lvl.z.shape(), map)?;
        per_level.push(t.sum());
        maps.push(t);
    }
    let total = per_level.iter().sum();
    Ok(RateSummary {
        per_level,
        total,
        maps,
    })
}

/// Graph op: element-wise `-ln p(z | mu_hat, sigma_hat)`.
pub fn nll_op(g: &mut Graph, z: Var, mu_hat: Var, sigma_hat: Var) -> Var {
    g.map_n(&[z, mu_hat, sigma_hat], |x, d| {
        let (v, grads) = neg_log_likelihood(x[0], x[1], x[2]);
        d.copy_from_slice(&grads);
        v
    })
}

/// Graph op: posterior sample. Training adds the supplied uniform noise;
/// evaluation rounds with an identity gradient.
pub fn sample_op<R: Rng + ?Sized>(g: &mut Graph, mu: Var, phase: Phase, rng: &mut R) -> Var {
    match phase {
        Phase::Train => {
            let u = uniform_noise(g.shape(mu), rng);
            let u = g.constant(u);
            g.add(mu, u)
        }
        Phase::Eval => g.map(mu, |x| (round_half_away(x), 1.0)),
    }
}

fn log2(x: usize) -> usize {
    x.trailing_zeros() as usize
}

struct Stage {
    downs: Vec<Conv2d>,
    blocks: Vec<ResBlock>,
}

struct TopDownLevel {
    prior: Conv2d,
    post_in: Conv2d,
    post_out: Conv2d,
    merge: Conv2d,
    blocks: Vec<ResBlock>,
    ups: Vec<Conv2d>,
}

/// Bottom-up and top-down networks.
pub struct Hvae {
    cfg: ModelConfig,
    stem: Conv2d,
    stages: Vec<Stage>,
    bias: Conv2d,
    levels: Vec<TopDownLevel>,
    head: Conv2d,
}

/// Top-down outputs for one level.
#[derive(Clone, Copy, Debug)]
pub struct LevelVars {
    /// State before the level's latent is folded in.
    pub state: Var,
    pub mu: Option<Var>,
    pub mu_hat: Var,
    pub sigma_hat: Var,
    pub z: Var,
    pub nll: Var,
}

pub struct TopDownVars {
    pub levels: Vec<LevelVars>,
    /// Reconstruction from the sampled latents.
    pub x_hat: Var,
}

/// Source of the latents consumed by the top-down path.
pub enum TopDownInput<'a> {
    /// Sample from the posterior given bottom-up features.
    Posterior(&'a [Var]),
    /// Prior branch only. Provided latents are used as-is; missing ones fall
    /// back to the prior mean.
    Prior(Option<&'a [Var]>),
}

impl Hvae {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let w = cfg.width;
        let l = cfg.levels();
        let finest = cfg.downsampling[l - 1];
        let stem = Conv2d::new(store, "bu.stem", 3 * finest * finest, w, 3, 1, 1.0, rng);
        let mut stages = Vec::with_capacity(l);
        for i in (0..l).rev() {
            let downs = if i + 1 < l {
                let ratio = cfg.downsampling[i] / cfg.downsampling[i + 1];
                (0..log2(ratio))
                    .map(|j| Conv2d::new(store, &format!("bu.{i}.down{j}"), w, w, 3, 2, 1.0, rng))
                    .collect()
            } else {
                Vec::new()
            };
            let blocks = (0..cfg.blocks)
                .map(|j| ResBlock::new(store, &format!("bu.{i}.block{j}"), w, rng))
                .collect();
            stages.push(Stage { downs, blocks });
        }
        let bias = Conv2d::new(store, "td.bias", 1, w, 1, 1, 1.0, rng);
        let mut levels = Vec::with_capacity(l);
        for i in 0..l {
            let c = cfg.channels[i];
            let ups = if i + 1 < l {
                let ratio = cfg.downsampling[i] / cfg.downsampling[i + 1];
                (0..log2(ratio))
                    .map(|j| Conv2d::new(store, &format!("td.{i}.up{j}"), w, w, 3, 1, 1.0, rng))
                    .collect()
            } else {
                Vec::new()
            };
            levels.push(TopDownLevel {
                prior: Conv2d::new(store, &format!("td.{i}.prior"), w, 2 * c, 3, 1, 0.5, rng),
                post_in: Conv2d::new(store, &format!("td.{i}.post_in"), 2 * w, w, 3, 1, 1.0, rng),
                post_out: Conv2d::new(store, &format!("td.{i}.post_out"), w, c, 3, 1, 3.0, rng),
                merge: Conv2d::new(store, &format!("td.{i}.merge"), c, w, 3, 1, 1.0, rng),
                blocks: (0..cfg.blocks)
                    .map(|j| ResBlock::new(store, &format!("td.{i}.block{j}"), w, rng))
                    .collect(),
                ups,
            });
        }
        let head = Conv2d::new(store, "td.head", w, 3 * finest * finest, 3, 1, 0.5, rng);
        Self {
            cfg: cfg.clone(),
            stem,
            stages,
            bias,
            levels,
            head,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Feature maps, coarse to fine, for an `[N, 3, H, W]` batch.
    pub fn bottom_up(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Vec<Var>> {
        let s = g.shape(x).to_vec();
        let div = self.cfg.divisibility();
        if s.len() != 4 || s[1] != 3 || !s[2].is_multiple_of(div) || !s[3].is_multiple_of(div) {
            return Err(HjsccError::Config(format!(
                "input {s:?} is not an [N, 3, H, W] batch with sides divisible by {div}"
            )));
        }
        let l = self.cfg.levels();
        let finest = self.cfg.downsampling[l - 1];
        let mut h = if finest > 1 { g.pixel_unshuffle(x, finest) } else { x };
        h = self.stem.forward(g, store, h);
        let mut feats = Vec::with_capacity(l);
        for stage in &self.stages {
            for d in &stage.downs {
                h = g.silu(h);
                h = d.forward(g, store, h);
            }
            for b in &stage.blocks {
                h = b.forward(g, store, h);
            }
            feats.push(h);
        }
        feats.reverse();
        Ok(feats)
    }

    /// The trainable constant that starts the top-down path.
    pub fn initial_state(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: usize,
        height: usize,
        width: usize,
    ) -> Var {
        let d = self.cfg.divisibility();
        let ones = g.constant(Tensor::full(&[batch, 1, height / d, width / d], 1.0));
        self.bias.forward(g, store, ones)
    }

    /// `(mu_hat, sigma_hat)` of level `l` from the state alone.
    pub fn prior(&self, g: &mut Graph, store: &ParamStore, l: usize, state: Var) -> (Var, Var) {
        let c = self.cfg.channels[l];
        let h = g.silu(state);
        let p = self.levels[l].prior.forward(g, store, h);
        let mean = g.slice_channels(p, 0, c);
        let raw = g.slice_channels(p, c, 2 * c);
        let sp = g.softplus(raw);
        let std = g.clamp(sp, SIGMA_FLOOR, f64::INFINITY);
        (mean, std)
    }

    pub fn posterior(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        l: usize,
        state: Var,
        feature: Var,
    ) -> Var {
        let lvl = &self.levels[l];
        let h = g.concat_channels(&[state, feature]);
        let h = g.silu(h);
        let h = lvl.post_in.forward(g, store, h);
        let h = g.silu(h);
        lvl.post_out.forward(g, store, h)
    }

    /// Fold the level-`l` latent into the state and move to the next level's
    /// resolution.
    pub fn advance(&self, g: &mut Graph, store: &ParamStore, l: usize, state: Var, z: Var) -> Var {
        let lvl = &self.levels[l];
        let m = lvl.merge.forward(g, store, z);
        let mut h = g.add(state, m);
        for b in &lvl.blocks {
            h = b.forward(g, store, h);
        }
        for up in &lvl.ups {
            h = g.upsample2x(h);
            h = up.forward(g, store, h);
        }
        h
    }

    /// Image from the final state: `h + 0.5` through a smooth clamp onto
    /// `(0, 1)`, `(softplus(k y) - softplus(k (y - 1))) / k` with `k = HEAD_SHARPNESS`.
    pub fn head(&self, g: &mut Graph, store: &ParamStore, state: Var) -> Var {
        let finest = self.cfg.downsampling[self.cfg.levels() - 1];
        let h = g.silu(state);
        let h = self.head.forward(g, store, h);
        let h = if finest > 1 { g.pixel_shuffle(h, finest) } else { h };
        g.map(h, |v| {
            let y = HEAD_SHARPNESS * (v + 0.5);
            (
                (softplus(y) - softplus(y - HEAD_SHARPNESS)) / HEAD_SHARPNESS,
                sigmoid(y) - sigmoid(y - HEAD_SHARPNESS),
            )
        })
    }

    pub fn top_down<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: TopDownInput<'_>,
        batch: usize,
        height: usize,
        width: usize,
        phase: Phase,
        rng: &mut R,
    ) -> Result<TopDownVars> {
        let l_total = self.cfg.levels();
        match &input {
            TopDownInput::Posterior(f) if f.len() != l_total => {
                return Err(HjsccError::Contract(format!(
                    "{} feature maps for {l_total} levels",
                    f.len()
                )))
            }
            TopDownInput::Prior(Some(z)) if z.len() > l_total => {
                return Err(HjsccError::Contract("too many latents".into()))
            }
            _ => {}
        }
        let mut state = self.initial_state(g, store, batch, height, width);
        let mut levels = Vec::with_capacity(l_total);
        for l in 0..l_total {
            let (mu_hat, sigma_hat) = self.prior(g, store, l, state);
            let (mu, z) = match &input {
                TopDownInput::Posterior(feats) => {
                    let mu = self.posterior(g, store, l, state, feats[l]);
                    let z = sample_op(g, mu, phase, rng);
                    (Some(mu), z)
                }
                TopDownInput::Prior(given) => {
                    let z = match given.and_then(|z| z.get(l)) {
                        Some(&z) => {
                            if g.shape(z) != g.shape(mu_hat) {
                                return Err(HjsccError::Contract(format!(
                                    "latent {l} has shape {:?}, expected {:?}",
                                    g.shape(z),
                                    g.shape(mu_hat)
                                )));
                            }
                            z
                        }
                        None => mu_hat,
                    };
                    (None, z)
                }
            };
            let nll = nll_op(g, z, mu_hat, sigma_hat);
            levels.push(LevelVars {
                state,
                mu,
                mu_hat,
                sigma_hat,
                z,
                nll,
            });
            state = self.advance(g, store, l, state, z);
        }
        let x_hat = self.head(g, store, state);
        Ok(TopDownVars { levels, x_hat })
    }

    /// Decoder: run the top-down path on given per-level latents.
    pub fn decode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        latents: &[Var],
    ) -> Result<Var> {
        let l_total = self.cfg.levels();
        if latents.len() != l_total {
            return Err(HjsccError::Contract(format!(
                "{} latents for {l_total} levels",
                latents.len()
            )));
        }
        let s0 = g.shape(latents[0]).to_vec();
        if s0.len() != 4 {
            return Err(HjsccError::Contract(format!("latent shape {s0:?} is not NCHW")));
        }
        let d = self.cfg.downsampling[0];
        let mut state = self.initial_state(g, store, s0[0], s0[2] * d, s0[3] * d);
        for (l, &z) in latents.iter().enumerate() {
            let want = self.level_shape(l, s0[0], s0[2] * d, s0[3] * d);
            if g.shape(z) != want.as_slice() {
                return Err(HjsccError::Contract(format!(
                    "latent {l} has shape {:?}, expected {want:?}",
                    g.shape(z)
                )));
            }
            state = self.advance(g, store, l, state, z);
        }
        Ok(self.head(g, store, state))
    }

    /// `[N, C_l, H / d_l, W / d_l]`
    pub fn level_shape(&self, l: usize, batch: usize, height: usize, width: usize) -> Vec<usize> {
        let d = self.cfg.downsampling[l];
        vec![batch, self.cfg.channels[l], height / d, width / d]
    }
}
