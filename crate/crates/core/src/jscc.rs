//! Per-level JSCC encoder and decoder with optional rate attention.
//!
//! The encoder sees the posterior mean together with the prior parameters of
//! its level and emits `C_l` channel symbols per position. Rate attention
//! modulates the encoder features with the per-position real and merged
//! lengths, so the leading channels carry what matters most at each length.
//! The decoder sees the zero-filled received symbols, the length map and the
//! receiver's own top-down state.

use hjscc_nn::{Conv2d, Graph, ParamStore, ResBlock, Var};
use rand::Rng;

use crate::config::ModelConfig;

pub struct RateAttention {
    lengths: Conv2d,
    fuse: Conv2d,
    width: usize,
}

impl RateAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Self {
        Self {
            lengths: Conv2d::new(store, &format!("{name}.lengths"), 2, width, 1, 1, 1.0, rng),
            // zero init: a fresh module is the identity
            fuse: Conv2d::new(store, &format!("{name}.fuse"), 2 * width, 2 * width, 1, 1, 0.0, rng),
            width,
        }
    }

    /// `feat * (1 + tanh(gamma)) + beta`, where `(gamma, beta)` come from the
    /// features and both length maps (`[N, 1, H, W]`, divided by `C`).
    /// Lengths beyond `C` all mean "send everything" and are clipped to 1.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        feat: Var,
        real: Var,
        merged: Var,
    ) -> Var {
        let real = g.clamp(real, 0.0, 1.0);
        let merged = g.clamp(merged, 0.0, 1.0);
        let l = g.concat_channels(&[real, merged]);
        let h = self.lengths.forward(g, store, l);
        let h = g.silu(h);
        let joint = g.concat_channels(&[h, feat]);
        let m = self.fuse.forward(g, store, joint);
        let gamma = g.slice_channels(m, 0, self.width);
        let gamma = g.map(gamma, |v| {
            let t = v.tanh();
            (t, 1.0 - t * t)
        });
        let beta = g.slice_channels(m, self.width, 2 * self.width);
        let fg = g.mul(feat, gamma);
        let out = g.add(feat, fg);
        g.add(out, beta)
    }
}

pub struct JsccEncoder {
    input: Conv2d,
    pre: Vec<ResBlock>,
    attention: RateAttention,
    post: Vec<ResBlock>,
    output: Conv2d,
}

impl JsccEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        let w = cfg.width;
        let n_pre = cfg.jscc_blocks.div_ceil(2);
        Self {
            input: Conv2d::new(store, &format!("{name}.in"), 3 * channels, w, 3, 1, 1.0, rng),
            pre: (0..n_pre)
                .map(|i| ResBlock::new(store, &format!("{name}.pre{i}"), w, rng))
                .collect(),
            attention: RateAttention::new(store, &format!("{name}.ra"), w, rng),
            post: (n_pre..cfg.jscc_blocks)
                .map(|i| ResBlock::new(store, &format!("{name}.post{i}"), w, rng))
                .collect(),
            output: Conv2d::new(store, &format!("{name}.out"), w, channels, 3, 1, 1.0, rng),
        }
    }

    /// `r_l` before masking. `lengths` is `(real, merged)`; `None` skips the
    /// rate attention module.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mu: Var,
        mu_hat: Var,
        sigma_hat: Var,
        lengths: Option<(Var, Var)>,
        context: Option<Var>,
    ) -> Var {
        let x = g.concat_channels(&[mu, mu_hat, sigma_hat]);
        let mut h = self.input.forward(g, store, x);
        if let Some(c) = context {
            h = g.add(h, c);
        }
        for b in &self.pre {
            h = b.forward(g, store, h);
        }
        if let Some((real, merged)) = lengths {
            h = self.attention.forward(g, store, h, real, merged);
        }
        for b in &self.post {
            h = b.forward(g, store, h);
        }
        let h = g.silu(h);
        self.output.forward(g, store, h)
    }
}

pub struct JsccDecoder {
    input: Conv2d,
    blocks: Vec<ResBlock>,
    output: Conv2d,
}

impl JsccDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        let w = cfg.width;
        Self {
            input: Conv2d::new(store, &format!("{name}.in"), channels + 1, w, 3, 1, 1.0, rng),
            blocks: (0..cfg.jscc_blocks)
                .map(|i| ResBlock::new(store, &format!("{name}.block{i}"), w, rng))
                .collect(),
            output: Conv2d::new(store, &format!("{name}.out"), w, channels, 3, 1, 0.1, rng),
        }
    }

    /// Correction to the receiver's prior mean from the zero-filled symbols,
    /// the quantized length map and the receiver state.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        s_tilde: Var,
        length_map: Var,
        context: Var,
    ) -> Var {
        let x = g.concat_channels(&[s_tilde, length_map]);
        let h = self.input.forward(g, store, x);
        let mut h = g.add(h, context);
        for b in &self.blocks {
            h = b.forward(g, store, h);
        }
        let h = g.silu(h);
        self.output.forward(g, store, h)
    }
}

/// Encoder and decoder for every level.
pub struct Jscc {
    pub encoders: Vec<JsccEncoder>,
    pub decoders: Vec<JsccDecoder>,
}

impl Jscc {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let mut encoders = Vec::new();
        let mut decoders = Vec::new();
        for (l, &c) in cfg.channels.iter().enumerate() {
            encoders.push(JsccEncoder::new(store, &format!("enc.{l}"), cfg, c, rng));
            decoders.push(JsccDecoder::new(store, &format!("dec.{l}"), cfg, c, rng));
        }
        Self { encoders, decoders }
    }
}
