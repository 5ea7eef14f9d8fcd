//! Parameters and networks of a full model, with tensor-level entry points
//! for each stage.

use hjscc_nn::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{HjsccError, Result};
use crate::hvae::{Hvae, LatentLevel, LatentStack, Phase, TopDownInput};
use crate::jscc::Jscc;
use crate::rate_match::{lengths_to_mask, OptionSet, RatePlan};
use crate::source::ImageTensor;

pub struct HjsccModel {
    pub config: RunConfig,
    pub params: ParamStore,
    pub hvae: Hvae,
    pub jscc: Jscc,
    option_sets: Vec<OptionSet>,
}

impl HjsccModel {
    /// Fresh weights drawn from `config.train.seed`.
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let mut params = ParamStore::new();
        let hvae = Hvae::new(&config.model, &mut params, &mut rng);
        let jscc = Jscc::new(&config.model, &mut params, &mut rng);
        Ok(Self {
            option_sets: config.rate.option_sets(&config.model)?,
            config: config.clone(),
            params,
            hvae,
            jscc,
        })
    }

    pub fn option_sets(&self) -> &[OptionSet] {
        &self.option_sets
    }

    pub fn levels(&self) -> usize {
        self.config.model.levels()
    }

    fn image_var(&self, g: &mut Graph, x: &ImageTensor) -> Result<hjscc_nn::Var> {
        x.check_divisible(self.config.model.divisibility())?;
        let t = x.tensor().clone().reshape(&[1, 3, x.height(), x.width()])?;
        Ok(g.constant(t))
    }

    /// Bottom-up feature maps, coarse to fine, each `[1, width, h_l, w_l]`.
    pub fn bottom_up(&self, x: &ImageTensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::inference();
        let xv = self.image_var(&mut g, x)?;
        let f = self.hvae.bottom_up(&mut g, &self.params, xv)?;
        Ok(f.iter().map(|&v| g.value(v).clone()).collect())
    }

    /// Posterior pass over one image.
    pub fn top_down<R: Rng + ?Sized>(
        &self,
        x: &ImageTensor,
        phase: Phase,
        rng: &mut R,
    ) -> Result<LatentStack> {
        let mut g = Graph::inference();
        let xv = self.image_var(&mut g, x)?;
        let feats = self.hvae.bottom_up(&mut g, &self.params, xv)?;
        let td = self.hvae.top_down(
            &mut g,
            &self.params,
            TopDownInput::Posterior(&feats),
            1,
            x.height(),
            x.width(),
            phase,
            rng,
        )?;
        Ok(LatentStack {
            levels: td
                .levels
                .iter()
                .map(|l| LatentLevel {
                    mu: g.value(l.mu.expect("posterior")).clone(),
                    prior_mean: g.value(l.mu_hat).clone(),
                    prior_std: g.value(l.sigma_hat).clone(),
                    z: g.value(l.z).clone(),
                })
                .collect(),
        })
    }

    /// Prior-only pass for an `height x width` image. Given latents are
    /// teacher-forced; the rest take the prior mean.
    pub fn generate(&self, height: usize, width: usize, latents: Option<&[Tensor]>) -> Result<LatentStack> {
        let mut g = Graph::inference();
        let given: Option<Vec<_>> = latents.map(|zs| zs.iter().map(|z| g.constant(z.clone())).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let td = self.hvae.top_down(
            &mut g,
            &self.params,
            TopDownInput::Prior(given.as_deref()),
            1,
            height,
            width,
            Phase::Eval,
            &mut rng,
        )?;
        Ok(LatentStack {
            levels: td
                .levels
                .iter()
                .map(|l| LatentLevel {
                    mu: g.value(l.z).clone(),
                    prior_mean: g.value(l.mu_hat).clone(),
                    prior_std: g.value(l.sigma_hat).clone(),
                    z: g.value(l.z).clone(),
                })
                .collect(),
        })
    }

    /// Image from per-level `[1, C_l, h_l, w_l]` latents.
    pub fn decode_image(&self, latents: &[Tensor]) -> Result<ImageTensor> {
        let mut g = Graph::inference();
        let vars: Vec<_> = latents.iter().map(|z| g.constant(z.clone())).collect();
        let x = self.hvae.decode(&mut g, &self.params, &vars)?;
        ImageTensor::from_tensor(g.value(x).clone())
    }

    fn check_level(&self, level: usize, t: &Tensor, what: &str) -> Result<()> {
        if level >= self.levels() {
            return Err(HjsccError::Contract(format!("level {level} out of range")));
        }
        let c = self.config.model.channels[level];
        match t.shape() {
            [_, ch, _, _] if *ch == c => Ok(()),
            s => Err(HjsccError::Contract(format!(
                "{what} has shape {s:?}, expected [N, {c}, H, W]"
            ))),
        }
    }

    /// JSCC encoder output `r_l` (unmasked, unnormalised) for one level.
    /// `plan` feeds rate attention; `None` runs the encoder without it.
    pub fn encode_layer(
        &self,
        level: usize,
        mu: &Tensor,
        prior_mean: &Tensor,
        prior_std: &Tensor,
        plan: Option<&RatePlan>,
        context: Option<&Tensor>,
    ) -> Result<Tensor> {
        self.check_level(level, mu, "posterior mean")?;
        if prior_mean.shape() != mu.shape() || prior_std.shape() != mu.shape() {
            return Err(HjsccError::Contract("prior parameters do not match the latent".into()));
        }
        let mut g = Graph::inference();
        let m = g.constant(mu.clone());
        let mh = g.constant(prior_mean.clone());
        let sh = g.constant(prior_std.clone());
        let lengths = match plan {
            Some(p) if self.config.model.rate_attention => {
                let s = [1, 1, p.height, p.width];
                let real = g.constant(p.real_map().reshape(&s)?);
                let merged = g.constant(p.merged_map().reshape(&s)?);
                Some((real, merged))
            }
            _ => None,
        };
        let ctx = context.map(|c| g.constant(c.clone()));
        let r = self.jscc.encoders[level].forward(&mut g, &self.params, m, mh, sh, lengths, ctx);
        Ok(g.value(r).clone())
    }

    /// Receiver estimate `mu_tilde_l` given the receiver state `context`.
    /// Entries beyond each position's length are zero-filled before decoding.
    pub fn decode_layer(
        &self,
        level: usize,
        s_tilde: &Tensor,
        lengths: &[usize],
        context: &Tensor,
    ) -> Result<Tensor> {
        self.check_level(level, s_tilde, "received symbols")?;
        let s = s_tilde.shape();
        let (c, h, w) = (s[1], s[2], s[3]);
        if s[0] != 1 || lengths.len() != h * w {
            return Err(HjsccError::Contract(format!(
                "{} lengths for a {h}x{w} grid",
                lengths.len()
            )));
        }
        let opts = &self.option_sets[level];
        if let Some(k) = lengths.iter().find(|&&k| !opts.contains(k)) {
            return Err(HjsccError::Contract(format!("length {k} is not in the option set")));
        }
        let mask = lengths_to_mask(lengths, c, h, w);
        let data = s_tilde.data().iter().zip(mask.data()).map(|(a, m)| a * m).collect();
        let mut g = Graph::inference();
        let sv = g.constant(Tensor::from_vec(s, data)?);
        let lmap: Vec<f64> = lengths.iter().map(|&k| k as f64 / c as f64).collect();
        let lv = g.constant(Tensor::from_vec(&[1, 1, h, w], lmap)?);
        let ctx = g.constant(context.clone());
        let out = self.receive(&mut g, level, sv, lv, ctx);
        Ok(g.value(out).clone())
    }

    /// Receiver estimate of level `l`: the prior mean at the receiver state
    /// plus the decoder's correction from the received symbols.
    pub fn receive(&self, g: &mut Graph, l: usize, s_tilde: Var, length_map: Var, state: Var) -> Var {
        let (prior_mean, _) = self.hvae.prior(g, &self.params, l, state);
        let d = self.jscc.decoders[l].forward(g, &self.params, s_tilde, length_map, state);
        g.add(prior_mean, d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> HjsccModel {
        let mut cfg = RunConfig::default();
        cfg.model.channels = vec![4, 4];
        cfg.model.downsampling = vec![4, 2];
        cfg.model.width = 8;
        HjsccModel::new(&cfg).unwrap()
    }

    #[test]
    fn same_seed_same_weights() {
        let (a, b) = (model(), model());
        assert!(a.params.iter().zip(b.params.iter()).all(|(x, y)| x.2 == y.2));
    }

    #[test]
    fn layer_stages_round_trip_shapes() {
        let m = model();
        let x = crate::harness::synth::synth_image(3, 8, 16);
        let stack = m.top_down(&x, Phase::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(stack.levels[0].mu.shape(), &[1, 4, 2, 4]);
        assert_eq!(stack.levels[1].mu.shape(), &[1, 4, 4, 8]);
        let lv = &stack.levels[1];
        let r = m.encode_layer(1, &lv.mu, &lv.prior_mean, &lv.prior_std, None, None).unwrap();
        assert_eq!(r.shape(), lv.mu.shape());
        let img = m.decode_image(&stack.levels.iter().map(|l| l.z.clone()).collect::<Vec<_>>()).unwrap();
        assert_eq!((img.height(), img.width()), (8, 16));
    }

    #[test]
    fn decode_layer_checks_its_contract() {
        let m = model();
        let s = Tensor::zeros(&[1, 4, 2, 2]);
        let ctx = Tensor::zeros(&[1, 8, 2, 2]);
        assert!(m.decode_layer(0, &s, &[4, 4, 4, 4], &ctx).is_ok());
        assert!(m.decode_layer(0, &s, &[4, 4, 4], &ctx).is_err());
        assert!(m.decode_layer(0, &s, &[4, 4, 4, 3], &ctx).is_err());
        assert!(m.decode_layer(2, &s, &[4, 4, 4, 4], &ctx).is_err());
        assert!(m.decode_layer(0, &Tensor::zeros(&[1, 3, 2, 2]), &[4, 4, 4, 4], &ctx).is_err());
    }
}
