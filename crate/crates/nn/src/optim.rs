use crate::graph::Gradients;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::NnError;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

/// Adam with bias correction. Moment buffers are indexed like the store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn from_state(
        store: &ParamStore,
        config: AdamConfig,
        step: u64,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
    ) -> Result<Self, NnError> {
        if m.len() != store.len() || v.len() != store.len() {
            return Err(NnError::Incompatible("optimizer state length".into()));
        }
        for ((_, _, p), (a, b)) in store.iter().zip(m.iter().zip(&v)) {
            if p.shape() != a.shape() || p.shape() != b.shape() {
                return Err(NnError::Incompatible("optimizer state shape".into()));
            }
        }
        Ok(Self {
            config,
            step,
            m,
            v,
        })
    }

    /// Apply one update; returns the pre-clip global gradient norm.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> f64 {
        let norm = grads
            .params()
            .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = match self.config.clip_norm {
            Some(max) if norm > max && norm > 0.0 => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (id, g) in grads.params() {
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i] * clip;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + self.config.eps);
            }
        }
        norm
    }
}

/// Cosine decay from `base` to `base * floor_frac` over `total` steps.
pub fn cosine_lr(base: f64, step: u64, total: u64, floor_frac: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total) as f64) / total as f64;
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
    base * (floor_frac + (1.0 - floor_frac) * cos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 10, 0.05), 1.0);
        assert!((cosine_lr(1.0, 10, 10, 0.05) - 0.05).abs() < 1e-15);
        assert!((cosine_lr(1.0, 5, 10, 0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap());
        let mut adam = Adam::new(&store, AdamConfig::default());
        for _ in 0..500 {
            let mut g = Graph::new();
            let w = g.param(&store, id);
            let sq = g.square(w);
            let loss = g.sum(sq);
            let grads = g.backward(loss);
            adam.update(&mut store, &grads, 0.05);
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 1e-2));
        assert_eq!(adam.step, 500);
    }

    #[test]
    fn state_shape_is_checked() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[3]));
        let bad = vec![Tensor::zeros(&[2])];
        assert!(Adam::from_state(&store, AdamConfig::default(), 1, bad.clone(), bad).is_err());
    }
}
