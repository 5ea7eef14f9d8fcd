use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

/// Square-kernel 2-D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Fan-in scaled uniform initialisation; `gain` multiplies the bound.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let bound = gain * (3.0 / fan_in).sqrt();
        let weight = store.add_uniform(
            format!("{name}.weight"),
            &[out_ch, in_ch, kernel, kernel],
            bound,
            rng,
        );
        let bias = store.add_uniform(format!("{name}.bias"), &[out_ch], 0.0, rng);
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// `x + conv(silu(conv(silu(x))))`, with a down-scaled second convolution so a
/// fresh block starts close to the identity.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), channels, channels, 3, 1, 1.0, rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), channels, channels, 3, 1, 0.1, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = g.silu(x);
        let h = self.conv1.forward(g, store, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, store, h);
        g.add(x, h)
    }
}
