//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass. Nodes
//! are appended in evaluation order, so a single reverse sweep over the tape
//! visits each node after all of its consumers.

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

enum Op {
    Leaf,
    Param,
    /// Output element `i` depends on element `i` of every input; the stored
    /// vectors are the local partial derivatives.
    Elementwise(Vec<(Var, Vec<f64>)>),
    Add(Var, Var),
    Sub(Var, Var),
    Affine(Var, f64),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Upsample2x(Var),
    PixelShuffle(Var, usize),
    PixelUnshuffle(Var, usize),
    Concat(Vec<(Var, usize)>),
    SliceChannels(Var, usize),
    Sum(Var),
    SumPerSample(Var),
    MulPerSample(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for every parameter that took part in the forward pass.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.params
            .iter()
            .filter_map(move |(id, v)| self.grads[v.0].as_ref().map(|g| (*id, g)))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.grads[v.0].as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: Vec<(ParamId, Var)>,
    frozen: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that records values only; no node requires a gradient.
    pub fn inference() -> Self {
        Self {
            frozen: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && !self.frozen,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that collects a gradient (useful for sensitivity checks).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Load a parameter onto the tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some((_, v)) = self.param_vars.iter().find(|(p, _)| *p == id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.param_vars.push((id, v));
        v
    }

    pub fn detach(&mut self, a: Var) -> Var {
        let t = self.value(a).clone();
        self.constant(t)
    }

    fn check_same(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "add");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "sub");
        let out = {
            let (x, y) = (self.value(a), self.value(b));
            let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
            Tensor::from_vec(x.shape(), data).expect("same shape")
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.map_n(&[a, b], |x, d| {
            d[0] = x[1];
            d[1] = x[0];
            x[0] * x[1]
        })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.map_n(&[a, b], |x, d| {
            d[0] = 1.0 / x[1];
            d[1] = -x[0] / (x[1] * x[1]);
            x[0] / x[1]
        })
    }

    /// `a * c`
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        let rg = self.rg(a);
        self.push(out, Op::Affine(a, c), rg)
    }

    /// `a + c`
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        let rg = self.rg(a);
        self.push(out, Op::Affine(a, 1.0), rg)
    }

    /// Unary elementwise map; `f` returns the value and its derivative.
    pub fn map(&mut self, a: Var, f: impl Fn(f64) -> (f64, f64)) -> Var {
        self.map_n(&[a], |x, d| {
            let (y, dy) = f(x[0]);
            d[0] = dy;
            y
        })
    }

    /// N-ary elementwise map over equally shaped inputs. `f` receives the input
    /// values at one position and writes the partial derivative for each input.
    pub fn map_n(&mut self, inputs: &[Var], f: impl Fn(&[f64], &mut [f64]) -> f64) -> Var {
        assert!(!inputs.is_empty());
        let shape = self.shape(inputs[0]).to_vec();
        for &v in &inputs[1..] {
            assert_eq!(self.shape(v), shape.as_slice(), "map_n: operand shapes differ");
        }
        let n = self.value(inputs[0]).len();
        let k = inputs.len();
        let rg: Vec<bool> = inputs.iter().map(|&v| self.rg(v)).collect();
        let any = rg.iter().any(|&r| r) && !self.frozen;
        let mut partials: Vec<Vec<f64>> = rg
            .iter()
            .map(|&r| if r && any { vec![0.0; n] } else { Vec::new() })
            .collect();
        let mut out = vec![0.0; n];
        let mut xs = vec![0.0; k];
        let mut ds = vec![0.0; k];
        for i in 0..n {
            for (j, &v) in inputs.iter().enumerate() {
                xs[j] = self.nodes[v.0].value.data()[i];
            }
            out[i] = f(&xs, &mut ds);
            for j in 0..k {
                if !partials[j].is_empty() {
                    partials[j][i] = ds[j];
                }
            }
        }
        let op = Op::Elementwise(
            inputs
                .iter()
                .zip(partials)
                .filter(|(_, p)| !p.is_empty())
                .map(|(&v, p)| (v, p))
                .collect(),
        );
        self.push(Tensor::from_vec(&shape, out).expect("shape"), op, any)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| (x * x, 2.0 * x))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, |x| {
            let s = x.sqrt();
            (s, if s > 0.0 { 0.5 / s } else { 0.0 })
        })
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.map(a, |x| {
            let s = sigmoid(x);
            (x * s, s * (1.0 + x * (1.0 - s)))
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, |x| {
            let s = sigmoid(x);
            (s, s * (1.0 - s))
        })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, |x| (softplus(x), sigmoid(x)))
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, |x| {
            if x < lo {
                (lo, 0.0)
            } else if x > hi {
                (hi, 0.0)
            } else {
                (x, 1.0)
            }
        })
    }

    /// 2-D convolution over an `[N, C, H, W]` input with weight `[O, C, k, k]`
    /// and optional bias `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(ws.len(), 4, "conv2d weight must be OCkk");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch: {:?} vs {:?}", xs, ws);
        assert_eq!(ws[2], ws[3]);
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[0], ws[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            n,
            ci,
            h,
            w: wd,
            co,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let kk = ci * k * k;
        let p = ho * wo;
        let mut cols = vec![0.0; n * kk * p];
        let mut out = vec![0.0; n * co * p];
        let wv = self.value(w).data();
        let xv = self.value(x).data();
        for s in 0..n {
            let col = &mut cols[s * kk * p..(s + 1) * kk * p];
            im2col(&xv[s * ci * h * wd..(s + 1) * ci * h * wd], &geom, col);
            let o = &mut out[s * co * p..(s + 1) * co * p];
            if let Some(b) = b {
                let bv = self.nodes[b.0].value.data();
                for c in 0..co {
                    o[c * p..(c + 1) * p].fill(bv[c]);
                }
            }
            gemm(co, kk, p, wv, (kk as isize, 1), col, (p as isize, 1), o, 1.0);
        }
        let rg = self.rg(x) || self.rg(w) || b.map(|b| self.rg(b)).unwrap_or(false);
        let out = Tensor::from_vec(&[n, co, ho, wo], out).expect("shape");
        let cols = if rg && self.rg(w) { cols } else { Vec::new() };
        self.push(out, Op::Conv2d { x, w, b, geom, cols }, rg)
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let src = self.value(a).data();
        let mut out = vec![0.0; n * c * 4 * h * w];
        for nc in 0..n * c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out[nc * 4 * h * w + y * 2 * w + x] = src[nc * h * w + (y / 2) * w + x / 2];
                }
            }
        }
        let rg = self.rg(a);
        let out = Tensor::from_vec(&[n, c, 2 * h, 2 * w], out).expect("shape");
        self.push(out, Op::Upsample2x(a), rg)
    }

    /// `[N, C*r*r, H, W] -> [N, C, H*r, W*r]`
    pub fn pixel_shuffle(&mut self, a: Var, r: usize) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s[1] % (r * r), 0, "pixel_shuffle channel count");
        let (n, c, h, w) = (s[0], s[1] / (r * r), s[2], s[3]);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for_each_shuffle(n, c, h, w, r, |si, di| out[di] = src[si]);
        let rg = self.rg(a);
        let out = Tensor::from_vec(&[n, c, h * r, w * r], out).expect("shape");
        self.push(out, Op::PixelShuffle(a, r), rg)
    }

    /// `[N, C, H*r, W*r] -> [N, C*r*r, H, W]`
    pub fn pixel_unshuffle(&mut self, a: Var, r: usize) -> Var {
        let s = self.shape(a).to_vec();
        assert!(s[2].is_multiple_of(r) && s[3].is_multiple_of(r), "pixel_unshuffle spatial dims");
        let (n, c, h, w) = (s[0], s[1], s[2] / r, s[3] / r);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for_each_shuffle(n, c, h, w, r, |si, di| out[si] = src[di]);
        let rg = self.rg(a);
        let out = Tensor::from_vec(&[n, c * r * r, h, w], out).expect("shape");
        self.push(out, Op::PixelUnshuffle(a, r), rg)
    }

    /// Concatenate `[N, C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let s0 = self.shape(parts[0]).to_vec();
        let (n, h, w) = (s0[0], s0[2], s0[3]);
        let mut chans = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            assert!(
                s[0] == n && s[2] == h && s[3] == w,
                "concat_channels: {:?} vs {:?}",
                s,
                s0
            );
            chans.push((p, s[1]));
        }
        let total: usize = chans.iter().map(|(_, c)| c).sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for s in 0..n {
            for &(p, c) in &chans {
                let d = self.value(p).data();
                out.extend_from_slice(&d[s * c * hw..(s + 1) * c * hw]);
            }
        }
        let rg = chans.iter().any(|&(p, _)| self.rg(p));
        let out = Tensor::from_vec(&[n, total, h, w], out).expect("shape");
        self.push(out, Op::Concat(chans), rg)
    }

    /// Channels `start..end` of an `[N, C, H, W]` tensor.
    pub fn slice_channels(&mut self, a: Var, start: usize, end: usize) -> Var {
        let s = self.shape(a).to_vec();
        assert!(start < end && end <= s[1], "slice_channels out of range");
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(n * (end - start) * hw);
        for i in 0..n {
            out.extend_from_slice(&d[(i * c + start) * hw..(i * c + end) * hw]);
        }
        let rg = self.rg(a);
        let out = Tensor::from_vec(&[n, end - start, s[2], s[3]], out).expect("shape");
        self.push(out, Op::SliceChannels(a, start), rg)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(v), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-batch-entry sum, shape `[N]`.
    pub fn sum_per_sample(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.batch();
        let out: Vec<f64> = (0..n).map(|i| t.sample(i).iter().sum()).collect();
        let rg = self.rg(a);
        let out = Tensor::from_vec(&[n], out).expect("shape");
        self.push(out, Op::SumPerSample(a), rg)
    }

    /// Multiply every element of batch entry `i` of `x` by `s[i]`.
    pub fn mul_per_sample(&mut self, x: Var, s: Var) -> Var {
        let (xt, st) = (self.value(x), self.value(s));
        assert_eq!(st.len(), xt.batch(), "mul_per_sample: scale length");
        let m = xt.per_sample();
        let mut out = xt.clone();
        for (i, &c) in st.data().iter().enumerate() {
            for v in &mut out.data_mut()[i * m..(i + 1) * m] {
                *v *= c;
            }
        }
        let rg = self.rg(x) || self.rg(s);
        self.push(out, Op::MulPerSample(x, s), rg)
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let d2 = self.square(d);
        self.mean(d2)
    }

    /// Reverse sweep from `root`, seeding its gradient with ones.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(&node.op, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            params: self.param_vars.clone(),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn propagate(&self, op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf | Op::Param => {}
            Op::Elementwise(inputs) => {
                for (v, partial) in inputs {
                    let data = g.data().iter().zip(partial).map(|(a, b)| a * b).collect();
                    let t = Tensor::from_vec(self.shape(*v), data).expect("shape");
                    self.accumulate(grads, *v, t);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Affine(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|v| v * c));
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => self.conv_backward(*x, *w, *b, geom, cols, g, grads),
            Op::Upsample2x(a) => {
                let s = self.shape(*a).to_vec();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let mut out = vec![0.0; n * c * h * w];
                let gd = g.data();
                for nc in 0..n * c {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            out[nc * h * w + (y / 2) * w + x / 2] += gd[nc * 4 * h * w + y * 2 * w + x];
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::from_vec(&s, out).expect("shape"));
            }
            Op::PixelShuffle(a, r) => {
                let s = self.shape(*a).to_vec();
                let (n, c, h, w) = (s[0], s[1] / (r * r), s[2], s[3]);
                let gd = g.data();
                let mut out = vec![0.0; gd.len()];
                for_each_shuffle(n, c, h, w, *r, |si, di| out[si] = gd[di]);
                self.accumulate(grads, *a, Tensor::from_vec(&s, out).expect("shape"));
            }
            Op::PixelUnshuffle(a, r) => {
                let s = self.shape(*a).to_vec();
                let (n, c, h, w) = (s[0], s[1], s[2] / r, s[3] / r);
                let gd = g.data();
                let mut out = vec![0.0; gd.len()];
                for_each_shuffle(n, c, h, w, *r, |si, di| out[di] = gd[si]);
                self.accumulate(grads, *a, Tensor::from_vec(&s, out).expect("shape"));
            }
            Op::Concat(parts) => {
                let gs = g.shape();
                let (n, total, hw) = (gs[0], gs[1], gs[2] * gs[3]);
                let mut offset = 0;
                for &(p, c) in parts {
                    if self.rg(p) {
                        let mut out = Vec::with_capacity(n * c * hw);
                        for s in 0..n {
                            let base = (s * total + offset) * hw;
                            out.extend_from_slice(&g.data()[base..base + c * hw]);
                        }
                        let t = Tensor::from_vec(self.shape(p), out).expect("shape");
                        self.accumulate(grads, p, t);
                    }
                    offset += c;
                }
            }
            Op::SliceChannels(a, start) => {
                let s = self.shape(*a).to_vec();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let width = g.shape()[1];
                let mut out = vec![0.0; n * c * hw];
                for i in 0..n {
                    let dst = (i * c + start) * hw;
                    out[dst..dst + width * hw]
                        .copy_from_slice(&g.data()[i * width * hw..(i + 1) * width * hw]);
                }
                self.accumulate(grads, *a, Tensor::from_vec(&s, out).expect("shape"));
            }
            Op::Sum(a) => {
                let v = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), v));
            }
            Op::SumPerSample(a) => {
                let s = self.shape(*a).to_vec();
                let mut out = Tensor::zeros(&s);
                for (i, &gv) in g.data().iter().enumerate() {
                    out.sample_mut(i).fill(gv);
                }
                self.accumulate(grads, *a, out);
            }
            Op::MulPerSample(x, s) => {
                let xt = self.value(*x);
                let st = self.value(*s);
                let m = xt.per_sample();
                if self.rg(*x) {
                    let mut gx = g.clone();
                    for (i, &c) in st.data().iter().enumerate() {
                        for v in &mut gx.data_mut()[i * m..(i + 1) * m] {
                            *v *= c;
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.rg(*s) {
                    let gs: Vec<f64> = (0..st.len())
                        .map(|i| {
                            g.sample(i)
                                .iter()
                                .zip(xt.sample(i))
                                .map(|(a, b)| a * b)
                                .sum()
                        })
                        .collect();
                    let t = Tensor::from_vec(st.shape(), gs).expect("shape");
                    self.accumulate(grads, *s, t);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        cols: &[f64],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let ConvGeom {
            n,
            ci,
            h,
            w: wd,
            co,
            k,
            ho,
            wo,
            ..
        } = *geom;
        let kk = ci * k * k;
        let p = ho * wo;
        let gd = g.data();
        if let Some(b) = b {
            if self.rg(b) {
                let mut gb = vec![0.0; co];
                for s in 0..n {
                    for (c, acc) in gb.iter_mut().enumerate() {
                        let base = (s * co + c) * p;
                        *acc += gd[base..base + p].iter().sum::<f64>();
                    }
                }
                self.accumulate(grads, b, Tensor::from_vec(&[co], gb).expect("shape"));
            }
        }
        if self.rg(w) {
            let mut gw = vec![0.0; co * kk];
            for s in 0..n {
                // dW += dOut[co, p] * cols^T[p, kk]
                gemm(
                    co,
                    p,
                    kk,
                    &gd[s * co * p..(s + 1) * co * p],
                    (p as isize, 1),
                    &cols[s * kk * p..(s + 1) * kk * p],
                    (1, p as isize),
                    &mut gw,
                    1.0,
                );
            }
            self.accumulate(grads, w, Tensor::from_vec(self.shape(w), gw).expect("shape"));
        }
        if self.rg(x) {
            let wv = self.value(w).data();
            let mut gx = vec![0.0; n * ci * h * wd];
            let mut dcols = vec![0.0; kk * p];
            for s in 0..n {
                dcols.fill(0.0);
                // dcols[kk, p] = W^T[kk, co] * dOut[co, p]
                gemm(
                    kk,
                    co,
                    p,
                    wv,
                    (1, kk as isize),
                    &gd[s * co * p..(s + 1) * co * p],
                    (p as isize, 1),
                    &mut dcols,
                    1.0,
                );
                col2im(&dcols, geom, &mut gx[s * ci * h * wd..(s + 1) * ci * h * wd]);
            }
            self.accumulate(grads, x, Tensor::from_vec(self.shape(x), gx).expect("shape"));
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// `c[m, n] = a[m, k] * b[k, n] + beta * c`, with explicit (row, col) strides
/// for `a` and `b`. `c` is dense row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches for the
    // dense layouts used by the callers in this module.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.ho * g.wo;
    for c in 0..g.ci {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        dst[oy * g.wo..(oy + 1) * g.wo].fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        dst[oy * g.wo + ox] = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let p = g.ho * g.wo;
    for c in 0..g.ci {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            x[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Visit (shuffled-input index, spatial-output index) pairs for a pixel
/// shuffle with `c` output channels at `h x w` input resolution.
fn for_each_shuffle(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    r: usize,
    mut f: impl FnMut(usize, usize),
) {
    let (ho, wo) = (h * r, w * r);
    for s in 0..n {
        for ch in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let cin = (ch * r + dy) * r + dx;
                    for y in 0..h {
                        for x in 0..w {
                            let si = ((s * c * r * r + cin) * h + y) * w + x;
                            let di = ((s * c + ch) * ho + y * r + dy) * wo + x * r + dx;
                            f(si, di);
                        }
                    }
                }
            }
        }
    }
}
