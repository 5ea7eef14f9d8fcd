//! Central finite-difference checks for every differentiable op.

use hjscc_nn::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds `loss = sum(f(inputs) * probe)` and compares the analytic gradient
/// of every input against central differences.
fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let eval = |vals: &[Tensor], probe: Option<&Tensor>| -> (f64, Option<Vec<Tensor>>, Tensor) {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars);
        let shape = g.shape(out).to_vec();
        let probe_t = probe.cloned().unwrap_or_else(|| Tensor::full(&shape, 1.0));
        let p = g.constant(probe_t.clone());
        let prod = g.mul(out, p);
        let loss = g.sum(prod);
        let value = g.value(loss).data()[0];
        let grads = g.backward(loss);
        let gs = vars
            .iter()
            .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            .collect();
        (value, Some(gs), probe_t)
    };
    // Fix a random probe so every output element gets a distinct weight.
    let (_, _, shape_probe) = eval(&inputs, None);
    let probe = random(shape_probe.shape(), &mut rng);
    let (_, grads, _) = eval(&inputs, Some(&probe));
    let grads = grads.unwrap();
    let h = 1e-5;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let fd = (eval(&plus, Some(&probe)).0 - eval(&minus, Some(&probe)).0) / (2.0 * h);
            let ad = grads[i].data()[j];
            let tol = 1e-6 * (1.0 + fd.abs().max(ad.abs()));
            assert!(
                (fd - ad).abs() < tol,
                "input {i} elem {j}: autodiff {ad} vs finite diff {fd}"
            );
        }
    }
}

#[test]
fn conv2d_stride1_pad1() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[2, 3, 5, 5], &mut rng);
    let w = random(&[4, 3, 3, 3], &mut rng);
    let b = random(&[4], &mut rng);
    check(vec![x, w, b], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1));
}

#[test]
fn conv2d_stride2_and_1x1() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[1, 2, 6, 6], &mut rng);
    let w = random(&[3, 2, 3, 3], &mut rng);
    check(vec![x.clone(), w], |g, v| g.conv2d(v[0], v[1], None, 2, 1));
    let w1 = random(&[5, 2, 1, 1], &mut rng);
    check(vec![x, w1], |g, v| g.conv2d(v[0], v[1], None, 1, 0));
}

#[test]
fn resampling_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    check(vec![random(&[2, 2, 3, 3], &mut rng)], |g, v| g.upsample2x(v[0]));
    check(vec![random(&[1, 8, 2, 3], &mut rng)], |g, v| g.pixel_shuffle(v[0], 2));
    check(vec![random(&[1, 2, 4, 6], &mut rng)], |g, v| g.pixel_unshuffle(v[0], 2));
}

#[test]
fn shuffle_roundtrip_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[2, 3, 4, 4], &mut rng);
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let u = g.pixel_unshuffle(v, 2);
    let s = g.pixel_shuffle(u, 2);
    assert_eq!(g.value(s), &x);
}

#[test]
fn channel_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&[2, 2, 2, 2], &mut rng);
    let b = random(&[2, 3, 2, 2], &mut rng);
    check(vec![a, b], |g, v| {
        let c = g.concat_channels(&[v[0], v[1], v[0]]);
        g.slice_channels(c, 1, 6)
    });
}

#[test]
fn elementwise_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random(&[2, 3], &mut rng);
    let b = random(&[2, 3], &mut rng).map(|v| v + 3.0);
    check(vec![a.clone(), b.clone()], |g, v| {
        let m = g.mul(v[0], v[1]);
        let d = g.div(m, v[1]);
        let s = g.silu(d);
        let sp = g.softplus(v[1]);
        let q = g.sqrt(sp);
        let e = g.sub(s, q);
        let e = g.scale(e, 1.7);
        g.add_scalar(e, 0.3)
    });
    check(vec![a.clone(), b.clone()], |g, v| {
        let s = g.sum_per_sample(v[1]);
        g.mul_per_sample(v[0], s)
    });
    check(vec![a, b], |g, v| {
        let m = g.mse(v[0], v[1]);
        let s = g.sigmoid(v[0]);
        let t = g.mean(s);
        g.add(m, t)
    });
}

#[test]
fn inference_graph_records_no_gradients() {
    let mut g = Graph::inference();
    let a = g.variable(Tensor::full(&[2], 1.0));
    let b = g.square(a);
    assert!(!g.requires_grad(b));
}
