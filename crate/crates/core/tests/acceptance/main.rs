//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Trained toy models are cached under the cargo target
//! tmpdir, keyed by a hash of their config and training recipe.

#[path = "../common/mod.rs"]
mod common;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::PathBuf;
use std::time::Instant;

use common::{ks_two_sample, micro_config, synth};
use hjscc::channel::{awgn_transmit, power_normalize, sigma_from_snr};
use hjscc::config::{RunConfig, SIGMA_FLOOR};
use hjscc::harness::checkpoint::Checkpoint;
use hjscc::harness::dataset::{Dataset, DatasetItem, EvalImage};
use hjscc::harness::evaluate::{evaluate, mean_rows, write_metrics_csv, EvalSettings, MetricsRow, MEAN_ID};
use hjscc::harness::report::sweep_report;
use hjscc::harness::synth::synth_image;
use hjscc::harness::train::Trainer;
use hjscc::hvae::{prior_likelihood, Phase};
use hjscc::model::HjsccModel;
use hjscc::pipeline::{channel_log_density, forward, ForwardOptions, Mode, NoiseStreams};
use hjscc::rate_match::{
    group_lengths, lengths_from_prior, make_mask, quantize_length, side_info_overhead, OptionSet,
    RatePlan,
};
use hjscc_nn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = anyhow::Result<(bool, String)>;

const TRAIN_STEPS: u64 = 1500;
const TRAIN_IMAGES: u64 = 64;
const TRAIN_SIZE: usize = 64;
const TEST_IMAGES: u64 = 12;
const TEST_SIZE: usize = 32;
const SNRS: [f64; 4] = [0.0, 5.0, 10.0, 15.0];
const ALPHAS: [f64; 3] = [0.25, 0.5, 1.0];
const TRAIN_SNR: f64 = 10.0;

// ---------------------------------------------------------------- fixtures

fn cache_dir() -> PathBuf {
    let d = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-models");
    std::fs::create_dir_all(&d).expect("cache dir");
    d
}

fn toy_config(lambda: f64, rate_attention: bool) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.loss.lambda = lambda;
    cfg.model.rate_attention = rate_attention;
    cfg.train.steps = TRAIN_STEPS;
    cfg.channel.snr_db = TRAIN_SNR;
    cfg
}

fn train_set() -> Dataset {
    let items = (0..TRAIN_IMAGES)
        .map(|i| DatasetItem {
            id: format!("train{i:03}"),
            image: synth_image(i, TRAIN_SIZE, TRAIN_SIZE),
        })
        .collect();
    Dataset::from_images(items).expect("train set")
}

fn test_set(divisibility: usize) -> Vec<EvalImage> {
    let items = (0..TEST_IMAGES)
        .map(|i| DatasetItem {
            id: format!("test{i:03}"),
            image: synth_image(1000 + i, TEST_SIZE, TEST_SIZE),
        })
        .collect();
    Dataset::from_images(items)
        .and_then(|d| d.eval_images(divisibility, None))
        .expect("test set")
}

fn trained(name: &str, cfg: &RunConfig) -> anyhow::Result<HjsccModel> {
    let recipe = format!(
        "{}|{TRAIN_IMAGES}|{TRAIN_SIZE}",
        cfg.to_toml_string()?
    );
    let mut h = DefaultHasher::new();
    recipe.hash(&mut h);
    let path = cache_dir().join(format!("{name}-{:016x}.bin", h.finish()));
    if path.exists() {
        eprintln!("  [{name}] using cached weights {}", path.display());
        return Ok(Checkpoint::load(&path)?.model()?);
    }
    eprintln!("  [{name}] training {} steps", cfg.train.steps);
    let t0 = Instant::now();
    let mut t = Trainer::new(cfg, train_set())?;
    for _ in 0..cfg.train.steps {
        t.step_once(None)?;
    }
    eprintln!("  [{name}] trained in {:.0?}", t0.elapsed());
    t.checkpoint().save(&path)?;
    Ok(t.model)
}

struct Models {
    full: HjsccModel,
    low_lambda: HjsccModel,
    no_attention: HjsccModel,
}

fn models() -> anyhow::Result<Models> {
    Ok(Models {
        full: trained("lambda64", &toy_config(64.0, true))?,
        low_lambda: trained("lambda16", &toy_config(16.0, true))?,
        no_attention: trained("lambda64-noattn", &toy_config(64.0, false))?,
    })
}

fn sweep(model: &HjsccModel, snrs: &[f64], alphas: &[f64]) -> anyhow::Result<Vec<MetricsRow>> {
    let settings = EvalSettings {
        snr_db: snrs.to_vec(),
        alpha: alphas.to_vec(),
        feedback: false,
        seed: 1,
        full_length: false,
    };
    let imgs = test_set(model.config.model.divisibility());
    Ok(evaluate(model, &imgs, &settings)?.0)
}

fn cell(rows: &[MetricsRow], snr: f64, alpha: f64) -> &MetricsRow {
    rows.iter()
        .find(|r| r.image_id == MEAN_ID && r.snr_db == snr && r.alpha == alpha)
        .expect("mean row")
}

fn images_of(rows: &[MetricsRow], snr: f64, alpha: f64) -> Vec<&MetricsRow> {
    rows.iter()
        .filter(|r| r.image_id != MEAN_ID && r.snr_db == snr && r.alpha == alpha)
        .collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

// ------------------------------------------------------------- criteria

fn prior_normalization() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let mu: f64 = rng.random_range(-20.0..20.0);
        let sigma: f64 = rng.random_range(SIGMA_FLOOR..10.0);
        let lo = (mu - 30.0 * sigma).floor() as i64;
        let hi = (mu + 30.0 * sigma).ceil() as i64;
        let mut total = 0.0;
        for z in lo..=hi {
            total += prior_likelihood(z as f64, mu, sigma)?;
        }
        worst = worst.max((total - 1.0).abs());
    }
    let dt = t0.elapsed().as_secs_f64();
    Ok((worst <= 1e-3 && dt < 1.0, format!("max |sum - 1| = {worst:.2e}, {dt:.3} s")))
}

/// Straightforward recomputation of a rate plan, written without the
/// library's helpers.
fn oracle_plan(nlp: &[f64], c: usize, h: usize, w: usize, alpha: f64, opts: &[usize], patch: (usize, usize)) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let mut real = vec![0.0; h * w];
    for (o, r) in real.iter_mut().enumerate() {
        let mut s = 0.0;
        for ch in 0..c {
            s += nlp[ch * h * w + o];
        }
        *r = s * alpha;
    }
    let mut merged = vec![0.0; h * w];
    let mut py = 0;
    while py < h {
        let mut px = 0;
        while px < w {
            let ys = py..(py + patch.0).min(h);
            let xs = px..(px + patch.1).min(w);
            let mut s = 0.0;
            let mut n = 0;
            for y in ys.clone() {
                for x in xs.clone() {
                    s += real[y * w + x];
                    n += 1;
                }
            }
            for y in ys.clone() {
                for x in xs.clone() {
                    merged[y * w + x] = s / n as f64;
                }
            }
            px += patch.1;
        }
        py += patch.0;
    }
    let quant = merged
        .iter()
        .map(|&k| {
            let mut best = *opts.iter().max().unwrap();
            for &q in opts {
                if q as f64 >= k && q < best {
                    best = q;
                }
            }
            best
        })
        .collect();
    (real, merged, quant)
}

fn rate_matching_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for case in 0..50 {
        let c = [4usize, 8, 16][case % 3];
        let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
        let patch = (rng.random_range(1..4), rng.random_range(1..4));
        let alpha = [0.25, 0.5, 1.0, 2.0][case % 4];
        let mut nlp = Vec::with_capacity(c * h * w);
        for _ in 0..c * h * w {
            let mu: f64 = rng.random_range(-4.0..4.0);
            let mu_hat: f64 = rng.random_range(-4.0..4.0);
            let sigma: f64 = rng.random_range(0.2..3.0);
            nlp.push(-prior_likelihood(mu.round(), mu_hat, sigma)?.ln());
        }
        let opts = OptionSet::uniform_even(c, 4)?;
        let t = Tensor::from_vec(&[c, h, w], nlp.clone())?;
        let (real, merged, quant) = oracle_plan(&nlp, c, h, w, alpha, opts.values(), patch);
        let plan = RatePlan::build(&t, alpha, &opts, patch, 4)?;
        let k = lengths_from_prior(&t, alpha)?;
        let g = group_lengths(&k, patch)?;
        let masks: Vec<bool> = quant.iter().flat_map(|&q| make_mask(q, c).unwrap()).collect();
        let lib_masks: Vec<bool> = plan
            .quantized_lengths
            .iter()
            .flat_map(|&q| make_mask(q, c).unwrap())
            .collect();
        let lib_quant: Vec<usize> = g
            .data()
            .iter()
            .map(|&m| quantize_length(m, &opts, c).unwrap())
            .collect();
        if k.data() != real.as_slice()
            || g.data() != merged.as_slice()
            || plan.real_lengths != real
            || plan.merged_lengths != merged
            || plan.quantized_lengths != quant
            || lib_quant != quant
            || lib_masks != masks
        {
            mismatches += 1;
        }
    }
    let mut violations = 0;
    for _ in 0..10_000 {
        let cc = 2 * rng.random_range(1..33);
        let opts = OptionSet::uniform_even(cc, 4)?;
        let k: f64 = rng.random_range(0.0..(cc as f64 * 1.5));
        let q = quantize_length(k, &opts, cc)?;
        let m = make_mask(q, cc)?;
        let ones = m.iter().filter(|&&b| b).count();
        let prefix = m.iter().take(q).all(|&b| b) && m.iter().skip(q).all(|&b| !b);
        if ones != q || !prefix || !opts.contains(q) || (k <= opts.max() as f64 && (q as f64) < k) {
            violations += 1;
        }
    }
    let dt = t0.elapsed().as_secs_f64();
    Ok((
        mismatches == 0 && violations == 0 && dt < 10.0,
        format!("{mismatches}/50 oracle mismatches, {violations}/10000 fuzz violations, {dt:.2} s"),
    ))
}

fn grouping_overhead(models: &mut Models) -> Outcome {
    // the law, on every level grid of the toy model with whole patches
    let model = &mut models.full;
    let (ph, pw) = model.config.rate.patch;
    let mut law_ok = true;
    for l in 0..model.levels() {
        let shape = model.hvae.level_shape(l, 1, TEST_SIZE, TEST_SIZE);
        let (h, w) = (shape[2], shape[3]);
        if h % ph != 0 || w % pw != 0 {
            continue;
        }
        for cap in [0.5, 1.0, 3.46] {
            let ungrouped = side_info_overhead(h * w, 4, cap)?;
            let grouped = side_info_overhead(h / ph * (w / pw), 4, cap)?;
            law_ok &= rel_err(grouped * (ph * pw) as f64, ungrouped) < 1e-12;
        }
    }
    // trained model, grouped vs ungrouped
    let grouped = sweep(model, &[TRAIN_SNR], &ALPHAS)?;
    model.config.rate.patch = (1, 1);
    let ungrouped = sweep(model, &[TRAIN_SNR], &ALPHAS);
    model.config.rate.patch = (ph, pw);
    let ungrouped = ungrouped?;
    let area = (ph * pw) as f64;
    let mut side_ok = true;
    let mut worst_payload: f64 = 0.0;
    let mut detail = Vec::new();
    for &a in &ALPHAS {
        for (g, u) in images_of(&grouped, TRAIN_SNR, a).iter().zip(images_of(&ungrouped, TRAIN_SNR, a)) {
            side_ok &= rel_err(g.cbr_side_info * area, u.cbr_side_info) < 1e-12;
        }
        let (g, u) = (cell(&grouped, TRAIN_SNR, a), cell(&ungrouped, TRAIN_SNR, a));
        let change = rel_err(g.cbr_payload, u.cbr_payload);
        worst_payload = worst_payload.max(change);
        detail.push(format!(
            "a={a}: CBR(k) {:.4}->{:.4}, CBR(s) {:.4}->{:.4}",
            u.cbr_side_info, g.cbr_side_info, u.cbr_payload, g.cbr_payload
        ));
    }
    Ok((
        law_ok && side_ok && worst_payload < 0.05,
        format!(
            "law {}, side info / {area} {}, max CBR(s) change {:.2}% [{}]",
            if law_ok { "exact" } else { "broken" },
            if side_ok { "exact" } else { "broken" },
            100.0 * worst_payload,
            detail.join("; ")
        ),
    ))
}

fn channel_statistics() -> Outcome {
    let t0 = Instant::now();
    let n = 1_000_000;
    let power = 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mask = vec![true; n];
    let pn = power_normalize(&s, &mask, power)?;
    let ms = pn.symbols.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let power_err = rel_err(ms, power);
    let mut worst: f64 = 0.0;
    for snr in [0.0, 10.0, 20.0] {
        let var = sigma_from_snr(snr, power)?;
        let y = awgn_transmit(&pn.symbols, &mask, var, &mut rng)?;
        let noise: Vec<f64> = y.iter().zip(&pn.symbols).map(|(a, b)| a - b).collect();
        let mean = noise.iter().sum::<f64>() / n as f64;
        let emp = noise.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        worst = worst.max(rel_err(emp, var));
    }
    let dt = t0.elapsed().as_secs_f64();
    Ok((
        worst < 0.01 && power_err < 1e-9 && dt < 5.0,
        format!("max variance error {:.3}%, power error {power_err:.1e}, {dt:.2} s", 100.0 * worst),
    ))
}

fn gradient_check() -> Outcome {
    let t0 = Instant::now();
    let cfg = micro_config();
    let mut model = HjsccModel::new(&cfg)?;
    let imgs = vec![synth(50, 8)];
    let channel = cfg.channel.with_snr(TRAIN_SNR);
    let mut opts = ForwardOptions::new(Phase::Train, 0.5, channel, Mode::NoFeedback);
    const SEED: u64 = 17;
    let base = forward(&model, &imgs, &opts, &mut NoiseStreams::new(SEED))?;
    let grads = base.graph.backward(base.loss);
    // masks are piecewise constant; keep them fixed under perturbation
    opts.plans = Some(base.levels.iter().map(|l| l.plans.clone()).collect());
    opts.grad = false;
    let ids: Vec<_> = model.params.iter().map(|(id, _, t)| (id, t.len())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst, mut checked, mut n_fail) = (0.0f64, 0, 0);
    for _ in 0..32 {
        let (id, len) = ids[rng.random_range(0..ids.len())];
        let i = rng.random_range(0..len);
        let analytic = grads.param(id).map_or(0.0, |g| g.data()[i]);
        let w0 = model.params.get(id).data()[i];
        let h = 1e-5 * w0.abs().max(1.0);
        let mut eval_at = |w: f64| -> anyhow::Result<f64> {
            model.params.get_mut(id).data_mut()[i] = w;
            let out = forward(&model, &imgs, &opts, &mut NoiseStreams::new(SEED))?;
            Ok(out.breakdown.total)
        };
        let numeric = (eval_at(w0 + h)? - eval_at(w0 - h)?) / (2.0 * h);
        model.params.get_mut(id).data_mut()[i] = w0;
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        if err > 1e-3 {
            n_fail += 1;
        }
        worst = worst.max(err);
        checked += 1;
    }
    let dt = t0.elapsed().as_secs_f64();
    Ok((
        n_fail == 0 && checked >= 20 && dt < 60.0,
        format!("{checked} weights, max relative error {worst:.2e}, {dt:.1} s"),
    ))
}

fn feedback_formulation() -> Outcome {
    // (a) log-density of the channel noise at its own sample
    let cfg = micro_config();
    let model = HjsccModel::new(&cfg)?;
    let imgs = vec![synth(60, 8), synth(61, 8)];
    let channel = cfg.channel.with_snr(TRAIN_SNR);
    let var = channel.noise_variance()?;
    let opts = ForwardOptions::new(Phase::Train, 0.5, channel, Mode::Feedback);
    let mut out = forward(&model, &imgs, &opts, &mut NoiseStreams::new(3))?;
    let levels: Vec<_> = out.levels.iter().map(|l| (l.s, l.s_tilde, l.plans.iter().map(|p| p.payload_reals()).sum::<usize>())).collect();
    let mut q = None;
    for (s, st, sent) in levels {
        let term = channel_log_density(&mut out.graph, s, st, var, sent)?;
        q = Some(match q {
            Some(acc) => out.graph.add(acc, term),
            None => term,
        });
    }
    let q = q.expect("levels");
    let gq = out.graph.backward(q);
    let gl = out.graph.backward(out.loss);
    let (mut reached, mut max_q, mut nonzero_loss) = (0usize, 0.0f64, 0usize);
    for (_, t) in gq.params() {
        reached += t.len();
        max_q = t.data().iter().fold(max_q, |m, v| m.max(v.abs()));
    }
    for (_, t) in gl.params() {
        nonzero_loss += t.data().iter().filter(|v| **v != 0.0).count();
    }
    let a_ok = max_q == 0.0 && nonzero_loss > 0;

    // (b) awgn_transmit against direct draws from N(s, var)
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let s: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    let sent = awgn_transmit(&s, &vec![true; n], var, &mut rng)?;
    let mut other = ChaCha8Rng::seed_from_u64(7);
    let direct: Vec<f64> = s
        .iter()
        .map(|&m| Normal::new(m, var.sqrt()).unwrap().sample(&mut other))
        .collect();
    let (d, p) = ks_two_sample(&sent, &direct);
    let b_ok = p > 0.01;
    Ok((
        a_ok && b_ok,
        format!(
            "(a) max |dq/dw| = {max_q:e} over {reached} weights reached ({nonzero_loss} nonzero loss grads); (b) KS D = {d:.4}, p = {p:.3}"
        ),
    ))
}

fn rate_adaptivity(rows: &[MetricsRow]) -> Outcome {
    let per: Vec<f64> = images_of(rows, TRAIN_SNR, 0.5).iter().map(|r| r.cbr_total).collect();
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    let var = per.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (per.len() - 1) as f64;
    let means: Vec<f64> = ALPHAS.iter().map(|&a| cell(rows, TRAIN_SNR, a).cbr_total).collect();
    let monotone = means.windows(2).all(|w| w[1] >= w[0]);
    let strict = means[2] > means[0];
    Ok((
        per.len() >= 10 && var > 0.0 && monotone && strict,
        format!(
            "{} images, CBR variance {var:.2e}; mean CBR over alpha {:?}: {}",
            per.len(),
            ALPHAS,
            means.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(" -> ")
        ),
    ))
}

fn rd_ordering(hi: &[MetricsRow], lo: &[MetricsRow]) -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for &a in &ALPHAS {
        let (h, l) = (cell(hi, TRAIN_SNR, a), cell(lo, TRAIN_SNR, a));
        ok &= h.cbr_total > l.cbr_total && h.psnr_db > l.psnr_db;
        detail.push(format!(
            "a={a}: lambda64 ({:.4}, {:.2} dB) vs lambda16 ({:.4}, {:.2} dB)",
            h.cbr_total, h.psnr_db, l.cbr_total, l.psnr_db
        ));
    }
    Ok((ok, detail.join("; ")))
}

fn graceful_degradation(rows: &[MetricsRow]) -> Outcome {
    let dir = tempfile::tempdir()?;
    let summary = sweep_report(rows, dir.path())?;
    let curves: Vec<String> = summary
        .curves
        .iter()
        .filter(|c| c.kind == "psnr_vs_snr")
        .map(|c| {
            let pts: Vec<String> = c.points.iter().map(|(_, p)| format!("{p:.2}")).collect();
            format!("{}: {}", c.key, pts.join(" "))
        })
        .collect();
    Ok((
        summary.graceful_degradation() && curves.len() == ALPHAS.len(),
        format!("PSNR over SNR {SNRS:?} dB [{}]", curves.join("; ")),
    ))
}

fn interp(curve: &[(f64, f64)], x: f64) -> f64 {
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x >= x0 && x <= x1 {
            return if x1 > x0 { y0 + (y1 - y0) * (x - x0) / (x1 - x0) } else { y0 };
        }
    }
    f64::NAN
}

fn rate_attention_ablation(models: &Models) -> Outcome {
    let alphas = [0.25, 0.375, 0.5, 0.75, 1.0];
    let curve = |m: &HjsccModel| -> anyhow::Result<Vec<(f64, f64)>> {
        let rows = sweep(m, &[TRAIN_SNR], &alphas)?;
        let mut pts: Vec<(f64, f64)> = mean_rows(&rows).iter().map(|r| (r.cbr_total, r.psnr_db)).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(pts)
    };
    let on = curve(&models.full)?;
    let off = curve(&models.no_attention)?;
    let lo = on[0].0.max(off[0].0);
    let hi = on[on.len() - 1].0.min(off[off.len() - 1].0);
    let fmt = |c: &[(f64, f64)]| c.iter().map(|(x, y)| format!("({x:.4}, {y:.2})")).collect::<Vec<_>>().join(" ");
    if lo > hi {
        return Ok((false, format!("no common CBR range; on {} off {}", fmt(&on), fmt(&off))));
    }
    let grid: Vec<f64> = (0..=20).map(|i| lo + (hi - lo) * i as f64 / 20.0).collect();
    let gain = grid.iter().map(|&x| interp(&on, x) - interp(&off, x)).sum::<f64>() / grid.len() as f64;
    Ok((
        gain >= -0.1,
        format!(
            "mean PSNR gain {gain:+.3} dB over matched CBR [{lo:.4}, {hi:.4}]; on {} off {}",
            fmt(&on),
            fmt(&off)
        ),
    ))
}

fn determinism() -> Outcome {
    let mut cfg = micro_config();
    cfg.train.steps = 5;
    let dir = tempfile::tempdir()?;
    let settings = EvalSettings {
        snr_db: vec![0.0, 10.0],
        alpha: vec![0.5, 1.0],
        feedback: false,
        seed: 3,
        full_length: false,
    };
    let data = || common::synth_dataset(6, 16, 8);
    let imgs = data().eval_images(cfg.model.divisibility(), None)?;
    let mut csvs = Vec::new();
    let mut last = None;
    for run in 0..2 {
        let mut t = Trainer::new(&cfg, data())?;
        for _ in 0..cfg.train.steps {
            t.step_once(None)?;
        }
        let (rows, _) = evaluate(&t.model, &imgs, &settings)?;
        let p = dir.path().join(format!("run{run}.csv"));
        write_metrics_csv(&p, &rows)?;
        csvs.push(std::fs::read(&p)?);
        last = Some(t);
    }
    let t = last.expect("trainer");
    let ck = dir.path().join("ck.bin");
    t.checkpoint().save(&ck)?;
    let loaded = Checkpoint::load(&ck)?.model()?;
    let (rows, _) = evaluate(&loaded, &imgs, &settings)?;
    let p = dir.path().join("reloaded.csv");
    write_metrics_csv(&p, &rows)?;
    let reloaded = std::fs::read(&p)?;
    let same_runs = csvs[0] == csvs[1];
    let same_reload = csvs[1] == reloaded;
    Ok((
        same_runs && same_reload,
        format!(
            "rerun CSV {} ({} bytes), reloaded checkpoint CSV {}",
            if same_runs { "identical" } else { "differs" },
            csvs[0].len(),
            if same_reload { "identical" } else { "differs" }
        ),
    ))
}

fn main() {
    let mut results = std::collections::BTreeMap::new();
    let mut report = |n: usize, name: &str, out: Outcome| {
        let (pass, detail) = out.unwrap_or_else(|e| (false, format!("error: {e:#}")));
        eprintln!("  criterion {n} done");
        results.insert(n, (pass, format!("{name}: {detail}")));
    };

    report(1, "prior normalization", prior_normalization());
    report(2, "rate-matching oracle", rate_matching_oracle());
    report(4, "channel statistics", channel_statistics());
    report(5, "gradient check", gradient_check());
    report(6, "feedback formulation", feedback_formulation());
    report(11, "determinism and persistence", determinism());

    match models() {
        Err(e) => {
            for (n, name) in [(3, "grouping overhead"), (7, "rate adaptivity"), (8, "rate-distortion ordering"), (9, "graceful degradation"), (10, "rate-attention ablation")] {
                report(n, name, Err(anyhow::anyhow!("training failed: {e:#}")));
            }
        }
        Ok(mut m) => {
            let rows = sweep(&m.full, &SNRS, &ALPHAS);
            let low = sweep(&m.low_lambda, &[TRAIN_SNR], &ALPHAS);
            match (rows, low) {
                (Ok(rows), Ok(low)) => {
                    report(7, "rate adaptivity", rate_adaptivity(&rows));
                    report(8, "rate-distortion ordering", rd_ordering(&rows, &low));
                    report(9, "graceful degradation", graceful_degradation(&rows));
                }
                (Err(e), _) | (_, Err(e)) => {
                    for (n, name) in [(7, "rate adaptivity"), (8, "rate-distortion ordering"), (9, "graceful degradation")] {
                        report(n, name, Err(anyhow::anyhow!("evaluation failed: {e:#}")));
                    }
                }
            }
            report(10, "rate-attention ablation", rate_attention_ablation(&m));
            report(3, "grouping overhead", grouping_overhead(&mut m));
        }
    }

    let mut failed = 0;
    for (n, (pass, line)) in &results {
        if !pass {
            failed += 1;
        }
        println!("criterion {n:>2}: {} {line}", if *pass { "PASS" } else { "FAIL" });
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
