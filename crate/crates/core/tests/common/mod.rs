//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use canet_core::image::BinaryImage;
use canet_core::loss::{dice_loss, total_loss, weighted_focal_loss, F1Aggregation, LossConfig, ProbMap};
use canet_core::model::{ContextAttention, Forward, Mode, Model, ModelConfig, ParamSet, ResBlock};
use canet_core::tensor::gradcheck::{check_gradients, relative_error};
use canet_core::tensor::{BatchNormMode, Graph, Tensor, Var};
use canet_core::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod raster;

pub type Rng8 = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng8 {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], rng: &mut Rng8, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, for ops with a kink there.
pub fn away_from_zero(shape: &[usize], rng: &mut Rng8) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// Pairwise distinct values (gaps of 0.01), so max-pool has no ties.
pub fn distinct(shape: &[usize], rng: &mut Rng8) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Tensor::new(shape, order.into_iter().map(|k| k as f64 * 0.01 - 0.3).collect()).unwrap()
}

pub fn binary(shape: &[usize], rng: &mut Rng8, p: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| if rng.random_bool(p) { 1.0 } else { 0.0 })
}

/// Finite-difference step used by the per-op suites.
pub const STEP: f64 = 1e-4;

/// One randomized trial: returns the worst relative error.
pub type Trial = fn(&mut Rng8) -> Result<f64>;

fn run<F>(rng: &mut Rng8, inputs: Vec<Tensor<f64>>, build: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    Ok(check_gradients(&inputs, build, STEP, 64, rng)?.max_rel_error)
}

fn dims(rng: &mut Rng8, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn conv2d_trial(r: &mut Rng8) -> Result<f64> {
    let (b, cin, cout, k) = (dims(r, 1, 2), dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3));
    let (stride, pad) = (dims(r, 1, 2), dims(r, 0, k - 1));
    let (h, w) = (dims(r, k, k + 4), dims(r, k, k + 4));
    let x = uniform(&[b, cin, h, w], r, -1.0, 1.0);
    let wt = uniform(&[cout, cin, k, k], r, -1.0, 1.0);
    let bias = uniform(&[cout], r, -1.0, 1.0);
    run(r, vec![x, wt, bias], move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad))
}

fn conv_transpose2d_trial(r: &mut Rng8) -> Result<f64> {
    let (b, cin, cout, k) = (dims(r, 1, 2), dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3));
    let stride = dims(r, 1, 2);
    let (h, w) = (dims(r, 1, 4), dims(r, 1, 4));
    let x = uniform(&[b, cin, h, w], r, -1.0, 1.0);
    let wt = uniform(&[cin, cout, k, k], r, -1.0, 1.0);
    let bias = uniform(&[cout], r, -1.0, 1.0);
    run(r, vec![x, wt, bias], move |g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), stride))
}

fn maxpool2d_trial(r: &mut Rng8) -> Result<f64> {
    let (b, c, h, w) = (dims(r, 1, 2), dims(r, 1, 3), 2 * dims(r, 1, 4), 2 * dims(r, 1, 4));
    let x = distinct(&[b, c, h, w], r);
    run(r, vec![x], |g, v| g.maxpool2d(v[0], 2, 2))
}

fn relu_trial(r: &mut Rng8) -> Result<f64> {
    let x = away_from_zero(&[dims(r, 1, 3), dims(r, 1, 8)], r);
    run(r, vec![x], |g, v| Ok(g.relu(v[0])))
}

fn sigmoid_trial(r: &mut Rng8) -> Result<f64> {
    let x = uniform(&[dims(r, 1, 3), dims(r, 1, 8)], r, -6.0, 6.0);
    run(r, vec![x], |g, v| Ok(g.sigmoid(v[0])))
}

fn softmax_trial(r: &mut Rng8) -> Result<f64> {
    let x = uniform(&[dims(r, 1, 2), dims(r, 1, 4), dims(r, 1, 6)], r, -3.0, 3.0);
    run(r, vec![x], |g, v| g.softmax_lastdim(v[0]))
}

fn batched_matmul_trial(r: &mut Rng8) -> Result<f64> {
    let (b, m, k, n) = (dims(r, 1, 2), dims(r, 1, 4), dims(r, 1, 4), dims(r, 1, 5));
    let a = uniform(&[b, m, k], r, -1.0, 1.0);
    let c = uniform(&[b, k, n], r, -1.0, 1.0);
    run(r, vec![a, c], |g, v| g.batched_matmul(v[0], v[1]))
}

fn transpose_trial(r: &mut Rng8) -> Result<f64> {
    let x = uniform(&[dims(r, 1, 2), dims(r, 1, 4), dims(r, 1, 4)], r, -1.0, 1.0);
    run(r, vec![x], |g, v| g.transpose_last2(v[0]))
}

fn reshape_trial(r: &mut Rng8) -> Result<f64> {
    let (a, b, c) = (dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3));
    let x = uniform(&[a, b, c, 2], r, -1.0, 1.0);
    run(r, vec![x], move |g, v| g.reshape(v[0], &[a * b, c * 2]))
}

fn concat_trial(r: &mut Rng8) -> Result<f64> {
    let (b, h, w) = (dims(r, 1, 2), dims(r, 1, 4), dims(r, 1, 4));
    let x = uniform(&[b, dims(r, 1, 3), h, w], r, -1.0, 1.0);
    let y = uniform(&[b, dims(r, 1, 3), h, w], r, -1.0, 1.0);
    run(r, vec![x, y], |g, v| g.concat_channels(v[0], v[1]))
}

fn gap_trial(r: &mut Rng8) -> Result<f64> {
    let x = uniform(&[dims(r, 1, 2), dims(r, 1, 3), dims(r, 1, 5), dims(r, 1, 5)], r, -1.0, 1.0);
    run(r, vec![x], |g, v| g.global_avg_pool(v[0]))
}

fn batch_norm_train_trial(r: &mut Rng8) -> Result<f64> {
    let c = dims(r, 1, 3);
    let x = uniform(&[dims(r, 1, 3), c, dims(r, 2, 4), dims(r, 2, 4)], r, -2.0, 2.0);
    let s = uniform(&[c], r, 0.5, 1.5);
    let sh = uniform(&[c], r, -1.0, 1.0);
    run(r, vec![x, s, sh], |g, v| Ok(g.batch_norm(v[0], v[1], v[2], BatchNormMode::Train, 1e-5)?.0))
}

fn batch_norm_eval_trial(r: &mut Rng8) -> Result<f64> {
    let c = dims(r, 1, 3);
    let x = uniform(&[dims(r, 1, 2), c, dims(r, 1, 4), dims(r, 1, 4)], r, -2.0, 2.0);
    let s = uniform(&[c], r, 0.5, 1.5);
    let sh = uniform(&[c], r, -1.0, 1.0);
    let mean: Vec<f64> = (0..c).map(|_| r.random_range(-1.0..1.0)).collect();
    let var: Vec<f64> = (0..c).map(|_| r.random_range(0.5..2.0)).collect();
    run(r, vec![x, s, sh], move |g, v| {
        Ok(g.batch_norm(v[0], v[1], v[2], BatchNormMode::Eval { mean: &mean, var: &var }, 1e-5)?.0)
    })
}

fn add_trial(r: &mut Rng8) -> Result<f64> {
    let shape = [dims(r, 1, 3), dims(r, 1, 5)];
    let (a, b) = (uniform(&shape, r, -1.0, 1.0), uniform(&shape, r, -1.0, 1.0));
    run(r, vec![a, b], |g, v| g.add(v[0], v[1]))
}

fn mul_trial(r: &mut Rng8) -> Result<f64> {
    let shape = [dims(r, 1, 3), dims(r, 1, 5)];
    let (a, b) = (uniform(&shape, r, -1.0, 1.0), uniform(&shape, r, -1.0, 1.0));
    run(r, vec![a, b], |g, v| g.mul(v[0], v[1]))
}

fn scale_channels_trial(r: &mut Rng8) -> Result<f64> {
    let (b, c) = (dims(r, 1, 2), dims(r, 1, 3));
    let x = uniform(&[b, c, dims(r, 1, 4), dims(r, 1, 4)], r, -1.0, 1.0);
    let s = uniform(&[b, c, 1, 1], r, -1.0, 1.0);
    run(r, vec![x, s], |g, v| g.scale_channels(v[0], v[1]))
}

fn mul_scalar_trial(r: &mut Rng8) -> Result<f64> {
    let c = r.random_range(-3.0..3.0);
    let x = uniform(&[dims(r, 1, 3), dims(r, 1, 5)], r, -1.0, 1.0);
    run(r, vec![x], move |g, v| Ok(g.mul_scalar(v[0], c)))
}

fn sum_trial(r: &mut Rng8) -> Result<f64> {
    let x = uniform(&[dims(r, 1, 3), dims(r, 1, 5)], r, -1.0, 1.0);
    run(r, vec![x], |g, v| Ok(g.sum(v[0])))
}

fn dice_trial(r: &mut Rng8) -> Result<f64> {
    let shape = [1, 1, dims(r, 1, 8), dims(r, 1, 8)];
    let p = uniform(&shape, r, 0.01, 0.99);
    let y = binary(&shape, r, 0.3);
    run(r, vec![p], move |g, v| dice_loss(g, v[0], &y, 1.0))
}

fn focal_trial(r: &mut Rng8) -> Result<f64> {
    let shape = [1, 1, dims(r, 1, 8), dims(r, 1, 8)];
    let p = uniform(&shape, r, 0.01, 0.99);
    let y = binary(&shape, r, 0.3);
    let cfg = LossConfig::default();
    run(r, vec![p], move |g, v| weighted_focal_loss(g, v[0], &y, &cfg))
}

fn total_loss_trial(r: &mut Rng8) -> Result<f64> {
    let b = dims(r, 1, 2);
    let main = uniform(&[b, 1, 8, 8], r, -3.0, 3.0);
    let a1 = uniform(&[b, 1, 2, 2], r, -3.0, 3.0);
    let a2 = uniform(&[b, 1, 4, 4], r, -3.0, 3.0);
    let y = binary(&[b, 1, 8, 8], r, 0.2);
    let cfg = LossConfig::default();
    run(r, vec![main, a1, a2], move |g, v| Ok(total_loss(g, v[0], &v[1..], &y, &cfg)?.total))
}

/// Binds a block's parameters to leaves `vars[1..]`, with `vars[0]` the block input.
fn block_inputs(rng: &mut Rng8, p: &ParamSet<f64>, x_shape: &[usize]) -> Vec<Tensor<f64>> {
    let mut inputs = vec![uniform(x_shape, rng, -1.0, 1.0)];
    for prm in &p.params {
        // random values everywhere, including the zero-initialized biases
        inputs.push(uniform(prm.value.shape(), rng, -0.5, 0.5).map(|v| v + if prm.name.ends_with(".scale") { 1.0 } else { 0.0 }));
    }
    inputs
}

fn resblock_trial(r: &mut Rng8) -> Result<f64> {
    let (cin, cout) = (dims(r, 1, 3), dims(r, 1, 3));
    let mut p = ParamSet::<f64>::new(r.random());
    let block = ResBlock::new(&mut p, "rb", cin, cout, true);
    let inputs = block_inputs(r, &p, &[2, cin, 4, 4]);
    run(r, inputs, move |g, v| {
        let mut f = Forward::new(g, &p, &v[1..], Mode::Train);
        block.forward(&mut f, v[0])
    })
}

fn attention_trial(r: &mut Rng8) -> Result<f64> {
    let c = dims(r, 2, 4);
    let mut p = ParamSet::<f64>::new(r.random());
    let block = ContextAttention::new(&mut p, "ca", c, dims(r, 1, c));
    let inputs = block_inputs(r, &p, &[1, c, 4, 4]);
    run(r, inputs, move |g, v| {
        let mut f = Forward::new(g, &p, &v[1..], Mode::Train);
        block.forward(&mut f, v[0])
    })
}

/// Every differentiable operation and composite block, by name.
pub fn gradient_trials() -> Vec<(&'static str, Trial)> {
    vec![
        ("conv2d", conv2d_trial),
        ("conv_transpose2d", conv_transpose2d_trial),
        ("maxpool2d", maxpool2d_trial),
        ("relu", relu_trial),
        ("sigmoid", sigmoid_trial),
        ("softmax_lastdim", softmax_trial),
        ("batched_matmul", batched_matmul_trial),
        ("transpose_last2", transpose_trial),
        ("reshape", reshape_trial),
        ("concat_channels", concat_trial),
        ("global_avg_pool", gap_trial),
        ("batch_norm_train", batch_norm_train_trial),
        ("batch_norm_eval", batch_norm_eval_trial),
        ("add", add_trial),
        ("mul", mul_trial),
        ("scale_channels", scale_channels_trial),
        ("mul_scalar", mul_scalar_trial),
        ("sum", sum_trial),
        ("dice_loss", dice_trial),
        ("weighted_focal_loss", focal_trial),
        ("total_loss", total_loss_trial),
        ("res_block", resblock_trial),
        ("context_attention", attention_trial),
    ]
}

/// Worst relative error of one op over `trials` seeded trials.
pub fn worst_over_trials(trial: Trial, trials: usize, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        worst = worst.max(trial(&mut r)?);
    }
    Ok(worst)
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        base_channels: 4,
        ..ModelConfig::default()
    }
}

/// Outcome of the sampled full-model check.
#[derive(Clone, Copy, Debug)]
pub struct ModelCheck {
    pub worst: f64,
    pub probed: usize,
    pub skipped: usize,
}

/// Full-model loss gradient against a five-point stencil on `samples` random
/// parameter coordinates. The loss sits in the hundreds, so small steps drown in
/// summation roundoff; the fourth-order stencil allows a coarse `step`, and the
/// relative error is floored at 1e-4 of the largest gradient entry. Probes whose
/// stencil crosses a relu or max-pool kink are redrawn.
pub fn model_gradient_check(samples: usize, step: f64, seed: u64) -> Result<ModelCheck> {
    let mut r = rng(seed);
    let model = Model::<f64>::build(&ModelConfig {
        seed,
        ..tiny_model_config()
    })?;
    let x = uniform(&[2, 1, 32, 32], &mut r, 0.0, 1.0);
    let y = binary(&[2, 1, 32, 32], &mut r, 0.1);
    let cfg = LossConfig::default();

    let loss_of = |m: &Model<f64>, backward: bool| -> Result<(f64, u64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let pass = m.forward(&mut g, xi, Mode::Train)?;
        let l = total_loss(&mut g, pass.main, &pass.aux, &y, &cfg)?;
        let value = g.value(l.total).item();
        let grads = if backward {
            g.backward(l.total)?;
            pass.param_vars.iter().map(|&v| g.grad_or_zeros(v)).collect()
        } else {
            Vec::new()
        };
        Ok((value, g.branch_signature(), grads))
    };
    let (_, base, analytic) = loss_of(&model, true)?;
    let floor = 1e-4 * analytic.iter().flatten().fold(0.0f64, |m, g| m.max(g.abs()));
    let sizes: Vec<usize> = model.params.params.iter().map(|p| p.value.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut out = ModelCheck { worst: 0.0, probed: 0, skipped: 0 };
    while out.probed < samples && out.skipped < 10 * samples {
        let (mut pi, mut j) = (0, r.random_range(0..total));
        while j >= sizes[pi] {
            j -= sizes[pi];
            pi += 1;
        }
        let at = |d: f64| {
            let mut m = model.clone();
            m.params.params[pi].value.data_mut()[j] += d;
            loss_of(&m, false).map(|(l, s, _)| (l, s == base))
        };
        let evals = [at(step)?, at(-step)?, at(2.0 * step)?, at(-2.0 * step)?];
        if evals.iter().any(|e| !e.1) {
            out.skipped += 1;
            continue;
        }
        let numeric = (8.0 * (evals[0].0 - evals[1].0) - (evals[2].0 - evals[3].0)) / (12.0 * step);
        out.worst = out.worst.max(relative_error(analytic[pi][j], numeric, floor));
        out.probed += 1;
    }
    Ok(out)
}

/// Random blob: a union of discs and rectangles grown from a seed so it is
/// 8-connected, with a one-pixel background margin.
pub fn random_blob(rng: &mut Rng8, w: usize, h: usize) -> BinaryImage {
    let mut img = BinaryImage::new(w, h);
    let (mut cx, mut cy) = (rng.random_range(w as f64 * 0.3..w as f64 * 0.7), rng.random_range(h as f64 * 0.3..h as f64 * 0.7));
    for _ in 0..rng.random_range(1..=5) {
        let r = rng.random_range(2.0..(w.min(h) as f64 / 4.0));
        let rect = rng.random_bool(0.4);
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let inside = if rect { dx.abs() <= r && dy.abs() <= r * 0.6 } else { dx * dx + dy * dy <= r * r };
                if inside {
                    img.set(x, y, true);
                }
            }
        }
        // next primitive centred inside the current one keeps the union connected
        cx = (cx + rng.random_range(-r..r) * 0.8).clamp(2.0, w as f64 - 3.0);
        cy = (cy + rng.random_range(-r..r) * 0.6).clamp(2.0, h as f64 - 3.0);
    }
    img
}

/// Random binary image with density `p`.
pub fn random_image(rng: &mut Rng8, w: usize, h: usize, p: f64) -> BinaryImage {
    let px = (0..w * h).map(|_| rng.random_bool(p)).collect();
    BinaryImage::from_pixels(w, h, px).unwrap()
}

/// A blob with up to three small background discs punched fully inside it.
pub fn holed_blob(rng: &mut Rng8, w: usize, h: usize) -> BinaryImage {
    let mut img = random_blob(rng, w, h);
    let disc = |cx: usize, cy: usize, r: f64| {
        (0..h)
            .flat_map(move |y| (0..w).map(move |x| (x, y)))
            .filter(move |&(x, y)| (x as f64 - cx as f64).powi(2) + (y as f64 - cy as f64).powi(2) <= r * r)
    };
    for _ in 0..rng.random_range(0..=3) {
        let r = rng.random_range(0.5..2.5);
        for _ in 0..50 {
            let (cx, cy) = (rng.random_range(0..w), rng.random_range(0..h));
            if disc(cx, cy, r + 1.5).all(|(x, y)| img.get(x, y)) {
                disc(cx, cy, r).for_each(|(x, y)| img.set(x, y, false));
                break;
            }
        }
    }
    img
}

/// `n` blobs that are each a single 8-connected component.
pub fn connected_blobs(rng: &mut Rng8, n: usize, w: usize, h: usize) -> Vec<BinaryImage> {
    std::iter::repeat_with(|| random_blob(rng, w, h))
        .filter(|b| canet_core::image::count_components8(b) == 1)
        .take(n)
        .collect()
}

/// Mean (or pooled) F1 at every grid point, computed from scratch per threshold.
pub fn exhaustive_sweep(probs: &[ProbMap], gts: &[BinaryImage], agg: F1Aggregation) -> (f64, f64) {
    let f1_of = |tp: f64, fp: f64, fn_: f64| {
        if tp + fp + fn_ == 0.0 {
            return 1.0;
        }
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    };
    let mut best = (0.0, -1.0);
    for k in 1..=99 {
        let t = k as f64 / 100.0;
        let mut per_image = Vec::new();
        let (mut tp_all, mut fp_all, mut fn_all) = (0.0, 0.0, 0.0);
        for (p, g) in probs.iter().zip(gts) {
            let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
            for (&v, &y) in p.values.iter().zip(g.pixels()) {
                match (v >= t, y) {
                    (true, true) => tp += 1.0,
                    (true, false) => fp += 1.0,
                    (false, true) => fn_ += 1.0,
                    _ => {}
                }
            }
            per_image.push(f1_of(tp, fp, fn_));
            tp_all += tp;
            fp_all += fp;
            fn_all += fn_;
        }
        let score = match agg {
            F1Aggregation::Mean => per_image.iter().sum::<f64>() / per_image.len() as f64,
            F1Aggregation::Global => f1_of(tp_all, fp_all, fn_all),
        };
        if score > best.1 {
            best = (t, score);
        }
    }
    best
}

/// A random evaluation set where probabilities loosely track the ground truth.
pub fn random_eval_set(r: &mut Rng8) -> (Vec<ProbMap>, Vec<BinaryImage>) {
    let n = r.random_range(1..6);
    let (w, h) = (r.random_range(4..20), r.random_range(4..20));
    let mut probs = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..n {
        let density = r.random_range(0.0..0.4);
        let gt = random_image(r, w, h, density);
        let noise = r.random_range(0.1..1.0);
        let values = gt
            .pixels()
            .iter()
            .map(|&y| {
                let base = if y { 0.7 } else { 0.3 };
                let v: f64 = base + noise * r.random_range(-0.5..0.5);
                // snap some values onto grid points to exercise the >= rule
                if r.random_bool(0.2) {
                    (v.clamp(0.0, 1.0) * 100.0).round() / 100.0
                } else {
                    v.clamp(0.0, 1.0)
                }
            })
            .collect();
        probs.push(ProbMap::new(w, h, values).unwrap());
        gts.push(gt);
    }
    (probs, gts)
}
