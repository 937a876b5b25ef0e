//! Training objective and evaluation metrics.
//!
//! The objective on one head is `lambda_dice * dice + lambda_focal * focal`
//! over sigmoid probabilities; auxiliary heads add the same combination against
//! max-pooled ground truth, scaled by `aux_weight`.

mod metrics;

pub use metrics::{
    adaptive_threshold, pixel_f1, threshold_grid, Counts, EvalReport, F1Aggregation, ImageScore,
    PrF1, ProbMap,
};

use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Graph, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub epsilon: f64,
    pub gamma: f64,
    pub w_pos: f64,
    pub w_neg: f64,
    pub lambda_dice: f64,
    pub lambda_focal: f64,
    pub aux_weight: f64,
    pub prob_clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            gamma: 2.0,
            w_pos: 0.01,
            w_neg: 0.99,
            lambda_dice: 1.0,
            lambda_focal: 100.0,
            aux_weight: 1.0,
            prob_clamp: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.w_pos >= 0.0 && self.w_neg >= 0.0) {
            return Err(Error::Config("w_pos and w_neg must be >= 0".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.prob_clamp > 0.0 && self.prob_clamp < 0.5) {
            return Err(Error::Config(format!(
                "prob_clamp must lie in (0, 0.5), got {}",
                self.prob_clamp
            )));
        }
        Ok(())
    }
}

fn check_same<T: Scalar>(op: &'static str, p: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
    if p.shape() != y.shape() {
        return Err(Error::shape(
            op,
            "all axes",
            format!("prediction {:?} vs target {:?}", p.shape(), y.shape()),
        ));
    }
    Ok(())
}

// ------------------------------------------------------------------ dice

/// `1 - 2 (sum(y p) + eps) / (sum(y) + sum(p) + eps)`.
pub fn dice_value<T: Scalar>(p: &[T], y: &[T], eps: f64) -> f64 {
    let (mut inter, mut total) = (0.0, 0.0);
    for (&pv, &yv) in p.iter().zip(y) {
        inter += pv.as_f64() * yv.as_f64();
        total += pv.as_f64() + yv.as_f64();
    }
    1.0 - 2.0 * (inter + eps) / (total + eps)
}

struct Dice<T> {
    target: Vec<T>,
    eps: f64,
}

impl<T: Scalar> CustomOp<T> for Dice<T> {
    fn name(&self) -> &'static str {
        "dice_loss"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, gout: &[T]) -> Vec<Option<Vec<T>>> {
        let p = inputs[0].data();
        let (mut inter, mut total) = (0.0, 0.0);
        for (&pv, &yv) in p.iter().zip(&self.target) {
            inter += pv.as_f64() * yv.as_f64();
            total += pv.as_f64() + yv.as_f64();
        }
        let (num, den) = (inter + self.eps, total + self.eps);
        let g = gout[0].as_f64();
        let grad = self
            .target
            .iter()
            .map(|&yv| T::from_f64(g * -2.0 * (yv.as_f64() * den - num) / (den * den)))
            .collect();
        vec![Some(grad)]
    }
}

pub fn dice_loss<T: Scalar>(g: &mut Graph<T>, p: Var, y: &Tensor<T>, eps: f64) -> Result<Var> {
    check_same("dice_loss", g.value(p), y)?;
    if !(eps > 0.0) {
        return Err(Error::Config(format!("epsilon must be > 0, got {eps}")));
    }
    let v = dice_value(g.value(p).data(), y.data(), eps);
    let op = Dice {
        target: y.data().to_vec(),
        eps,
    };
    Ok(g.custom(&[p], Tensor::scalar(T::from_f64(v)), Box::new(op)))
}

// ----------------------------------------------------------------- focal

struct FocalParams {
    gamma: f64,
    w_pos: f64,
    w_neg: f64,
    clamp: f64,
}

impl FocalParams {
    fn from(cfg: &LossConfig) -> Self {
        Self {
            gamma: cfg.gamma,
            w_pos: cfg.w_pos,
            w_neg: cfg.w_neg,
            clamp: cfg.prob_clamp,
        }
    }

    /// Per-pixel loss and its derivative in `p` (zero where the clamp is active).
    fn eval(&self, p: f64, y: f64) -> (f64, f64) {
        let (lo, hi) = (self.clamp, 1.0 - self.clamp);
        let q = p.clamp(lo, hi);
        let gm = self.gamma;
        let pos = -self.w_pos * (1.0 - q).powf(gm) * q.ln();
        let neg = -self.w_neg * q.powf(gm) * (1.0 - q).ln();
        let loss = y * pos + (1.0 - y) * neg;
        if p < lo || p > hi {
            return (loss, 0.0);
        }
        let dpos = if gm == 0.0 {
            -self.w_pos / q
        } else {
            -self.w_pos * (-gm * (1.0 - q).powf(gm - 1.0) * q.ln() + (1.0 - q).powf(gm) / q)
        };
        let dneg = if gm == 0.0 {
            self.w_neg / (1.0 - q)
        } else {
            -self.w_neg * (gm * q.powf(gm - 1.0) * (1.0 - q).ln() - q.powf(gm) / (1.0 - q))
        };
        (loss, y * dpos + (1.0 - y) * dneg)
    }
}

struct Focal<T> {
    target: Vec<T>,
    params: FocalParams,
}

impl<T: Scalar> CustomOp<T> for Focal<T> {
    fn name(&self) -> &'static str {
        "weighted_focal_loss"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, gout: &[T]) -> Vec<Option<Vec<T>>> {
        let p = inputs[0].data();
        let scale = gout[0].as_f64() / p.len().max(1) as f64;
        let grad = p
            .iter()
            .zip(&self.target)
            .map(|(&pv, &yv)| T::from_f64(scale * self.params.eval(pv.as_f64(), yv.as_f64()).1))
            .collect();
        vec![Some(grad)]
    }
}

/// Mean over pixels of `-[y W_pos (1-p)^g ln p + (1-y) W_neg p^g ln(1-p)]`,
/// with `p` clamped to `[prob_clamp, 1 - prob_clamp]`.
pub fn weighted_focal_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: Var,
    y: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<Var> {
    check_same("weighted_focal_loss", g.value(p), y)?;
    cfg.validate()?;
    let params = FocalParams::from(cfg);
    let pd = g.value(p).data();
    let n = pd.len().max(1) as f64;
    let v: f64 = pd
        .iter()
        .zip(y.data())
        .map(|(&pv, &yv)| params.eval(pv.as_f64(), yv.as_f64()).0)
        .sum::<f64>()
        / n;
    let op = Focal {
        target: y.data().to_vec(),
        params,
    };
    Ok(g.custom(&[p], Tensor::scalar(T::from_f64(v)), Box::new(op)))
}

// ----------------------------------------------------------------- total

/// Loss values of one prediction head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadLoss {
    pub dice: f64,
    pub focal: f64,
    /// 1 for the main head, `aux_weight` for auxiliary heads.
    pub weight: f64,
}

impl HeadLoss {
    pub fn combined(&self, cfg: &LossConfig) -> f64 {
        cfg.lambda_dice * self.dice + cfg.lambda_focal * self.focal
    }
}

#[derive(Debug)]
pub struct TotalLoss {
    pub total: Var,
    /// Main head first, then the auxiliary heads in the order given.
    pub heads: Vec<HeadLoss>,
}

/// Block max-pooling of a `[B, 1, H, W]` mask, matching [`crate::image::downsample_mask`].
pub fn downsample_target<T: Scalar>(t: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = t.dims4("downsample_target")?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Invalid(format!(
            "{h}x{w} target is not divisible by downsample factor {factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let d = t.data();
    Ok(Tensor::from_fn(&[b, c, oh, ow], |i| {
        let (plane, rest) = (i / (oh * ow), i % (oh * ow));
        let (oy, ox) = (rest / ow, rest % ow);
        let base = plane * h * w;
        let mut m = T::zero();
        for dy in 0..factor {
            for dx in 0..factor {
                m = m.max(d[base + (oy * factor + dy) * w + ox * factor + dx]);
            }
        }
        m
    }))
}

fn head_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, target: &Tensor<T>, cfg: &LossConfig) -> Result<(Var, f64, f64)> {
    let p = g.sigmoid(logits);
    let dice = dice_loss(g, p, target, cfg.epsilon)?;
    let focal = weighted_focal_loss(g, p, target, cfg)?;
    let (dv, fv) = (g.value(dice).item().as_f64(), g.value(focal).item().as_f64());
    let a = g.mul_scalar(dice, T::from_f64(cfg.lambda_dice));
    let b = g.mul_scalar(focal, T::from_f64(cfg.lambda_focal));
    Ok((g.add(a, b)?, dv, fv))
}

/// Combined objective over the main head and any auxiliary heads.
///
/// `target` is the full-resolution `{0, 1}` mask `[B, 1, H, W]`; each auxiliary
/// head is compared with the target max-pooled down to its resolution.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    main: Var,
    aux: &[Var],
    target: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<TotalLoss> {
    cfg.validate()?;
    let (mut total, dv, fv) = head_loss(g, main, target, cfg)?;
    let mut heads = vec![HeadLoss {
        dice: dv,
        focal: fv,
        weight: 1.0,
    }];
    let [_, _, h, w] = target.dims4("total_loss")?;
    for &a in aux {
        let [_, _, ah, aw] = g.value(a).dims4("total_loss")?;
        if ah == 0 || h % ah != 0 || w % aw != 0 || h / ah != w / aw || !(h / ah).is_power_of_two() {
            return Err(Error::shape(
                "total_loss",
                "auxiliary head resolution",
                format!("{ah}x{aw} head cannot be matched to a downsampled {h}x{w} target"),
            ));
        }
        let small = downsample_target(target, h / ah)?;
        let (term, dv, fv) = head_loss(g, a, &small, cfg)?;
        let term = g.mul_scalar(term, T::from_f64(cfg.aux_weight));
        total = g.add(total, term)?;
        heads.push(HeadLoss {
            dice: dv,
            focal: fv,
            weight: cfg.aux_weight,
        });
    }
    Ok(TotalLoss { total, heads })
}
