//! SGD with momentum and the cosine-annealed learning rate.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Momentum SGD: `v <- momentum * v + g; w <- w - lr * v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub momentum: T,
    pub velocities: Vec<Tensor<T>>,
    pub steps: u64,
}

impl<T: Scalar> Sgd<T> {
    /// One zeroed velocity buffer per parameter shape.
    pub fn new(momentum: f64, shapes: &[&[usize]]) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self {
            momentum: T::from_f64(momentum),
            velocities: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            steps: 0,
        })
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != self.velocities.len() || grads.len() != params.len() {
            return Err(Error::Invalid(format!(
                "sgd_step: {} params, {} grads, {} velocity buffers",
                params.len(),
                grads.len(),
                self.velocities.len()
            )));
        }
        for (i, ((p, g), v)) in params.iter().zip(grads).zip(&self.velocities).enumerate() {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("parameter {i}"),
                    format!("param {:?}, grad {:?}, velocity {:?}", p.shape(), g.shape(), v.shape()),
                ));
            }
        }
        let lr = T::from_f64(lr);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocities) {
            for ((w, &gv), vel) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vel = self.momentum * *vel + gv;
                *w -= lr * *vel;
            }
        }
        self.steps += 1;
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [&mut Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Cosine annealing from `lr_max` at step 0 down to `lr_min` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            lr_max: 0.02,
            lr_min: 0.0,
            total_steps: 1000,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.lr_min && self.lr_min <= self.lr_max) {
            return Err(Error::Config(format!(
                "need 0 <= lr_min <= lr_max, got lr_min={} lr_max={}",
                self.lr_min, self.lr_max
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        Ok(())
    }
}

pub fn cosine_lr(schedule: &LrSchedule, t: usize) -> Result<f64> {
    schedule.validate()?;
    if t > schedule.total_steps {
        return Err(Error::Invalid(format!(
            "cosine_lr: step {t} outside [0, {}]",
            schedule.total_steps
        )));
    }
    // endpoints are returned exactly rather than through the cosine
    if t == 0 {
        return Ok(schedule.lr_max);
    }
    if t == schedule.total_steps {
        return Ok(schedule.lr_min);
    }
    let frac = t as f64 / schedule.total_steps as f64;
    let lr = schedule.lr_min
        + 0.5 * (schedule.lr_max - schedule.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos());
    Ok(lr.clamp(schedule.lr_min, schedule.lr_max))
}
