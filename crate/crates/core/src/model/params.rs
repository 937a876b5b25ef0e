use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{BatchNormMode, BatchStats, Graph, Scalar, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Running statistics of one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NormState<T> {
    pub name: String,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

/// Owns every parameter and normalization state of a network; layers refer into it by index.
#[derive(Clone, Debug)]
pub struct ParamSet<T> {
    pub params: Vec<Param<T>>,
    pub norms: Vec<NormState<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            params: Vec::new(),
            norms: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn add(&mut self, name: String, value: Tensor<T>) -> usize {
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate {name}");
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param { name, value, grad });
        self.params.len() - 1
    }

    /// He-style normal draw, `std = sqrt(2 / fan_in)`. Values are drawn in
    /// double precision so `f32` and `f64` builds agree up to rounding.
    fn normal(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)));
        self.add(name, t)
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, padding: usize, bias: bool) -> Conv {
        let weight = self.normal(format!("{name}.weight"), &[cout, cin, k, k], cin * k * k);
        let bias = bias.then(|| self.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Conv {
            weight,
            bias,
            padding,
        }
    }

    pub fn conv_transpose(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> ConvTranspose {
        // with kernel == stride every output pixel sees exactly `cin` taps
        let weight = self.normal(format!("{name}.weight"), &[cin, cout, k, k], cin);
        let bias = self.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        ConvTranspose {
            weight,
            bias,
            stride: k,
        }
    }

    pub fn norm(&mut self, name: &str, channels: usize) -> Norm {
        let scale = self.add(format!("{name}.scale"), Tensor::full(&[channels], T::one()));
        let shift = self.add(format!("{name}.shift"), Tensor::zeros(&[channels]));
        self.norms.push(NormState {
            name: name.to_string(),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        });
        Norm {
            scale,
            shift,
            state: self.norms.len() - 1,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Copies every parameter onto `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p.value.clone())).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Adds the gradients recorded on `g` for the bound leaves.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, vars: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if let Some(gr) = g.grad(v) {
                p.grad.data_mut().iter_mut().zip(gr).for_each(|(a, &b)| *a += b);
            }
        }
    }

    /// Folds observed batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, observed: &[(usize, BatchStats<T>)]) {
        let m = T::from_f64(BN_MOMENTUM);
        for (idx, stats) in observed {
            let st = &mut self.norms[*idx];
            for (r, &b) in st.running_mean.iter_mut().zip(&stats.mean) {
                *r = (T::one() - m) * *r + m * b;
            }
            for (r, &b) in st.running_var.iter_mut().zip(&stats.var) {
                *r = (T::one() - m) * *r + m * b;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// State threaded through one forward pass.
pub struct Forward<'a, T: Scalar> {
    pub graph: &'a mut Graph<T>,
    pub params: &'a ParamSet<T>,
    pub vars: &'a [Var],
    pub mode: Mode,
    /// Batch statistics observed by train-mode normalization, keyed by norm index.
    pub batch_stats: Vec<(usize, BatchStats<T>)>,
    /// Position-correlation maps produced by attention blocks, in evaluation order.
    pub attention_maps: Vec<Var>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, params: &'a ParamSet<T>, vars: &'a [Var], mode: Mode) -> Self {
        Self {
            graph,
            params,
            vars,
            mode,
            batch_stats: Vec::new(),
            attention_maps: Vec::new(),
        }
    }

    pub fn var(&self, param: usize) -> Var {
        self.vars[param]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub weight: usize,
    pub bias: Option<usize>,
    pub padding: usize,
}

impl Conv {
    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (f.var(self.weight), self.bias.map(|b| f.var(b)));
        f.graph.conv2d(x, w, b, 1, self.padding)
    }

    pub fn out_channels<T: Scalar>(&self, p: &ParamSet<T>) -> usize {
        p.params[self.weight].value.shape()[0]
    }

    pub fn in_channels<T: Scalar>(&self, p: &ParamSet<T>) -> usize {
        p.params[self.weight].value.shape()[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTranspose {
    pub weight: usize,
    pub bias: usize,
    pub stride: usize,
}

impl ConvTranspose {
    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (f.var(self.weight), f.var(self.bias));
        f.graph.conv_transpose2d(x, w, Some(b), self.stride)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Norm {
    pub scale: usize,
    pub shift: usize,
    pub state: usize,
}

impl Norm {
    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let (s, b) = (f.var(self.scale), f.var(self.shift));
        let params = f.params;
        let mode = match f.mode {
            Mode::Train => BatchNormMode::Train,
            Mode::Eval => {
                let st = params
                    .norms
                    .get(self.state)
                    .ok_or_else(|| Error::Invalid(format!("missing norm state {}", self.state)))?;
                BatchNormMode::Eval {
                    mean: &st.running_mean,
                    var: &st.running_var,
                }
            }
        };
        let (y, stats) = f.graph.batch_norm(x, s, b, mode, BN_EPS)?;
        if let Some(stats) = stats {
            f.batch_stats.push((self.state, stats));
        }
        Ok(y)
    }
}
