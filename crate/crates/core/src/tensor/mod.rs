//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! Values live in [`Tensor`]; a [`Graph`] records every operation applied to
//! its [`Var`] handles and replays them backwards in [`Graph::backward`].

pub mod gradcheck;
mod graph;
mod kernels;
pub mod optim;
mod scalar;

pub use graph::{BatchNormMode, BatchStats, CustomOp, Graph, Var};
pub use optim::{clip_grad_norm, cosine_lr, LrSchedule, Sgd};
pub use scalar::{gemm, Scalar};

use crate::error::{Error, Result};

/// Dense row-major array. Activations use the `[batch, channels, height, width]` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                "data length",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    /// Extents of a rank-4 tensor, or an error naming `op`.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [b, c, h, w] => Ok([b, c, h, w]),
            _ => Err(Error::shape(
                op,
                "rank",
                format!("expected a rank-4 tensor, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                "element count",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Element-wise conversion to another precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::from_f64(x.as_f64())).collect(),
        }
    }

    /// Sum of element-wise products with a tensor of equal length.
    pub fn dot(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum()
    }

    /// Copy of batch element `b` of a rank-4 tensor, keeping a unit batch axis.
    pub fn batch_item(&self, b: usize) -> Result<Self> {
        let [nb, c, h, w] = self.dims4("batch_item")?;
        if b >= nb {
            return Err(Error::Invalid(format!("batch index {b} out of range {nb}")));
        }
        let step = c * h * w;
        Ok(Self {
            shape: vec![1, c, h, w],
            data: self.data[b * step..(b + 1) * step].to_vec(),
        })
    }

    /// Stacks rank-4 tensors with identical `[1, C, H, W]`-compatible trailing extents along the batch axis.
    pub fn stack_batch(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Invalid("stack_batch: no tensors".into()))?;
        let [_, c, h, w] = first.dims4("stack_batch")?;
        let mut data = Vec::new();
        let mut total = 0;
        for t in items {
            let [b, c2, h2, w2] = t.dims4("stack_batch")?;
            if (c2, h2, w2) != (c, h, w) {
                return Err(Error::shape(
                    "stack_batch",
                    "trailing extents",
                    format!("{:?} vs {:?}", first.shape, t.shape),
                ));
            }
            total += b;
            data.extend_from_slice(&t.data);
        }
        Ok(Self {
            shape: vec![total, c, h, w],
            data,
        })
    }
}
