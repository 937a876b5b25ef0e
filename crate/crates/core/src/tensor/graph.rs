use super::kernels::{self, Window};
use super::scalar::{gemm, Scalar};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside the engine (the fused losses use this).
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// One gradient per input, in input order; `None` skips inputs that need none.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &[T],
    ) -> Vec<Option<Vec<T>>>;
}

/// Batch statistics observed by a train-mode batch norm, per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub enum BatchNormMode<'a, T> {
    /// Normalize by the statistics of the current batch.
    Train,
    /// Normalize by fixed running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        window: Window,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        window: Window,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Matmul(Var, Var),
    TransposeLast2(Var),
    Reshape(Var),
    Concat(Var, Var),
    GlobalAvgPool(Var),
    BatchNorm {
        input: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    ScaleChannels(Var, Var),
    MulScalar(Var, T),
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Operation tape. Nodes are appended in evaluation order, so every input
/// precedes its consumers and a reverse sweep visits them topologically.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`]; `None` if it never received one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient of a leaf, or zeros when it is unreachable from the loss.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<T> {
        self.grad(v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![T::zero(); self.value(v).len()])
    }

    /// Fingerprint of every branch taken by the recorded piecewise ops (relu
    /// signs, max-pool winners). Two evaluations with equal signatures lie on the
    /// same smooth piece, so a finite difference between them is meaningful.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for n in &self.nodes {
            match &n.op {
                Op::Relu(x) => self.value(*x).data().iter().for_each(|v| (*v > T::zero()).hash(&mut h)),
                Op::MaxPool2d { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---------------------------------------------------------------- ops

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [b, cin, h, w] = self.value(input).dims4("conv2d")?;
        let [cout, wcin, kh, kw] = self.value(weight).dims4("conv2d")?;
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                "axis 1 (input channels)",
                format!("input has {cin}, weight expects {wcin}"),
            ));
        }
        if kh != kw {
            return Err(Error::shape("conv2d", "axes 2/3 (kernel)", "kernel must be square"));
        }
        if stride == 0 {
            return Err(Error::Invalid("conv2d: stride must be positive".into()));
        }
        if kh > h + 2 * padding {
            return Err(Error::shape("conv2d", "axis 2 (height)", format!("kernel {kh} exceeds padded height {}", h + 2 * padding)));
        }
        if kw > w + 2 * padding {
            return Err(Error::shape("conv2d", "axis 3 (width)", format!("kernel {kw} exceeds padded width {}", w + 2 * padding)));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return Err(Error::shape(
                    "conv2d",
                    "bias",
                    format!("expected [{cout}], got {:?}", self.shape(bv)),
                ));
            }
        }
        let window = Window::new(cin, h, w, kh, stride, padding);
        let mut out = Tensor::zeros(&[b, cout, window.oh, window.ow]);
        kernels::conv2d_forward(
            self.value(input).data(),
            b,
            &window,
            self.value(weight).data(),
            cout,
            bias.map(|v| self.value(v).data()),
            out.data_mut(),
        );
        let mut ins = vec![input, weight];
        ins.extend(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                window,
            },
            &ins,
        ))
    }

    /// Transposed convolution with weight `[cin, cout, k, k]` and no padding;
    /// output extent is `(h - 1) * stride + k`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        let [b, cin, h, w] = self.value(input).dims4("conv_transpose2d")?;
        let [wcin, cout, kh, kw] = self.value(weight).dims4("conv_transpose2d")?;
        if wcin != cin {
            return Err(Error::shape(
                "conv_transpose2d",
                "axis 1 (input channels)",
                format!("input has {cin}, weight expects {wcin}"),
            ));
        }
        if kh != kw {
            return Err(Error::shape("conv_transpose2d", "axes 2/3 (kernel)", "kernel must be square"));
        }
        if stride == 0 || h == 0 || w == 0 {
            return Err(Error::Invalid("conv_transpose2d: empty input or zero stride".into()));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return Err(Error::shape(
                    "conv_transpose2d",
                    "bias",
                    format!("expected [{cout}], got {:?}", self.shape(bv)),
                ));
            }
        }
        let (oh, ow) = ((h - 1) * stride + kh, (w - 1) * stride + kw);
        let window = Window::new(cout, oh, ow, kh, stride, 0);
        debug_assert_eq!((window.oh, window.ow), (h, w));
        let mut out = Tensor::zeros(&[b, cout, oh, ow]);
        kernels::conv_transpose2d_forward(
            self.value(input).data(),
            b,
            cin,
            &window,
            self.value(weight).data(),
            bias.map(|v| self.value(v).data()),
            out.data_mut(),
        );
        let mut ins = vec![input, weight];
        ins.extend(bias);
        Ok(self.push(
            out,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                window,
            },
            &ins,
        ))
    }

    /// Max pooling; ties route the gradient to the first element in row-major scan order.
    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let [b, c, h, w] = self.value(input).dims4("maxpool2d")?;
        if window == 0 || stride == 0 {
            return Err(Error::Invalid("maxpool2d: window and stride must be positive".into()));
        }
        if h % stride != 0 {
            return Err(Error::shape("maxpool2d", "axis 2 (height)", format!("{h} not divisible by stride {stride}")));
        }
        if w % stride != 0 {
            return Err(Error::shape("maxpool2d", "axis 3 (width)", format!("{w} not divisible by stride {stride}")));
        }
        if window > h || window > w {
            return Err(Error::shape("maxpool2d", "axes 2/3", format!("window {window} exceeds {h}x{w}")));
        }
        let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..window {
                        for dx in 0..window {
                            let i = base + (oy * stride + dy) * w + ox * stride + dx;
                            if x[i] > x[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(&[b, c, oh, ow], out)?;
        Ok(self.push(out, Op::MaxPool2d { input, argmax }, &[input]))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(out, Op::Relu(input), &[input])
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = self.value(input).map(sigmoid);
        self.push(out, Op::Sigmoid(input), &[input])
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax_lastdim(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let n = *x
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax_lastdim", "rank", "scalar input"))?;
        let mut out = x.clone();
        if n > 0 {
            for row in out.data_mut().chunks_mut(n) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
        }
        Ok(self.push(out, Op::Softmax(input), &[input]))
    }

    /// Batched matrix product `[..., m, k] x [..., k, n]`.
    pub fn batched_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = matmul_dims(&sa, &sb)?;
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = Tensor::zeros(&out_shape);
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            let od = out.data_mut();
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    false,
                    &bd[i * k * n..(i + 1) * k * n],
                    false,
                    &mut od[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        Ok(self.push(out, Op::Matmul(a, b), &[a, b]))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let s = x.shape();
        if s.len() < 2 {
            return Err(Error::shape("transpose_last2", "rank", format!("{s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let mut shape = s.to_vec();
        let len = shape.len();
        shape.swap(len - 2, len - 1);
        let data = transpose_batches(x.data(), r, c);
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::TransposeLast2(input), &[input]))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(input), &[input]))
    }

    /// Concatenation along axis 1 of two rank-4 tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ba, ca, ha, wa] = self.value(a).dims4("concat_channels")?;
        let [bb, cb, hb, wb] = self.value(b).dims4("concat_channels")?;
        if ba != bb {
            return Err(Error::shape("concat_channels", "axis 0 (batch)", format!("{ba} vs {bb}")));
        }
        if ha != hb {
            return Err(Error::shape("concat_channels", "axis 2 (height)", format!("{ha} vs {hb}")));
        }
        if wa != wb {
            return Err(Error::shape("concat_channels", "axis 3 (width)", format!("{wa} vs {wb}")));
        }
        let plane = ha * wa;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(ad.len() + bd.len());
        for i in 0..ba {
            data.extend_from_slice(&ad[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&bd[i * cb * plane..(i + 1) * cb * plane]);
        }
        let out = Tensor::new(&[ba, ca + cb, ha, wa], data)?;
        Ok(self.push(out, Op::Concat(a, b), &[a, b]))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(input).dims4("global_avg_pool")?;
        let plane = h * w;
        let scale = T::from_f64(1.0 / plane as f64);
        let data = self
            .value(input)
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * scale)
            .collect();
        let out = Tensor::new(&[b, c, 1, 1], data)?;
        Ok(self.push(out, Op::GlobalAvgPool(input), &[input]))
    }

    /// Per-channel normalization with affine `scale`/`shift` of shape `[C]`.
    /// Train mode also returns the (biased) batch statistics for the caller to fold
    /// into its running estimates.
    pub fn batch_norm(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        mode: BatchNormMode<'_, T>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let [b, c, h, w] = self.value(input).dims4("batch_norm")?;
        for (v, name) in [(scale, "scale"), (shift, "shift")] {
            if self.shape(v) != [c] {
                return Err(Error::shape(
                    "batch_norm",
                    name,
                    format!("expected [{c}], got {:?}", self.shape(v)),
                ));
            }
        }
        let plane = h * w;
        let count = b * plane;
        let x = self.value(input).data();
        let (mean, var, train) = match mode {
            BatchNormMode::Train => {
                if count < 2 {
                    return Err(Error::Invalid(format!(
                        "batch_norm: train mode needs at least 2 values per channel, got {count}"
                    )));
                }
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for ci in 0..c {
                    let mut s = 0.0;
                    for bi in 0..b {
                        let off = (bi * c + ci) * plane;
                        s += x[off..off + plane].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut ss = 0.0;
                    for bi in 0..b {
                        let off = (bi * c + ci) * plane;
                        ss += x[off..off + plane]
                            .iter()
                            .map(|v| (v.as_f64() - m).powi(2))
                            .sum::<f64>();
                    }
                    mean[ci] = m;
                    var[ci] = ss / count as f64;
                }
                (mean, var, true)
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", "running stats", format!("expected {c} channels")));
                }
                (
                    mean.iter().map(|v| v.as_f64()).collect(),
                    var.iter().map(|v| v.as_f64()).collect(),
                    false,
                )
            }
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::from_f64(1.0 / (v + eps).sqrt())).collect();
        let (g, bt) = (self.value(scale).data(), self.value(shift).data());
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * plane;
                let m = T::from_f64(mean[ci]);
                for i in off..off + plane {
                    let xh = (x[i] - m) * inv_std[ci];
                    xhat[i] = xh;
                    out[i] = g[ci] * xh + bt[ci];
                }
            }
        }
        let out = Tensor::new(&[b, c, h, w], out)?;
        let stats = train.then(|| BatchStats {
            mean: mean.iter().map(|&v| T::from_f64(v)).collect(),
            var: var.iter().map(|&v| T::from_f64(v)).collect(),
        });
        let v = self.push(
            out,
            Op::BatchNorm {
                input,
                scale,
                shift,
                xhat,
                inv_std,
                train,
            },
            &[input, scale, shift],
        );
        Ok((v, stats))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                "all axes",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Element-wise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                "all axes",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `x[b, c, :, :] * s[b, c]` for `x: [B, C, H, W]`, `s: [B, C, 1, 1]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4("scale_channels")?;
        if self.shape(s) != [b, c, 1, 1] {
            return Err(Error::shape(
                "scale_channels",
                "gate",
                format!("expected [{b}, {c}, 1, 1], got {:?}", self.shape(s)),
            ));
        }
        let plane = h * w;
        let sd = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .zip(sd)
            .flat_map(|(p, &g)| p.iter().map(move |&v| v * g))
            .collect();
        let out = Tensor::new(&[b, c, h, w], data)?;
        Ok(self.push(out, Op::ScaleChannels(x, s), &[x, s]))
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::MulScalar(x, c), &[x])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Records the result of an externally computed operation.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across calls
    /// until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&gout).for_each(|(a, &g)| *a += g),
                    None => node.grad = Some(gout),
                }
                continue;
            }
            self.backward_node(i, &gout, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                window,
            } => {
                let cout = self.shape(*weight)[0];
                let batch = self.shape(*input)[0];
                let mut gx = needs(*input).then(|| vec![T::zero(); self.value(*input).len()]);
                let mut gw = needs(*weight).then(|| vec![T::zero(); self.value(*weight).len()]);
                let mut gb = bias.filter(|b| needs(*b)).map(|_| vec![T::zero(); cout]);
                kernels::conv2d_backward(
                    self.value(*input).data(),
                    batch,
                    window,
                    self.value(*weight).data(),
                    cout,
                    gout,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                accumulate(grads, *input, gx);
                accumulate(grads, *weight, gw);
                if let Some(b) = bias {
                    accumulate(grads, *b, gb);
                }
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                window,
            } => {
                let [batch, cin, _, _] = dims(self.shape(*input));
                let mut gx = needs(*input).then(|| vec![T::zero(); self.value(*input).len()]);
                let mut gw = needs(*weight).then(|| vec![T::zero(); self.value(*weight).len()]);
                let mut gb = bias.filter(|b| needs(*b)).map(|_| vec![T::zero(); window.c]);
                kernels::conv_transpose2d_backward(
                    self.value(*input).data(),
                    batch,
                    cin,
                    window,
                    self.value(*weight).data(),
                    gout,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                accumulate(grads, *input, gx);
                accumulate(grads, *weight, gw);
                if let Some(b) = bias {
                    accumulate(grads, *b, gb);
                }
            }
            Op::MaxPool2d { input, argmax, .. } => {
                let mut gx = vec![T::zero(); self.value(*input).len()];
                for (&src, &g) in argmax.iter().zip(gout) {
                    gx[src] += g;
                }
                accumulate(grads, *input, Some(gx));
            }
            Op::Relu(x) => {
                let gx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                accumulate(grads, *x, Some(gx));
            }
            Op::Sigmoid(x) => {
                let gx = node
                    .value
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&y, &g)| g * y * (T::one() - y))
                    .collect();
                accumulate(grads, *x, Some(gx));
            }
            Op::Softmax(x) => {
                let n = *node.value.shape().last().unwrap_or(&1);
                let mut gx = vec![T::zero(); gout.len()];
                if n > 0 {
                    for ((y, g), dst) in node
                        .value
                        .data()
                        .chunks(n)
                        .zip(gout.chunks(n))
                        .zip(gx.chunks_mut(n))
                    {
                        let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            dst[j] = y[j] * (g[j] - dot);
                        }
                    }
                }
                accumulate(grads, *x, Some(gx));
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, k, n) = matmul_dims(sa, sb).expect("validated in forward");
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    let mut ga = vec![T::zero(); ad.len()];
                    for i in 0..batch {
                        // dA = dC * B^T
                        gemm(
                            m,
                            n,
                            k,
                            &gout[i * m * n..(i + 1) * m * n],
                            false,
                            &bd[i * k * n..(i + 1) * k * n],
                            true,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    accumulate(grads, *a, Some(ga));
                }
                if needs(*b) {
                    let mut gb = vec![T::zero(); bd.len()];
                    for i in 0..batch {
                        // dB = A^T * dC
                        gemm(
                            k,
                            m,
                            n,
                            &ad[i * m * k..(i + 1) * m * k],
                            true,
                            &gout[i * m * n..(i + 1) * m * n],
                            false,
                            &mut gb[i * k * n..(i + 1) * k * n],
                            false,
                        );
                    }
                    accumulate(grads, *b, Some(gb));
                }
            }
            Op::TransposeLast2(x) => {
                let s = node.value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                accumulate(grads, *x, Some(transpose_batches(gout, r, c)));
            }
            Op::Reshape(x) => accumulate(grads, *x, Some(gout.to_vec())),
            Op::Concat(a, b) => {
                let [batch, ca, h, w] = dims(self.shape(*a));
                let cb = self.shape(*b)[1];
                let plane = h * w;
                let mut ga = Vec::with_capacity(batch * ca * plane);
                let mut gb = Vec::with_capacity(batch * cb * plane);
                for chunk in gout.chunks((ca + cb) * plane) {
                    ga.extend_from_slice(&chunk[..ca * plane]);
                    gb.extend_from_slice(&chunk[ca * plane..]);
                }
                accumulate(grads, *a, needs(*a).then_some(ga));
                accumulate(grads, *b, needs(*b).then_some(gb));
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = dims(self.shape(*x));
                let plane = h * w;
                let scale = T::from_f64(1.0 / plane as f64);
                let gx = gout
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g * scale, plane))
                    .collect();
                accumulate(grads, *x, Some(gx));
            }
            Op::BatchNorm {
                input,
                scale,
                shift,
                xhat,
                inv_std,
                train,
            } => {
                let [b, c, h, w] = dims(self.shape(*input));
                let plane = h * w;
                let count = (b * plane) as f64;
                let gamma = self.value(*scale).data();
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * plane;
                        for j in off..off + plane {
                            sum_g[ci] += gout[j].as_f64();
                            sum_gx[ci] += (gout[j] * xhat[j]).as_f64();
                        }
                    }
                }
                if needs(*input) {
                    let mut gx = vec![T::zero(); gout.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * plane;
                            let k = gamma[ci] * inv_std[ci];
                            if *train {
                                let mg = T::from_f64(sum_g[ci] / count);
                                let mgx = T::from_f64(sum_gx[ci] / count);
                                for j in off..off + plane {
                                    gx[j] = k * (gout[j] - mg - xhat[j] * mgx);
                                }
                            } else {
                                for j in off..off + plane {
                                    gx[j] = k * gout[j];
                                }
                            }
                        }
                    }
                    accumulate(grads, *input, Some(gx));
                }
                accumulate(
                    grads,
                    *scale,
                    needs(*scale).then(|| sum_gx.iter().map(|&v| T::from_f64(v)).collect()),
                );
                accumulate(
                    grads,
                    *shift,
                    needs(*shift).then(|| sum_g.iter().map(|&v| T::from_f64(v)).collect()),
                );
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, needs(*a).then(|| gout.to_vec()));
                accumulate(grads, *b, needs(*b).then(|| gout.to_vec()));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                accumulate(
                    grads,
                    *a,
                    needs(*a).then(|| gout.iter().zip(bd).map(|(&g, &v)| g * v).collect()),
                );
                accumulate(
                    grads,
                    *b,
                    needs(*b).then(|| gout.iter().zip(ad).map(|(&g, &v)| g * v).collect()),
                );
            }
            Op::ScaleChannels(x, s) => {
                let plane = node.value.len() / self.value(*s).len().max(1);
                let (xd, sd) = (self.value(*x).data(), self.value(*s).data());
                if needs(*x) {
                    let gx = gout
                        .chunks(plane)
                        .zip(sd)
                        .flat_map(|(g, &sv)| g.iter().map(move |&v| v * sv))
                        .collect();
                    accumulate(grads, *x, Some(gx));
                }
                if needs(*s) {
                    let gs = gout
                        .chunks(plane)
                        .zip(xd.chunks(plane))
                        .map(|(g, xv)| g.iter().zip(xv).map(|(&a, &b)| a * b).sum::<T>())
                        .collect();
                    accumulate(grads, *s, Some(gs));
                }
            }
            Op::MulScalar(x, c) => {
                accumulate(grads, *x, Some(gout.iter().map(|&g| g * *c).collect()));
            }
            Op::Sum(x) => {
                accumulate(grads, *x, Some(vec![gout[0]; self.value(*x).len()]));
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let gs = op.backward(&values, &node.value, gout);
                for (v, g) in inputs.iter().zip(gs) {
                    if needs(*v) {
                        accumulate(grads, *v, g);
                    }
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: Option<Vec<T>>) {
    let Some(g) = g else { return };
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn dims(s: &[usize]) -> [usize; 4] {
    [s[0], s[1], s[2], s[3]]
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if sa.len() < 2 || sb.len() < 2 || sa.len() != sb.len() {
        return Err(Error::shape(
            "batched_matmul",
            "rank",
            format!("{sa:?} x {sb:?}"),
        ));
    }
    let r = sa.len();
    if sa[..r - 2] != sb[..r - 2] {
        return Err(Error::shape(
            "batched_matmul",
            "batch axes",
            format!("{sa:?} x {sb:?}"),
        ));
    }
    let (m, k, k2, n) = (sa[r - 2], sa[r - 1], sb[r - 2], sb[r - 1]);
    if k != k2 {
        return Err(Error::shape(
            "batched_matmul",
            "inner axis",
            format!("{k} vs {k2} in {sa:?} x {sb:?}"),
        ));
    }
    Ok((sa[..r - 2].iter().product(), m, k, n))
}

fn transpose_batches<T: Scalar>(x: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    if r * c == 0 {
        return out;
    }
    for (src, dst) in x.chunks(r * c).zip(out.chunks_mut(r * c)) {
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}
