use super::params::{Conv, Forward, Norm, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Var};

fn norm_opt<T: Scalar>(f: &mut Forward<'_, T>, n: &Option<Norm>, x: Var) -> Result<Var> {
    match n {
        Some(n) => n.forward(f, x),
        None => Ok(x),
    }
}

fn check_channels<T: Scalar>(f: &Forward<'_, T>, x: Var, want: usize, op: &'static str) -> Result<()> {
    let got = f.graph.shape(x).get(1).copied().unwrap_or(0);
    if got != want {
        return Err(Error::shape(op, "axis 1 (channels)", format!("block expects {want}, got {got}")));
    }
    Ok(())
}

/// `relu(F(x) + shortcut(x))` with `F = conv3x3 -> norm -> relu -> conv3x3 -> norm`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    pub conv1: Conv,
    pub norm1: Option<Norm>,
    pub conv2: Conv,
    pub norm2: Option<Norm>,
    /// 1x1 projection when the channel count changes.
    pub shortcut: Option<Conv>,
}

impl ResBlock {
    pub fn new<T: Scalar>(p: &mut ParamSet<T>, name: &str, cin: usize, cout: usize, batch_norm: bool) -> Self {
        let conv1 = p.conv(&format!("{name}.conv1"), cin, cout, 3, 1, !batch_norm);
        let norm1 = batch_norm.then(|| p.norm(&format!("{name}.norm1"), cout));
        let conv2 = p.conv(&format!("{name}.conv2"), cout, cout, 3, 1, !batch_norm);
        let norm2 = batch_norm.then(|| p.norm(&format!("{name}.norm2"), cout));
        let shortcut = (cin != cout).then(|| p.conv(&format!("{name}.shortcut"), cin, cout, 1, 0, true));
        Self {
            conv1,
            norm1,
            conv2,
            norm2,
            shortcut,
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        check_channels(f, x, self.conv1.in_channels(f.params), "res_block")?;
        let h = self.conv1.forward(f, x)?;
        let h = norm_opt(f, &self.norm1, h)?;
        let h = f.graph.relu(h);
        let h = self.conv2.forward(f, h)?;
        let h = norm_opt(f, &self.norm2, h)?;
        let s = match &self.shortcut {
            Some(c) => c.forward(f, x)?,
            None => x,
        };
        let sum = f.graph.add(h, s)?;
        Ok(f.graph.relu(sum))
    }
}

/// `conv3x3 -> norm -> relu -> conv3x3 -> norm -> relu`, no shortcut.
#[derive(Clone, Debug, PartialEq)]
pub struct DualConvBlock {
    pub conv1: Conv,
    pub norm1: Option<Norm>,
    pub conv2: Conv,
    pub norm2: Option<Norm>,
}

impl DualConvBlock {
    pub fn new<T: Scalar>(p: &mut ParamSet<T>, name: &str, cin: usize, cout: usize, batch_norm: bool) -> Self {
        Self {
            conv1: p.conv(&format!("{name}.conv1"), cin, cout, 3, 1, !batch_norm),
            norm1: batch_norm.then(|| p.norm(&format!("{name}.norm1"), cout)),
            conv2: p.conv(&format!("{name}.conv2"), cout, cout, 3, 1, !batch_norm),
            norm2: batch_norm.then(|| p.norm(&format!("{name}.norm2"), cout)),
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        check_channels(f, x, self.conv1.in_channels(f.params), "dual_conv_block")?;
        let h = self.conv1.forward(f, x)?;
        let h = norm_opt(f, &self.norm1, h)?;
        let h = f.graph.relu(h);
        let h = self.conv2.forward(f, h)?;
        let h = norm_opt(f, &self.norm2, h)?;
        Ok(f.graph.relu(h))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    Residual(ResBlock),
    DualConv(DualConvBlock),
}

impl Block {
    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        match self {
            Block::Residual(b) => b.forward(f, x),
            Block::DualConv(b) => b.forward(f, x),
        }
    }
}

/// Non-local spatial attention followed by squeeze-excitation channel gating.
///
/// Spatial: `theta`, `phi`, `g` embed `C -> C/r`; `A = softmax_rows(theta^T phi)`
/// over the `HW x HW` position pairs; `x' = x + out(A g^T)`.
/// Channel: `s = sigmoid(fc2(relu(fc1(gap(x')))))`; the result is `x' * s`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextAttention {
    pub theta: Conv,
    pub phi: Conv,
    pub g: Conv,
    pub out: Conv,
    pub fc1: Conv,
    pub fc2: Conv,
    pub channels: usize,
    pub reduced: usize,
}

impl ContextAttention {
    pub fn new<T: Scalar>(p: &mut ParamSet<T>, name: &str, channels: usize, reduced: usize) -> Self {
        // theta/phi carry no bias: a phi bias shifts every softmax row by a constant
        Self {
            theta: p.conv(&format!("{name}.theta"), channels, reduced, 1, 0, false),
            phi: p.conv(&format!("{name}.phi"), channels, reduced, 1, 0, false),
            g: p.conv(&format!("{name}.g"), channels, reduced, 1, 0, true),
            out: p.conv(&format!("{name}.out"), reduced, channels, 1, 0, true),
            fc1: p.conv(&format!("{name}.fc1"), channels, reduced, 1, 0, true),
            fc2: p.conv(&format!("{name}.fc2"), reduced, channels, 1, 0, true),
            channels,
            reduced,
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        check_channels(f, x, self.channels, "context_attention")?;
        let [b, c, h, w] = f.graph.value(x).dims4("context_attention")?;
        let (r, n) = (self.reduced, h * w);

        let theta = self.theta.forward(f, x)?;
        let theta = f.graph.reshape(theta, &[b, r, n])?;
        let theta_t = f.graph.transpose_last2(theta)?;
        let phi = self.phi.forward(f, x)?;
        let phi = f.graph.reshape(phi, &[b, r, n])?;
        let corr = f.graph.batched_matmul(theta_t, phi)?;
        let attn = f.graph.softmax_lastdim(corr)?;
        f.attention_maps.push(attn);

        let gv = self.g.forward(f, x)?;
        let gv = f.graph.reshape(gv, &[b, r, n])?;
        let gv_t = f.graph.transpose_last2(gv)?;
        let y = f.graph.batched_matmul(attn, gv_t)?;
        let y = f.graph.transpose_last2(y)?;
        let y = f.graph.reshape(y, &[b, r, h, w])?;
        let y = self.out.forward(f, y)?;
        let xr = f.graph.add(x, y)?;

        let s = f.graph.global_avg_pool(xr)?;
        let s = self.fc1.forward(f, s)?;
        let s = f.graph.relu(s);
        let s = self.fc2.forward(f, s)?;
        let s = f.graph.sigmoid(s);
        debug_assert_eq!(f.graph.shape(s), &[b, c, 1, 1]);
        f.graph.scale_channels(xr, s)
    }
}
