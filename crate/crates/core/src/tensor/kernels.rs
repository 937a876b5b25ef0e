//! Slice-level kernels behind the convolution and pooling ops.

use super::scalar::{gemm, Scalar};

/// Geometry of a sliding k x k window over a `c x h x w` image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Window {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh,
            ow,
        }
    }

    pub fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// 1x1, stride 1, no padding: the column matrix is the image itself.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Range of output columns `ox` whose input column `ox*stride + kx - pad` is in bounds.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(self.stride)
        };
        // largest ox with ox*stride + kx - pad <= w - 1
        let limit = self.w + self.pad;
        let hi = if limit > kx {
            ((limit - kx - 1) / self.stride + 1).min(self.ow)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// Unfolds `x` (`c x h x w`) into `cols` (`c*k*k x oh*ow`).
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &Window, cols: &mut [T]) {
    let ohw = g.positions();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.oh {
                    let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    if g.stride == 1 {
                        let ix0 = lo + kx - g.pad;
                        out[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                    } else {
                        for (ox, o) in out.iter_mut().enumerate().take(hi).skip(lo) {
                            *o = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back onto `x`, accumulating.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &Window, x: &mut [T]) {
    let ohw = g.positions();
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * g.ow..(oy + 1) * g.ow];
                    for ox in lo..hi {
                        dst[ox * g.stride + kx - g.pad] += s[ox];
                    }
                }
            }
        }
    }
}

/// `out[b] = W * im2col(x[b]) + bias`, with `W` stored `cout x (cin*k*k)`.
pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &Window,
    weight: &[T],
    cout: usize,
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let in_step = g.c * g.h * g.w;
    let ohw = g.positions();
    let rows = g.rows();
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * ohw]
    };
    for b in 0..batch {
        let xb = &x[b * in_step..(b + 1) * in_step];
        let ob = &mut out[b * cout * ohw..(b + 1) * cout * ohw];
        let cm: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        gemm(cout, rows, ohw, weight, false, cm, false, ob, false);
        if let Some(bias) = bias {
            for (co, chunk) in ob.chunks_mut(ohw).enumerate() {
                let bv = bias[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
}

/// Gradients of [`conv2d_forward`] for the given output cotangent.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &Window,
    weight: &[T],
    cout: usize,
    gout: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    mut gb: Option<&mut [T]>,
) {
    let in_step = g.c * g.h * g.w;
    let ohw = g.positions();
    let rows = g.rows();
    let pointwise = g.is_pointwise();
    let mut cols = vec![T::zero(); if pointwise { 0 } else { rows * ohw }];
    let mut dcols = vec![T::zero(); if pointwise { 0 } else { rows * ohw }];
    for b in 0..batch {
        let xb = &x[b * in_step..(b + 1) * in_step];
        let gb_out = &gout[b * cout * ohw..(b + 1) * cout * ohw];
        if let Some(gw) = gw.as_deref_mut() {
            let cm: &[T] = if pointwise {
                xb
            } else {
                im2col(xb, g, &mut cols);
                &cols
            };
            // dW += dOut * cols^T
            gemm(cout, ohw, rows, gb_out, false, cm, true, gw, true);
        }
        if let Some(gx) = gx.as_deref_mut() {
            let gxb = &mut gx[b * in_step..(b + 1) * in_step];
            if pointwise {
                gemm(rows, cout, ohw, weight, true, gb_out, false, gxb, true);
            } else {
                gemm(rows, cout, ohw, weight, true, gb_out, false, &mut dcols, false);
                col2im(&dcols, g, gxb);
            }
        }
        if let Some(gbias) = gb.as_deref_mut() {
            for (co, chunk) in gb_out.chunks(ohw).enumerate() {
                gbias[co] += chunk.iter().copied().sum::<T>();
            }
        }
    }
}

/// Transposed convolution: `out[b] = col2im(W^T * x[b])`, with `W` stored `cin x (cout*k*k)`.
///
/// `g` describes the window over the *output* image (`c = cout`), so that
/// `g.oh x g.ow` equals the input spatial extent.
pub(crate) fn conv_transpose2d_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    cin: usize,
    g: &Window,
    weight: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let hw = g.positions();
    let rows = g.rows();
    let out_step = g.c * g.h * g.w;
    let mut cols = vec![T::zero(); rows * hw];
    for b in 0..batch {
        let xb = &x[b * cin * hw..(b + 1) * cin * hw];
        let ob = &mut out[b * out_step..(b + 1) * out_step];
        gemm(rows, cin, hw, weight, true, xb, false, &mut cols, false);
        col2im(&cols, g, ob);
        if let Some(bias) = bias {
            let plane = g.h * g.w;
            for (co, chunk) in ob.chunks_mut(plane).enumerate() {
                let bv = bias[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    cin: usize,
    g: &Window,
    weight: &[T],
    gout: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    mut gb: Option<&mut [T]>,
) {
    let hw = g.positions();
    let rows = g.rows();
    let out_step = g.c * g.h * g.w;
    let mut cols = vec![T::zero(); rows * hw];
    for b in 0..batch {
        let xb = &x[b * cin * hw..(b + 1) * cin * hw];
        let gob = &gout[b * out_step..(b + 1) * out_step];
        im2col(gob, g, &mut cols);
        if let Some(gx) = gx.as_deref_mut() {
            let gxb = &mut gx[b * cin * hw..(b + 1) * cin * hw];
            gemm(cin, rows, hw, weight, false, &cols, false, gxb, true);
        }
        if let Some(gw) = gw.as_deref_mut() {
            gemm(cin, hw, rows, xb, false, &cols, true, gw, true);
        }
        if let Some(gbias) = gb.as_deref_mut() {
            let plane = g.h * g.w;
            for (co, chunk) in gob.chunks(plane).enumerate() {
                gbias[co] += chunk.iter().copied().sum::<T>();
            }
        }
    }
}
