//! Raw NCHW kernels shared by the tape and by gradient-free callers.

use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Unfolding is the identity for pointwise stride-1 convolutions.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox*stride + kx - pad` is in bounds.
fn valid_cols(g: &ConvGeometry, kx: usize, wo: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride);
    let hi = if g.width + g.pad > kx { ((g.width + g.pad - kx - 1) / g.stride + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfold one `[C, H, W]` image into a `[C*k*k, Ho*Wo]` patch matrix.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let hw_out = ho * wo;
    debug_assert_eq!(cols.len(), g.patch_len() * hw_out);
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                let (lo, hi) = valid_cols(g, kx, wo);
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (v, s) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *v = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back onto a `[C, H, W]` image.
pub fn col2im_add<T: Real>(cols: &[T], g: &ConvGeometry, x: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let hw_out = ho * wo;
    for c in 0..g.in_channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                let (lo, hi) = valid_cols(g, kx, wo);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kx - g.pad;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let line = &src[oy * wo + lo..oy * wo + hi];
                    for (d, s) in dst[first..].iter_mut().step_by(g.stride).zip(line) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// Batched convolution `x[B,Ci,H,W] * w[Co,Ci,k,k] + b[Co]`.
///
/// When `keep_cols` is set the unfolded patches of every image are returned
/// so the backward pass can reuse them.
pub fn conv2d_forward<T: Real>(
    x: &[T],
    batch: usize,
    g: &ConvGeometry,
    w: &[T],
    bias: Option<&[T]>,
    out_channels: usize,
    keep_cols: bool,
) -> (Vec<T>, Vec<T>) {
    let hw_out = g.out_height() * g.out_width();
    let klen = g.patch_len();
    let in_len = g.in_channels * g.height * g.width;
    let out_len = out_channels * hw_out;
    let mut y = vec![T::zero(); batch * out_len];
    let pointwise = g.is_pointwise();
    let mut saved = if keep_cols && !pointwise { vec![T::zero(); batch * klen * hw_out] } else { Vec::new() };
    let mut scratch = if pointwise || keep_cols { Vec::new() } else { vec![T::zero(); klen * hw_out] };
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let cols: &[T] = if pointwise {
            xb
        } else if keep_cols {
            let c = &mut saved[b * klen * hw_out..(b + 1) * klen * hw_out];
            im2col(xb, g, c);
            c
        } else {
            im2col(xb, g, &mut scratch);
            &scratch
        };
        let yb = &mut y[b * out_len..(b + 1) * out_len];
        if let Some(bias) = bias {
            for (o, row) in yb.chunks_mut(hw_out).enumerate() {
                row.fill(bias[o]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            out_channels,
            klen,
            hw_out,
            T::one(),
            w,
            klen as isize,
            1,
            cols,
            hw_out as isize,
            1,
            beta,
            yb,
            hw_out as isize,
            1,
        );
    }
    (y, saved)
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

/// Per-(sample, group) mean and reciprocal standard deviation.
pub fn group_stats<T: Real>(x: &[T], batch: usize, channels: usize, spatial: usize, groups: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let cpg = channels / groups;
    let n = (cpg * spatial) as f64;
    let mut mean = Vec::with_capacity(batch * groups);
    let mut rstd = Vec::with_capacity(batch * groups);
    for b in 0..batch {
        for g in 0..groups {
            let start = (b * channels + g * cpg) * spatial;
            let seg = &x[start..start + cpg * spatial];
            let m = seg.iter().map(|v| v.as_f64()).sum::<f64>() / n;
            let var = seg.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>() / n;
            mean.push(T::of_f64(m));
            rstd.push(T::of_f64(1.0 / (var + eps).sqrt()));
        }
    }
    (mean, rstd)
}
