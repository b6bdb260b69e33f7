//! Slice-level NCHW kernels behind the graph ops.
//!
//! Convolution loop order is `n, o, c, ky, kx, oy, ox`: for a fixed weight
//! tap the innermost loop walks one output row and one input row, both
//! contiguous when the stride is 1. The backward passes reuse the same
//! order so every reduction is summed in a fixed sequence.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output extents, or `None` when the kernel does not fit the padded input.
    pub fn new(
        (n, c, h, w): (usize, usize, usize, usize),
        o: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || k == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Some(Self {
            n,
            c,
            h,
            w,
            o,
            k,
            stride,
            pad,
            oh,
            ow,
        })
    }

    /// Output columns `ox` for which tap `kx` reads inside the input row.
    #[inline]
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        // ix = ox*stride + kx - pad must lie in [0, w)
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(self.stride)
        };
        let hi = if self.w + self.pad > kx {
            ((self.w + self.pad - kx - 1) / self.stride + 1).min(self.ow)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    #[inline]
    fn iy(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        (iy < self.h).then_some(iy)
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (ih, iw, oplane) = (g.h * g.w, g.w, g.oh * g.ow);
    let mut out = vec![T::zero(); g.n * g.o * oplane];
    for n in 0..g.n {
        for o in 0..g.o {
            let dst = &mut out[(n * g.o + o) * oplane..(n * g.o + o + 1) * oplane];
            if let Some(b) = bias {
                dst.iter_mut().for_each(|v| *v = b[o]);
            }
            for c in 0..g.c {
                let src = &input[(n * g.c + c) * ih..(n * g.c + c + 1) * ih];
                let wk = &weight[(o * g.c + c) * g.k * g.k..(o * g.c + c + 1) * g.k * g.k];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = wk[ky * g.k + kx];
                        let (lo, hi) = g.ox_range(kx);
                        for oy in 0..g.oh {
                            let Some(iy) = g.iy(oy, ky) else { continue };
                            let row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                            let srow = &src[iy * iw..(iy + 1) * iw];
                            for ox in lo..hi {
                                row[ox] += wv * srow[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(d_input, d_weight, d_bias)`.
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    grad_out: &[T],
    input: &[T],
    weight: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (ih, iw, oplane) = (g.h * g.w, g.w, g.oh * g.ow);
    let mut gin = vec![T::zero(); input.len()];
    let mut gw = vec![T::zero(); weight.len()];
    let mut gb = vec![T::zero(); g.o];
    for n in 0..g.n {
        for o in 0..g.o {
            let go = &grad_out[(n * g.o + o) * oplane..(n * g.o + o + 1) * oplane];
            gb[o] += go.iter().copied().sum::<T>();
            for c in 0..g.c {
                let src = &input[(n * g.c + c) * ih..(n * g.c + c + 1) * ih];
                let gsrc = &mut gin[(n * g.c + c) * ih..(n * g.c + c + 1) * ih];
                let base = (o * g.c + c) * g.k * g.k;
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = weight[base + ky * g.k + kx];
                        let (lo, hi) = g.ox_range(kx);
                        let mut acc = T::zero();
                        for oy in 0..g.oh {
                            let Some(iy) = g.iy(oy, ky) else { continue };
                            let grow = &go[oy * g.ow..(oy + 1) * g.ow];
                            let srow = &src[iy * iw..(iy + 1) * iw];
                            let gsrow = &mut gsrc[iy * iw..(iy + 1) * iw];
                            for ox in lo..hi {
                                let ix = ox * g.stride + kx - g.pad;
                                acc += grow[ox] * srow[ix];
                                gsrow[ix] += wv * grow[ox];
                            }
                        }
                        gw[base + ky * g.k + kx] += acc;
                    }
                }
            }
        }
    }
    (gin, gw, gb)
}

/// 2x2 / stride-2 max pool. Returns the output and, per output element, the
/// flat input index that won (first in row-major window order on ties).
pub(crate) fn max_pool2_forward<T: Real>(
    (n, c, h, w): (usize, usize, usize, usize),
    input: &[T],
) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

/// 2x2 / stride-2 average pool; a trailing odd row or column is dropped.
pub(crate) fn avg_pool2_forward<T: Real>(
    (n, c, h, w): (usize, usize, usize, usize),
    input: &[T],
) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            let r0 = base + 2 * oy * w;
            let r1 = r0 + w;
            for ox in 0..ow {
                let s = input[r0 + 2 * ox]
                    + input[r0 + 2 * ox + 1]
                    + input[r1 + 2 * ox]
                    + input[r1 + 2 * ox + 1];
                out.push(s * quarter);
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward<T: Real>(
    (n, c, h, w): (usize, usize, usize, usize),
    grad_out: &[T],
) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut gin = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out[(plane * oh + oy) * ow + ox] * quarter;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    gin[base + (2 * oy + dy) * w + 2 * ox + dx] += g;
                }
            }
        }
    }
    gin
}

pub(crate) fn upsample2_forward<T: Real>(
    (n, c, h, w): (usize, usize, usize, usize),
    input: &[T],
) -> Vec<T> {
    let ow = 2 * w;
    let mut out = vec![T::zero(); n * c * 4 * h * w];
    for plane in 0..n * c {
        let src = &input[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for y in 0..2 * h {
            for x in 0..ow {
                dst[y * ow + x] = src[(y / 2) * w + x / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Real>(
    (n, c, h, w): (usize, usize, usize, usize),
    grad_out: &[T],
) -> Vec<T> {
    let ow = 2 * w;
    let mut gin = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let src = &grad_out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        let dst = &mut gin[plane * h * w..(plane + 1) * h * w];
        for y in 0..2 * h {
            for x in 0..ow {
                dst[(y / 2) * w + x / 2] += src[y * ow + x];
            }
        }
    }
    gin
}

/// Channel concatenation of `a` (ca channels) and `b` (cb channels).
pub(crate) fn concat_forward<T: Real>(
    n: usize,
    ca: usize,
    cb: usize,
    plane: usize,
    a: &[T],
    b: &[T],
) -> Vec<T> {
    let mut out = Vec::with_capacity(n * (ca + cb) * plane);
    for i in 0..n {
        out.extend_from_slice(&a[i * ca * plane..(i + 1) * ca * plane]);
        out.extend_from_slice(&b[i * cb * plane..(i + 1) * cb * plane]);
    }
    out
}

pub(crate) fn concat_backward<T: Real>(
    n: usize,
    ca: usize,
    cb: usize,
    plane: usize,
    grad_out: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut ga = Vec::with_capacity(n * ca * plane);
    let mut gb = Vec::with_capacity(n * cb * plane);
    let stride = (ca + cb) * plane;
    for i in 0..n {
        let row = &grad_out[i * stride..(i + 1) * stride];
        ga.extend_from_slice(&row[..ca * plane]);
        gb.extend_from_slice(&row[ca * plane..]);
    }
    (ga, gb)
}

/// Per-sample group statistics: `(mean, inv_std)` for each `(n, group)`.
#[derive(Debug, Clone)]
pub(crate) struct GroupStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

/// `gamma_c * (x - mean_g) * inv_std_g + beta_c` over channel groups of an
/// `N x C x H x W` tensor.
pub(crate) fn group_norm_forward<T: Real>(
    (n, c, h, w): (usize, usize, usize, usize),
    groups: usize,
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, GroupStats<T>) {
    let cg = c / groups;
    let block = cg * h * w;
    let count = T::lit(block as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut stats = GroupStats {
        mean: Vec::with_capacity(n * groups),
        inv_std: Vec::with_capacity(n * groups),
    };
    for b in 0..n {
        for g in 0..groups {
            let start = (b * c + g * cg) * h * w;
            let xs = &x[start..start + block];
            let mean = xs.iter().copied().sum::<T>() / count;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let inv = T::one() / (var + eps).sqrt();
            for k in 0..cg {
                let ch = g * cg + k;
                let off = start + k * h * w;
                for i in off..off + h * w {
                    out[i] = gamma[ch] * (x[i] - mean) * inv + beta[ch];
                }
            }
            stats.mean.push(mean);
            stats.inv_std.push(inv);
        }
    }
    (out, stats)
}

/// Gradients `(dx, dgamma, dbeta)` of [`group_norm_forward`].
pub(crate) fn group_norm_backward<T: Real>(
    (n, c, h, w): (usize, usize, usize, usize),
    groups: usize,
    gy: &[T],
    x: &[T],
    gamma: &[T],
    stats: &GroupStats<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cg = c / groups;
    let plane = h * w;
    let block = cg * plane;
    let count = T::lit(block as f64);
    let mut gx = vec![T::zero(); x.len()];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for b in 0..n {
        for g in 0..groups {
            let s = b * groups + g;
            let (mean, inv) = (stats.mean[s], stats.inv_std[s]);
            let start = (b * c + g * cg) * plane;
            // sums of dxhat and dxhat * xhat over the group
            let (mut sum_d, mut sum_dx) = (T::zero(), T::zero());
            for k in 0..cg {
                let ch = g * cg + k;
                let off = start + k * plane;
                for i in off..off + plane {
                    let xhat = (x[i] - mean) * inv;
                    ggamma[ch] += gy[i] * xhat;
                    gbeta[ch] += gy[i];
                    let d = gy[i] * gamma[ch];
                    sum_d += d;
                    sum_dx += d * xhat;
                }
            }
            let (mean_d, mean_dx) = (sum_d / count, sum_dx / count);
            for k in 0..cg {
                let ch = g * cg + k;
                let off = start + k * plane;
                for i in off..off + plane {
                    let xhat = (x[i] - mean) * inv;
                    gx[i] = inv * (gy[i] * gamma[ch] - mean_d - xhat * mean_dx);
                }
            }
        }
    }
    (gx, ggamma, gbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ox_range_respects_padding_and_stride() {
        let g = ConvGeom::new((1, 1, 5, 5), 1, 3, 2, 1).unwrap();
        assert_eq!((g.oh, g.ow), (3, 3));
        // kx = 0 reads ix = 2*ox - 1, valid for ox >= 1
        assert_eq!(g.ox_range(0), (1, 3));
        assert_eq!(g.ox_range(1), (0, 3));
        // kx = 2 reads ix = 2*ox + 1 < 5, valid for ox <= 1
        assert_eq!(g.ox_range(2), (0, 2));
    }

    #[test]
    fn kernel_larger_than_padded_input_is_rejected() {
        assert!(ConvGeom::new((1, 1, 2, 2), 1, 5, 1, 1).is_none());
        assert!(ConvGeom::new((1, 1, 3, 3), 1, 5, 1, 1).is_some());
    }
}
