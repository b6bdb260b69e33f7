//! Bounded-displacement patch correlation between two feature maps.
//!
//! For every displacement `(dy, dx)` on the stride grid within
//! `[-d, d]^2` and every position `p` the layer emits
//! `sum_{o in [-k,k]^2} <f1(p + o), f2(p + (dy, dx) + o)>`, reading zero
//! outside the image. Displacement channels are ordered row-major over
//! `(dy, dx)`, from `(-d, -d)` to `(d, d)`.
//!
//! The fast kernel factors the patch sum: it first forms the per-pixel
//! channel product map `P(q) = <f1(q), f2(q + disp)>` (loop order
//! `disp, c, y, x`, contiguous along `x`), then box-filters `P` with a
//! separable `(2k+1)`-wide window. [`correlate_oracle`] keeps the literal
//! six-deep loop nest for cross-checking.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct CorrConfig {
    /// Largest per-axis displacement, in pixels at the layer's resolution.
    pub max_displacement: usize,
    /// Patch half-width `k`; patches are `(2k+1) x (2k+1)`.
    pub patch_radius: usize,
    /// Spacing of the displacement grid.
    pub stride: usize,
    /// Divide every comparison by `K^2 * C`.
    pub normalize: bool,
}

impl Default for CorrConfig {
    fn default() -> Self {
        Self {
            max_displacement: 10,
            patch_radius: 0,
            stride: 1,
            normalize: true,
        }
    }
}

impl CorrConfig {
    pub fn with_displacement(max_displacement: usize) -> Self {
        Self {
            max_displacement,
            ..Self::default()
        }
    }

    /// Displacement steps per side, `floor(d / stride)`.
    pub fn steps(&self) -> usize {
        self.max_displacement / self.stride.max(1)
    }

    /// Number of displacement channels, `(2 floor(d/stride) + 1)^2`.
    pub fn out_channels(&self) -> usize {
        let side = 2 * self.steps() + 1;
        side * side
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::InvalidConfig("correlation stride must be >= 1".into()));
        }
        Ok(())
    }

    /// Displacements in output channel order.
    pub fn displacements(&self) -> Vec<(isize, isize)> {
        let r = self.steps() as isize;
        let s = self.stride as isize;
        let mut out = Vec::with_capacity(self.out_channels());
        for dy in -r..=r {
            for dx in -r..=r {
                out.push((dy * s, dx * s));
            }
        }
        out
    }

    fn scale<T: Real>(&self, channels: usize) -> T {
        if self.normalize {
            let kk = 2 * self.patch_radius + 1;
            T::one() / T::lit((kk * kk * channels) as f64)
        } else {
            T::one()
        }
    }
}

fn check_pair<T: Real>(f1: &Tensor<T>, f2: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let dims = f1.dims4()?;
    if f1.shape() != f2.shape() {
        return Err(Error::ShapeMismatch {
            op: "correlate",
            lhs: f1.shape().to_vec(),
            rhs: f2.shape().to_vec(),
        });
    }
    Ok(dims)
}

/// Index range `a` such that `a` and `a + shift` both lie in `[0, len)`.
#[inline]
fn overlap(len: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift.max(0)).max(0) as usize;
    (lo.min(hi), hi)
}

/// In-place zero-padded box sum of half-width `k` over an `h x w` plane.
fn box_sum<T: Real>(plane: &mut [T], scratch: &mut [T], h: usize, w: usize, k: usize) {
    if k == 0 {
        return;
    }
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        let dst = &mut scratch[y * w..(y + 1) * w];
        for x in 0..w {
            let lo = x.saturating_sub(k);
            let hi = (x + k + 1).min(w);
            dst[x] = row[lo..hi].iter().copied().sum();
        }
    }
    for y in 0..h {
        let lo = y.saturating_sub(k);
        let hi = (y + k + 1).min(h);
        let dst = &mut plane[y * w..(y + 1) * w];
        dst.iter_mut().for_each(|v| *v = T::zero());
        for yy in lo..hi {
            let src = &scratch[yy * w..(yy + 1) * w];
            for x in 0..w {
                dst[x] += src[x];
            }
        }
    }
}

pub(crate) fn correlate_forward<T: Real>(
    cfg: &CorrConfig,
    (n, c, h, w): (usize, usize, usize, usize),
    f1: &[T],
    f2: &[T],
) -> Vec<T> {
    let disps = cfg.displacements();
    let plane = h * w;
    let scale: T = cfg.scale(c);
    let mut out = vec![T::zero(); n * disps.len() * plane];
    let mut scratch = vec![T::zero(); plane];
    for b in 0..n {
        let a = &f1[b * c * plane..(b + 1) * c * plane];
        let z = &f2[b * c * plane..(b + 1) * c * plane];
        for (di, &(dy, dx)) in disps.iter().enumerate() {
            let dst = &mut out[(b * disps.len() + di) * plane..(b * disps.len() + di + 1) * plane];
            let (y0, y1) = overlap(h, dy);
            let (x0, x1) = overlap(w, dx);
            if x0 < x1 {
                for ch in 0..c {
                    let pa = &a[ch * plane..(ch + 1) * plane];
                    let pz = &z[ch * plane..(ch + 1) * plane];
                    for y in y0..y1 {
                        let ra = &pa[y * w + x0..y * w + x1];
                        let zy = (y as isize + dy) as usize;
                        let zx0 = (x0 as isize + dx) as usize;
                        let rz = &pz[zy * w + zx0..zy * w + zx0 + (x1 - x0)];
                        let rd = &mut dst[y * w + x0..y * w + x1];
                        for ((d, &p), &q) in rd.iter_mut().zip(ra).zip(rz) {
                            *d += p * q;
                        }
                    }
                }
            }
            box_sum(dst, &mut scratch, h, w, cfg.patch_radius);
            if cfg.normalize {
                dst.iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
    out
}

/// Returns `(d_f1, d_f2)`.
pub(crate) fn correlate_backward<T: Real>(
    cfg: &CorrConfig,
    (n, c, h, w): (usize, usize, usize, usize),
    f1: &[T],
    f2: &[T],
    grad_out: &[T],
) -> (Vec<T>, Vec<T>) {
    let disps = cfg.displacements();
    let plane = h * w;
    let scale: T = cfg.scale(c);
    let mut g1 = vec![T::zero(); f1.len()];
    let mut g2 = vec![T::zero(); f2.len()];
    let mut gp = vec![T::zero(); plane];
    let mut scratch = vec![T::zero(); plane];
    for b in 0..n {
        let a = &f1[b * c * plane..(b + 1) * c * plane];
        let z = &f2[b * c * plane..(b + 1) * c * plane];
        let ga = &mut g1[b * c * plane..(b + 1) * c * plane];
        let gz = &mut g2[b * c * plane..(b + 1) * c * plane];
        for (di, &(dy, dx)) in disps.iter().enumerate() {
            let (y0, y1) = overlap(h, dy);
            let (x0, x1) = overlap(w, dx);
            if x0 >= x1 || y0 >= y1 {
                continue;
            }
            let src = &grad_out[(b * disps.len() + di) * plane..(b * disps.len() + di + 1) * plane];
            gp.copy_from_slice(src);
            // the zero-padded box filter is self-adjoint
            box_sum(&mut gp, &mut scratch, h, w, cfg.patch_radius);
            if cfg.normalize {
                gp.iter_mut().for_each(|v| *v *= scale);
            }
            for ch in 0..c {
                let pa = &a[ch * plane..(ch + 1) * plane];
                let pz = &z[ch * plane..(ch + 1) * plane];
                for y in y0..y1 {
                    let zy = (y as isize + dy) as usize;
                    for x in x0..x1 {
                        let q = zy * w + (x as isize + dx) as usize;
                        let g = gp[y * w + x];
                        ga[ch * plane + y * w + x] += g * pz[q];
                        gz[ch * plane + q] += g * pa[y * w + x];
                    }
                }
            }
        }
    }
    (g1, g2)
}

/// Correlation without autodiff, on plain tensors.
pub fn correlate<T: Real>(f1: &Tensor<T>, f2: &Tensor<T>, cfg: &CorrConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    let dims = check_pair(f1, f2)?;
    let out = correlate_forward(cfg, dims, f1.data(), f2.data());
    Tensor::new(&[dims.0, cfg.out_channels(), dims.2, dims.3], out)
}

/// Direct transcription of the patch-comparison sum, one output element at a
/// time. Reference for tests and benchmarks only.
pub fn correlate_oracle<T: Real>(
    f1: &Tensor<T>,
    f2: &Tensor<T>,
    cfg: &CorrConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let (n, c, h, w) = check_pair(f1, f2)?;
    let disps = cfg.displacements();
    let k = cfg.patch_radius as isize;
    let scale: T = cfg.scale(c);
    let at = |t: &Tensor<T>, b: usize, ch: usize, y: isize, x: isize| -> T {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            T::zero()
        } else {
            t.data()[((b * c + ch) * h + y as usize) * w + x as usize]
        }
    };
    let mut out = Vec::with_capacity(n * disps.len() * h * w);
    for b in 0..n {
        for &(dy, dx) in &disps {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = T::zero();
                    for oy in -k..=k {
                        for ox in -k..=k {
                            for ch in 0..c {
                                acc += at(f1, b, ch, y + oy, x + ox)
                                    * at(f2, b, ch, y + dy + oy, x + dx + ox);
                            }
                        }
                    }
                    out.push(acc * scale);
                }
            }
        }
    }
    Tensor::new(&[n, disps.len(), h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_count_follows_stride_grid() {
        assert_eq!(CorrConfig::with_displacement(10).out_channels(), 441);
        assert_eq!(CorrConfig::with_displacement(4).out_channels(), 81);
        let cfg = CorrConfig {
            max_displacement: 5,
            stride: 2,
            ..CorrConfig::default()
        };
        assert_eq!(cfg.out_channels(), 25);
        assert_eq!(cfg.displacements()[0], (-4, -4));
    }

    #[test]
    fn ones_give_channel_count() {
        let c = 5;
        let ones = Tensor::<f32>::full(&[1, c, 4, 4], 1.0);
        let raw = CorrConfig {
            max_displacement: 0,
            normalize: false,
            ..CorrConfig::default()
        };
        let out = correlate(&ones, &ones, &raw).unwrap();
        assert!(out.data().iter().all(|&v| v == c as f32));
        let norm = CorrConfig {
            normalize: true,
            ..raw
        };
        let out = correlate(&ones, &ones, &norm).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_displacement_is_channel_dot_product() {
        let f = Tensor::<f64>::from_fn(&[1, 3, 2, 2], |i| i as f64 - 4.0);
        let cfg = CorrConfig {
            max_displacement: 0,
            normalize: false,
            ..CorrConfig::default()
        };
        let out = correlate(&f, &f, &cfg).unwrap();
        for p in 0..4 {
            let norm2: f64 = (0..3).map(|ch| f.data()[ch * 4 + p].powi(2)).sum();
            assert_eq!(out.data()[p], norm2);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let b = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        assert!(matches!(
            correlate(&a, &b, &CorrConfig::default()),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(correlate_oracle(&a, &b, &CorrConfig::default()).is_err());
    }

    #[test]
    fn box_sum_matches_direct_window() {
        let (h, w, k) = (5, 6, 1);
        let src: Vec<f64> = (0..h * w).map(|i| (i * 7 % 11) as f64).collect();
        let mut plane = src.clone();
        let mut scratch = vec![0.0; h * w];
        box_sum(&mut plane, &mut scratch, h, w, k);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut s = 0.0;
                for oy in -1..=1 {
                    for ox in -1..=1 {
                        let (yy, xx) = (y + oy, x + ox);
                        if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                            s += src[yy as usize * w + xx as usize];
                        }
                    }
                }
                assert_eq!(plane[y as usize * w + x as usize], s);
            }
        }
    }
}
