//! Training objective: class-weighted cross-entropy on wire logits plus
//! mean absolute error and multi-scale structural dissimilarity on depth.
//!
//! `total = wire + mae + lambda * (1 - msssim)`, every term a pixel mean.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::ModelOutput;
use crate::real::Real;
use crate::tensor::Tensor;

/// Per-scale exponents of the standard five-scale MS-SSIM.
pub const MSSSIM_REFERENCE_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct LossConfig {
    /// Weight of the wire class relative to background.
    pub positive_weight: f32,
    /// Weight of the structural term in the depth loss.
    pub lambda: f32,
    pub msssim_scales: usize,
    /// Odd Gaussian window size.
    pub msssim_window: usize,
    pub msssim_sigma: f32,
    /// Depth in meters is divided by this before the structural term.
    pub depth_range: f32,
    pub c1: f32,
    pub c2: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            positive_weight: 20.0,
            lambda: 0.8,
            msssim_scales: 3,
            msssim_window: 11,
            msssim_sigma: 1.5,
            depth_range: 100.0,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.positive_weight > 0.0) {
            return bad("positive_weight must be > 0");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be >= 0");
        }
        if self.msssim_scales == 0 || self.msssim_scales > MSSSIM_REFERENCE_WEIGHTS.len() {
            return bad("msssim_scales must be in 1..=5");
        }
        if self.msssim_window % 2 == 0 {
            return bad("msssim_window must be odd");
        }
        if !(self.msssim_sigma > 0.0 && self.depth_range > 0.0) {
            return bad("msssim_sigma and depth_range must be positive");
        }
        Ok(())
    }

    /// Reference exponents truncated to the configured scale count and
    /// renormalized to sum to one.
    pub fn scale_weights(&self) -> Vec<f64> {
        let kept = &MSSSIM_REFERENCE_WEIGHTS[..self.msssim_scales.min(5)];
        let total: f64 = kept.iter().sum();
        kept.iter().map(|w| w / total).collect()
    }

    /// Smallest square image accepted by [`msssim`].
    pub fn min_image_size(&self) -> usize {
        self.msssim_window << (self.msssim_scales.max(1) - 1)
    }
}

/// Scalar values of each loss term.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub wire: f64,
    pub depth_mae: f64,
    /// `1 - msssim`, the dissimilarity actually minimized.
    pub depth_msssim: f64,
}

fn check_binary<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    match t.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        Some(&v) => Err(Error::NonBinary { op, value: v.as_f64() }),
        None => Ok(()),
    }
}

/// Mean over pixels of `-[w y log p + (1 - y) log(1 - p)]`, `p = sigmoid(logit)`.
pub fn wire_loss<T: Real>(g: &mut Graph<T>, logits: Var, target: &Tensor<T>, positive_weight: T) -> Result<Var> {
    check_binary("wire_loss", target)?;
    g.weighted_bce_with_logits(logits, target, positive_weight)
}

/// Mean absolute difference.
pub fn depth_mae<T: Real>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

fn gaussian_window<T: Real>(size: usize, sigma: f64) -> Tensor<T> {
    let c = (size / 2) as f64;
    let g1: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            num_traits::Float::exp(-d * d / (2.0 * sigma * sigma))
        })
        .collect();
    let s: f64 = g1.iter().sum();
    Tensor::from_fn(&[1, 1, size, size], |i| {
        T::lit(g1[i / size] * g1[i % size] / (s * s))
    })
}

/// Multi-scale structural similarity of two `N x 1 x H x W` images already
/// scaled to `[0, 1]`. Contrast-structure terms are taken at every scale,
/// luminance only at the coarsest; per-scale means are clamped at zero
/// before exponentiation. Returns the batch mean.
pub fn msssim<T: Real>(g: &mut Graph<T>, a: Var, b: Var, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let (sa, sb) = (g.value(a).shape().to_vec(), g.value(b).shape().to_vec());
    if sa != sb {
        return Err(Error::ShapeMismatch {
            op: "msssim",
            lhs: sa,
            rhs: sb,
        });
    }
    let (_, c, h, w) = g.value(a).dims4()?;
    if c != 1 {
        return Err(Error::BadShape {
            op: "msssim",
            shape: sa,
            reason: "expected a single channel",
        });
    }
    let min = cfg.min_image_size();
    if h < min || w < min {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            min,
        });
    }
    let window = g.constant(gaussian_window(cfg.msssim_window, cfg.msssim_sigma as f64));
    let c1 = T::lit(cfg.c1 as f64);
    let c2 = T::lit(cfg.c2 as f64);
    let weights = cfg.scale_weights();
    let (mut x, mut y) = (a, b);
    let mut acc: Option<Var> = None;
    for (j, &wj) in weights.iter().enumerate() {
        let last = j + 1 == weights.len();
        let mu_x = g.conv2d(x, window, None, 1, 0)?;
        let mu_y = g.conv2d(y, window, None, 1, 0)?;
        let xx = g.mul(x, x)?;
        let yy = g.mul(y, y)?;
        let xy = g.mul(x, y)?;
        let e_xx = g.conv2d(xx, window, None, 1, 0)?;
        let e_yy = g.conv2d(yy, window, None, 1, 0)?;
        let e_xy = g.conv2d(xy, window, None, 1, 0)?;
        let mu_xx = g.mul(mu_x, mu_x)?;
        let mu_yy = g.mul(mu_y, mu_y)?;
        let mu_xy = g.mul(mu_x, mu_y)?;
        let var_x = g.sub(e_xx, mu_xx)?;
        let var_y = g.sub(e_yy, mu_yy)?;
        let cov = g.sub(e_xy, mu_xy)?;

        let num = g.scale(cov, T::lit(2.0));
        let num = g.add_scalar(num, c2);
        let den = g.add(var_x, var_y)?;
        let den = g.add_scalar(den, c2);
        let mut map = g.div(num, den)?;
        if last {
            let lnum = g.scale(mu_xy, T::lit(2.0));
            let lnum = g.add_scalar(lnum, c1);
            let lden = g.add(mu_xx, mu_yy)?;
            let lden = g.add_scalar(lden, c1);
            let lum = g.div(lnum, lden)?;
            map = g.mul(lum, map)?;
        }
        let m = g.mean_spatial(map)?;
        let m = g.relu(m);
        let m = g.pow_scalar(m, T::lit(wj));
        acc = Some(match acc {
            Some(p) => g.mul(p, m)?,
            None => m,
        });
        if !last {
            x = g.avg_pool2d(x)?;
            y = g.avg_pool2d(y)?;
        }
    }
    Ok(g.mean(acc.expect("at least one scale")))
}

/// Full objective for one batch. `wire_target` is binary and `depth_target`
/// is in meters; both `N x 1 x H x W`.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    out: &ModelOutput,
    wire_target: &Tensor<T>,
    depth_target: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    let wire = wire_loss(g, out.wire_logits, wire_target, T::lit(cfg.positive_weight as f64))?;
    let target = g.constant(depth_target.clone());
    let mae = depth_mae(g, out.depth, target)?;
    let inv_range = T::one() / T::lit(cfg.depth_range as f64);
    let pred_n = g.scale(out.depth, inv_range);
    let target_n = g.scale(target, inv_range);
    let sim = msssim(g, pred_n, target_n, cfg)?;
    let neg = g.scale(sim, -T::one());
    let dissim = g.add_scalar(neg, T::one());
    let weighted = g.scale(dissim, T::lit(cfg.lambda as f64));
    let depth = g.add(mae, weighted)?;
    let total = g.add(wire, depth)?;

    let item = |v: Var| g.value(v).item().map_or(f64::NAN, |x| x.as_f64());
    let (w, m, d) = (item(wire), item(mae), item(dissim));
    let breakdown = LossBreakdown {
        total: w + m + cfg.lambda as f64 * d,
        wire: w,
        depth_mae: m,
        depth_msssim: d,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(g: &Graph<f64>, v: Var) -> f64 {
        g.value(v).item().unwrap()
    }

    #[test]
    fn positive_pixel_at_half_probability() {
        let mut g = Graph::<f64>::new();
        let z = g.input(Tensor::zeros(&[1, 1, 1, 1]));
        let y = Tensor::full(&[1, 1, 1, 1], 1.0);
        let l = wire_loss(&mut g, z, &y, 20.0).unwrap();
        assert!((scalar(&g, l) - 20.0 * core::f64::consts::LN_2).abs() < 1e-12);
        assert!((scalar(&g, l) - 13.863).abs() < 1e-3);
    }

    #[test]
    fn confident_correct_prediction_is_nearly_free() {
        let mut g = Graph::<f64>::new();
        let y = Tensor::from_fn(&[1, 1, 2, 2], |i| (i % 2) as f64);
        let z = g.input(Tensor::from_fn(&[1, 1, 2, 2], |i| if i % 2 == 1 { 30.0 } else { -30.0 }));
        let l = wire_loss(&mut g, z, &y, 20.0).unwrap();
        assert!(scalar(&g, l) < 1e-9);
    }

    #[test]
    fn non_binary_target_rejected() {
        let mut g = Graph::<f32>::new();
        let z = g.input(Tensor::zeros(&[1, 1, 1, 2]));
        let y = Tensor::new(&[1, 1, 1, 2], alloc::vec![0.0, 0.5]).unwrap();
        assert!(matches!(wire_loss(&mut g, z, &y, 20.0), Err(Error::NonBinary { .. })));
    }

    #[test]
    fn mae_constant_offset() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 + 5.0);
        let p = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 + 7.0);
        let (pv, tv) = (g.input(p), g.input(t.clone()));
        let l = depth_mae(&mut g, pv, tv).unwrap();
        assert_eq!(scalar(&g, l), 2.0);
        let tv2 = g.input(t);
        let l = depth_mae(&mut g, tv, tv2).unwrap();
        assert_eq!(scalar(&g, l), 0.0);
    }

    #[test]
    fn weights_renormalized() {
        let w = LossConfig::default().scale_weights();
        assert_eq!(w.len(), 3);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((w[0] - 0.0448 / (0.0448 + 0.2856 + 0.3001)).abs() < 1e-12);
        let five = LossConfig {
            msssim_scales: 5,
            ..LossConfig::default()
        };
        assert!((five.scale_weights()[4] - 0.1333 / 1.0001).abs() < 1e-12);
    }

    #[test]
    fn too_small_for_scales() {
        let cfg = LossConfig::default();
        assert_eq!(cfg.min_image_size(), 44);
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros(&[1, 1, 40, 64]));
        assert!(matches!(
            msssim(&mut g, a, a, &cfg),
            Err(Error::ImageTooSmall { min: 44, .. })
        ));
    }
}
