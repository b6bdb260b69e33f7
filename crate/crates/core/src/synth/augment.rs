//! Online augmentation. Every random draw happens once per sample, so all
//! frames of a sample see the same flip and the same photometric
//! parameters. Only the flip touches the mask and depth.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{derive_seed, powf, rng_from, Image, Sample};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct MotionBlur {
    pub enabled: bool,
    pub p: f32,
    /// Largest odd kernel length.
    pub max_kernel: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct Flip {
    pub enabled: bool,
    pub p: f32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct RgbShift {
    pub enabled: bool,
    pub p: f32,
    /// Per-channel offset drawn from `[-limit, limit]`.
    pub limit: f32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ColorJitter {
    pub enabled: bool,
    pub p: f32,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    /// Fraction of a full hue turn.
    pub hue: f32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct HueSaturation {
    pub enabled: bool,
    pub p: f32,
    /// Fraction of a full hue turn.
    pub hue_shift: f32,
    pub saturation_shift: f32,
    pub value_shift: f32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct Invert {
    pub enabled: bool,
    pub p: f32,
}

/// Contrast limited adaptive histogram equalization on the HSV value channel.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct Clahe {
    pub enabled: bool,
    pub p: f32,
    pub clip_limit: f32,
    /// Tiles per side.
    pub tile_grid: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct BrightnessContrast {
    pub enabled: bool,
    pub p: f32,
    pub brightness: f32,
    pub contrast: f32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct Gamma {
    pub enabled: bool,
    pub p: f32,
    pub range: [f32; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct AugmentationConfig {
    pub motion_blur: MotionBlur,
    pub flip: Flip,
    pub rgb_shift: RgbShift,
    pub color_jitter: ColorJitter,
    pub hue_saturation: HueSaturation,
    pub invert: Invert,
    pub clahe: Clahe,
    pub brightness_contrast: BrightnessContrast,
    pub gamma: Gamma,
}

impl Default for MotionBlur {
    fn default() -> Self {
        Self { enabled: true, p: 0.2, max_kernel: 5 }
    }
}

impl Default for Flip {
    fn default() -> Self {
        Self { enabled: true, p: 0.5 }
    }
}

impl Default for RgbShift {
    fn default() -> Self {
        Self { enabled: true, p: 0.3, limit: 0.08 }
    }
}

impl Default for ColorJitter {
    fn default() -> Self {
        Self {
            enabled: true,
            p: 0.3,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.05,
        }
    }
}

impl Default for HueSaturation {
    fn default() -> Self {
        Self {
            enabled: true,
            p: 0.3,
            hue_shift: 0.055,
            saturation_shift: 0.3,
            value_shift: 0.2,
        }
    }
}

impl Default for Invert {
    fn default() -> Self {
        Self { enabled: true, p: 0.05 }
    }
}

impl Default for Clahe {
    fn default() -> Self {
        Self {
            enabled: true,
            p: 0.1,
            clip_limit: 2.0,
            tile_grid: 8,
        }
    }
}

impl Default for BrightnessContrast {
    fn default() -> Self {
        Self {
            enabled: true,
            p: 0.3,
            brightness: 0.2,
            contrast: 0.2,
        }
    }
}

impl Default for Gamma {
    fn default() -> Self {
        Self {
            enabled: true,
            p: 0.3,
            range: [0.8, 1.2],
        }
    }
}

impl AugmentationConfig {
    /// Every transform switched off.
    pub fn disabled() -> Self {
        let mut c = Self::default();
        c.motion_blur.enabled = false;
        c.flip.enabled = false;
        c.rgb_shift.enabled = false;
        c.color_jitter.enabled = false;
        c.hue_saturation.enabled = false;
        c.invert.enabled = false;
        c.clahe.enabled = false;
        c.brightness_contrast.enabled = false;
        c.gamma.enabled = false;
        c
    }

    /// Only photometric transforms, each applied with probability one.
    pub fn photometric_only() -> Self {
        let mut c = Self::always();
        c.flip.enabled = false;
        c
    }

    /// Every transform enabled with probability one.
    pub fn always() -> Self {
        let mut c = Self::default();
        c.motion_blur.p = 1.0;
        c.flip.p = 1.0;
        c.rgb_shift.p = 1.0;
        c.color_jitter.p = 1.0;
        c.hue_saturation.p = 1.0;
        c.invert.p = 1.0;
        c.clahe.p = 1.0;
        c.brightness_contrast.p = 1.0;
        c.gamma.p = 1.0;
        c
    }
}

/// Parameters drawn for one sample; `None` means the transform is skipped.
#[derive(Debug, Clone, Default)]
struct Draws {
    blur: Option<(usize, usize)>,
    flip: bool,
    shift: Option<[f32; 3]>,
    jitter: Option<[f32; 4]>,
    hsv: Option<[f32; 3]>,
    invert: bool,
    clahe: bool,
    bc: Option<(f32, f32)>,
    gamma: Option<f32>,
}

fn sym<R: Rng>(rng: &mut R, m: f32) -> f32 {
    if m > 0.0 {
        rng.gen_range(-m..m)
    } else {
        0.0
    }
}

fn fire<R: Rng>(rng: &mut R, enabled: bool, p: f32) -> bool {
    // always consume the coin so toggling one transform leaves others' draws alone
    let coin: f32 = rng.gen();
    enabled && coin < p
}

fn draw<R: Rng>(cfg: &AugmentationConfig, rng: &mut R) -> Draws {
    let mut d = Draws::default();

    let on = fire(rng, cfg.motion_blur.enabled, cfg.motion_blur.p);
    let max_half = cfg.motion_blur.max_kernel.max(3) / 2;
    let half = rng.gen_range(1..=max_half);
    let dir = rng.gen_range(0..4usize);
    if on {
        d.blur = Some((2 * half + 1, dir));
    }

    d.flip = fire(rng, cfg.flip.enabled, cfg.flip.p);

    let on = fire(rng, cfg.rgb_shift.enabled, cfg.rgb_shift.p);
    let s = [0; 3].map(|_| sym(rng, cfg.rgb_shift.limit));
    if on {
        d.shift = Some(s);
    }

    let cj = cfg.color_jitter;
    let on = fire(rng, cj.enabled, cj.p);
    let j = [
        1.0 + sym(rng, cj.brightness),
        1.0 + sym(rng, cj.contrast),
        1.0 + sym(rng, cj.saturation),
        sym(rng, cj.hue),
    ];
    if on {
        d.jitter = Some(j);
    }

    let hs = cfg.hue_saturation;
    let on = fire(rng, hs.enabled, hs.p);
    let h = [sym(rng, hs.hue_shift), sym(rng, hs.saturation_shift), sym(rng, hs.value_shift)];
    if on {
        d.hsv = Some(h);
    }

    d.invert = fire(rng, cfg.invert.enabled, cfg.invert.p);
    d.clahe = fire(rng, cfg.clahe.enabled, cfg.clahe.p);

    let bc = cfg.brightness_contrast;
    let on = fire(rng, bc.enabled, bc.p);
    let v = (sym(rng, bc.brightness), 1.0 + sym(rng, bc.contrast));
    if on {
        d.bc = Some(v);
    }

    let on = fire(rng, cfg.gamma.enabled, cfg.gamma.p);
    let [lo, hi] = cfg.gamma.range;
    let g = if lo < hi { rng.gen_range(lo..hi) } else { lo };
    if on {
        d.gamma = Some(g);
    }
    d
}

/// Applies the enabled transforms with magnitudes drawn from `seed`.
pub fn augment(sample: &Sample, cfg: &AugmentationConfig, seed: u64) -> Sample {
    let mut rng = rng_from(derive_seed(seed, &[0xa06]));
    let d = draw(cfg, &mut rng);
    let mut out = sample.clone();
    for f in &mut out.frames {
        if let Some((len, dir)) = d.blur {
            *f = motion_blur(f, len, dir);
        }
        if d.flip {
            *f = f.flip_horizontal();
        }
        if let Some(s) = d.shift {
            map_rgb(f, |px| {
                for c in 0..3 {
                    px[c] += s[c];
                }
            });
        }
        if let Some(j) = d.jitter {
            color_jitter(f, j);
        }
        if let Some([dh, ds, dv]) = d.hsv {
            map_rgb(f, |px| {
                let [h, s, v] = rgb_to_hsv([px[0], px[1], px[2]]);
                let rgb = hsv_to_rgb([h + dh, (s + ds).clamp(0.0, 1.0), (v + dv).clamp(0.0, 1.0)]);
                px.copy_from_slice(&rgb);
            });
        }
        if d.invert {
            map_rgb(f, |px| {
                for v in px.iter_mut() {
                    *v = 1.0 - *v;
                }
            });
        }
        if d.clahe {
            clahe(f, cfg.clahe.tile_grid, cfg.clahe.clip_limit);
        }
        if let Some((b, c)) = d.bc {
            map_rgb(f, |px| {
                for v in px.iter_mut() {
                    *v = *v * c + b;
                }
            });
        }
        if let Some(g) = d.gamma {
            map_rgb(f, |px| {
                for v in px.iter_mut() {
                    *v = powf(v.clamp(0.0, 1.0), g);
                }
            });
        }
    }
    if d.flip {
        out.wire_mask = out.wire_mask.flip_horizontal();
        out.depth = out.depth.flip_horizontal();
    }
    out
}

/// Applies `f` to every RGB pixel and clamps the result to [0, 1].
fn map_rgb(img: &mut Image, mut f: impl FnMut(&mut [f32])) {
    for px in img.data.chunks_exact_mut(3) {
        f(px);
        for v in px.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

fn gray(px: &[f32]) -> f32 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

fn color_jitter(img: &mut Image, [b, c, s, h]: [f32; 4]) {
    map_rgb(img, |px| {
        for v in px.iter_mut() {
            *v *= b;
        }
    });
    let n = (img.height * img.width) as f32;
    let mean = img.data.chunks_exact(3).map(gray).sum::<f32>() / n;
    map_rgb(img, |px| {
        for v in px.iter_mut() {
            *v = (*v - mean) * c + mean;
        }
    });
    map_rgb(img, |px| {
        let g = gray(px);
        for v in px.iter_mut() {
            *v = (*v - g) * s + g;
        }
    });
    if h != 0.0 {
        map_rgb(img, |px| {
            let [hh, ss, vv] = rgb_to_hsv([px[0], px[1], px[2]]);
            px.copy_from_slice(&hsv_to_rgb([hh + h, ss, vv]));
        });
    }
}

fn wrap(x: f32, m: f32) -> f32 {
    let r = x - num_traits::Float::floor(x / m) * m;
    if r >= m {
        0.0
    } else {
        r
    }
}

/// Hue in turns [0, 1).
pub(crate) fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        wrap((g - b) / delta, 6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    [h, s, max]
}

pub(crate) fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h6 = wrap(h, 1.0) * 6.0;
    let sector = (h6 as usize).min(5);
    let f = h6 - sector as f32;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Averages along a line of `len` pixels; `dir` picks 0, 45, 90 or 135
/// degrees. Borders are clamped.
fn motion_blur(img: &Image, len: usize, dir: usize) -> Image {
    let (dx, dy): (isize, isize) = [(1, 0), (1, 1), (0, 1), (-1, 1)][dir % 4];
    let half = (len / 2) as isize;
    let (h, w, c) = (img.height as isize, img.width as isize, img.channels);
    let mut out = Image::zeros(img.height, img.width, c);
    let inv = 1.0 / len as f32;
    for y in 0..h {
        for x in 0..w {
            let dst = (y * w + x) as usize * c;
            for t in -half..=half {
                let sy = (y + t * dy).clamp(0, h - 1);
                let sx = (x + t * dx).clamp(0, w - 1);
                let src = (sy * w + sx) as usize * c;
                for ch in 0..c {
                    out.data[dst + ch] += img.data[src + ch] * inv;
                }
            }
        }
    }
    out
}

const BINS: usize = 256;

/// Equalizes the HSV value channel tile by tile with clipped histograms and
/// bilinear blending between tile mappings; hue and saturation are kept.
fn clahe(img: &mut Image, grid: usize, clip_limit: f32) {
    let (h, w) = (img.height, img.width);
    let grid = grid.clamp(1, h.min(w).max(1));
    let value: Vec<f32> = img.data.chunks_exact(3).map(|p| p[0].max(p[1]).max(p[2])).collect();
    let eq = clahe_channel(&value, h, w, grid, clip_limit);
    for (i, px) in img.data.chunks_exact_mut(3).enumerate() {
        let (v, nv) = (value[i], eq[i]);
        if v > 0.0 {
            let k = nv / v;
            for x in px.iter_mut() {
                *x = (*x * k).clamp(0.0, 1.0);
            }
        } else {
            px.fill(nv);
        }
    }
}

fn clahe_channel(v: &[f32], h: usize, w: usize, grid: usize, clip_limit: f32) -> Vec<f32> {
    let bin = |x: f32| ((x.clamp(0.0, 1.0) * (BINS - 1) as f32) + 0.5) as usize;
    let tile_h = h.div_ceil(grid);
    let tile_w = w.div_ceil(grid);
    let mut luts = vec![[0.0f32; BINS]; grid * grid];
    for ty in 0..grid {
        for tx in 0..grid {
            let mut hist = [0.0f32; BINS];
            let mut n = 0usize;
            for y in ty * tile_h..((ty + 1) * tile_h).min(h) {
                for x in tx * tile_w..((tx + 1) * tile_w).min(w) {
                    hist[bin(v[y * w + x])] += 1.0;
                    n += 1;
                }
            }
            let lut = &mut luts[ty * grid + tx];
            if n == 0 {
                for (b, l) in lut.iter_mut().enumerate() {
                    *l = b as f32 / (BINS - 1) as f32;
                }
                continue;
            }
            let clip = (clip_limit * n as f32 / BINS as f32).max(1.0);
            let mut excess = 0.0;
            for c in hist.iter_mut() {
                if *c > clip {
                    excess += *c - clip;
                    *c = clip;
                }
            }
            let spread = excess / BINS as f32;
            let mut cdf = 0.0;
            for b in 0..BINS {
                cdf += hist[b] + spread;
                lut[b] = (cdf / n as f32).min(1.0);
            }
        }
    }
    let mut out = vec![0.0; v.len()];
    // tile centre coordinates for interpolation
    let coord = |p: usize, tile: usize| -> (usize, usize, f32) {
        let t = (p as f32 + 0.5) / tile as f32 - 0.5;
        if t <= 0.0 {
            return (0, 0, 0.0);
        }
        let lo = (t as usize).min(grid - 1);
        let hi = (lo + 1).min(grid - 1);
        (lo, hi, if hi == lo { 0.0 } else { t - lo as f32 })
    };
    for y in 0..h {
        let (y0, y1, fy) = coord(y, tile_h);
        for x in 0..w {
            let (x0, x1, fx) = coord(x, tile_w);
            let b = bin(v[y * w + x]);
            let l = |ty: usize, tx: usize| luts[ty * grid + tx][b];
            let top = l(y0, x0) * (1.0 - fx) + l(y0, x1) * fx;
            let bottom = l(y1, x0) * (1.0 - fx) + l(y1, x1) * fx;
            out[y * w + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_sample, SceneConfig};

    fn sample() -> Sample {
        generate_sample(&SceneConfig::default(), 42).unwrap()
    }

    #[test]
    fn disabled_is_identity() {
        let s = sample();
        assert_eq!(augment(&s, &AugmentationConfig::disabled(), 9), s);
    }

    #[test]
    fn flip_mirrors_labels() {
        let s = sample();
        let mut cfg = AugmentationConfig::disabled();
        cfg.flip = Flip { enabled: true, p: 1.0 };
        let a = augment(&s, &cfg, 1);
        assert_eq!(a.wire_mask, s.wire_mask.flip_horizontal());
        assert_eq!(a.depth, s.depth.flip_horizontal());
        assert_eq!(a.frames[0], s.frames[0].flip_horizontal());
    }

    #[test]
    fn photometric_keeps_labels() {
        let s = sample();
        for seed in 0..5 {
            let a = augment(&s, &AugmentationConfig::photometric_only(), seed);
            assert_eq!(a.wire_mask, s.wire_mask);
            assert_eq!(a.depth, s.depth);
            assert!(a.frames.iter().flat_map(|f| &f.data).all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn invert_twice() {
        let s = sample();
        let mut cfg = AugmentationConfig::disabled();
        cfg.invert = Invert { enabled: true, p: 1.0 };
        let back = augment(&augment(&s, &cfg, 0), &cfg, 0);
        for (a, b) in back.frames[1].data.iter().zip(&s.frames[1].data) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn hsv_round_trip() {
        for rgb in [[0.2, 0.5, 0.9], [1.0, 0.0, 0.0], [0.3, 0.3, 0.3], [0.9, 0.8, 0.1]] {
            let back = hsv_to_rgb(rgb_to_hsv(rgb));
            for c in 0..3 {
                assert!((back[c] - rgb[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn clahe_flat_image_stays_in_range() {
        let v = vec![0.4f32; 64 * 64];
        let out = clahe_channel(&v, 64, 64, 8, 2.0);
        assert!(out.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn same_draws_for_every_frame() {
        let mut s = sample();
        s.frames[0] = s.frames[1].clone();
        let a = augment(&s, &AugmentationConfig::always(), 3);
        assert_eq!(a.frames[0], a.frames[1]);
    }
}
