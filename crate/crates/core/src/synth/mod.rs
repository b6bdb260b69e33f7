//! Procedural aerial scenes: textured fronto-parallel planes and hanging
//! wires seen by a translating pinhole camera.
//!
//! Camera coordinates are x right, y down, z forward. Every surface is a
//! plane of constant depth, so a wire at depth `z` moves by exactly
//! `f * b / z` pixels when the camera translates sideways by `b`.

mod augment;
mod image;
mod resize;

pub use augment::{augment, AugmentationConfig};
pub use image::Image;
pub use resize::{resize_nni, resize_sample};

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub(crate) fn cosh(x: f64) -> f64 {
    num_traits::Float::cosh(x)
}

pub(crate) fn sinh(x: f64) -> f64 {
    num_traits::Float::sinh(x)
}

pub(crate) fn sqrt(x: f64) -> f64 {
    num_traits::Float::sqrt(x)
}

pub(crate) fn floor(x: f64) -> f64 {
    num_traits::Float::floor(x)
}

pub(crate) fn tan(x: f64) -> f64 {
    num_traits::Float::tan(x)
}

pub(crate) fn powf(x: f32, e: f32) -> f32 {
    num_traits::Float::powf(x, e)
}

fn exp(x: f64) -> f64 {
    num_traits::Float::exp(x)
}

const SKY: [f32; 3] = [0.72, 0.78, 0.85];

/// Mixes `tags` into `seed` (SplitMix64 finalizer per tag). Distinct tag
/// paths give independent streams.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut s = seed;
    for &t in tags {
        s ^= t.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(s << 6).wrapping_add(s >> 2);
        let mut z = s.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        s = z ^ (z >> 31);
    }
    s
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Focal length as a fraction of image width.
    pub focal_ratio: f32,
    /// Inclusive range.
    pub wire_count: [usize; 2],
    /// Vertical sag in meters across the visible half-width.
    pub wire_sag: [f32; 2],
    /// Wire distance in meters.
    pub wire_depth: [f32; 2],
    /// Stroke width in pixels.
    pub wire_width: [f32; 2],
    /// Horizontal wire length in meters; `None` spans the whole view.
    pub wire_span: Option<[f32; 2]>,
    /// Inclusive range.
    pub layer_count: [usize; 2],
    pub layer_depth: [f32; 2],
    /// Camera motion between consecutive frames, meters (x, y, z).
    pub translation: [f32; 3],
    /// Std-dev of per-frame pan/tilt in degrees.
    pub rotation_jitter_deg: f32,
    pub far_plane: f32,
    /// Atmospheric extinction per meter; colors fade toward the sky tone
    /// with distance.
    pub haze: f32,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            focal_ratio: 0.9,
            wire_count: [1, 2],
            wire_sag: [0.2, 3.0],
            wire_depth: [6.0, 30.0],
            wire_width: [1.0, 2.0],
            wire_span: None,
            layer_count: [1, 3],
            layer_depth: [35.0, 90.0],
            translation: [0.5, 0.0, 0.0],
            rotation_jitter_deg: 0.0,
            far_plane: 100.0,
            haze: 0.02,
            seed: 0,
        }
    }
}

fn check_range(name: &str, r: [f32; 2], positive: bool) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) || (positive && r[0] <= 0.0) {
        return Err(Error::InvalidConfig(alloc::format!("{name} range {r:?} is invalid")));
    }
    Ok(())
}

impl SceneConfig {
    pub fn focal_px(&self) -> f64 {
        self.focal_ratio as f64 * self.width as f64
    }

    pub fn baseline(&self) -> f32 {
        let [x, y, z] = self.translation;
        num_traits::Float::sqrt(x * x + y * y + z * z)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidConfig("image size must be positive".into()));
        }
        if !(self.focal_ratio.is_finite() && self.focal_ratio > 0.0) {
            return Err(Error::InvalidConfig("degenerate camera: focal length must be positive".into()));
        }
        if self.wire_count[0] > self.wire_count[1] || self.layer_count[0] > self.layer_count[1] {
            return Err(Error::InvalidConfig("count range must be ordered".into()));
        }
        check_range("wire_sag", self.wire_sag, false)?;
        check_range("wire_depth", self.wire_depth, true)?;
        check_range("wire_width", self.wire_width, true)?;
        check_range("layer_depth", self.layer_depth, true)?;
        if let Some(s) = self.wire_span {
            check_range("wire_span", s, true)?;
        }
        if !(self.far_plane.is_finite() && self.far_plane >= self.layer_depth[1] && self.far_plane >= self.wire_depth[1]) {
            return Err(Error::InvalidConfig("far_plane must bound every surface".into()));
        }
        if !(self.haze >= 0.0 && self.haze.is_finite()) {
            return Err(Error::InvalidConfig("haze must be non-negative".into()));
        }
        if self.translation.iter().any(|t| !t.is_finite()) || !(self.rotation_jitter_deg >= 0.0) {
            return Err(Error::InvalidConfig("camera motion must be finite".into()));
        }
        Ok(())
    }
}

/// Catenary `y = y0 + a (cosh((x - x0) / a) - 1)` in the plane `z = depth`.
#[derive(Debug, Clone, PartialEq)]
pub struct Wire {
    pub depth: f64,
    pub x0: f64,
    pub y0: f64,
    pub a: f64,
    /// Stroke width in pixels.
    pub width_px: f64,
    /// Horizontal extent in world x, if finite.
    pub span: Option<(f64, f64)>,
    pub color: [f32; 3],
}

impl Wire {
    fn y_at(&self, x: f64) -> f64 {
        self.y0 + self.a * (cosh((x - self.x0) / self.a) - 1.0)
    }

    fn slope_at(&self, x: f64) -> f64 {
        sinh((x - self.x0) / self.a)
    }
}

/// Rectangular textured plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub depth: f64,
    /// World-space x0, y0, x1, y1; infinite for the far plane.
    pub rect: [f64; 4],
    pub color: [f32; 3],
    pub tint: [f32; 3],
    pub texture_scale: f64,
    pub texture_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub focal: f64,
    pub height: usize,
    pub width: usize,
    /// Sorted far to near; the first entry is the far plane.
    pub layers: Vec<Layer>,
    pub wires: Vec<Wire>,
    pub haze: f64,
}

/// Camera pose: translation from the first frame plus an image-space pan.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub position: [f64; 3],
    pub pan_px: [f64; 2],
}

/// One rendered frame with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub rgb: Image,
    pub wire_mask: Image,
    pub depth: Image,
}

fn uniform<R: Rng>(rng: &mut R, r: [f32; 2]) -> f64 {
    if r[0] == r[1] {
        r[0] as f64
    } else {
        rng.gen_range(r[0] as f64..r[1] as f64)
    }
}

fn lattice(seed: u64, ix: i64, iy: i64) -> f32 {
    let h = derive_seed(seed, &[ix as u64, iy as u64]);
    (h >> 40) as f32 / (1u64 << 24) as f32
}

/// Smooth value noise in [0, 1].
fn value_noise(seed: u64, x: f64, y: f64) -> f32 {
    let (fx, fy) = (floor(x), floor(y));
    let (tx, ty) = ((x - fx) as f32, (y - fy) as f32);
    let (sx, sy) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
    let (ix, iy) = (fx as i64, fy as i64);
    let a = lattice(seed, ix, iy);
    let b = lattice(seed, ix + 1, iy);
    let c = lattice(seed, ix, iy + 1);
    let d = lattice(seed, ix + 1, iy + 1);
    let top = a + (b - a) * sx;
    let bottom = c + (d - c) * sx;
    top + (bottom - top) * sy
}

impl Layer {
    fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.rect[0] && x < self.rect[2] && y >= self.rect[1] && y < self.rect[3]
    }

    fn shade(&self, x: f64, y: f64) -> [f32; 3] {
        let s = self.texture_scale;
        let n = 0.65 * value_noise(self.texture_seed, x * s, y * s)
            + 0.35 * value_noise(self.texture_seed ^ 0x5bd1, x * s * 4.0, y * s * 4.0);
        let mut out = [0.0; 3];
        for ch in 0..3 {
            let v = self.color[ch] * (0.55 + 0.45 * n) + self.tint[ch] * (1.0 - n);
            out[ch] = v.clamp(0.0, 1.0);
        }
        out
    }
}

fn random_color<R: Rng>(rng: &mut R, lo: f32, hi: f32) -> [f32; 3] {
    let base = rng.gen_range(lo..hi);
    let mut c = [0.0; 3];
    for v in &mut c {
        *v = (base + rng.gen_range(-0.12f32..0.12)).clamp(0.0, 1.0);
    }
    c
}

/// Catenary parameter with vertical rise `sag` over horizontal distance `half`.
fn catenary_param(sag: f64, half: f64) -> f64 {
    if sag <= 1e-9 {
        return 1e9;
    }
    // rise(a) = a (cosh(half / a) - 1) decreases in a
    let rise = |a: f64| a * (cosh(half / a) - 1.0);
    let (mut lo, mut hi) = (half / 40.0, half * 1e4);
    if rise(hi) > sag {
        return hi;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if rise(mid) > sag {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

impl Scene {
    /// Draws a static scene. Everything is placed relative to the first
    /// camera pose.
    pub fn generate(cfg: &SceneConfig, seed: u64) -> Result<Scene> {
        cfg.validate()?;
        let mut rng = rng_from(derive_seed(seed, &[0x5ce7e]));
        let focal = cfg.focal_px();
        let (w, h) = (cfg.width as f64, cfg.height as f64);
        let half_view = |z: f64| 0.5 * w * z / focal;

        let mut layers = Vec::new();
        layers.push(Layer {
            depth: cfg.far_plane as f64,
            rect: [f64::NEG_INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::INFINITY],
            color: random_color(&mut rng, 0.55, 0.9),
            tint: random_color(&mut rng, 0.0, 0.25),
            texture_scale: rng.gen_range(0.05..0.2),
            texture_seed: rng.gen(),
        });
        let n_layers = rng.gen_range(cfg.layer_count[0]..=cfg.layer_count[1]);
        for _ in 0..n_layers {
            let z = uniform(&mut rng, cfg.layer_depth);
            let hv = half_view(z);
            let hh = hv * h / w;
            // ground-like slab from somewhere in the view downwards, or a block
            let x0 = rng.gen_range(-3.0 * hv..hv);
            let x1 = x0 + rng.gen_range(hv..6.0 * hv);
            let y0 = rng.gen_range(-0.6 * hh..0.9 * hh);
            let y1 = if rng.gen_bool(0.6) { f64::INFINITY } else { y0 + rng.gen_range(0.3 * hh..2.0 * hh) };
            layers.push(Layer {
                depth: z,
                rect: [x0, y0, x1, y1],
                color: random_color(&mut rng, 0.25, 0.75),
                tint: random_color(&mut rng, 0.0, 0.3),
                texture_scale: rng.gen_range(0.2..1.0),
                texture_seed: rng.gen(),
            });
        }
        layers.sort_by(|a, b| b.depth.total_cmp(&a.depth));

        let n_wires = rng.gen_range(cfg.wire_count[0]..=cfg.wire_count[1]);
        let mut wires = Vec::with_capacity(n_wires);
        // one wire per depth stratum, kept off the stratum edges so wires
        // in a scene sit at clearly different distances
        let [zmin, zmax] = cfg.wire_depth;
        let stratum = (zmax - zmin) / n_wires.max(1) as f32;
        for k in 0..n_wires {
            let lo = zmin + stratum * (k as f32 + 0.2);
            let z = uniform(&mut rng, [lo, lo + 0.6 * stratum]);
            let hv = half_view(z);
            let sag = uniform(&mut rng, cfg.wire_sag);
            let a = catenary_param(sag, hv);
            // lowest point, possibly outside the view so the wire looks slanted
            let x0 = rng.gen_range(-2.0 * hv..2.0 * hv);
            // pick where the wire crosses the image centre column
            let v_mid = rng.gen_range(0.15 * h..0.85 * h);
            let y_mid = (v_mid - 0.5 * h) * z / focal;
            let y0 = y_mid - a * (cosh(-x0 / a) - 1.0);
            let span = cfg.wire_span.map(|r| {
                let len = uniform(&mut rng, r);
                let room = (0.8 * (hv - 0.5 * len)).max(0.0);
                let c = if room > 0.0 { rng.gen_range(-room..room) } else { 0.0 };
                (c - 0.5 * len, c + 0.5 * len)
            });
            wires.push(Wire {
                depth: z,
                x0,
                y0,
                a,
                width_px: uniform(&mut rng, cfg.wire_width),
                span,
                color: random_color(&mut rng, 0.05, 0.3),
            });
        }
        // painter's order: far wires first
        wires.sort_by(|a, b| b.depth.total_cmp(&a.depth));
        Ok(Scene {
            focal,
            height: cfg.height,
            width: cfg.width,
            layers,
            wires,
            haze: cfg.haze as f64,
        })
    }

    fn hazed(&self, color: [f32; 3], dist: f64) -> [f32; 3] {
        let t = exp(-self.haze * dist) as f32;
        core::array::from_fn(|c| t * color[c] + (1.0 - t) * SKY[c])
    }

    /// World point on plane depth `z` seen through pixel centre (u, v).
    fn unproject(&self, pose: &Pose, u: f64, v: f64, z: f64) -> Option<(f64, f64)> {
        let rel = z - pose.position[2];
        if rel <= 0.0 {
            return None;
        }
        let cx = 0.5 * self.width as f64 + pose.pan_px[0];
        let cy = 0.5 * self.height as f64 + pose.pan_px[1];
        Some((
            (u - cx) * rel / self.focal + pose.position[0],
            (v - cy) * rel / self.focal + pose.position[1],
        ))
    }

    /// Coverage of `wire` at pixel centre (u, v) in [0, 1].
    fn wire_alpha(&self, wire: &Wire, pose: &Pose, u: f64, v: f64) -> f64 {
        let Some((x, _)) = self.unproject(pose, u, v, wire.depth) else {
            return 0.0;
        };
        let rel = wire.depth - pose.position[2];
        let k = self.focal / rel;
        // horizontal coverage of the cut ends, in pixels
        let end = match wire.span {
            Some((lo, hi)) => ((x - lo).min(hi - x) * k + 0.5).clamp(0.0, 1.0),
            None => 1.0,
        };
        if end <= 0.0 {
            return 0.0;
        }
        let cy = 0.5 * self.height as f64 + pose.pan_px[1];
        let v_curve = cy + k * (wire.y_at(x) - pose.position[1]);
        let slope = wire.slope_at(x);
        let dist = (v - v_curve).abs() / sqrt(1.0 + slope * slope);
        (0.5 * wire.width_px + 0.5 - dist).clamp(0.0, 1.0).min(end)
    }

    /// Renders the scene from `pose`. The mask marks pixels where a
    /// visible wire covers more than half the pixel; depth holds the nearest
    /// surface, the wire's distance wherever the mask is set.
    pub fn render(&self, pose: &Pose) -> View {
        let (h, w) = (self.height, self.width);
        let mut rgb = Image::zeros(h, w, 3);
        let mut mask = Image::zeros(h, w, 1);
        let mut depth = Image::zeros(h, w, 1);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f64 + 0.5, y as f64 + 0.5);
                // nearest layer that covers this pixel
                let mut color = [0.0f32; 3];
                let mut surface = f64::INFINITY;
                for layer in self.layers.iter().rev() {
                    if let Some((wx, wy)) = self.unproject(pose, u, v, layer.depth) {
                        if layer.contains(wx, wy) {
                            surface = layer.depth - pose.position[2];
                            color = self.hazed(layer.shade(wx, wy), surface);
                            break;
                        }
                    }
                }
                let mut wire_depth = f64::INFINITY;
                for wire in &self.wires {
                    let rel = wire.depth - pose.position[2];
                    if rel >= surface {
                        continue;
                    }
                    let alpha = self.wire_alpha(wire, pose, u, v);
                    if alpha <= 0.0 {
                        continue;
                    }
                    let al = alpha as f32;
                    let wc = self.hazed(wire.color, rel);
                    for ch in 0..3 {
                        color[ch] = al * wc[ch] + (1.0 - al) * color[ch];
                    }
                    if alpha > 0.5 && rel < wire_depth {
                        wire_depth = rel;
                    }
                }
                let i = y * w + x;
                rgb.data[3 * i..3 * i + 3].copy_from_slice(&color);
                if wire_depth.is_finite() {
                    mask.data[i] = 1.0;
                    depth.data[i] = wire_depth as f32;
                } else {
                    depth.data[i] = surface as f32;
                }
            }
        }
        View {
            rgb,
            wire_mask: mask,
            depth,
        }
    }

    /// Anti-aliased coverage of a single wire, ignoring occlusion.
    pub fn wire_coverage(&self, index: usize, pose: &Pose) -> Image {
        let mut m = Image::zeros(self.height, self.width, 1);
        for y in 0..self.height {
            for x in 0..self.width {
                let a = self.wire_alpha(&self.wires[index], pose, x as f64 + 0.5, y as f64 + 0.5);
                m.data[y * self.width + x] = a as f32;
            }
        }
        m
    }

    /// Mask of a single wire, ignoring occlusion.
    pub fn wire_mask(&self, index: usize, pose: &Pose) -> Image {
        let mut m = self.wire_coverage(index, pose);
        for v in &mut m.data {
            *v = if *v > 0.5 { 1.0 } else { 0.0 };
        }
        m
    }
}

/// Poses of frames `0..n` for a scene config. Pan jitter is drawn per frame
/// from its own seed stream.
pub fn flight_poses(cfg: &SceneConfig, seed: u64, n: usize) -> Vec<Pose> {
    let t = cfg.translation;
    (0..n)
        .map(|k| {
            let mut pan = [0.0; 2];
            if cfg.rotation_jitter_deg > 0.0 {
                let mut rng = rng_from(derive_seed(seed, &[0x9a7, k as u64]));
                for p in &mut pan {
                    // sum of uniforms, roughly normal with the requested std-dev
                    let z: f64 = (0..12).map(|_| rng.gen_range(0.0..1.0)).sum::<f64>() - 6.0;
                    let ang = z * cfg.rotation_jitter_deg as f64 * core::f64::consts::PI / 180.0;
                    *p = cfg.focal_px() * tan(ang);
                }
            }
            let kf = k as f64;
            Pose {
                position: [t[0] as f64 * kf, t[1] as f64 * kf, t[2] as f64 * kf],
                pan_px: pan,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SampleMeta {
    pub scene_seed: u64,
    /// Camera displacement between consecutive frames, meters.
    pub baseline: f32,
    /// Index of the newest frame within its flight.
    pub frame_index: usize,
}

/// Consecutive frames, oldest first, with labels for the newest frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub frames: Vec<Image>,
    pub wire_mask: Image,
    pub depth: Image,
    pub meta: SampleMeta,
}

impl Sample {
    pub fn frame_curr(&self) -> &Image {
        self.frames.last().expect("sample has frames")
    }

    pub fn frame_prev(&self) -> &Image {
        &self.frames[self.frames.len().saturating_sub(2)]
    }

    pub fn height(&self) -> usize {
        self.wire_mask.height
    }

    pub fn width(&self) -> usize {
        self.wire_mask.width
    }

    /// Keeps only the newest `n` frames.
    pub fn truncated(&self, n: usize) -> Result<Sample> {
        if n == 0 || n > self.frames.len() {
            return Err(Error::InvalidConfig(alloc::format!(
                "cannot take {n} frames from a sample with {}",
                self.frames.len()
            )));
        }
        let mut s = self.clone();
        s.frames.drain(..self.frames.len() - n);
        Ok(s)
    }
}

/// All frames of one flight with per-frame labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Flight {
    pub scene_seed: u64,
    pub baseline: f32,
    pub views: Vec<View>,
}

impl Flight {
    /// Windows of `window` consecutive frames; one sample per window.
    pub fn samples(&self, window: usize) -> Vec<Sample> {
        if window == 0 || window > self.views.len() {
            return Vec::new();
        }
        (window - 1..self.views.len())
            .map(|end| Sample {
                frames: self.views[end + 1 - window..=end].iter().map(|v| v.rgb.clone()).collect(),
                wire_mask: self.views[end].wire_mask.clone(),
                depth: self.views[end].depth.clone(),
                meta: SampleMeta {
                    scene_seed: self.scene_seed,
                    baseline: self.baseline,
                    frame_index: end,
                },
            })
            .collect()
    }
}

pub fn generate_flight(cfg: &SceneConfig, seed: u64, n_frames: usize) -> Result<Flight> {
    let scene = Scene::generate(cfg, seed)?;
    let views = flight_poses(cfg, seed, n_frames).iter().map(|p| scene.render(p)).collect();
    Ok(Flight {
        scene_seed: seed,
        baseline: cfg.baseline(),
        views,
    })
}

/// Two-frame sample from a fresh scene.
pub fn generate_sample(cfg: &SceneConfig, seed: u64) -> Result<Sample> {
    generate_window(cfg, seed, 2)
}

/// `window`-frame sample from a fresh scene.
pub fn generate_window(cfg: &SceneConfig, seed: u64, window: usize) -> Result<Sample> {
    if window == 0 {
        return Err(Error::InvalidConfig("window must be positive".into()));
    }
    let flight = generate_flight(cfg, seed, window)?;
    Ok(flight.samples(window).remove(0))
}

/// Fraction of wire pixels over a set of masks.
pub fn wire_pixel_rate<'a>(masks: impl IntoIterator<Item = &'a Image>) -> f64 {
    let (mut on, mut total) = (0usize, 0usize);
    for m in masks {
        on += m.data.iter().filter(|&&v| v > 0.5).count();
        total += m.data.len();
    }
    if total == 0 {
        0.0
    } else {
        on as f64 / total as f64
    }
}

/// Horizontal centroid of a single-channel weight map.
pub fn centroid_x(map: &Image) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0.0);
    for y in 0..map.height {
        for x in 0..map.width {
            let v = map.data[y * map.width + x] as f64;
            s += v * x as f64;
            n += v;
        }
    }
    (n > 0.0).then(|| s / n)
}
