//! Qualitative output: wire overlay and depth colormap panels.

use ucorr_core::synth::Image;

/// Viridis control points, dark (low) to bright (high).
const VIRIDIS: [[f32; 3]; 5] = [
    [0.267, 0.005, 0.329],
    [0.229, 0.322, 0.546],
    [0.128, 0.567, 0.551],
    [0.369, 0.789, 0.383],
    [0.993, 0.906, 0.144],
];

fn colormap(t: f32) -> [f32; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (VIRIDIS.len() - 1) as f32;
    let i = (x as usize).min(VIRIDIS.len() - 2);
    let f = x - i as f32;
    core::array::from_fn(|c| VIRIDIS[i][c] * (1.0 - f) + VIRIDIS[i + 1][c] * f)
}

/// Near surfaces bright, far ones dark; `max_depth` maps to the dark end.
pub fn depth_colormap(depth: &Image, max_depth: f32) -> Image {
    let mut out = Image::zeros(depth.height, depth.width, 3);
    for (px, &d) in out.data.chunks_exact_mut(3).zip(&depth.data) {
        px.copy_from_slice(&colormap(1.0 - d / max_depth));
    }
    out
}

/// Blends red into `rgb` in proportion to the wire probability.
pub fn wire_overlay(rgb: &Image, prob: &Image) -> Image {
    let mut out = rgb.clone();
    for (px, &p) in out.data.chunks_exact_mut(3).zip(&prob.data) {
        let p = p.clamp(0.0, 1.0);
        px[0] = px[0] * (1.0 - p) + p;
        px[1] *= 1.0 - p;
        px[2] *= 1.0 - p;
    }
    out
}

/// Places equally tall RGB images side by side.
pub fn hstack(images: &[&Image]) -> Image {
    let h = images.iter().map(|i| i.height).max().unwrap_or(0);
    let w: usize = images.iter().map(|i| i.width).sum();
    let mut out = Image::zeros(h, w, 3);
    let mut x0 = 0;
    for img in images {
        for y in 0..img.height {
            let src = &img.data[y * img.width * 3..(y + 1) * img.width * 3];
            let dst = (y * w + x0) * 3;
            out.data[dst..dst + src.len()].copy_from_slice(src);
        }
        x0 += img.width;
    }
    out
}

/// Input | wire overlay | depth colormap.
pub fn panel(rgb: &Image, prob: &Image, depth: &Image, max_depth: f32) -> Image {
    hstack(&[rgb, &wire_overlay(rgb, prob), &depth_colormap(depth, max_depth)])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panel_layout() {
        let rgb = Image::new(2, 2, 3, vec![0.5; 12]).unwrap();
        let prob = Image::new(2, 2, 1, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let depth = Image::new(2, 2, 1, vec![0.0, 10.0, 50.0, 100.0]).unwrap();
        let p = panel(&rgb, &prob, &depth, 100.0);
        assert_eq!((p.height, p.width, p.channels), (2, 6, 3));
        assert_eq!(p.pixel(0, 0), &[0.5, 0.5, 0.5]);
        assert_eq!(p.pixel(0, 3), &[1.0, 0.0, 0.0]);
        assert_eq!(p.pixel(0, 4), &VIRIDIS[4]);
        assert_eq!(p.pixel(1, 5), &VIRIDIS[0]);
    }
}
