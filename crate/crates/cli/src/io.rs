//! PNG and `.utf` tensor files, atomic writes, output directory checks.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, GrayImage, ImageEncoder, ImageFormat, RgbImage};
use ucorr_core::synth::Image;
use ucorr_core::tensor_file::{decode_tensor, encode_tensor};
use ucorr_core::Tensor;

/// Writes through a temporary sibling and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| anyhow!("{} has no file name", path.display()))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// Creates `dir`, refusing a non-empty existing one unless `force`, in which
/// case its contents are removed first.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if non_empty {
            if !force {
                bail!("{} exists and is not empty (use --force to overwrite)", dir.display());
            }
            fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn png_bytes(raw: &[u8], w: usize, h: usize, color: ExtendedColorType) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out).write_image(raw, w as u32, h as u32, color)?;
    Ok(out)
}

/// 8-bit RGB PNG of a 3-channel image in `[0, 1]`.
pub fn rgb_png(img: &Image) -> Result<Vec<u8>> {
    if img.channels != 3 {
        bail!("expected 3 channels, got {}", img.channels);
    }
    let raw: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    png_bytes(&raw, img.width, img.height, ExtendedColorType::Rgb8)
}

/// 8-bit grayscale PNG of a single-channel image in `[0, 1]`.
pub fn gray_png(img: &Image) -> Result<Vec<u8>> {
    if img.channels != 1 {
        bail!("expected 1 channel, got {}", img.channels);
    }
    let raw: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    png_bytes(&raw, img.width, img.height, ExtendedColorType::L8)
}

/// Mask PNG: 0 or 255 per pixel.
pub fn mask_png(mask: &Image) -> Result<Vec<u8>> {
    if mask.data.iter().any(|&v| v != 0.0 && v != 1.0) {
        bail!("mask is not binary");
    }
    gray_png(mask)
}

pub fn read_rgb(path: &Path) -> Result<Image> {
    let img: RgbImage = image::open(path)
        .with_context(|| format!("reading {}", path.display()))?
        .into_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Ok(Image::new(h as usize, w as usize, 3, data)?)
}

fn read_gray(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(image::load(Cursor::new(bytes), ImageFormat::Png)
        .with_context(|| format!("decoding {}", path.display()))?
        .into_luma8())
}

pub fn read_mask(path: &Path) -> Result<Image> {
    let img = read_gray(path)?;
    let (w, h) = img.dimensions();
    let data = img
        .into_raw()
        .into_iter()
        .map(|v| match v {
            0 => Ok(0.0),
            255 => Ok(1.0),
            other => Err(anyhow!("{}: mask value {other} is not 0 or 255", path.display())),
        })
        .collect::<Result<Vec<f32>>>()?;
    Ok(Image::new(h as usize, w as usize, 1, data)?)
}

/// `.utf` bytes of an `H x W` single-channel map.
pub fn depth_bytes(depth: &Image) -> Result<Vec<u8>> {
    if depth.channels != 1 {
        bail!("depth must have one channel");
    }
    Ok(encode_tensor(&Tensor::new(&[depth.height, depth.width], depth.data.clone())?))
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode_tensor(&bytes).with_context(|| format!("decoding {}", path.display()))
}

pub fn read_depth(path: &Path) -> Result<Image> {
    let t = read_tensor(path)?;
    match *t.shape() {
        [h, w] => Ok(Image::new(h, w, 1, t.data().to_vec())?),
        ref s => bail!("{}: depth tensor has shape {s:?}, expected [H, W]", path.display()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.bin");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn output_dir_requires_force() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        prepare_output_dir(&out, false).unwrap();
        fs::write(out.join("x"), b"1").unwrap();
        assert!(prepare_output_dir(&out, false).is_err());
        prepare_output_dir(&out, true).unwrap();
        assert_eq!(fs::read_dir(&out).unwrap().count(), 0);
    }

    #[test]
    fn mask_and_depth_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mask = Image::new(2, 3, 1, vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let depth = Image::new(2, 3, 1, vec![1.5, 100.0, 7.25, 1e-3, 33.3, 64.0]).unwrap();
        let (mp, dp) = (dir.path().join("m.png"), dir.path().join("d.utf"));
        atomic_write(&mp, &mask_png(&mask).unwrap()).unwrap();
        atomic_write(&dp, &depth_bytes(&depth).unwrap()).unwrap();
        assert_eq!(read_mask(&mp).unwrap(), mask);
        assert_eq!(read_depth(&dp).unwrap(), depth);
    }

    #[test]
    fn non_binary_mask_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        let g = Image::new(1, 2, 1, vec![0.0, 0.5]).unwrap();
        assert!(mask_png(&g).is_err());
        atomic_write(&p, &gray_png(&g).unwrap()).unwrap();
        assert!(read_mask(&p).is_err());
    }

    #[test]
    fn corrupt_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.utf");
        let mut bytes = depth_bytes(&Image::new(1, 1, 1, vec![2.0]).unwrap()).unwrap();
        bytes[0] = b'X';
        fs::write(&p, bytes).unwrap();
        assert!(read_depth(&p).is_err());
    }
}
