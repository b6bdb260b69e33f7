use crate::error::{Error, Result};

use super::{Image, Sample};

/// Nearest-neighbour resampling; source index `floor(i * src / dst)`.
/// Never introduces values absent from the input.
pub fn resize_nni(img: &Image, height: usize, width: usize) -> Result<Image> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidConfig("resize target must be positive".into()));
    }
    let c = img.channels;
    let mut out = Image::zeros(height, width, c);
    for y in 0..height {
        let sy = y * img.height / height;
        for x in 0..width {
            let sx = x * img.width / width;
            let src = (sy * img.width + sx) * c;
            let dst = (y * width + x) * c;
            out.data[dst..dst + c].copy_from_slice(&img.data[src..src + c]);
        }
    }
    Ok(out)
}

pub fn resize_sample(s: &Sample, height: usize, width: usize) -> Result<Sample> {
    Ok(Sample {
        frames: s
            .frames
            .iter()
            .map(|f| resize_nni(f, height, width))
            .collect::<Result<_>>()?,
        wire_mask: resize_nni(&s.wire_mask, height, width)?,
        depth: resize_nni(&s.depth, height, width)?,
        meta: s.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn identity_and_upscale() {
        let img = Image::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(resize_nni(&img, 2, 2).unwrap(), img);
        let up = resize_nni(&img, 4, 4).unwrap();
        assert_eq!(
            up.data,
            vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        assert!(resize_nni(&img, 0, 3).is_err());
    }
}
