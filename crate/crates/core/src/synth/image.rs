use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interleaved `height x width x channels` f32 image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::BadShape {
                op: "Image::new",
                shape: vec![height, width, channels],
                reason: "data length does not match extents",
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        let c = self.channels;
        for y in 0..self.height {
            for x in 0..self.width {
                let src = (y * self.width + (self.width - 1 - x)) * c;
                let dst = (y * self.width + x) * c;
                out.data[dst..dst + c].copy_from_slice(&self.data[src..src + c]);
            }
        }
        out
    }

    /// Planar `channels x height x width` copy.
    pub fn to_chw(&self) -> Vec<f32> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![0.0; h * w * c];
        for i in 0..h * w {
            for ch in 0..c {
                out[ch * h * w + i] = self.data[i * c + ch];
            }
        }
        out
    }

    pub fn from_chw(height: usize, width: usize, channels: usize, planar: &[f32]) -> Result<Image> {
        let mut img = Image::zeros(height, width, channels);
        if planar.len() != img.data.len() {
            return Err(Error::BadShape {
                op: "Image::from_chw",
                shape: vec![channels, height, width],
                reason: "data length does not match extents",
            });
        }
        let n = height * width;
        for i in 0..n {
            for ch in 0..channels {
                img.data[i * channels + ch] = planar[ch * n + i];
            }
        }
        Ok(img)
    }

    /// `1 x C x H x W` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[1, self.channels, self.height, self.width], self.to_chw()).expect("consistent extents")
    }

    /// Stacks same-sized images into an `N x C x H x W` tensor.
    pub fn batch(images: &[&Image]) -> Result<Tensor<f32>> {
        let first = images.first().ok_or(Error::InvalidConfig("empty batch".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if !img.same_dims(first) || img.channels != first.channels {
                return Err(Error::ShapeMismatch {
                    op: "Image::batch",
                    lhs: vec![first.height, first.width, first.channels],
                    rhs: vec![img.height, img.width, img.channels],
                });
            }
            data.extend(img.to_chw());
        }
        Tensor::new(&[images.len(), first.channels, first.height, first.width], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chw_round_trip() {
        let img = Image::new(2, 3, 3, (0..18).map(|v| v as f32).collect()).unwrap();
        let back = Image::from_chw(2, 3, 3, &img.to_chw()).unwrap();
        assert_eq!(img, back);
        assert_eq!(img.to_chw()[..6], [0.0, 3.0, 6.0, 9.0, 12.0, 15.0]);
    }

    #[test]
    fn double_flip_is_identity() {
        let img = Image::new(2, 3, 1, (0..6).map(|v| v as f32).collect()).unwrap();
        assert_eq!(img.flip_horizontal().data, [2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
    }
}
