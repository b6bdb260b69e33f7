//! `.utf` tensor files: `"UCTF" | version u32 | rank u32 | extents u32 x rank |
//! f32 payload`, little-endian.

use alloc::vec::Vec;

use crate::checkpoint::{put_tensor, Reader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"UCTF";
pub const TENSOR_VERSION: u32 = 1;

pub fn encode_tensor(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * t.shape().len() + 4 * t.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    put_tensor(&mut out, t);
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != TENSOR_MAGIC {
        return Err(Error::Format("bad tensor file magic".into()));
    }
    let version = r.u32()?;
    if version != TENSOR_VERSION {
        return Err(Error::Format(alloc::format!("unsupported tensor file version {version}")));
    }
    let t = r.tensor()?;
    if !r.finished() {
        return Err(Error::Format("trailing bytes after tensor payload".into()));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2, 1], alloc::vec![1.5f32, -0.0]).unwrap();
        let b = encode_tensor(&t);
        assert_eq!(&b[..4], b"UCTF");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(b.len(), 12 + 8 + 8);
        let back = decode_tensor(&b).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data()[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn bad_magic() {
        let mut b = encode_tensor(&Tensor::zeros(&[3]));
        b[3] = b'X';
        assert!(matches!(decode_tensor(&b), Err(Error::Format(_))));
    }
}
