//! Binary checkpoint layout, all integers and floats little-endian:
//!
//! ```text
//! "UCKP" | version u32
//! param count u32 | records...
//! velocity count u32 | records...
//! epoch u32 | step u64 | lr f32
//! record = name_len u32 | utf8 name | rank u32 | extents u32 x rank | f32 payload
//! ```

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::optim::OptimizerState;
use crate::param::ParamSet;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor<f32>)>,
    pub velocities: Vec<(String, Tensor<f32>)>,
    pub epoch: u32,
    pub step: u64,
    pub lr: f32,
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn finished(&self) -> bool {
        self.pos == self.buf.len()
    }

    /// `rank u32 | extents | f32 payload`.
    pub(crate) fn tensor(&mut self) -> Result<Tensor<f32>> {
        let rank = self.u32()? as usize;
        if rank > 4 {
            return Err(Error::Format(alloc::format!("rank {rank} above 4")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b));
        let numel = numel.ok_or_else(|| Error::Format("extent overflow".into()))?;
        let bytes = self.take(numel.checked_mul(4).ok_or_else(|| Error::Format("extent overflow".into()))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(&shape, data)
    }
}

pub(crate) fn put_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    out.reserve(t.numel() * 4);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_records(out: &mut Vec<u8>, recs: &[(String, Tensor<f32>)]) {
    out.extend_from_slice(&(recs.len() as u32).to_le_bytes());
    for (name, t) in recs {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        put_tensor(out, t);
    }
}

fn read_records(r: &mut Reader<'_>) -> Result<Vec<(String, Tensor<f32>)>> {
    let count = r.u32()? as usize;
    let mut recs = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = core::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?;
        recs.push((String::from(name), r.tensor()?));
    }
    Ok(recs)
}

impl Checkpoint {
    pub fn capture(params: &ParamSet<f32>, opt: &OptimizerState<f32>, epoch: u32, step: u64) -> Self {
        let params_rec = params
            .iter()
            .map(|p| (p.name.clone(), Tensor::new(p.tensor.shape(), p.tensor.data().to_vec()).expect("same shape")))
            .collect();
        let velocities = params
            .iter()
            .zip(&opt.velocities)
            .map(|(p, v)| (p.name.clone(), Tensor::new(p.tensor.shape(), v.clone()).expect("same shape")))
            .collect();
        Self {
            params: params_rec,
            velocities,
            epoch,
            step,
            lr: opt.lr,
        }
    }

    /// Copies stored values into `params` (and `opt`, when given), matching
    /// records by name and checking shapes.
    pub fn restore(&self, params: &mut ParamSet<f32>, opt: Option<&mut OptimizerState<f32>>) -> Result<()> {
        if self.params.len() != params.len() {
            return Err(Error::Format(alloc::format!(
                "checkpoint holds {} parameters, model has {}",
                self.params.len(),
                params.len()
            )));
        }
        let lookup = |recs: &[(String, Tensor<f32>)], name: &str| -> Result<usize> {
            recs.iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Format(alloc::format!("checkpoint lacks `{name}`")))
        };
        for p in params.iter() {
            let i = lookup(&self.params, &p.name)?;
            if self.params[i].1.shape() != p.tensor.shape() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint restore",
                    lhs: p.tensor.shape().to_vec(),
                    rhs: self.params[i].1.shape().to_vec(),
                });
            }
        }
        for p in params.iter_mut() {
            let i = lookup(&self.params, &p.name)?;
            p.tensor.data_mut().copy_from_slice(self.params[i].1.data());
            p.tensor.take_grad();
        }
        if let Some(opt) = opt {
            let mut vels = Vec::with_capacity(params.len());
            for p in params.iter() {
                let i = lookup(&self.velocities, &p.name)?;
                if self.velocities[i].1.numel() != p.tensor.numel() {
                    return Err(Error::Format(alloc::format!("velocity `{}` has wrong size", p.name)));
                }
                vels.push(self.velocities[i].1.data().to_vec());
            }
            opt.velocities = vels;
            opt.lr = self.lr;
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_records(&mut out, &self.params);
        put_records(&mut out, &self.velocities);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.lr.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(alloc::format!("unsupported checkpoint version {version}")));
        }
        let params = read_records(&mut r)?;
        let velocities = read_records(&mut r)?;
        let epoch = r.u32()?;
        let step = r.u64()?;
        let lr = r.f32()?;
        if !r.finished() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            params,
            velocities,
            epoch,
            step,
            lr,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            params: alloc::vec![
                ("a.weight".into(), Tensor::from_fn(&[2, 1, 3, 3], |i| i as f32 * 0.5)),
                ("a.bias".into(), Tensor::from_fn(&[2], |i| -(i as f32))),
            ],
            velocities: alloc::vec![
                ("a.weight".into(), Tensor::zeros(&[2, 1, 3, 3])),
                ("a.bias".into(), Tensor::full(&[2], 0.125)),
            ],
            epoch: 3,
            step: 1234,
            lr: 3.645e-3,
        }
    }

    #[test]
    fn layout_is_exact() {
        let ck = Checkpoint {
            params: alloc::vec![("w".into(), Tensor::new(&[1], alloc::vec![1.0]).unwrap())],
            velocities: alloc::vec![("w".into(), Tensor::new(&[1], alloc::vec![0.0]).unwrap())],
            epoch: 2,
            step: 7,
            lr: 0.5,
        };
        let b = ck.encode();
        let mut expect = Vec::new();
        expect.extend_from_slice(b"UCKP");
        expect.extend_from_slice(&1u32.to_le_bytes());
        for v in [1.0f32, 0.0] {
            expect.extend_from_slice(&1u32.to_le_bytes());
            expect.extend_from_slice(&1u32.to_le_bytes());
            expect.push(b'w');
            expect.extend_from_slice(&1u32.to_le_bytes());
            expect.extend_from_slice(&1u32.to_le_bytes());
            expect.extend_from_slice(&v.to_le_bytes());
        }
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&7u64.to_le_bytes());
        expect.extend_from_slice(&0.5f32.to_le_bytes());
        assert_eq!(b, expect);
    }

    #[test]
    fn round_trip() {
        let ck = sample();
        assert_eq!(Checkpoint::decode(&ck.encode()).unwrap(), ck);
    }

    #[test]
    fn corrupt_input_rejected() {
        let mut b = sample().encode();
        b[0] = b'X';
        assert!(Checkpoint::decode(&b).is_err());
        let b = sample().encode();
        assert!(Checkpoint::decode(&b[..b.len() - 1]).is_err());
    }
}
