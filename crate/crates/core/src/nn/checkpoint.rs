//! Binary parameter container.
//!
//! Layout (little endian): magic `PCQACKPT`, u32 version, u32 tensor count,
//! then per tensor u32 name length, name bytes, u64 rows, u64 cols and f64
//! values. An optional optimizer block follows: u8 flag, u64 step, f64 lr,
//! beta1, beta2, eps, then first and second moments shaped like the
//! parameters.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::adam::OptimizerState;
use crate::nn::params::ParamStore;
use crate::nn::tensor::Tensor2;

const MAGIC: &[u8; 8] = b"PCQACKPT";
const VERSION: u32 = 1;

fn put_values(out: &mut Vec<u8>, t: &Tensor2) {
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(params: &ParamStore, optimizer: Option<&OptimizerState>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + params.count() * 24);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols as u64).to_le_bytes());
        put_values(&mut out, t);
    }
    match optimizer {
        None => out.push(0),
        Some(s) => {
            out.push(1);
            out.extend_from_slice(&s.t.to_le_bytes());
            for x in [s.lr, s.beta1, s.beta2, s.eps] {
                out.extend_from_slice(&x.to_le_bytes());
            }
            for t in s.m.iter().chain(&s.v) {
                put_values(&mut out, t);
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn values(&mut self, rows: usize, cols: usize) -> Result<Tensor2> {
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.saturating_mul(8) <= self.bytes.len() - self.pos)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {rows}x{cols} exceeds file")))?;
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor2::from_vec(rows, cols, data)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParamStore, Option<OptimizerState>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        params.add(name, r.values(rows, cols)?);
    }
    let optimizer = match r.take(1)?[0] {
        0 => None,
        1 => {
            let t = r.u64()?;
            let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
            let shapes: Vec<_> = params.values().iter().map(Tensor2::shape).collect();
            let mut m = Vec::with_capacity(count);
            for &(rows, cols) in &shapes {
                m.push(r.values(rows, cols)?);
            }
            let mut v = Vec::with_capacity(count);
            for &(rows, cols) in &shapes {
                v.push(r.values(rows, cols)?);
            }
            Some(OptimizerState { lr, beta1, beta2, eps, t, m, v })
        }
        f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((params, optimizer))
}

pub fn write_checkpoint(path: &Path, params: &ParamStore, optimizer: Option<&OptimizerState>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params, optimizer)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(ParamStore, Option<OptimizerState>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
