//! Flat binary tensors.
//!
//! Layout (all little-endian): the magic `RLT1`, a `u32` rank, `rank` `u32`
//! dimensions, then `prod(dims)` 32-bit floats in row-major order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const MAGIC: &[u8; 4] = b"RLT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Input(format!(
                "tensor dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::new(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Row `i` of a rank-2 tensor, widened to `f64`.
    pub fn row(&self, i: usize) -> Result<Vec<f64>> {
        if self.dims.len() != 2 {
            return Err(Error::Input(format!("expected a matrix, tensor has dims {:?}", self.dims)));
        }
        let (rows, cols) = (self.dims[0], self.dims[1]);
        if i >= rows {
            return Err(Error::Index(format!("row {i} of a {rows}-row tensor")));
        }
        Ok(self.data[i * cols..(i + 1) * cols].iter().map(|&v| v as f64).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let u32_at = |at: usize| -> std::result::Result<u32, String> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| "truncated header".to_string())
        };
        if bytes.get(..4) != Some(MAGIC.as_slice()) {
            return Err("bad magic (expected RLT1)".into());
        }
        let rank = u32_at(4)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for r in 0..rank {
            dims.push(u32_at(8 + 4 * r)? as usize);
        }
        let header = 8 + 4 * rank;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or("dimension product overflows")?;
        let payload = &bytes[header..];
        if Some(payload.len()) != count.checked_mul(4) {
            return Err(format!(
                "declared dims {dims:?} need {} payload bytes, file has {}",
                count.saturating_mul(4),
                payload.len()
            ));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor { dims, data })
    }
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes).map_err(|msg| Error::parse(path, 0, msg))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &t.to_bytes())
}
