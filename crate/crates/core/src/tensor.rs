//! Dense row-major tensors and the `SYMT` binary tensor format.
//!
//! `SYMT` layout: the magic bytes `SYMT`, a little-endian `u32` rank, `rank`
//! little-endian `u32` dims, then the values as little-endian `f32` in
//! row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::real::Real;

pub const SYMT_MAGIC: &[u8; 4] = b"SYMT";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn fmt_shape(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("({})", dims.join(","))
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "tensor dims must be positive, got {}",
                fmt_shape(&shape)
            )));
        }
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {} needs {} values, got {}",
                fmt_shape(&shape),
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self::new(shape, vec![value; n]).expect("full: invalid shape")
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(&mut f).collect();
        Self::new(shape, data).expect("from_fn: invalid shape")
    }

    pub fn scalar(value: T) -> Self {
        Self::new(vec![1], vec![value]).unwrap()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "grad has {} values for tensor of shape {}",
                grad.len(),
                fmt_shape(&self.shape)
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Shape(format!(
                "expected a (C,H,W) tensor, got {}",
                fmt_shape(&self.shape)
            ))),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {} into {}",
                fmt_shape(&self.shape),
                fmt_shape(&shape)
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::lit(v.to_f64().unwrap()))
                .collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs())))
    }

    pub fn check_same_shape(&self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{} vs {}",
                fmt_shape(&self.shape),
                fmt_shape(&other.shape)
            )));
        }
        Ok(())
    }

    /// Bitwise equality of shape and values.
    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_f64().unwrap().to_bits() == b.to_f64().unwrap().to_bits())
    }

    pub fn to_symt_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(SYMT_MAGIC);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_f32().unwrap().to_le_bytes());
        }
        out
    }

    pub fn from_symt_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Format(format!("SYMT: {msg}"));
        if bytes.len() < 8 || &bytes[..4] != SYMT_MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let word = |i: usize| -> Result<u32> {
            bytes
                .get(i..i + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| bad("truncated header"))
        };
        let rank = word(4)? as usize;
        if rank == 0 || rank > 16 {
            return Err(bad(&format!("unsupported rank {rank}")));
        }
        let shape = (0..rank)
            .map(|i| word(8 + 4 * i).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let header = 8 + 4 * rank;
        let n = numel(&shape);
        if bytes.len() != header + 4 * n {
            return Err(bad(&format!(
                "shape {} needs {} payload bytes, found {}",
                fmt_shape(&shape),
                4 * n,
                bytes.len().saturating_sub(header)
            )));
        }
        let data = bytes[header..]
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        Self::new(shape, data)
    }

    pub fn save_symt(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_symt_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load_symt(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_symt_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_data() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn symt_header_layout() {
        let t = Tensor::<f32>::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let b = t.to_symt_bytes();
        assert_eq!(&b[..4], b"SYMT");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(b[20..24].try_into().unwrap()), -2.5);
        assert_eq!(Tensor::<f32>::from_symt_bytes(&b).unwrap(), t);
    }

    #[test]
    fn symt_rejects_truncated_payload() {
        let t = Tensor::<f32>::zeros(vec![3, 3]);
        let b = t.to_symt_bytes();
        assert!(matches!(
            Tensor::<f32>::from_symt_bytes(&b[..b.len() - 1]),
            Err(Error::Format(_))
        ));
        assert!(Tensor::<f32>::from_symt_bytes(b"NOPE\0\0\0\0").is_err());
    }
}
