//! Dense row-major tensors of 64-bit floats.
//!
//! Only the ranks the policies actually need (scalars, vectors,
//! matrices) are supported, and there is no broadcasting beyond
//! scalar-with-tensor. That keeps every vector-Jacobian product in
//! [`crate::autodiff`] auditable by hand.

use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CoreError::Contract(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar value; panics on non-scalar tensors.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, i: usize) -> f64 {
        self.data[i]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            1 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => 1,
            _ => 1,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> CoreError {
        CoreError::DimensionMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if !self.same_shape(other) {
            return Err(Self::dim_err(op, self, other));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if other.is_scalar() && !self.is_scalar() {
            return Ok(self.map(|v| v + other.item()));
        }
        if self.is_scalar() && !other.is_scalar() {
            return Ok(other.map(|v| v + self.item()));
        }
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if other.is_scalar() && !self.is_scalar() {
            return Ok(self.map(|v| v - other.item()));
        }
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        if other.is_scalar() && !self.is_scalar() {
            return Ok(self.map(|v| v * other.item()));
        }
        if self.is_scalar() && !other.is_scalar() {
            return Ok(other.map(|v| v * self.item()));
        }
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Self::dim_err("dot", self, other));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm_inf(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Matrix product. Accepts [m,k]x[k,n], and treats a rank-1 rhs of
    /// shape [k] as a column vector (result shape [m]).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = match self.shape.len() {
            2 => (self.shape[0], self.shape[1]),
            _ => return Err(Self::dim_err("matmul", self, other)),
        };
        let (k2, n, vec_rhs) = match other.shape.len() {
            2 => (other.shape[0], other.shape[1], false),
            1 => (other.shape[0], 1, true),
            _ => return Err(Self::dim_err("matmul", self, other)),
        };
        if k != k2 {
            return Err(Self::dim_err("matmul", self, other));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                let a = self.data[i * k + l];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[l * n..(l + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    dst[j] += a * row[j];
                }
            }
        }
        if vec_rhs {
            Ok(Tensor::vector(out))
        } else {
            Tensor::matrix(m, n, out)
        }
    }

    pub fn transpose(&self) -> Tensor {
        match self.shape.len() {
            2 => {
                let (m, n) = (self.shape[0], self.shape[1]);
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        out[j * m + i] = self.data[i * n + j];
                    }
                }
                Tensor {
                    shape: vec![n, m],
                    data: out,
                }
            }
            _ => self.clone(),
        }
    }

    pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
        for p in parts {
            if p.shape.len() > 1 {
                return Err(CoreError::Contract(
                    "concat supports rank-0/1 tensors only".into(),
                ));
            }
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor::vector(data))
    }

    pub fn slice(&self, start: usize, end: usize) -> Result<Tensor> {
        if self.shape.len() != 1 || end > self.data.len() || start > end {
            return Err(CoreError::Contract(format!(
                "slice [{start}, {end}) invalid for shape {:?}",
                self.shape
            )));
        }
        Ok(Tensor::vector(self.data[start..end].to_vec()))
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&eye).unwrap(), a);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let a = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let b = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        match a.matmul(&b) {
            Err(CoreError::DimensionMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn transpose_roundtrip() {
        let a = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(a.transpose().transpose(), a);
    }
}
