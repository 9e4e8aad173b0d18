use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Dense row-major `f64` tensor.
///
/// Two-dimensional tensors are laid out as `[channels, frames]`, which is the
/// only layout the backbone uses; convolution weights are `[out, in, kernel]`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidShape { shape, len: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        assert!(n > 0, "tensor dimensions must be positive");
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        assert!(n > 0, "tensor dimensions must be positive");
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    /// Builds a `[rows.len(), frames]` tensor by stacking rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let frames = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != frames) {
            return Err(Error::InvalidShape { shape: vec![rows.len(), frames], len: rows.iter().map(Vec::len).sum() });
        }
        Self::new(vec![rows.len(), frames], rows.concat())
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension of a `[channels, frames]` tensor.
    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    /// Trailing dimension of a `[channels, frames]` tensor.
    pub fn frames(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn get2(&self, c: usize, l: usize) -> f64 {
        self.data[c * self.frames() + l]
    }

    pub fn row(&self, c: usize) -> &[f64] {
        let l = self.frames();
        &self.data[c * l..(c + 1) * l]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::InvalidShape { shape: shape.to_vec(), len: self.data.len() });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch { op: "zip_map", lhs: self.shape.clone(), rhs: other.shape.clone() });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()))
    }

    /// Squared Euclidean norm over all elements.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn detects_non_finite() {
        let mut t = Tensor::zeros(&[2, 2]);
        assert!(t.is_finite());
        t.data_mut()[3] = f64::NAN;
        assert!(!t.is_finite());
    }

    #[test]
    fn bitwise_eq_sees_signed_zero() {
        let a = Tensor::scalar(0.0);
        let b = Tensor::scalar(-0.0);
        assert_eq!(a, b);
        assert!(!a.bitwise_eq(&b));
    }
}
