//! Dense row-major `f64` tensors and the reverse-mode tape built on them.
//!
//! [`Tensor`] is a plain value: a shape and a flat buffer. Differentiation
//! happens on a [`Tape`], where every recorded operation produces a
//! [`Var`] handle. Values can be moved freely between threads; tapes are
//! single-threaded.

mod gradcheck;
mod kernels;
mod tape;

pub use gradcheck::{finite_difference_check, relative_error, GradCheckReport, ParamReport};
pub use kernels::{broadcast_shape, gelu_scalar, sigmoid_scalar};
pub use tape::{attention, concat, Gradients, Tape, Var};

use crate::error::{shape_err, Error, Result};

/// Variance floor used by every layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} holds {n} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last dimension (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return shape_err("reshape", &self.shape, shape);
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return shape_err("max_abs_diff", &self.shape, &other.shape);
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Row `i` of the flattened `[rows, last_dim]` view.
    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    /// Batched matrix product with leading batch dimensions broadcast.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        kernels::matmul(self, other)
    }

    pub fn softmax_lastdim(&self) -> Tensor {
        kernels::softmax_lastdim(self)
    }

    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        kernels::layer_norm(self, gain, bias, LAYER_NORM_EPS).map(|(y, _, _)| y)
    }

    /// Swap the last two axes.
    pub fn transpose(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::Contract("transpose needs rank >= 2".into()));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        kernels::permute(self, &axes)
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        kernels::permute(self, axes)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        kernels::slice(self, axis, start, end)
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        kernels::concat(parts, axis)
    }

    /// Elementwise combination with right-aligned broadcasting.
    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        kernels::broadcast_binary(self, other, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_buffer() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[0, 3], vec![]).is_ok());
    }

    #[test]
    fn matmul_hand_examples() {
        let x = Tensor::new(&[2, 2], vec![0.3, -1.0, 2.5, 4.0]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&x).unwrap(), x);
        let a = Tensor::new(&[1, 1], vec![1.0]).unwrap();
        let b = Tensor::new(&[1, 1], vec![3.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0]);
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        match a.matmul(&b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let s = Tensor::new(&[2], vec![0.0, 0.0]).unwrap().softmax_lastdim();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = Tensor::full(&[4], 37.5).softmax_lastdim();
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let s = Tensor::new(&[2], vec![1f64.ln(), 3f64.ln()])
            .unwrap()
            .softmax_lastdim();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::ones(&[2]);
        let zeros = Tensor::zeros(&[2]);
        let c = Tensor::full(&[1, 2], 3.0).layer_norm(&ones, &zeros).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
        let r = Tensor::new(&[1, 2], vec![1.0, -1.0])
            .unwrap()
            .layer_norm(&ones, &zeros)
            .unwrap();
        // mean 0, variance 1: output = x / sqrt(1 + eps)
        let expect = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((r.data()[0] - expect).abs() < 1e-15);
        assert!((r.data()[1] + expect).abs() < 1e-15);
        let bias = Tensor::new(&[2], vec![0.7, -0.2]).unwrap();
        let g = Tensor::new(&[2, 2], vec![5.0, 1.0, -3.0, 2.0])
            .unwrap()
            .layer_norm(&zeros, &bias)
            .unwrap();
        assert_eq!(g.data(), &[0.7, -0.2, 0.7, -0.2]);
    }

    #[test]
    fn permute_and_slice_round_trip() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back, t);
        let a = t.slice(1, 0, 1).unwrap();
        let b = t.slice(1, 1, 3).unwrap();
        assert_eq!(Tensor::concat(&[&a, &b], 1).unwrap(), t);
    }
}
