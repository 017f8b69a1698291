//! Dense row-major tensors and reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a flat `Vec<f64>` with a shape and an optional gradient
//! slot. Differentiable computation goes through a [`Tape`](tape::Tape):
//! operations append nodes, `backward` sweeps them in reverse. Tensors are
//! immutable once created; only the gradient slot is written afterwards.

pub mod kernels;
pub mod tape;

use crate::error::{Error, Result};

/// Dense n-dimensional array of 64-bit reals in row-major order.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, checking that the element count matches the shape.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Interprets the tensor as a matrix, folding leading dimensions into rows.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.len() {
            0 => Err(Error::Contract("rank-0 tensor has no matrix view".into())),
            1 => Ok((1, self.shape[0])),
            _ => {
                let cols = *self.shape.last().unwrap();
                Ok((self.data.len() / cols, cols))
            }
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn accumulate_grad(&mut self, delta: &[f64]) {
        match &mut self.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => self.grad = Some(delta.to_vec()),
        }
    }

    pub(crate) fn grad_or_zeros(&mut self) -> &mut Vec<f64> {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self.grad.as_mut().unwrap()
    }
}

/// Boolean mask with the same layout rules as [`Tensor`].
#[derive(Debug, Clone)]
pub struct BoolMask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl BoolMask {
    pub fn new(shape: Vec<usize>, data: Vec<bool>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "mask shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(BoolMask { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }
}

/// Debug-build finiteness check at operation boundaries.
pub(crate) fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if cfg!(debug_assertions) {
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op, index });
        }
    }
    Ok(())
}

/// Mean and biased variance over the unmasked elements of `x`.
///
/// The variance divides by the element count, matching the batch-statistics
/// convention used everywhere in this crate.
pub fn reduce_moments(x: &Tensor, mask: Option<&BoolMask>) -> Result<(f64, f64, usize)> {
    if let Some(m) = mask {
        if m.shape() != x.shape() {
            return Err(Error::ShapeMismatch {
                op: "reduce_moments",
                lhs: x.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
    }
    let mut count = 0usize;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    match mask {
        None => {
            count = x.numel();
            for &v in x.data() {
                sum += v;
                sum_sq += v * v;
            }
        }
        Some(m) => {
            for (&v, &keep) in x.data().iter().zip(m.data()) {
                if keep {
                    count += 1;
                    sum += v;
                    sum_sq += v * v;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyReduction);
    }
    let n = count as f64;
    let mean = sum / n;
    let variance = (sum_sq / n - mean * mean).max(0.0);
    Ok((mean, variance, count))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_shape_count_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn moments_constant_input() {
        let x = Tensor::new(vec![4], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let (mean, var, count) = reduce_moments(&x, None).unwrap();
        assert_eq!(mean, 1.0);
        assert_eq!(var, 0.0);
        assert_eq!(count, 4);
    }

    #[test]
    fn moments_hand_case() {
        let x = Tensor::new(vec![2], vec![0.0, 2.0]).unwrap();
        let (mean, var, count) = reduce_moments(&x, None).unwrap();
        assert_eq!(mean, 1.0);
        assert_eq!(var, 1.0);
        assert_eq!(count, 2);
    }

    #[test]
    fn moments_masked_copy_of_hand_case() {
        let x = Tensor::new(vec![3], vec![0.0, 2.0, 99.0]).unwrap();
        let m = BoolMask::new(vec![3], vec![true, true, false]).unwrap();
        let (mean, var, count) = reduce_moments(&x, Some(&m)).unwrap();
        assert_eq!(mean, 1.0);
        assert_eq!(var, 1.0);
        assert_eq!(count, 2);
    }

    #[test]
    fn moments_all_masked_is_empty_reduction() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let m = BoolMask::new(vec![2], vec![false, false]).unwrap();
        assert!(matches!(
            reduce_moments(&x, Some(&m)),
            Err(Error::EmptyReduction)
        ));
    }

    #[test]
    fn moments_mask_shape_checked() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let m = BoolMask::new(vec![3], vec![true, true, true]).unwrap();
        assert!(reduce_moments(&x, Some(&m)).is_err());
    }
}
