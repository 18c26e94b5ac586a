//! Dense f64 tensors, the reverse-mode tape, and a finite-difference oracle.
//!
//! Storage is row-major and owned; there are no views or broadcasting. A
//! [`Tensor`] is plain data and is `Send + Sync`; differentiation happens by
//! lifting tensors onto a [`Tape`] (see [`tape`]), which confines a live
//! computation to one execution stream.

mod tape;

pub use tape::{ConvGeom, NormStats, Tape, Var};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense real tensor with optional gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = element_count(&shape)?;
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {shape:?} implies {expected} elements, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    /// 2-D tensor from row slices; all rows must share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("from_rows: no rows".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch {
                op: "Tensor::from_rows",
                detail: "ragged rows".into(),
            });
        }
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("std must be finite and positive");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None }
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

    /// Rows/cols of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::ShapeMismatch {
                op: "Tensor::dims2",
                detail: format!("expected 2-D, got {other:?}"),
            }),
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        if let Some(g) = &grad {
            assert_eq!(g.len(), self.data.len(), "gradient length must match data length");
        }
        self.grad = grad;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn element_count(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidArgument(format!("extents must be positive, got {shape:?}")));
    }
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| {
        Error::InvalidArgument(format!("shape {shape:?} overflows the element count"))
    })
}

/// Default step for [`finite_diff_grad`].
pub const FD_EPS: f64 = 1e-5;

/// Relative errors below this magnitude floor degrade into absolute ones, so
/// near-zero gradients do not blow up the comparison.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Central-difference gradient of a scalar function, one coordinate at a time.
///
/// This is the independent oracle the analytic backward pass is checked
/// against; it never touches the tape.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let f_plus = f(&probe)?;
        probe.data[i] = orig - eps;
        let f_minus = f(&probe)?;
        probe.data[i] = orig;
        grad[i] = (f_plus - f_minus) / (2.0 * eps);
    }
    Tensor::new(x.shape.clone(), grad)
}

/// Guarded relative error between two gradient vectors: per coordinate
/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`, reduced with `max`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn new_rejects_zero_extent() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn grad_length_invariant() {
        let mut t = Tensor::zeros(&[3]);
        t.set_grad(Some(vec![1.0, 2.0, 3.0]));
        assert_eq!(t.grad().unwrap().len(), t.len());
    }

    #[test]
    fn finite_diff_sum_of_squares() {
        // f(x) = sum(x^2), x = [3] -> f'(x) = 6
        let x = Tensor::new(vec![1], vec![3.0]).unwrap();
        let f = |t: &Tensor| Ok(t.data().iter().map(|v| v * v).sum());
        let g = finite_diff_grad(f, &x, FD_EPS).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8, "got {}", g.data()[0]);
    }

    #[test]
    fn finite_diff_constant_is_zero() {
        let x = Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 7.0]).unwrap();
        let g = finite_diff_grad(|_| Ok(42.0), &x, FD_EPS).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn finite_diff_rejects_nonpositive_eps() {
        let x = Tensor::scalar(1.0);
        assert!(finite_diff_grad(|_| Ok(0.0), &x, 0.0).is_err());
    }
}
