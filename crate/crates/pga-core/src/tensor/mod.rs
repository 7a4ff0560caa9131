//! Dense f64 tensors and reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain value type (shape + row-major buffer). Differentiable
//! computation happens on a [`tape::Tape`]: leaves are pushed from tensors,
//! ops record enough state to replay their adjoints, and `backward` walks the
//! record in reverse. Gradient buffers live on the tape until exported back
//! into the leaf tensors.

pub mod conv;
pub mod ops;
pub mod tape;

pub use conv::Exec;
pub use ops::RunningStats;
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

/// Shape + row-major f64 buffer, the carrier for parameters, activations and
/// volume data handed to the network. Gradients are attached after a backward
/// pass via [`Tensor::set_grad`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::config(format!("zero extent in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::config(format!(
                "shape {shape:?} implies {numel} elements, buffer has {}",
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
        Tensor::new(shape, vec![0.0; numel]).expect("zeros: consistent by construction")
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![value; numel]).expect("full: consistent by construction")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value]).expect("scalar: consistent by construction")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Marks the tensor as a trainable leaf. Clearing the flag drops any
    /// attached gradient so the "grad present iff requires_grad" invariant
    /// holds.
    pub fn set_requires_grad(&mut self, on: bool) -> &mut Self {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
        self
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if !self.requires_grad {
            return Err(Error::config("set_grad on a tensor without requires_grad"));
        }
        if grad.len() != self.data.len() {
            return Err(Error::config(format!(
                "grad length {} does not match tensor numel {}",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_buffer_consistency_is_enforced() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0, 3], vec![]).is_err());
    }

    #[test]
    fn grad_requires_flag_and_matching_shape() {
        let mut t = Tensor::zeros(vec![4]);
        assert!(t.set_grad(vec![1.0; 4]).is_err(), "needs requires_grad");
        t.set_requires_grad(true);
        assert!(t.set_grad(vec![1.0; 3]).is_err(), "length mismatch");
        t.set_grad(vec![1.0; 4]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.0; 4]);
        t.set_requires_grad(false);
        assert!(t.grad().is_none(), "grad dropped with the flag");
    }
}
