//! Parameter containers shared by the network components.

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Uniform init in `±sqrt(6 / fan_in)`.
pub fn fan_in_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(rng.uniform_range(-bound, bound)))
}

/// A component owning named trainable tensors.
///
/// `tensors` and `tensors_mut` must list parameters in the same order; that
/// order is the binding order on a tape and the checkpoint order.
pub trait Parameters<T: Scalar> {
    fn tensors(&self) -> Vec<(String, &Tensor<T>)>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;

    /// Records every parameter as a trainable leaf.
    fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors()
            .into_iter()
            .map(|(_, t)| tape.param(t.clone()))
            .collect()
    }

    /// Records every parameter as a detached constant.
    fn bind_frozen(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors()
            .into_iter()
            .map(|(_, t)| tape.constant(t.clone()))
            .collect()
    }

    /// Plain SGD over parameters bound with [`Parameters::bind`].
    fn apply_sgd(&mut self, vars: &[Var], grads: &Gradients<T>, lr: T) -> Result<()> {
        for ((_, p), &v) in self.tensors_mut().into_iter().zip(vars) {
            if let Some(g) = grads.get(v) {
                crate::autodiff::sgd_step(p, g, lr)?;
            }
        }
        Ok(())
    }

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// `k×k` convolution with bias: kernel `[k, k, cin, cout]`, bias `[cout]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T: Scalar> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn new(k: usize, cin: usize, cout: usize, rng: &mut Rng) -> Self {
        Self {
            kernel: fan_in_uniform(&[k, k, cin, cout], k * k * cin, rng),
            bias: Tensor::zeros([cout]),
        }
    }

    pub fn cout(&self) -> usize {
        self.kernel.shape()[3]
    }
}
