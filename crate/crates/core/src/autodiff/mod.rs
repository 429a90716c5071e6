//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Forward operations append nodes to a [`Tape`]; node order is a valid
//! topological order, so [`Tape::backward`] simply walks it in reverse.
//! A tape is single-use: record one forward pass, call backward once.

pub mod gradcheck;
pub mod kernels;
mod ops;

pub use gradcheck::{grad_check, GradCheck, GradCheckReport};
pub use ops::Mode;
pub(crate) use ops::{clamp_below, one_hot_classes};

use crate::error::{Error, Result};
use crate::tensor::{split_axis, Scalar, Tensor};
use kernels::ConvGeom;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Conv2d { input: Var, kernel: Var, geom: ConvGeom },
    AddBias { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulConst { x: Var, factor: Vec<T> },
    Relu { x: Var },
    Softmax { x: Var, axis: usize },
    Gather { x: Var, index: Vec<usize> },
    Mean { x: Var, axis: usize },
    Sum { x: Var },
    Reshape { x: Var },
    Concat { parts: Vec<Var> },
    Normalize { x: Var, axis: usize, inv_std: Vec<T> },
    ScaleShift { x: Var, gamma: Var, beta: Var, axis: usize },
    CrossEntropy { probs: Var, target: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation graph.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    macs: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            macs: 0,
        }
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Detached leaf: never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-adds (and reduction adds) executed by forward kernels so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub(crate) fn count_macs(&mut self, n: usize) {
        self.macs += n as u64;
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Accumulates d(loss)/d(node) for every gradient-requiring node reachable
    /// backwards from `loss`, which must hold a single element.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(loss_value.shape().to_vec()));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.nodes[v.0].value.shape());
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g.data(), (n, 1), bv.data(), (1, n), &mut da, false);
                    self.accumulate(grads, *a, Tensor::new([m, k], da).unwrap());
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, av.data(), (1, k), g.data(), (n, 1), &mut db, false);
                    self.accumulate(grads, *b, Tensor::new([k, n], db).unwrap());
                }
            }
            Op::Conv2d { input, kernel, geom } => {
                let x = self.value(*input);
                let kern = self.value(*kernel);
                let (p, kk, co) = (geom.positions(), geom.patch_len(), geom.cout);
                let cols_owned;
                let cols: &[T] = if geom.is_pointwise() {
                    x.data()
                } else {
                    cols_owned = kernels::im2col(x.data(), geom);
                    &cols_owned
                };
                if self.needs(*kernel) {
                    let mut dk = vec![T::zero(); kk * co];
                    T::gemm(kk, p, co, cols, (1, kk), g.data(), (co, 1), &mut dk, false);
                    self.accumulate(grads, *kernel, Tensor::new(kern.shape().to_vec(), dk).unwrap());
                }
                if self.needs(*input) {
                    let mut dcols = vec![T::zero(); p * kk];
                    T::gemm(p, co, kk, g.data(), (co, 1), kern.data(), (1, co), &mut dcols, false);
                    let dx = if geom.is_pointwise() {
                        dcols
                    } else {
                        let mut dx = vec![T::zero(); x.len()];
                        kernels::col2im(&dcols, geom, &mut dx);
                        dx
                    };
                    self.accumulate(grads, *input, Tensor::new(x.shape().to_vec(), dx).unwrap());
                }
            }
            Op::AddBias { x, bias } => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*bias) {
                    let c = self.value(*bias).len();
                    let mut db = vec![T::zero(); c];
                    for row in g.data().chunks(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new([c], db).unwrap());
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.needs(*a) {
                    self.accumulate(grads, *a, zip_map(g, bv, |x, y| x * y));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, zip_map(g, av, |x, y| x * y));
                }
            }
            Op::MulConst { x, factor } => {
                let data = g.data().iter().zip(factor).map(|(&a, &f)| a * f).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                self.accumulate(
                    grads,
                    *x,
                    zip_map(g, xv, |gv, xi| if xi > T::zero() { gv } else { T::zero() }),
                );
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(out.shape(), *axis).unwrap();
                let y = out.data();
                let gd = g.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let dot = (0..n).fold(T::zero(), |s, k| s + gd[at(k)] * y[at(k)]);
                        for k in 0..n {
                            dx[at(k)] = y[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), dx).unwrap());
            }
            Op::Gather { x, index } => {
                let xv = self.value(*x);
                let mut dx = vec![T::zero(); xv.len()];
                for (&src, &gv) in index.iter().zip(g.data()) {
                    dx[src] = dx[src] + gv;
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
            Op::Mean { x, axis } => {
                let xv = self.value(*x);
                let (outer, n, inner) = split_axis(xv.shape(), *axis).unwrap();
                let scale = T::one() / T::from_usize(n).unwrap();
                let gd = g.data();
                let mut dx = vec![T::zero(); xv.len()];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            dx[(o * n + k) * inner + i] = gd[o * inner + i] * scale;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
            Op::Sum { x } => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, Tensor::full(xv.shape().to_vec(), g.item()));
            }
            Op::Reshape { x } => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.reshape(shape).unwrap());
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let n = pv.len();
                    if self.needs(*p) {
                        let slice = g.data()[offset..offset + n].to_vec();
                        self.accumulate(grads, *p, Tensor::new(pv.shape().to_vec(), slice).unwrap());
                    }
                    offset += n;
                }
            }
            Op::Normalize { x, axis, inv_std } => {
                let (outer, n, inner) = split_axis(out.shape(), *axis).unwrap();
                let y = out.data();
                let gd = g.data();
                let nf = T::from_usize(n).unwrap();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let (sg, sgy) = (0..n).fold((T::zero(), T::zero()), |(a, b), k| {
                            (a + gd[at(k)], b + gd[at(k)] * y[at(k)])
                        });
                        let (mg, mgy) = (sg / nf, sgy / nf);
                        let inv = inv_std[o * inner + i];
                        for k in 0..n {
                            dx[at(k)] = inv * (gd[at(k)] - mg - y[at(k)] * mgy);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), dx).unwrap());
            }
            Op::ScaleShift {
                x,
                gamma,
                beta,
                axis,
            } => {
                let xv = self.value(*x);
                let gm = self.value(*gamma).data();
                let (outer, n, inner) = split_axis(xv.shape(), *axis).unwrap();
                let gd = g.data();
                let mut dx = vec![T::zero(); xv.len()];
                let mut dgamma = vec![T::zero(); n];
                let mut dbeta = vec![T::zero(); n];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            let at = (o * n + k) * inner + i;
                            dx[at] = gd[at] * gm[k];
                            dgamma[k] = dgamma[k] + gd[at] * xv.data()[at];
                            dbeta[k] = dbeta[k] + gd[at];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
                self.accumulate(grads, *gamma, Tensor::new([n], dgamma).unwrap());
                self.accumulate(grads, *beta, Tensor::new([n], dbeta).unwrap());
            }
            Op::CrossEntropy { probs, target } => {
                let pv = self.value(*probs);
                let (b, n) = (pv.shape()[0], pv.shape()[1]);
                let scale = g.item() / T::from_usize(b).unwrap();
                let floor = T::from_f64_lossy(ops::LOG_CLAMP);
                let mut dp = vec![T::zero(); b * n];
                for (row, &t) in target.iter().enumerate() {
                    let p = pv.data()[row * n + t];
                    if p > floor {
                        dp[row * n + t] = -scale / p;
                    }
                }
                self.accumulate(grads, *probs, Tensor::new([b, n], dp).unwrap());
            }
        }
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` when `v` is detached or unreachable.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, zero-filled when none flowed to it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

/// In-place `param ← param − lr·grad`.
pub fn sgd_step<T: Scalar>(param: &mut Tensor<T>, grad: &Tensor<T>, lr: T) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::dim(format!(
            "sgd_step: parameter shape {:?} vs gradient shape {:?}",
            param.shape(),
            grad.shape()
        )));
    }
    for (p, &g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p = *p - lr * g;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
