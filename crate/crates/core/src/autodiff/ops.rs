use std::ops::Range;

use super::kernels::{self, ConvGeom};
use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{split_axis, Scalar, Tensor};

/// Lower clamp applied to probabilities before taking logs.
pub(crate) const LOG_CLAMP: f64 = 1e-12;

/// Train mode enables dropout and batch statistics; eval mode is deterministic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn expect_rank(shape: &[usize], rank: usize, what: &str) -> Result<()> {
    if shape.len() != rank {
        return Err(Error::dim(format!(
            "{what} expects a rank-{rank} tensor, got shape {shape:?}"
        )));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    fn record(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = self.any_grad(inputs);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul: cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            &mut out,
            false,
        );
        self.count_macs(m * k * n);
        Ok(self.record(Tensor::new([m, n], out)?, Op::MatMul { a, b }, &[a, b]))
    }

    /// Cross-correlation of an `H×W×Cin` map with a `kh×kw×Cin×Cout` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        expect_rank(&si, 3, "conv2d input")?;
        expect_rank(&sk, 4, "conv2d kernel")?;
        if stride == 0 {
            return Err(Error::arg("conv2d stride must be positive"));
        }
        if sk[2] != si[2] {
            return Err(Error::dim(format!(
                "conv2d: input {si:?} has {} channels, kernel {sk:?} expects {}",
                si[2], sk[2]
            )));
        }
        let (ph, pw) = (si[0] + 2 * pad, si[1] + 2 * pad);
        if sk[0] > ph || sk[1] > pw {
            return Err(Error::dim(format!(
                "conv2d: kernel {sk:?} larger than padded input {ph}×{pw}"
            )));
        }
        let geom = ConvGeom {
            h: si[0],
            w: si[1],
            cin: si[2],
            kh: sk[0],
            kw: sk[1],
            cout: sk[3],
            stride,
            pad,
            oh: (ph - sk[0]) / stride + 1,
            ow: (pw - sk[1]) / stride + 1,
        };
        let (p, kk, co) = (geom.positions(), geom.patch_len(), geom.cout);
        let mut out = vec![T::zero(); p * co];
        {
            let x = self.value(input).data();
            let cols_owned;
            let cols: &[T] = if geom.is_pointwise() {
                x
            } else {
                cols_owned = kernels::im2col(x, &geom);
                &cols_owned
            };
            T::gemm(p, kk, co, cols, (kk, 1), self.value(kernel).data(), (co, 1), &mut out, false);
        }
        self.count_macs(p * kk * co);
        let value = Tensor::new([geom.oh, geom.ow, co], out)?;
        Ok(self.record(value, Op::Conv2d { input, kernel, geom }, &[input, kernel]))
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x);
        let sb = self.shape(bias);
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Error::dim(format!("add_bias: bias {sb:?} does not match {sx:?}")));
        }
        let c = sb[0];
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o = *o + bv;
            }
        }
        Ok(self.record(v, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip(self.value(a), self.value(b), |x, y| x + y);
        let v = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.record(v, Op::Add { a, b }, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip(self.value(a), self.value(b), |x, y| x * y);
        let v = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.record(v, Op::Mul { a, b }, &[a, b]))
    }

    /// Multiplies by a fixed (non-differentiated) tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, factor: Tensor<T>) -> Result<Var> {
        if factor.shape() != self.shape(x) {
            return Err(Error::dim(format!(
                "mul_const: factor {:?} vs input {:?}",
                factor.shape(),
                self.shape(x)
            )));
        }
        let data = zip(self.value(x), &factor, |a, f| a * f);
        let v = Tensor::new(factor.shape().to_vec(), data)?;
        Ok(self.record(
            v,
            Op::MulConst {
                x,
                factor: factor.into_data(),
            },
            &[x],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| if a > T::zero() { a } else { T::zero() });
        self.record(v, Op::Relu { x }, &[x])
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (outer, n, inner) = split_axis(xv.shape(), axis)?;
        let d = xv.data();
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).fold(T::neg_infinity(), |m, k| m.max(d[at(k)]));
                let mut total = T::zero();
                for k in 0..n {
                    let e = (d[at(k)] - max).exp();
                    out[at(k)] = e;
                    total = total + e;
                }
                for k in 0..n {
                    out[at(k)] = out[at(k)] / total;
                }
            }
        }
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.record(v, Op::Softmax { x, axis }, &[x]))
    }

    /// `out[i] = x.flat[index[i]]`, reshaped to `shape`. Backward scatter-adds.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::arg(format!(
                "gather index {bad} out of range for {} elements",
                xv.len()
            )));
        }
        let data = index.iter().map(|&i| xv.data()[i]).collect();
        let v = Tensor::new(shape, data)?;
        Ok(self.record(v, Op::Gather { x, index }, &[x]))
    }

    fn spatial(&self, x: Var, what: &str) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        expect_rank(s, 3, what)?;
        Ok((s[0], s[1], s[2]))
    }

    /// Non-overlapping-by-default max pool with a square `size` window.
    pub fn max_pool2d(&mut self, x: Var, size: usize, stride: usize) -> Result<Var> {
        let (h, w, c) = self.spatial(x, "max_pool2d")?;
        if size == 0 || stride == 0 {
            return Err(Error::arg("max_pool2d size and stride must be positive"));
        }
        if size > h || size > w {
            return Err(Error::dim(format!(
                "max_pool2d window {size} exceeds map {h}×{w}"
            )));
        }
        let rows = kernels::window_bins(h, size, stride);
        let cols = kernels::window_bins(w, size, stride);
        self.pool_by_bins(x, w, c, &rows, &cols)
    }

    /// Pools an `H×W×C` map into an `n×n×C` grid of adaptive bins.
    pub fn adaptive_max_pool2d(&mut self, x: Var, n: usize) -> Result<Var> {
        let (h, w, c) = self.spatial(x, "adaptive_max_pool2d")?;
        if n == 0 {
            return Err(Error::arg("adaptive_max_pool2d grid must be at least 1"));
        }
        let rows = kernels::adaptive_bins(h, n);
        let cols = kernels::adaptive_bins(w, n);
        self.pool_by_bins(x, w, c, &rows, &cols)
    }

    fn pool_by_bins(
        &mut self,
        x: Var,
        w: usize,
        c: usize,
        rows: &[Range<usize>],
        cols: &[Range<usize>],
    ) -> Result<Var> {
        let index = kernels::max_pool_indices(self.value(x).data(), w, c, rows, cols);
        self.gather(x, index, vec![rows.len(), cols.len(), c])
    }

    /// Per-channel mean over the `rows × cols` rectangle of an `H×W×C` map.
    pub fn avg_pool_region(&mut self, x: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let (h, w, c) = self.spatial(x, "avg_pool_region")?;
        if rows.is_empty() || cols.is_empty() {
            return Err(Error::arg(format!(
                "avg_pool_region needs non-empty intervals, got rows {rows:?} cols {cols:?}"
            )));
        }
        if rows.end > h || cols.end > w {
            return Err(Error::arg(format!(
                "avg_pool_region rectangle {rows:?}×{cols:?} exceeds map {h}×{w}"
            )));
        }
        let cells = rows.len() * cols.len();
        let index = kernels::rect_indices(w, c, &rows, &cols);
        let patch = self.gather(x, index, vec![cells, c])?;
        self.mean(patch, 0)
    }

    /// Nearest-neighbour upsampling of an `h×w×C` map to `H×W×C`.
    pub fn upsample_nearest(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (h, w, c) = self.spatial(x, "upsample_nearest")?;
        if out_h < h || out_w < w {
            return Err(Error::arg(format!(
                "upsample_nearest cannot shrink {h}×{w} to {out_h}×{out_w}"
            )));
        }
        let index = kernels::upsample_indices(h, w, c, out_h, out_w);
        self.gather(x, index, vec![out_h, out_w, c])
    }

    /// Mean along `axis`, which is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (outer, n, inner) = split_axis(xv.shape(), axis)?;
        let d = xv.data();
        let nf = T::from_usize(n).unwrap();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &d[(o * n + k) * inner..][..inner];
                for (acc, &v) in out[o * inner..][..inner].iter_mut().zip(row) {
                    *acc = *acc + v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v / nf);
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        self.count_macs(outer * n * inner);
        let v = Tensor::new(shape, out)?;
        Ok(self.record(v, Op::Mean { x, axis }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.record(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.record(v, Op::Reshape { x }, &[x]))
    }

    /// Concatenates along axis 0; trailing extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::arg("concat of zero tensors"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            let s = self.shape(*p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::dim(format!(
                    "concat: shape {s:?} incompatible with trailing extents {tail:?}"
                )));
            }
            lead += s[0];
            data.extend_from_slice(self.value(*p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let v = Tensor::new(shape, data)?;
        Ok(self.record(
            v,
            Op::Concat {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    /// `(x − mean) / sqrt(var + eps)` along `axis` (biased variance).
    pub fn normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (outer, n, inner) = split_axis(xv.shape(), axis)?;
        let d = xv.data();
        let nf = T::from_usize(n).unwrap();
        let eps = T::from_f64_lossy(eps);
        let mut out = vec![T::zero(); d.len()];
        let mut inv_std = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mean = (0..n).fold(T::zero(), |s, k| s + d[at(k)]) / nf;
                let var = (0..n).fold(T::zero(), |s, k| {
                    let c = d[at(k)] - mean;
                    s + c * c
                }) / nf;
                let inv = T::one() / (var + eps).sqrt();
                inv_std[o * inner + i] = inv;
                for k in 0..n {
                    out[at(k)] = (d[at(k)] - mean) * inv;
                }
            }
        }
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.record(v, Op::Normalize { x, axis, inv_std }, &[x]))
    }

    /// `x·gamma + beta`, with `gamma`/`beta` indexed along `axis`.
    pub fn scale_shift(&mut self, x: Var, gamma: Var, beta: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (outer, n, inner) = split_axis(xv.shape(), axis)?;
        let (gm, bt) = (self.value(gamma), self.value(beta));
        if gm.shape() != [n] || bt.shape() != [n] {
            return Err(Error::dim(format!(
                "scale_shift: gamma {:?} / beta {:?} must have extent {n}",
                gm.shape(),
                bt.shape()
            )));
        }
        let mut out = xv.data().to_vec();
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    let at = (o * n + k) * inner + i;
                    out[at] = out[at] * gm.data()[k] + bt.data()[k];
                }
            }
        }
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.record(
            v,
            Op::ScaleShift {
                x,
                gamma,
                beta,
                axis,
            },
            &[x, gamma, beta],
        ))
    }

    /// Layer normalization along `axis` followed by a learnable affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, axis: usize, eps: f64) -> Result<Var> {
        let n = self.normalize(x, axis, eps)?;
        self.scale_shift(n, gamma, beta, axis)
    }

    /// Inverted dropout. Identity in eval mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::arg(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let mask = Tensor::from_fn(self.shape(x).to_vec(), |_| {
            if rng.uniform() < rate {
                T::zero()
            } else {
                keep
            }
        });
        self.mul_const(x, mask)
    }

    /// Mean categorical cross-entropy of `[B×N]` probabilities against
    /// one-hot targets, with `log(max(p, 1e-12))`.
    pub fn cross_entropy(&mut self, probs: Var, target: &Tensor<T>) -> Result<Var> {
        let sp = self.shape(probs).to_vec();
        if sp.len() != 2 || target.shape() != &sp[..] {
            return Err(Error::dim(format!(
                "cross_entropy: probabilities {sp:?} vs targets {:?}",
                target.shape()
            )));
        }
        let classes = one_hot_classes(target)?;
        let n = sp[1];
        let p = self.value(probs).data();
        let floor = T::from_f64_lossy(LOG_CLAMP);
        let total = classes
            .iter()
            .enumerate()
            .fold(T::zero(), |s, (row, &t)| s - clamp_below(p[row * n + t], floor).ln());
        let loss = total / T::from_usize(sp[0]).unwrap();
        Ok(self.record(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                probs,
                target: classes,
            },
            &[probs],
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }
}

/// `max(v, floor)` that keeps NaN, so a diverged model shows a NaN loss.
pub(crate) fn clamp_below<T: Scalar>(v: T, floor: T) -> T {
    if v < floor {
        floor
    } else {
        v
    }
}

fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

/// Validates a `[B×N]` one-hot matrix and returns the hot column per row.
pub(crate) fn one_hot_classes<T: Scalar>(target: &Tensor<T>) -> Result<Vec<usize>> {
    let n = target.shape()[1];
    target
        .data()
        .chunks(n)
        .enumerate()
        .map(|(row, r)| {
            let hot: Vec<usize> = (0..n).filter(|&k| r[k] != T::zero()).collect();
            match hot.as_slice() {
                [k] if r[*k] == T::one() => Ok(*k),
                _ => Err(Error::arg(format!("target row {row} is not one-hot"))),
            }
        })
        .collect()
}
