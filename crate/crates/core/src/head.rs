//! Classification head: GAP over nodes, normalization, dropout, a linear
//! projection to class logits and softmax. Also the cross-entropy loss.

use crate::autodiff::{clamp_below, Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{fan_in_uniform, Parameters};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub const NORM_EPS: f64 = 1e-5;
const BATCH_NORM_MOMENTUM: f64 = 0.1;

/// Normalization applied to pooled features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum HeadNorm {
    /// Per-sample, over channels.
    #[default]
    Layer,
    /// Per-channel over the batch in train mode; running statistics in eval.
    Batch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassHead<T: Scalar> {
    pub norm: HeadNorm,
    pub dropout: f64,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    /// Batch-norm running statistics; unused for layer norm.
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

/// Batch statistics observed in a train-mode forward pass (batch norm only).
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Logits and probabilities for a `[B×C]` feature batch.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    pub logits: Var,
    pub probs: Var,
    pub batch_stats: Option<BatchStats>,
}

/// Column mean over the `[P×C]` node matrix.
pub fn gap_nodes<T: Scalar>(tape: &mut Tape<T>, nodes: Var) -> Result<Var> {
    if tape.shape(nodes).len() != 2 {
        return Err(Error::dim(format!("gap_nodes expects P×C, got {:?}", tape.shape(nodes))));
    }
    tape.mean(nodes, 0)
}

impl<T: Scalar> ClassHead<T> {
    pub fn new(channels: usize, classes: usize, norm: HeadNorm, dropout: f64, rng: &mut Rng) -> Result<Self> {
        if classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {classes}")));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::config(format!("dropout {dropout} outside [0, 1)")));
        }
        Ok(Self {
            norm,
            dropout,
            gamma: Tensor::ones([channels]),
            beta: Tensor::zeros([channels]),
            weight: fan_in_uniform(&[channels, classes], channels, rng),
            bias: Tensor::zeros([classes]),
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::ones([channels]),
        })
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `features` is `[B×C]`; `params` come from [`Parameters::bind`].
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        features: Var,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<HeadOutput> {
        let s = tape.shape(features).to_vec();
        if s.len() != 2 || s[1] != self.channels() {
            return Err(Error::dim(format!(
                "head expects B×{}, got {s:?}",
                self.channels()
            )));
        }
        let (gamma, beta, weight, bias) = (params[0], params[1], params[2], params[3]);
        let mut batch_stats = None;
        let normed = match (self.norm, mode) {
            (HeadNorm::Layer, _) => tape.layer_norm(features, gamma, beta, 1, NORM_EPS)?,
            (HeadNorm::Batch, Mode::Train) => {
                batch_stats = Some(column_stats(tape.value(features)));
                let standardized = tape.normalize(features, 0, NORM_EPS)?;
                tape.scale_shift(standardized, gamma, beta, 1)?
            }
            (HeadNorm::Batch, Mode::Eval) => {
                let inv = self.running_var.map(|v| T::one() / (v + T::from_f64_lossy(NORM_EPS)).sqrt());
                let shift = Tensor::from_fn([self.channels()], |i| {
                    -self.running_mean.data()[i] * inv.data()[i]
                });
                let (inv, shift) = (tape.constant(inv), tape.constant(shift));
                let standardized = tape.scale_shift(features, inv, shift, 1)?;
                tape.scale_shift(standardized, gamma, beta, 1)?
            }
        };
        let dropped = tape.dropout(normed, self.dropout, mode, rng)?;
        let logits = tape.matmul(dropped, weight)?;
        let logits = tape.add_bias(logits, bias)?;
        let probs = tape.softmax(logits, 1)?;
        Ok(HeadOutput {
            logits,
            probs,
            batch_stats,
        })
    }

    /// Folds observed batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &BatchStats) {
        let m = BATCH_NORM_MOMENTUM;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = T::from_f64_lossy((1.0 - m) * r.as_f64() + m * b);
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = T::from_f64_lossy((1.0 - m) * r.as_f64() + m * b);
        }
    }

    /// Trainable tensors followed by the running statistics.
    pub fn state_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let Self {
            gamma,
            beta,
            weight,
            bias,
            running_mean,
            running_var,
            ..
        } = self;
        vec![
            ("head.norm.gamma".into(), gamma),
            ("head.norm.beta".into(), beta),
            ("head.proj.weight".into(), weight),
            ("head.proj.bias".into(), bias),
            ("head.norm.running_mean".into(), running_mean),
            ("head.norm.running_var".into(), running_var),
        ]
    }

    /// Class probabilities `[N]` for one pooled feature vector `[C]`.
    pub fn classify(&self, features: &Tensor<T>, mode: Mode, rng: &mut Rng) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params = self.bind_frozen(&mut tape);
        let f = tape.constant(features.reshape([1, features.len()])?);
        let out = self.forward(&mut tape, &params, f, mode, rng)?;
        tape.value(out.probs).reshape([self.classes()])
    }
}

fn column_stats<T: Scalar>(x: &Tensor<T>) -> BatchStats {
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for row in x.data().chunks(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v.as_f64() / b as f64;
        }
    }
    for row in x.data().chunks(c) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v.as_f64() - m).powi(2) / b as f64;
        }
    }
    BatchStats { mean, var }
}

impl<T: Scalar> Parameters<T> for ClassHead<T> {
    fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("head.norm.gamma".into(), &self.gamma),
            ("head.norm.beta".into(), &self.beta),
            ("head.proj.weight".into(), &self.weight),
            ("head.proj.bias".into(), &self.bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = self.state_mut();
        v.truncate(4);
        v
    }
}

/// Batch cross-entropy with per-sample terms.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub per_sample: Vec<f64>,
}

/// `−log max(p_true, 1e-12)` per row of `[B×N]` probabilities, averaged.
pub fn cross_entropy<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<LossValue> {
    if pred.rank() != 2 || pred.shape() != target.shape() {
        return Err(Error::dim(format!(
            "cross_entropy: predictions {:?} vs targets {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.shape()[1];
    for (row, r) in pred.data().chunks(n).enumerate() {
        let s: f64 = r.iter().map(|v| v.as_f64()).sum();
        if (s - 1.0).abs() > 1e-5 {
            return Err(Error::arg(format!("prediction row {row} sums to {s}, not 1")));
        }
    }
    let classes = crate::autodiff::one_hot_classes(target)?;
    let per_sample: Vec<f64> = classes
        .iter()
        .enumerate()
        .map(|(row, &t)| -clamp_below(pred.data()[row * n + t].as_f64(), 1e-12).ln())
        .collect();
    let loss = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok(LossValue { loss, per_sample })
}

/// One-hot `[B×N]` matrix for class indices.
pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::arg(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(Tensor::from_fn([labels.len(), classes], |i| {
        if labels[i / classes] == i % classes {
            T::one()
        } else {
            T::zero()
        }
    }))
}
