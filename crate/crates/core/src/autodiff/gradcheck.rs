//! Central-difference gradient checking.

use super::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Finite-difference checker for scalar-valued (or sum-reduced) functions
/// of `f64` tensors.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Central-difference step.
    pub h: f64,
    /// Multiplier applied to analytic gradients before comparison. Anything
    /// other than 1 deliberately corrupts the check; used to test the harness.
    pub analytic_scale: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            h: 1e-5,
            analytic_scale: 1.0,
        }
    }
}

/// Outcome of a check: the worst coordinate and where it was.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub input: usize,
    pub coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    pub fn with_step(h: f64) -> Self {
        Self {
            h,
            ..Self::default()
        }
    }

    /// Max relative error over every coordinate of every input, using the
    /// denominator `max(|analytic|, |numeric|, 1e-8)`.
    pub fn run<F>(&self, f: F, inputs: &[Tensor<f64>]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let (analytic, _) = analytic_gradients(&f, inputs)?;
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            input: 0,
            coordinate: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
        for (i, grad) in analytic.iter().enumerate() {
            for j in 0..inputs[i].len() {
                let orig = inputs[i].data()[j];
                probe[i].data_mut()[j] = orig + self.h;
                let up = evaluate(&f, &probe)?;
                probe[i].data_mut()[j] = orig - self.h;
                let down = evaluate(&f, &probe)?;
                probe[i].data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * self.h);
                let a = grad.data()[j] * self.analytic_scale;
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                let err = (a - numeric).abs() / denom;
                if err > report.max_rel_error || err.is_nan() {
                    report = GradCheckReport {
                        max_rel_error: err,
                        input: i,
                        coordinate: j,
                        analytic: a,
                        numeric,
                    };
                }
            }
        }
        Ok(report)
    }
}

/// `GradCheck::default().run(f, inputs)` with step `h`, returning only the error.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    Ok(GradCheck::with_step(h).run(f, inputs)?.max_rel_error)
}

fn record<F>(f: &F, tape: &mut Tape<f64>, inputs: &[Tensor<f64>]) -> Result<(Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let mut out = f(tape, &vars)?;
    if tape.value(out).len() != 1 {
        out = tape.sum(out);
    }
    Ok((vars, out))
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let (_, out) = record(f, &mut tape, inputs)?;
    Ok(tape.value(out).item())
}

/// Analytic gradients of the (sum-reduced) output with respect to each input.
pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(Vec<Tensor<f64>>, f64)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let (vars, out) = record(f, &mut tape, inputs)?;
    let grads = tape.backward(out)?;
    Ok((
        vars.iter().map(|&v| grads.wrt(v)).collect(),
        tape.value(out).item(),
    ))
}
