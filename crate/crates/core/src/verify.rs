//! Registry of finite-difference checks covering every differentiable op,
//! the network components and the composite pipeline.

use crate::autodiff::{GradCheck, GradCheckReport, Mode, Tape, Var};
use crate::backbone::BackboneConfig;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{build_complete_adjacency, gcn_layer_forward, gcn_layer_forward_rank1, Propagation};
use crate::head::one_hot;
use crate::model::Model;
use crate::nn::Parameters;
use crate::region::RegionSet;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Tolerance every registered check must meet.
pub const TOLERANCE: f64 = 1e-4;

type CheckFn = fn(u64, &GradCheck) -> Result<GradCheckReport>;

pub struct OpCheck {
    pub name: &'static str,
    run: CheckFn,
}

impl OpCheck {
    pub fn run(&self, seed: u64, check: &GradCheck) -> Result<GradCheckReport> {
        (self.run)(seed, check)
    }
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform_range(-1.0, 1.0))
}

/// Distinct values in `±[0.1, 1.1]`, keeping relu and max selections away
/// from their kinks under small steps.
pub fn kink_free(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n)
        .map(|i| {
            let mag = 0.1 + (i as f64 + 0.5) / n as f64;
            if i % 2 == 0 {
                mag
            } else {
                -mag
            }
        })
        .collect();
    rng.shuffle(&mut vals);
    Tensor::new(shape.to_vec(), vals).expect("sized above")
}

/// Reduces `y` to a scalar through fixed random weights so every output
/// coordinate gets a distinct upstream gradient.
fn weighted(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = random(tape.shape(y), &mut Rng::new(seed ^ 0x5eed));
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

macro_rules! check {
    ($seed:ident, $check:ident, [$($input:expr),+], |$tp:ident, $v:ident| $body:expr) => {{
        let inputs = vec![$($input),+];
        $check.run(
            |$tp: &mut Tape<f64>, $v: &[Var]| {
                let y = $body?;
                weighted($tp, y, $seed)
            },
            &inputs,
        )
    }};
}

fn matmul(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let mut r = Rng::new(seed);
    check!(seed, c, [random(&[3, 4], &mut r), random(&[4, 5], &mut r)], |tp, v| tp.matmul(v[0], v[1]))
}

fn conv2d(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let mut r = Rng::new(seed);
    check!(seed, c, [random(&[6, 5, 2], &mut r), random(&[3, 3, 2, 3], &mut r)], |tp, v| tp.conv2d(v[0], v[1], 1, 1))
}

fn conv2d_strided(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let mut r = Rng::new(seed);
    check!(seed, c, [random(&[7, 6, 2], &mut r), random(&[3, 3, 2, 2], &mut r)], |tp, v| tp.conv2d(v[0], v[1], 2, 0))
}

fn add_bias(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let mut r = Rng::new(seed);
    check!(seed, c, [random(&[4, 3], &mut r), random(&[3], &mut r)], |tp, v| tp.add_bias(v[0], v[1]))
}

fn mul(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let mut r = Rng::new(seed);
    check!(seed, c, [random(&[3, 4], &mut r), random(&[3, 4], &mut r)], |tp, v| {
        let s = tp.add(v[0], v[1])?;
        tp.mul(s, v[1])
    })
}

fn relu(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let mut r = Rng::new(seed);
    check!(seed, c, [kink_free(&[4, 5], &mut r)], |tp, v| Ok::<_, Error>(tp.relu(v[0])))
}

fn softmax(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let mut r = Rng::new(seed);
    check!(seed, c, [random(&[3, 5], &mut r).map(|x| 3.0 * x)], |tp, v| tp.softmax(v[0], 1))
}

fn max_pool2d(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let mut r = Rng::new(seed);
    check!(seed, c, [kink_free(&[6, 6, 2], &mut r)], |tp, v| tp.max_pool2d(v[0], 2, 2))
}

fn adaptive_max_pool2d(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let mut r = Rng::new(seed);
    check!(seed, c, [kink_free(&[7, 5, 3], &mut r)], |tp, v| tp.adaptive_max_pool2d(v[0], 3))
}

fn avg_pool_region(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let mut r = Rng::new(seed);
    check!(seed, c, [random(&[6, 5, 3], &mut r)], |tp, v| tp.avg_pool_region(v[0], 1..5, 2..4))
}

fn region_descriptors(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let mut r = Rng::new(seed);
    let rs = RegionSet::new(5, 6, 2)?;
    check!(seed, c, [random(&[5, 6, 3], &mut r)], |tp, v| crate::region::region_descriptors(tp, &rs, v[0]))
}

fn spp(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let mut r = Rng::new(seed);
    check!(seed, c, [kink_free(&[6, 6, 2], &mut r)], |tp, v| crate::region::spp(tp, v[0], &[2, 3]).map(|n| n.var))
}

fn upsample_nearest(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let mut r = Rng::new(seed);
    check!(seed, c, [random(&[3, 4, 2], &mut r)], |tp, v| tp.upsample_nearest(v[0], 6, 8))
}

fn mean(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let mut r = Rng::new(seed);
    check!(seed, c, [random(&[4, 3, 2], &mut r)], |tp, v| tp.mean(v[0], 1))
}

fn concat(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let mut r = Rng::new(seed);
    check!(seed, c, [random(&[2, 3], &mut r), random(&[4, 3], &mut r)], |tp, v| tp.concat(&[v[0], v[1]]))
}

fn layer_norm(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let mut r = Rng::new(seed);
    check!(
        seed,
        c,
        [random(&[3, 5], &mut r), random(&[5], &mut r), random(&[5], &mut r)],
        |tp, v| tp.layer_norm(v[0], v[1], v[2], 1, 1e-5)
    )
}

fn batch_norm(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let mut r = Rng::new(seed);
    check!(
        seed,
        c,
        [random(&[4, 3], &mut r), random(&[3], &mut r), random(&[3], &mut r)],
        |tp, v| {
            let n = tp.normalize(v[0], 0, 1e-5)?;
            tp.scale_shift(n, v[1], v[2], 1)
        }
    )
}

fn dropout(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let mut r = Rng::new(seed);
    check!(seed, c, [random(&[4, 6], &mut r)], |tp, v| tp.dropout(v[0], 0.3, Mode::Train, &mut Rng::new(seed)))
}

fn cross_entropy(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    let mut r = Rng::new(seed);
    let z = random(&[4, 5], &mut r).map(|x| 2.0 * x);
    let labels: Vec<usize> = (0..4).map(|_| r.below(5)).collect();
    let target = one_hot::<f64>(&labels, 5)?;
    c.run(
        |tp, v| {
            let p = tp.softmax(v[0], 1)?;
            tp.cross_entropy(p, &target)
        },
        &[z],
    )
}

fn gcn(seed: u64, c: &GradCheck, prop: Propagation) -> Result<GradCheckReport> {
    let mut r = Rng::new(seed);
    let spec = build_complete_adjacency(5)?;
    let g = random(&[5, 4], &mut r);
    let w = kink_free(&[4, 3], &mut r);
    check!(seed, c, [g, w], |tp, v| match prop {
        Propagation::Dense => gcn_layer_forward(tp, v[0], &spec, v[1]),
        Propagation::Rank1 => gcn_layer_forward_rank1(tp, v[0], &spec, v[1]),
    })
}

fn gcn_dense(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    gcn(seed, c, Propagation::Dense)
}

fn gcn_rank1(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    gcn(seed, c, Propagation::Rank1)
}

/// Full network on two 16×16 images: backbone, node construction, two GCN
/// layers, head and cross-entropy, with every parameter perturbed.
fn pipeline_with(seed: u64, c: &GradCheck, use_spp: bool) -> Result<GradCheckReport> {
    let cfg = ModelConfig {
        input_size: 16,
        backbone: BackboneConfig {
            widths: vec![3, 4],
            kernel: 3,
            pool: 2,
            channels: 5,
        },
        use_spp,
        ..ModelConfig::default()
    };
    let mut r = Rng::new(seed);
    let model = Model::<f64>::new(cfg, 3, &mut r)?;
    let mut inputs: Vec<Tensor<f64>> = model.tensors().into_iter().map(|(_, t)| t.clone()).collect();
    for t in inputs.iter_mut() {
        if t.data().iter().all(|&v| v == 0.0) {
            *t = t.map(|_| r.uniform_range(-0.1, 0.1));
        }
    }
    let images = [random(&[16, 16, 3], &mut r), random(&[16, 16, 3], &mut r)];
    let target = one_hot::<f64>(&[r.below(3), r.below(3)], 3)?;
    c.run(
        |tp, v| {
            let vars = model.vars_from(v.to_vec());
            let o = model.forward_batch(tp, &vars, &[&images[0], &images[1]], Mode::Train, &mut Rng::new(seed))?;
            tp.cross_entropy(o.probs, &target)
        },
        &inputs,
    )
}

fn pipeline(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    pipeline_with(seed, c, true)
}

fn pipeline_regions(seed: u64, c: &GradCheck) -> Result<GradCheckReport> {
    pipeline_with(seed, c, false)
}

pub fn registry() -> Vec<OpCheck> {
    macro_rules! ops {
        ($($f:ident),* $(,)?) => { vec![$(OpCheck { name: stringify!($f), run: $f }),*] };
    }
    ops![
        matmul,
        conv2d,
        conv2d_strided,
        add_bias,
        mul,
        relu,
        softmax,
        max_pool2d,
        adaptive_max_pool2d,
        avg_pool_region,
        region_descriptors,
        spp,
        upsample_nearest,
        mean,
        concat,
        layer_norm,
        batch_norm,
        dropout,
        cross_entropy,
        gcn_dense,
        gcn_rank1,
        pipeline,
        pipeline_regions,
    ]
}

pub fn op_names() -> Vec<&'static str> {
    registry().iter().map(|o| o.name).collect()
}

#[derive(Clone, Debug)]
pub struct OpResult {
    pub name: &'static str,
    pub report: GradCheckReport,
    pub passed: bool,
}

/// Runs the selected checks (all when `only` is empty). `fault` names an op
/// whose analytic gradient is scaled by 1.01 to exercise failure reporting.
pub fn run_checks(only: &[String], seed: u64, fault: Option<&str>) -> Result<Vec<OpResult>> {
    let reg = registry();
    if let Some(bad) = only.iter().chain(fault.map(str::to_string).as_ref()).find(|n| !reg.iter().any(|o| o.name == n.as_str())) {
        return Err(Error::arg(format!("unknown op {bad:?}; known: {}", op_names().join(", "))));
    }
    let mut out = Vec::new();
    for op in reg.iter().filter(|o| only.is_empty() || only.iter().any(|n| n == o.name)) {
        let check = GradCheck {
            analytic_scale: if fault == Some(op.name) { 1.01 } else { 1.0 },
            ..GradCheck::default()
        };
        let report = op.run(seed, &check)?;
        out.push(OpResult {
            name: op.name,
            passed: report.max_rel_error <= TOLERANCE,
            report,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        for r in run_checks(&[], 0, None).unwrap() {
            assert!(r.passed, "{}: {:?}", r.name, r.report);
        }
    }

    #[test]
    fn selection_and_fault_injection() {
        let only = run_checks(&["matmul".to_string()], 1, None).unwrap();
        assert_eq!(only.len(), 1);
        assert_eq!(only[0].name, "matmul");
        let bad = run_checks(&["relu".to_string(), "softmax".to_string()], 1, Some("relu")).unwrap();
        assert!(!bad[0].passed && bad[0].report.max_rel_error > 5e-3);
        assert!(bad[1].passed);
        assert!(run_checks(&["nope".to_string()], 0, None).is_err());
    }
}
