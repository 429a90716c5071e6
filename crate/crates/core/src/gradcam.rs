//! Gradient-weighted class activation maps over the backbone feature map.

use std::path::Path;

use image::RgbImage;
use serde::Serialize;

use crate::autodiff::{Mode, Tape};
use crate::backbone::FeatureMap;
use crate::checkpoint::Classifier;
use crate::data::image::write_pgm;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub target: usize,
    /// `[h×w]` in `[0, 1]`.
    pub values: Tensor<f64>,
}

impl Heatmap {
    /// `(row, col)` of the largest value, first in row-major order on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let w = self.values.shape()[1];
        let d = self.values.data();
        let mut best = 0;
        for (i, &v) in d.iter().enumerate() {
            if v > d[best] {
                best = i;
            }
        }
        (best / w, best % w)
    }

    pub fn is_zero(&self) -> bool {
        self.values.data().iter().all(|&v| v == 0.0)
    }
}

/// Heatmap for a preprocessed `[S×S×3]` input.
pub fn grad_cam_input(model: &Model<f32>, input: &Tensor<f32>, target: usize) -> Result<Heatmap> {
    if target >= model.classes() {
        return Err(Error::arg(format!(
            "class {target} out of range for {} classes",
            model.classes()
        )));
    }
    let mut tape = Tape::new();
    let vars = model.bind_frozen(&mut tape);
    let fm = model.backbone_features(&mut tape, &vars, input)?;
    // restart the graph at the feature map so its gradient is recorded
    let activations = tape.value(fm.var).clone();
    let a = tape.param(activations.clone());
    let fm = FeatureMap { var: a, ..fm };
    let pooled = model.pooled_from_features(&mut tape, &vars, &fm)?;
    let out = model.head_forward(&mut tape, &vars, pooled, Mode::Eval, &mut Rng::new(0))?;
    let n = model.classes();
    let select = tape.constant(Tensor::from_fn([1, n], |i| if i == target { 1.0 } else { 0.0 }));
    let picked = tape.mul(out.logits, select)?;
    let score = tape.sum(picked);
    let grads = tape.backward(score)?.wrt(a);

    let (h, w, c) = (activations.shape()[0], activations.shape()[1], activations.shape()[2]);
    let g = grads.data();
    let alpha: Vec<f64> = (0..c)
        .map(|ch| (0..h * w).map(|p| g[p * c + ch] as f64).sum::<f64>() / (h * w) as f64)
        .collect();
    let act = activations.data();
    let cam = Tensor::from_fn([h, w], |p| {
        let s: f64 = (0..c).map(|ch| alpha[ch] * act[p * c + ch] as f64).sum();
        s.max(0.0)
    });
    Ok(Heatmap {
        target,
        values: normalize(cam),
    })
}

/// Min-max scaling to `[0, 1]`. All-zero stays zero; a positive constant
/// map becomes all ones.
fn normalize(cam: Tensor<f64>) -> Tensor<f64> {
    let lo = cam.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = cam.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= 0.0 || !hi.is_finite() {
        Tensor::zeros(cam.shape().to_vec())
    } else if hi == lo {
        Tensor::ones(cam.shape().to_vec())
    } else {
        cam.map(|v| (v - lo) / (hi - lo))
    }
}

pub fn grad_cam(c: &Classifier, img: &RgbImage, target: usize) -> Result<Heatmap> {
    grad_cam_input(&c.model, &c.prepare(img)?, target)
}

#[derive(Serialize)]
struct Sidecar<'a> {
    class: usize,
    class_name: &'a str,
    height: usize,
    width: usize,
    values: Vec<&'a [f64]>,
}

/// Writes the map as an 8-bit PGM and its raw values as JSON.
pub fn write_heatmap(h: &Heatmap, class_name: &str, pgm: &Path, json: &Path) -> Result<()> {
    write_pgm(&h.values, pgm)?;
    let (rows, cols) = (h.values.shape()[0], h.values.shape()[1]);
    let sidecar = Sidecar {
        class: h.target,
        class_name,
        height: rows,
        width: cols,
        values: h.values.data().chunks(cols).collect(),
    };
    std::fs::write(json, serde_json::to_string(&sidecar)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::config::ModelConfig;

    fn model(seed: u64) -> Model<f32> {
        let cfg = ModelConfig {
            input_size: 16,
            backbone: BackboneConfig {
                widths: vec![4, 6],
                kernel: 3,
                pool: 2,
                channels: 8,
            },
            ..ModelConfig::default()
        };
        Model::new(cfg, 3, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn shape_and_range_invariants() {
        for seed in 0..10 {
            let m = model(seed);
            let mut rng = Rng::new(seed + 100);
            let x = Tensor::from_fn([16, 16, 3], |_| rng.uniform_range(-100.0, 100.0) as f32);
            for target in 0..3 {
                let h = grad_cam_input(&m, &x, target).unwrap();
                assert_eq!(h.values.shape(), &[4, 4]);
                assert!(h.values.data().iter().all(|v| (0.0..=1.0).contains(v)));
                let max = h.values.data().iter().cloned().fold(0.0, f64::max);
                assert!(h.is_zero() || max == 1.0);
            }
        }
    }

    #[test]
    fn invalid_class_is_argument_error() {
        let x = Tensor::zeros([16, 16, 3]);
        assert!(matches!(grad_cam_input(&model(0), &x, 3), Err(Error::Argument(_))));
    }

    #[test]
    fn normalization_cases() {
        assert_eq!(normalize(Tensor::zeros([2, 2])), Tensor::zeros([2, 2]));
        assert_eq!(normalize(Tensor::full([2, 2], 3.0)), Tensor::ones([2, 2]));
        let n = normalize(Tensor::new([1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        assert_eq!(n.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn sidecar_and_pgm_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let h = Heatmap {
            target: 1,
            values: Tensor::new([2, 3], vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.0]).unwrap(),
        };
        let (pgm, json) = (dir.path().join("h.pgm"), dir.path().join("h.json"));
        write_heatmap(&h, "b", &pgm, &json).unwrap();
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
        assert_eq!(v["values"][1][1], 0.75);
        assert_eq!(v["width"], 3);
        assert!(std::fs::read(&pgm).unwrap().starts_with(b"P5"));
        assert_eq!(h.argmax(), (0, 2));
    }
}
