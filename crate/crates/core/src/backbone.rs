//! Small convolutional feature extractor producing the base feature map.
//!
//! Each block is `conv(k×k, same padding) → ReLU → max-pool(stride)`; a final
//! 1×1 projection (with ReLU) maps to the configured channel dimension.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{ConvLayer, Parameters};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub const INPUT_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub pool: usize,
    pub channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: vec![32, 64, 128],
            kernel: 3,
            pool: 2,
            channels: 256,
        }
    }
}

impl BackboneConfig {
    /// Spatial extents of the feature map for an `h×w` input.
    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.channels == 0 {
            return Err(Error::config(format!(
                "backbone widths {:?} and channels {} must be positive and non-empty",
                self.widths, self.channels
            )));
        }
        if self.kernel == 0 || self.pool == 0 {
            return Err(Error::config("backbone kernel and pool stride must be positive"));
        }
        let pad = (self.kernel - 1) / 2;
        let (mut h, mut w) = (h, w);
        for (i, _) in self.widths.iter().enumerate() {
            if h + 2 * pad < self.kernel || w + 2 * pad < self.kernel {
                return Err(Error::config(format!("block {i}: map {h}×{w} smaller than kernel")));
            }
            h = h + 2 * pad - self.kernel + 1;
            w = w + 2 * pad - self.kernel + 1;
            if h < self.pool || w < self.pool {
                return Err(Error::config(format!("block {i}: map {h}×{w} smaller than pool")));
            }
            h = (h - self.pool) / self.pool + 1;
            w = (w - self.pool) / self.pool + 1;
        }
        if h < 2 || w < 2 {
            return Err(Error::config(format!(
                "backbone collapses the input to {h}×{w}; at least 2×2 is required"
            )));
        }
        Ok((h, w))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T: Scalar> {
    config: BackboneConfig,
    blocks: Vec<ConvLayer<T>>,
    projection: ConvLayer<T>,
}

/// Backbone output recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    /// `[h×w×C]` activations.
    pub var: Var,
    /// Spatial extents of the input image.
    pub source: (usize, usize),
}

impl<T: Scalar> Backbone<T> {
    /// Builds with fan-in-scaled uniform weights and zero biases.
    /// `input` is the image extent the backbone must support.
    pub fn new(config: BackboneConfig, input: (usize, usize), rng: &mut Rng) -> Result<Self> {
        config.output_extent(input.0, input.1)?;
        let mut cin = INPUT_CHANNELS;
        let mut blocks = Vec::with_capacity(config.widths.len());
        for &width in &config.widths {
            blocks.push(ConvLayer::new(config.kernel, cin, width, rng));
            cin = width;
        }
        let projection = ConvLayer::new(1, cin, config.channels, rng);
        Ok(Self {
            config,
            blocks,
            projection,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn channels(&self) -> usize {
        self.config.channels
    }

    /// Runs the blocks on an `H×W×3` image. `params` come from [`Parameters::bind`].
    pub fn forward(&self, tape: &mut Tape<T>, params: &[Var], image: Var) -> Result<FeatureMap> {
        let shape = tape.shape(image).to_vec();
        if shape.len() != 3 || shape[2] != INPUT_CHANNELS {
            return Err(Error::dim(format!(
                "backbone expects an H×W×{INPUT_CHANNELS} image, got {shape:?}"
            )));
        }
        self.config.output_extent(shape[0], shape[1]).map_err(|e| Error::dim(e.to_string()))?;
        let pad = (self.config.kernel - 1) / 2;
        let mut x = image;
        for pair in params[..2 * self.blocks.len()].chunks(2) {
            x = tape.conv2d(x, pair[0], 1, pad)?;
            x = tape.add_bias(x, pair[1])?;
            x = tape.relu(x);
            x = tape.max_pool2d(x, self.config.pool, self.config.pool)?;
        }
        let n = params.len();
        x = tape.conv2d(x, params[n - 2], 1, 0)?;
        x = tape.add_bias(x, params[n - 1])?;
        let var = tape.relu(x);
        Ok(FeatureMap {
            var,
            source: (shape[0], shape[1]),
        })
    }

    /// Forward pass on a plain tensor with no gradient tracking.
    pub fn features(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params = self.bind_frozen(&mut tape);
        let x = tape.constant(image.clone());
        let fm = self.forward(&mut tape, &params, x)?;
        Ok(tape.value(fm.var).clone())
    }
}

impl<T: Scalar> Parameters<T> for Backbone<T> {
    fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("backbone.block{i}.kernel"), &b.kernel));
            out.push((format!("backbone.block{i}.bias"), &b.bias));
        }
        out.push(("backbone.proj.kernel".into(), &self.projection.kernel));
        out.push(("backbone.proj.bias".into(), &self.projection.bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("backbone.block{i}.kernel"), &mut b.kernel));
            out.push((format!("backbone.block{i}.bias"), &mut b.bias));
        }
        out.push(("backbone.proj.kernel".into(), &mut self.projection.kernel));
        out.push(("backbone.proj.bias".into(), &mut self.projection.bias));
        out
    }
}
