//! The assembled classifier: backbone, node construction, GCN and head.

use crate::autodiff::{Mode, Tape, Var};
use crate::backbone::{Backbone, FeatureMap};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{build_complete_adjacency, gcn_forward, GcnStack, GraphSpec};
use crate::head::{gap_nodes, ClassHead, HeadOutput};
use crate::nn::Parameters;
use crate::region::{extract_regions, pyramid_nodes, region_descriptors, spp, upsample_features, NodeFeatures};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// How node features are formed from the upsampled map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeSource {
    Pyramid,
    Regions,
    /// One node: the global average of the map.
    Global,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub backbone: Backbone<T>,
    pub gcn: GcnStack<T>,
    pub head: ClassHead<T>,
    graph: GraphSpec,
}

/// Tape handles for every parameter of a [`Model`], in [`Parameters`] order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub all: Vec<Var>,
    backbone: usize,
    gcn: usize,
}

impl ModelVars {
    fn new(all: Vec<Var>, backbone: usize, gcn: usize) -> Self {
        Self { all, backbone, gcn }
    }

    pub fn backbone(&self) -> &[Var] {
        &self.all[..self.backbone]
    }

    pub fn gcn(&self) -> &[Var] {
        &self.all[self.backbone..self.backbone + self.gcn]
    }

    pub fn head(&self) -> &[Var] {
        &self.all[self.backbone + self.gcn..]
    }
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, classes: usize, rng: &mut Rng) -> Result<Self> {
        let s = config.input_size;
        let backbone = Backbone::new(config.backbone.clone(), (s, s), rng)?;
        let c = backbone.channels();
        let width = if config.gcn_width == 0 { c } else { config.gcn_width };
        let gcn = GcnStack::new(config.gcn_layers, c, width, config.propagation, rng);
        let head = ClassHead::new(gcn.out_channels(c), classes, config.head_norm, config.dropout, rng)?;
        let graph = build_complete_adjacency(node_count(&config))?;
        Ok(Self {
            config,
            backbone,
            gcn,
            head,
            graph,
        })
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }

    pub fn node_source(&self) -> NodeSource {
        node_source(&self.config)
    }

    pub fn nodes(&self) -> usize {
        self.graph.nodes()
    }

    /// Backbone output extents `(h, w)`.
    pub fn feature_extent(&self) -> (usize, usize) {
        let s = self.config.input_size;
        self.backbone
            .config()
            .output_extent(s, s)
            .expect("validated at construction")
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> ModelVars {
        self.vars(tape, false)
    }

    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> ModelVars {
        self.vars(tape, true)
    }

    fn vars(&self, tape: &mut Tape<T>, frozen: bool) -> ModelVars {
        let all = if frozen {
            Parameters::bind_frozen(self, tape)
        } else {
            Parameters::bind(self, tape)
        };
        self.vars_from(all)
    }

    /// Wraps externally created leaves, given in [`Parameters`] order.
    pub fn vars_from(&self, all: Vec<Var>) -> ModelVars {
        ModelVars::new(all, self.backbone.tensors().len(), self.gcn.tensors().len())
    }

    pub fn backbone_features(&self, tape: &mut Tape<T>, vars: &ModelVars, image: &Tensor<T>) -> Result<FeatureMap> {
        let x = tape.constant(image.clone());
        self.backbone.forward(tape, vars.backbone(), x)
    }

    /// Pooled `[1×C']` descriptor from a `[h×w×C]` backbone map.
    pub fn pooled_from_features(&self, tape: &mut Tape<T>, vars: &ModelVars, fm: &FeatureMap) -> Result<Var> {
        let (h, w) = (tape.shape(fm.var)[0], tape.shape(fm.var)[1]);
        let k = self.config.upsample;
        let up = upsample_features(tape, fm, h * k, w * k)?;
        let nodes = match self.node_source() {
            NodeSource::Pyramid => spp(tape, up, &self.config.spp_levels)?,
            NodeSource::Regions => {
                let rs = extract_regions(tape, up, self.config.grid)?;
                let d = region_descriptors(tape, &rs, up)?;
                NodeFeatures::from_grid(tape, d, self.config.grid)
            }
            NodeSource::Global => {
                let c = tape.shape(up)[2];
                let flat = tape.reshape(up, [h * k * w * k, c])?;
                let g = tape.mean(flat, 0)?;
                let g = tape.reshape(g, [1, c])?;
                NodeFeatures::from_grid(tape, g, 1)
            }
        };
        let g = gcn_forward(tape, &nodes, &self.graph, &self.gcn, vars.gcn())?;
        let pooled = gap_nodes(tape, g)?;
        let c = tape.shape(pooled)[0];
        tape.reshape(pooled, [1, c])
    }

    /// Head over a `[B×C']` batch of pooled descriptors.
    pub fn head_forward(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        pooled: Var,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<HeadOutput> {
        self.head.forward(tape, vars.head(), pooled, mode, rng)
    }

    /// Full forward pass over preprocessed `[S×S×3]` images.
    pub fn forward_batch(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        images: &[&Tensor<T>],
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<HeadOutput> {
        if images.is_empty() {
            return Err(Error::arg("empty batch"));
        }
        let mut rows = Vec::with_capacity(images.len());
        for image in images {
            let fm = self.backbone_features(tape, vars, image)?;
            rows.push(self.pooled_from_features(tape, vars, &fm)?);
        }
        let pooled = tape.concat(&rows)?;
        self.head_forward(tape, vars, pooled, mode, rng)
    }

    /// Eval-mode class probabilities for each image.
    pub fn predict(&self, images: &[&Tensor<T>]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        // eval mode never draws from the rng
        let mut rng = Rng::new(0);
        for image in images {
            let mut tape = Tape::new();
            let vars = self.bind_frozen(&mut tape);
            let o = self.forward_batch(&mut tape, &vars, &[image], Mode::Eval, &mut rng)?;
            out.push(tape.value(o.probs).data().iter().map(|v| v.as_f64()).collect());
        }
        Ok(out)
    }

    /// Trainable tensors followed by non-trainable state (batch-norm
    /// running statistics), as persisted in checkpoints.
    pub fn state(&self) -> Vec<(String, &Tensor<T>)> {
        let mut s = self.tensors();
        s.push(("head.norm.running_mean".into(), &self.head.running_mean));
        s.push(("head.norm.running_var".into(), &self.head.running_var));
        s
    }

    pub fn state_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut s = self.backbone.tensors_mut();
        s.extend(self.gcn.tensors_mut());
        s.extend(self.head.state_mut());
        s
    }
}

fn node_source(config: &ModelConfig) -> NodeSource {
    if config.use_spp {
        NodeSource::Pyramid
    } else if config.use_regions {
        NodeSource::Regions
    } else {
        NodeSource::Global
    }
}

/// Graph size implied by the configuration.
pub fn node_count(config: &ModelConfig) -> usize {
    match node_source(config) {
        NodeSource::Pyramid => pyramid_nodes(&config.spp_levels),
        NodeSource::Regions => config.grid * config.grid,
        NodeSource::Global => 1,
    }
}

impl<T: Scalar> Parameters<T> for Model<T> {
    fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = self.backbone.tensors();
        v.extend(self.gcn.tensors());
        v.extend(self.head.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = self.backbone.tensors_mut();
        v.extend(self.gcn.tensors_mut());
        v.extend(self.head.tensors_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::GradCheck;
    use crate::backbone::BackboneConfig;
    use crate::graph::Propagation;
    use crate::head::{one_hot, HeadNorm};

    pub(crate) fn tiny(use_regions: bool, use_spp: bool, gcn_layers: usize) -> ModelConfig {
        ModelConfig {
            input_size: 16,
            backbone: BackboneConfig {
                widths: vec![3, 4],
                kernel: 3,
                pool: 2,
                channels: 5,
            },
            use_regions,
            use_spp,
            gcn_layers,
            ..ModelConfig::default()
        }
    }

    fn image(seed: u64, s: usize) -> Tensor<f64> {
        let mut rng = Rng::new(seed);
        Tensor::from_fn([s, s, 3], |_| rng.uniform_range(-1.0, 1.0))
    }

    #[test]
    fn node_counts_follow_the_switches() {
        assert_eq!(node_count(&ModelConfig::default()), 13);
        assert_eq!(node_count(&tiny(true, false, 2)), 4);
        assert_eq!(node_count(&tiny(false, false, 0)), 1);
        let m = Model::<f64>::new(tiny(true, true, 2), 3, &mut Rng::new(0)).unwrap();
        assert_eq!(m.feature_extent(), (4, 4));
        assert_eq!(m.nodes(), 13);
    }

    #[test]
    fn every_variant_produces_distributions() {
        for (r, s, g) in [(true, true, 2), (true, true, 1), (true, true, 0), (true, false, 2), (true, false, 0), (false, false, 0)] {
            let m = Model::<f64>::new(tiny(r, s, g), 3, &mut Rng::new(1)).unwrap();
            let imgs = [image(2, 16), image(3, 16)];
            let p = m.predict(&[&imgs[0], &imgs[1]]).unwrap();
            for row in p {
                assert_eq!(row.len(), 3);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn same_seed_same_model() {
        let a = Model::<f32>::new(tiny(true, true, 2), 4, &mut Rng::new(9)).unwrap();
        let b = Model::<f32>::new(tiny(true, true, 2), 4, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.state().len(), a.tensors().len() + 2);
    }

    #[test]
    fn composite_pipeline_grad_check() {
        // backbone → regions/SPP → GCN×2 → head → CE, both propagation paths
        for (seed, prop) in [(3, Propagation::Rank1), (4, Propagation::Dense)] {
            let mut cfg = tiny(true, true, 2);
            cfg.propagation = prop;
            cfg.head_norm = HeadNorm::Layer;
            let mut rng = Rng::new(seed);
            let model = Model::<f64>::new(cfg, 3, &mut rng).unwrap();
            let mut inputs: Vec<Tensor<f64>> = model.tensors().into_iter().map(|(_, t)| t.clone()).collect();
            for t in inputs.iter_mut() {
                if t.data().iter().all(|&v| v == 0.0) {
                    *t = t.map(|_| rng.uniform_range(-0.1, 0.1));
                }
            }
            let imgs = [image(seed + 10, 16), image(seed + 11, 16)];
            let target = one_hot::<f64>(&[0, 2], 3).unwrap();
            let n = inputs.len();
            let report = GradCheck::default()
                .run(
                    |tp, v| {
                        let vars = model.vars_from(v.to_vec());
                        let mut r = Rng::new(5);
                        let o = model.forward_batch(tp, &vars, &[&imgs[0], &imgs[1]], Mode::Train, &mut r)?;
                        tp.cross_entropy(o.probs, &target)
                    },
                    &inputs,
                )
                .unwrap();
            assert_eq!(n, model.tensors().len());
            assert!(report.max_rel_error <= 1e-4, "{prop:?}: {report:?}");
        }
    }
}
