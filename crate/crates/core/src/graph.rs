//! Graph convolution over SPP nodes.
//!
//! Each layer computes `ReLU(Â·G·W)` with the renormalized adjacency
//! `Â = D̃^{-1/2}(A + I)D̃^{-1/2}`. On the complete graph `Â = J/P`, so the
//! propagation is a column mean broadcast to every node; [`Propagation::Rank1`]
//! exploits that.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{fan_in_uniform, Parameters};
use crate::region::NodeFeatures;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
enum Adjacency {
    Complete,
    Dense(Vec<Vec<bool>>),
}

/// Node count plus adjacency, with the normalized propagation matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphSpec {
    nodes: usize,
    adjacency: Adjacency,
}

/// Complete graph on `p` nodes (no self-loops in `A`).
pub fn build_complete_adjacency(p: usize) -> Result<GraphSpec> {
    if p == 0 {
        return Err(Error::arg("graph needs at least one node"));
    }
    Ok(GraphSpec {
        nodes: p,
        adjacency: Adjacency::Complete,
    })
}

impl GraphSpec {
    /// Arbitrary undirected binary adjacency. Diagonal entries are ignored;
    /// self-loops are always added by the renormalization.
    pub fn from_adjacency(adjacency: Vec<Vec<bool>>) -> Result<Self> {
        let p = adjacency.len();
        if p == 0 || adjacency.iter().any(|r| r.len() != p) {
            return Err(Error::arg("adjacency must be a non-empty square matrix"));
        }
        for (i, row) in adjacency.iter().enumerate() {
            for (j, &e) in row.iter().enumerate() {
                if e != adjacency[j][i] {
                    return Err(Error::arg(format!("adjacency not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self {
            nodes: p,
            adjacency: Adjacency::Dense(adjacency),
        })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn is_complete(&self) -> bool {
        match &self.adjacency {
            Adjacency::Complete => true,
            Adjacency::Dense(a) => (0..self.nodes)
                .all(|i| (0..self.nodes).all(|j| i == j || a[i][j])),
        }
    }

    /// Binary `A` (zero diagonal).
    pub fn adjacency(&self) -> Tensor<f64> {
        let p = self.nodes;
        Tensor::from_fn([p, p], |k| {
            let (i, j) = (k / p, k % p);
            let edge = match &self.adjacency {
                Adjacency::Complete => true,
                Adjacency::Dense(a) => a[i][j],
            };
            if i != j && edge {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Diagonal of `D̃`, the degrees of `A + I`.
    pub fn degrees(&self) -> Vec<f64> {
        let a = self.adjacency();
        (0..self.nodes)
            .map(|i| 1.0 + a.data()[i * self.nodes..][..self.nodes].iter().sum::<f64>())
            .collect()
    }

    /// `Â` materialized from its definition, never from the closed form.
    pub fn normalized(&self) -> Tensor<f64> {
        let p = self.nodes;
        let a = self.adjacency();
        let q: Vec<f64> = self.degrees().iter().map(|d| d.powf(-0.5)).collect();
        Tensor::from_fn([p, p], |k| {
            let (i, j) = (k / p, k % p);
            let tilde = a.data()[k] + if i == j { 1.0 } else { 0.0 };
            q[i] * tilde * q[j]
        })
    }
}

/// How `Â·G` is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Propagation {
    Dense,
    /// Column mean + broadcast; complete graphs only.
    #[default]
    Rank1,
}

/// One graph convolution `ReLU(Â·G·W)`, `W: [C_in × C_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GcnLayer<T: Scalar> {
    pub weight: Tensor<T>,
}

impl<T: Scalar> GcnLayer<T> {
    pub fn new(cin: usize, cout: usize, rng: &mut Rng) -> Self {
        Self {
            weight: fan_in_uniform(&[cin, cout], cin, rng),
        }
    }
}

fn check_layer_shapes<T: Scalar>(tape: &Tape<T>, g: Var, spec: &GraphSpec, w: Var) -> Result<()> {
    let (sg, sw) = (tape.shape(g), tape.shape(w));
    if sg.len() != 2 || sg[0] != spec.nodes() || sw.len() != 2 || sw[0] != sg[1] {
        return Err(Error::dim(format!(
            "gcn layer: node matrix {sg:?} / weight {sw:?} inconsistent with {} nodes",
            spec.nodes()
        )));
    }
    Ok(())
}

/// `ReLU(Â·G·W)` with `Â` as an explicit `P×P` matrix; costs `P²·C + P·C·C_out`
/// multiply-adds.
pub fn gcn_layer_forward<T: Scalar>(tape: &mut Tape<T>, g: Var, spec: &GraphSpec, weight: Var) -> Result<Var> {
    check_layer_shapes(tape, g, spec, weight)?;
    let a_hat = tape.constant(spec.normalized().cast());
    let ag = tape.matmul(a_hat, g)?;
    let agw = tape.matmul(ag, weight)?;
    Ok(tape.relu(agw))
}

/// Same result as [`gcn_layer_forward`] on a complete graph using
/// `P·C + C·C_out` multiply-adds: column mean, project, ReLU, broadcast.
pub fn gcn_layer_forward_rank1<T: Scalar>(
    tape: &mut Tape<T>,
    g: Var,
    spec: &GraphSpec,
    weight: Var,
) -> Result<Var> {
    if !spec.is_complete() {
        return Err(Error::UnsupportedGraph(
            "rank-1 propagation requires a complete graph".into(),
        ));
    }
    check_layer_shapes(tape, g, spec, weight)?;
    let p = spec.nodes();
    let c = tape.shape(g)[1];
    let cout = tape.shape(weight)[1];
    let mean = tape.mean(g, 0)?;
    let row = tape.reshape(mean, [1, c])?;
    let projected = tape.matmul(row, weight)?;
    let activated = tape.relu(projected);
    let index = (0..p).flat_map(|_| 0..cout).collect();
    tape.gather(activated, index, vec![p, cout])
}

/// Ordered GCN layers. Length 0 is allowed and means "no graph stage".
#[derive(Clone, Debug, PartialEq)]
pub struct GcnStack<T: Scalar> {
    pub layers: Vec<GcnLayer<T>>,
    pub propagation: Propagation,
}

impl<T: Scalar> GcnStack<T> {
    /// `depth` layers; the first maps `cin → width`, the rest `width → width`.
    pub fn new(depth: usize, cin: usize, width: usize, propagation: Propagation, rng: &mut Rng) -> Self {
        let layers = (0..depth)
            .map(|i| GcnLayer::new(if i == 0 { cin } else { width }, width, rng))
            .collect();
        Self { layers, propagation }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Output channel count given the input width.
    pub fn out_channels(&self, cin: usize) -> usize {
        self.layers.last().map_or(cin, |l| l.weight.shape()[1])
    }
}

impl<T: Scalar> Parameters<T> for GcnStack<T> {
    fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("gcn.layer{i}.weight"), &l.weight))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .map(|(i, l)| (format!("gcn.layer{i}.weight"), &mut l.weight))
            .collect()
    }
}

/// Applies every layer in order to the SPP nodes; returns `[P×C_out]`.
pub fn gcn_forward<T: Scalar>(
    tape: &mut Tape<T>,
    nodes: &NodeFeatures,
    spec: &GraphSpec,
    stack: &GcnStack<T>,
    weights: &[Var],
) -> Result<Var> {
    if nodes.nodes() != spec.nodes() {
        return Err(Error::dim(format!(
            "{} node features for a {}-node graph",
            nodes.nodes(),
            spec.nodes()
        )));
    }
    let mut g = nodes.var;
    for &w in &weights[..stack.depth()] {
        g = match stack.propagation {
            Propagation::Dense => gcn_layer_forward(tape, g, spec, w)?,
            Propagation::Rank1 => gcn_layer_forward_rank1(tape, g, spec, w)?,
        };
    }
    Ok(g)
}

/// Closed-form multiply-add counts for one layer: `(dense, rank1)`.
pub fn layer_mac_counts(p: usize, c: usize, cout: usize) -> (u64, u64) {
    let (p, c, cout) = (p as u64, c as u64, cout as u64);
    (p * p * c + p * c * cout, p * c + c * cout)
}
