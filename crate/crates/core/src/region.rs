//! Region pooling and spatial pyramid pooling: turn a feature map into a set
//! of node feature vectors.

use std::ops::Range;

use crate::autodiff::kernels::adaptive_bins;
use crate::autodiff::{Tape, Var};
use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// How a region is summarized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DescriptorMode {
    /// Per-channel mean over the region: one node per region.
    #[default]
    Avg,
    /// Every cell of the region becomes a node, regions concatenated in order.
    Identity,
}

/// A `g×g` grid of rectangles over an `H×W` map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionSet {
    pub grid: usize,
    pub height: usize,
    pub width: usize,
    pub rows: Vec<Range<usize>>,
    pub cols: Vec<Range<usize>>,
    pub mode: DescriptorMode,
}

impl RegionSet {
    /// Regions follow the adaptive bin rule, so they tile the map exactly
    /// when `g` divides both extents and overlap by a cell otherwise.
    pub fn new(height: usize, width: usize, grid: usize) -> Result<Self> {
        if grid == 0 || grid > height.min(width) {
            return Err(Error::arg(format!(
                "region grid {grid} must lie in [1, {}] for a {height}×{width} map",
                height.min(width)
            )));
        }
        Ok(Self {
            grid,
            height,
            width,
            rows: adaptive_bins(height, grid),
            cols: adaptive_bins(width, grid),
            mode: DescriptorMode::Avg,
        })
    }

    pub fn with_mode(mut self, mode: DescriptorMode) -> Self {
        self.mode = mode;
        self
    }

    /// ω = g².
    pub fn count(&self) -> usize {
        self.grid * self.grid
    }

    /// Rectangles in row-major order.
    pub fn regions(&self) -> impl Iterator<Item = (Range<usize>, Range<usize>)> + '_ {
        self.rows
            .iter()
            .flat_map(move |r| self.cols.iter().map(move |c| (r.clone(), c.clone())))
    }
}

/// Builds the region grid for the map held in `x` (`[H×W×C]`).
pub fn extract_regions<T: Scalar>(tape: &Tape<T>, x: Var, grid: usize) -> Result<RegionSet> {
    let s = tape.shape(x);
    if s.len() != 3 {
        return Err(Error::dim(format!("extract_regions expects H×W×C, got {s:?}")));
    }
    RegionSet::new(s[0], s[1], grid)
}

/// Region descriptors as a node matrix: `[ω×C]` in avg mode, `[Σ cells × C]`
/// in identity mode.
pub fn region_descriptors<T: Scalar>(tape: &mut Tape<T>, rs: &RegionSet, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[0] != rs.height || s[1] != rs.width {
        return Err(Error::dim(format!(
            "region set built for {}×{} applied to {s:?}",
            rs.height, rs.width
        )));
    }
    let c = s[2];
    let mut rows = Vec::with_capacity(rs.count());
    for (r, col) in rs.regions() {
        let node = match rs.mode {
            DescriptorMode::Avg => {
                let v = tape.avg_pool_region(x, r, col)?;
                tape.reshape(v, [1, c])?
            }
            DescriptorMode::Identity => {
                let cells = r.len() * col.len();
                let index = crate::autodiff::kernels::rect_indices(s[1], c, &r, &col);
                tape.gather(x, index, vec![cells, c])?
            }
        };
        rows.push(node);
    }
    tape.concat(&rows)
}

/// Where a node came from: pyramid level and bin coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeOrigin {
    pub level: usize,
    pub row: usize,
    pub col: usize,
}

/// `[P×C]` node matrix with per-node provenance.
#[derive(Clone, Debug)]
pub struct NodeFeatures {
    pub var: Var,
    pub levels: Vec<usize>,
    pub provenance: Vec<NodeOrigin>,
}

impl NodeFeatures {
    pub fn nodes(&self) -> usize {
        self.provenance.len()
    }

    /// Wraps an arbitrary `[P×C]` matrix (e.g. region descriptors); provenance
    /// records row-major grid positions at level `grid`.
    pub fn from_grid<T: Scalar>(tape: &Tape<T>, var: Var, grid: usize) -> Self {
        let p = tape.shape(var)[0];
        let provenance = (0..p)
            .map(|i| NodeOrigin {
                level: grid,
                row: i / grid.max(1),
                col: i % grid.max(1),
            })
            .collect();
        Self {
            var,
            levels: vec![grid],
            provenance,
        }
    }
}

/// Node count produced by a pyramid: Σ n².
pub fn pyramid_nodes(levels: &[usize]) -> usize {
    levels.iter().map(|n| n * n).sum()
}

/// Spatial pyramid max pooling: for each level `n`, pool to `n×n` adaptive
/// bins and flatten row-major; levels are concatenated in the given order.
pub fn spp<T: Scalar>(tape: &mut Tape<T>, x: Var, levels: &[usize]) -> Result<NodeFeatures> {
    if levels.is_empty() {
        return Err(Error::arg("spp needs at least one pyramid level"));
    }
    if levels.contains(&0) {
        return Err(Error::arg(format!("spp levels {levels:?} must be positive")));
    }
    let c = *tape
        .shape(x)
        .get(2)
        .ok_or_else(|| Error::dim(format!("spp expects H×W×C, got {:?}", tape.shape(x))))?;
    let mut parts = Vec::with_capacity(levels.len());
    let mut provenance = Vec::with_capacity(pyramid_nodes(levels));
    for &n in levels {
        let pooled = tape.adaptive_max_pool2d(x, n)?;
        parts.push(tape.reshape(pooled, [n * n, c])?);
        for row in 0..n {
            for col in 0..n {
                provenance.push(NodeOrigin { level: n, row, col });
            }
        }
    }
    Ok(NodeFeatures {
        var: tape.concat(&parts)?,
        levels: levels.to_vec(),
        provenance,
    })
}

/// Nearest-neighbour upsampling of the backbone map to `height×width`.
pub fn upsample_features<T: Scalar>(
    tape: &mut Tape<T>,
    fm: &FeatureMap,
    height: usize,
    width: usize,
) -> Result<Var> {
    tape.upsample_nearest(fm.var, height, width)
}
