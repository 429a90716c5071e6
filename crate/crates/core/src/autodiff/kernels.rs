//! Raw numeric kernels shared by forward and backward passes.

use std::ops::Range;

use crate::tensor::Scalar;

/// Geometry of a 2-D convolution over an `H×W×Cin` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// A 1×1 stride-1 unpadded convolution is a plain matrix product on the input.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unrolls input patches into a `[oh·ow × kh·kw·cin]` matrix.
pub(crate) fn im2col<T: Scalar>(input: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch_len();
    let mut cols = vec![T::zero(); g.positions() * patch];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &mut cols[(oy * g.ow + ox) * patch..][..patch];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.cin;
                    let dst = (ky * g.kw + kx) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&input[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

/// Scatter-adds patch gradients back onto the input grid.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, out: &mut [T]) {
    let patch = g.patch_len();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &cols[(oy * g.ow + ox) * patch..][..patch];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    let src = (ky * g.kw + kx) * g.cin;
                    for c in 0..g.cin {
                        out[dst + c] = out[dst + c] + row[src + c];
                    }
                }
            }
        }
    }
}

/// Adaptive bin boundaries: bin `i` of `n` over an extent `len` spans
/// `[floor(i·len/n), ceil((i+1)·len/n))`.
pub fn adaptive_bins(len: usize, n: usize) -> Vec<Range<usize>> {
    (0..n)
        .map(|i| {
            let start = i * len / n;
            let end = ((i + 1) * len).div_ceil(n);
            start..end
        })
        .collect()
}

/// Fixed-window bins: window `size`, step `stride`, floor semantics.
pub(crate) fn window_bins(len: usize, size: usize, stride: usize) -> Vec<Range<usize>> {
    let n = (len - size) / stride + 1;
    (0..n).map(|i| i * stride..i * stride + size).collect()
}

/// For each (row bin, col bin, channel) the flat input index of the first
/// row-major maximum inside the bin over an `H×W×C` map.
pub(crate) fn max_pool_indices<T: Scalar>(
    x: &[T],
    w: usize,
    c: usize,
    rows: &[Range<usize>],
    cols: &[Range<usize>],
) -> Vec<usize> {
    let mut out = Vec::with_capacity(rows.len() * cols.len() * c);
    for r in rows {
        for cb in cols {
            for ch in 0..c {
                let mut best = (r.start * w + cb.start) * c + ch;
                for y in r.clone() {
                    for xx in cb.clone() {
                        let idx = (y * w + xx) * c + ch;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

/// Source indices for nearest-neighbour upsampling `h×w×c → oh×ow×c`.
pub(crate) fn upsample_indices(h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(oh * ow * c);
    for r in 0..oh {
        let sr = r * h / oh;
        for col in 0..ow {
            let sc = col * w / ow;
            for ch in 0..c {
                out.push((sr * w + sc) * c + ch);
            }
        }
    }
    out
}

/// Flat indices of every cell of the `rows × cols` rectangle, channel-major last.
pub(crate) fn rect_indices(w: usize, c: usize, rows: &Range<usize>, cols: &Range<usize>) -> Vec<usize> {
    let mut out = Vec::with_capacity(rows.len() * cols.len() * c);
    for y in rows.clone() {
        for x in cols.clone() {
            let base = (y * w + x) * c;
            out.extend(base..base + c);
        }
    }
    out
}
