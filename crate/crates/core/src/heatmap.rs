//! Heatmap activation, Gaussian target rendering and argmax decoding.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, UnaryKind, Var};
use crate::dsnt::{CoordGrid, CoordPair};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sub-pixel shift applied by [`argmax_decode`], in pixels.
pub const ARGMAX_SHIFT_PX: f64 = 0.25;

static DEGENERATE_SLICES: AtomicUsize = AtomicUsize::new(0);

/// Number of all-zero rectified slices replaced by a uniform heatmap since
/// process start.
pub fn degenerate_slice_count() -> usize {
    DEGENERATE_SLICES.load(Ordering::Relaxed)
}

/// Rectification applied before L¹ normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RectifierKind {
    /// `exp(z)`
    Softmax,
    /// `|z|`
    Abs,
    /// `max(0, z)`
    Relu,
    /// `1 / (1 + exp(-z))`
    Sigmoid,
}

impl RectifierKind {
    pub const ALL: [RectifierKind; 4] = [
        RectifierKind::Softmax,
        RectifierKind::Abs,
        RectifierKind::Relu,
        RectifierKind::Sigmoid,
    ];
}

/// Rectifies `raw` (`…×m×n`) and normalizes every spatial slice to sum to one.
///
/// Fails with [`Error::DegenerateNormalization`] when a rectified slice is all
/// zero, which only `Relu` can produce.
pub fn activate(g: &mut Graph, raw: Var, kind: RectifierKind) -> Result<Var> {
    match kind {
        RectifierKind::Softmax => g.spatial_softmax(raw),
        other => {
            let rectified = rectify(g, raw, other);
            g.spatial_l1_normalize(rectified)
        }
    }
}

/// Like [`activate`], but an all-zero slice becomes the uniform heatmap and
/// bumps [`degenerate_slice_count`] instead of failing.
pub fn activate_or_uniform(g: &mut Graph, raw: Var, kind: RectifierKind) -> Result<Var> {
    if kind == RectifierKind::Softmax {
        return g.spatial_softmax(raw);
    }
    let rectified = rectify(g, raw, kind);
    let shape = g.shape(rectified).to_vec();
    if shape.len() < 2 {
        return Err(Error::InvalidAxis {
            axis: 1,
            rank: shape.len(),
        });
    }
    let inner = shape[shape.len() - 2] * shape[shape.len() - 1];
    let mut fill = Tensor::zeros(&shape);
    let mut degenerate = 0;
    for (slice, out) in g
        .value(rectified)
        .data()
        .chunks(inner)
        .zip(fill.data_mut().chunks_mut(inner))
    {
        if slice.iter().sum::<f64>() == 0.0 {
            out.fill(1.0);
            degenerate += 1;
        }
    }
    if degenerate == 0 {
        return g.spatial_l1_normalize(rectified);
    }
    log::warn!("{degenerate} degenerate heatmap slice(s) replaced by uniform");
    DEGENERATE_SLICES.fetch_add(degenerate, Ordering::Relaxed);
    let fill = g.constant(fill);
    let patched = g.add(rectified, fill)?;
    g.spatial_l1_normalize(patched)
}

fn rectify(g: &mut Graph, raw: Var, kind: RectifierKind) -> Var {
    let unary = match kind {
        RectifierKind::Softmax => UnaryKind::Exp,
        RectifierKind::Abs => UnaryKind::Abs,
        RectifierKind::Relu => UnaryKind::Relu,
        RectifierKind::Sigmoid => UnaryKind::Sigmoid,
    };
    g.unary(raw, unary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetNorm {
    /// Peak of the continuous Gaussian is 1.
    Amplitude,
    /// Pixel values sum to 1.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetHeatmapSpec {
    pub sigma_pixels: f64,
    pub normalize: TargetNorm,
}

impl TargetHeatmapSpec {
    pub fn new(sigma_pixels: f64, normalize: TargetNorm) -> Result<Self> {
        if !(sigma_pixels > 0.0 && sigma_pixels.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "target sigma must be positive, got {sigma_pixels}"
            )));
        }
        Ok(Self {
            sigma_pixels,
            normalize,
        })
    }
}

impl Default for TargetHeatmapSpec {
    fn default() -> Self {
        Self {
            sigma_pixels: 1.0,
            normalize: TargetNorm::Amplitude,
        }
    }
}

/// Renders a Gaussian centred on `p` over an `m×n` grid of pixel centres.
///
/// The standard deviation is given in pixels and converted per axis
/// (`2σ/n` horizontally, `2σ/m` vertically), so the blob stays circular in
/// pixel space on non-square grids.
pub fn render_target(p: CoordPair, spec: &TargetHeatmapSpec, m: usize, n: usize) -> Tensor {
    let grid = CoordGrid::new(m, n);
    render_on_grid(p, spec, &grid)
}

pub(crate) fn render_on_grid(p: CoordPair, spec: &TargetHeatmapSpec, grid: &CoordGrid) -> Tensor {
    let sx = 2.0 * spec.sigma_pixels / grid.cols() as f64;
    let sy = 2.0 * spec.sigma_pixels / grid.rows() as f64;
    let mut out = Tensor::zeros(&[grid.rows(), grid.cols()]);
    for (o, (&x, &y)) in out
        .data_mut()
        .iter_mut()
        .zip(grid.x().data().iter().zip(grid.y().data()))
    {
        let dx = (x - p.x) / sx;
        let dy = (y - p.y) / sy;
        *o = (-0.5 * (dx * dx + dy * dy)).exp();
    }
    if spec.normalize == TargetNorm::Sum {
        let total = out.sum();
        if total > 0.0 {
            out.data_mut().iter_mut().for_each(|v| *v /= total);
        } else {
            // Every pixel underflowed: fall back to the nearest pixel.
            let idx = nearest_pixel(p, grid);
            out.data_mut()[idx] = 1.0;
        }
    }
    out
}

fn nearest_pixel(p: CoordPair, grid: &CoordGrid) -> usize {
    let (m, n) = (grid.rows(), grid.cols());
    let col = (((p.x + 1.0) * n as f64 / 2.0).floor() as isize).clamp(0, n as isize - 1) as usize;
    let row = (((p.y + 1.0) * m as f64 / 2.0).floor() as isize).clamp(0, m as isize - 1) as usize;
    row * n + col
}

/// Brightest-pixel decoding with a quarter-pixel nudge.
///
/// The first maximum in row-major order wins. Along each axis, when both
/// neighbours exist and differ, the estimate moves [`ARGMAX_SHIFT_PX`] pixels
/// toward the brighter one.
pub fn argmax_decode(heatmap: &Tensor) -> Result<CoordPair> {
    let shape = heatmap.shape();
    if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
        return Err(Error::InvalidConfig(format!(
            "argmax_decode expects a non-empty m×n heatmap, got {shape:?}"
        )));
    }
    let (m, n) = (shape[0], shape[1]);
    let data = heatmap.data();
    let mut best = 0;
    for (i, &v) in data.iter().enumerate() {
        if v > data[best] {
            best = i;
        }
    }
    let (row, col) = (best / n, best % n);
    let mut px = col as f64;
    let mut py = row as f64;
    if col > 0 && col + 1 < n {
        let (l, r) = (data[best - 1], data[best + 1]);
        px += ARGMAX_SHIFT_PX * sign(r - l);
    }
    if row > 0 && row + 1 < m {
        let (u, d) = (data[best - n], data[best + n]);
        py += ARGMAX_SHIFT_PX * sign(d - u);
    }
    Ok(CoordPair::new(
        pixel_to_normalized(px, n),
        pixel_to_normalized(py, m),
    ))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Maps a 0-based (possibly fractional) pixel index to normalized coordinates.
pub fn pixel_to_normalized(index: f64, size: usize) -> f64 {
    (2.0 * index + 1.0 - size as f64) / size as f64
}

/// Inverse of [`pixel_to_normalized`].
pub fn normalized_to_pixel(coord: f64, size: usize) -> f64 {
    (coord * size as f64 + size as f64 - 1.0) / 2.0
}
