//! The differentiable spatial-to-numerical transform and its losses.
//!
//! A normalized heatmap `Ẑ` (non-negative, summing to one) is read as the
//! probability mass function of a discrete random vector over pixel centres.
//! The transform returns its mean, `μ = (⟨Ẑ, X⟩_F, ⟨Ẑ, Y⟩_F)`, where the
//! constant grids `X` and `Y` hold every pixel's own normalized coordinate.
//! Everything here is built from graph operations and is differentiable with
//! respect to the heatmap.
//!
//! Heatmap variables are shaped `N×K×m×n` (batch, keypoint, rows, columns);
//! coordinate variables are shaped `N×K×2` with `(x, y)` in the last axis.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_mismatch, Error, Result};
use crate::heatmap::{render_on_grid, TargetHeatmapSpec, TargetNorm};
use crate::tensor::Tensor;

/// A point in normalized image coordinates: the image spans `[-1, 1]` on both
/// axes with `(-1, -1)` at the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CoordPair {
    pub x: f64,
    pub y: f64,
}

impl CoordPair {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &CoordPair) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Pixel-centre coordinate matrices for an `m×n` heatmap.
///
/// `X[i, j] = (2j − (n + 1)) / n` and `Y[i, j] = (2i − (m + 1)) / m` for
/// 1-based `i, j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordGrid {
    x: Tensor,
    y: Tensor,
    rows: usize,
    cols: usize,
}

impl CoordGrid {
    pub fn new(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "coordinate grid needs at least one pixel");
        let mut x = Tensor::zeros(&[rows, cols]);
        let mut y = Tensor::zeros(&[rows, cols]);
        let (m, n) = (rows as f64, cols as f64);
        for (off, (xv, yv)) in x.data_mut().iter_mut().zip(y.data_mut()).enumerate() {
            let i = (off / cols + 1) as f64;
            let j = (off % cols + 1) as f64;
            *xv = (2.0 * j - (n + 1.0)) / n;
            *yv = (2.0 * i - (m + 1.0)) / m;
        }
        Self { x, y, rows, cols }
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn y(&self) -> &Tensor {
        &self.y
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Largest `|x|` and `|y|` reachable by the transform: the outermost pixel centres.
    pub fn hull(&self) -> (f64, f64) {
        (
            (self.cols - 1) as f64 / self.cols as f64,
            (self.rows - 1) as f64 / self.rows as f64,
        )
    }

    fn check(&self, shape: &[usize]) -> Result<()> {
        let r = shape.len();
        if r < 2 || shape[r - 2] != self.rows || shape[r - 1] != self.cols {
            return Err(shape_mismatch("coordinate grid", shape, &[self.rows, self.cols]));
        }
        Ok(())
    }
}

/// Which regularizer is added to the Euclidean loss. Target standard deviations
/// are in heatmap pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegularizerKind {
    None,
    Variance { sigma_t: f64 },
    Kl { sigma_t: f64 },
    Js { sigma_t: f64 },
}

impl RegularizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            RegularizerKind::None => "none",
            RegularizerKind::Variance { .. } => "variance",
            RegularizerKind::Kl { .. } => "kl",
            RegularizerKind::Js { .. } => "js",
        }
    }

    fn sigma_t(&self) -> Option<f64> {
        match *self {
            RegularizerKind::None => None,
            RegularizerKind::Variance { sigma_t }
            | RegularizerKind::Kl { sigma_t }
            | RegularizerKind::Js { sigma_t } => Some(sigma_t),
        }
    }
}

/// Regularizer plus its coefficient λ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regularization {
    pub kind: RegularizerKind,
    pub lambda: f64,
}

impl Regularization {
    pub const NONE: Regularization = Regularization {
        kind: RegularizerKind::None,
        lambda: 0.0,
    };

    /// Jensen-Shannon regularization with σ_t = 1 px and λ = 1.
    pub fn default_js() -> Self {
        Self {
            kind: RegularizerKind::Js { sigma_t: 1.0 },
            lambda: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "regularization coefficient must be non-negative, got {}",
                self.lambda
            )));
        }
        if let Some(s) = self.kind.sigma_t() {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidConfig(format!("sigma_t must be positive, got {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    Kl,
    Js,
}

/// `μ = (⟨Ẑ, X⟩_F, ⟨Ẑ, Y⟩_F)`, shaped like the heatmap's leading axes plus a
/// trailing axis of 2.
pub fn dsnt(g: &mut Graph, heatmap: Var, grid: &CoordGrid) -> Result<Var> {
    grid.check(g.shape(heatmap))?;
    let x = g.frobenius_inner(heatmap, grid.x())?;
    let y = g.frobenius_inner(heatmap, grid.y())?;
    g.stack_last(&[x, y])
}

/// `(Var[c_x], Var[c_y])` with `Var[c_x] = ⟨Ẑ, (X − μ_x)⊙(X − μ_x)⟩_F`.
pub fn coord_variance(g: &mut Graph, heatmap: Var, grid: &CoordGrid, mu: Var) -> Result<Var> {
    grid.check(g.shape(heatmap))?;
    let mx = g.select_last(mu, 0)?;
    let my = g.select_last(mu, 1)?;
    let vx = g.weighted_squared_deviation(heatmap, grid.x(), mx)?;
    let vy = g.weighted_squared_deviation(heatmap, grid.y(), my)?;
    g.stack_last(&[vx, vy])
}

/// Mean of `v` (shaped `N×K`) over the entries whose mask is set. An empty
/// mask gives a constant zero.
fn masked_mean(g: &mut Graph, v: Var, mask: &[bool]) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    if shape.iter().product::<usize>() != mask.len() {
        return Err(shape_mismatch("visibility mask", &shape, &[mask.len()]));
    }
    let visible = mask.iter().filter(|&&m| m).count();
    let weights = Tensor::from_vec(
        &shape,
        mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
    )?;
    let masked = g.scale(v, &weights)?;
    let total = g.sum_all(masked);
    let denom = if visible == 0 { 0.0 } else { 1.0 / visible as f64 };
    Ok(g.mul_scalar(total, denom))
}

/// Mean over visible keypoints of `‖p − μ‖₂`.
pub fn euclidean_loss(g: &mut Graph, mu: Var, target: &Tensor, mask: &[bool]) -> Result<Var> {
    if g.shape(mu) != target.shape() {
        return Err(shape_mismatch("euclidean_loss", g.shape(mu), target.shape()));
    }
    let p = g.constant(target.clone());
    let diff = g.sub(mu, p)?;
    let dist = g.euclidean_norm(diff)?;
    masked_mean(g, dist, mask)
}

fn variance_targets(sigma_t: f64, grid: &CoordGrid) -> (f64, f64) {
    let sx = 2.0 * sigma_t / grid.cols() as f64;
    let sy = 2.0 * sigma_t / grid.rows() as f64;
    (sx * sx, sy * sy)
}

/// `(Var[c_x] − σ_x²)² + (Var[c_y] − σ_y²)²`, averaged over visible keypoints.
/// `sigma_t` is in pixels and is converted per axis (`σ_x = 2σ_t/n`).
pub fn variance_reg(g: &mut Graph, heatmap: Var, grid: &CoordGrid, sigma_t: f64, mask: &[bool]) -> Result<Var> {
    let mu = dsnt(g, heatmap, grid)?;
    let var = coord_variance(g, heatmap, grid, mu)?;
    let (tx, ty) = variance_targets(sigma_t, grid);
    let shape = g.shape(var).to_vec();
    let count = shape.iter().product::<usize>() / 2;
    let target: Vec<f64> = (0..count).flat_map(|_| [tx, ty]).collect();
    let target = g.constant(Tensor::from_vec(&shape, target)?);
    let diff = g.sub(var, target)?;
    let sq = g.square(diff);
    let axis = shape.len() - 1;
    let per_keypoint = g.sum(sq, &[axis])?;
    masked_mean(g, per_keypoint, mask)
}

/// Discretized `𝒩(p, σ_t²I)` targets, one per keypoint, shaped `N×K×m×n`.
pub fn gaussian_targets(target: &Tensor, grid: &CoordGrid, sigma_t: f64) -> Result<Tensor> {
    let shape = target.shape();
    if shape.last() != Some(&2) {
        return Err(shape_mismatch("gaussian_targets", shape, &[2]));
    }
    let spec = TargetHeatmapSpec {
        sigma_pixels: sigma_t,
        normalize: TargetNorm::Sum,
    };
    let mut out_shape = shape[..shape.len() - 1].to_vec();
    out_shape.extend([grid.rows(), grid.cols()]);
    let mut data = Vec::with_capacity(out_shape.iter().product());
    for p in target.data().chunks(2) {
        data.extend_from_slice(render_on_grid(CoordPair::new(p[0], p[1]), &spec, grid).data());
    }
    Tensor::from_vec(&out_shape, data)
}

/// Divergence between each heatmap and a discretized Gaussian centred on its
/// ground-truth coordinate, averaged over visible keypoints.
pub fn divergence_reg(
    g: &mut Graph,
    heatmap: Var,
    grid: &CoordGrid,
    target: &Tensor,
    kind: Divergence,
    sigma_t: f64,
    mask: &[bool],
) -> Result<Var> {
    grid.check(g.shape(heatmap))?;
    let q = gaussian_targets(target, grid, sigma_t)?;
    if q.shape() != g.shape(heatmap) {
        return Err(shape_mismatch("divergence_reg", g.shape(heatmap), q.shape()));
    }
    let d = match kind {
        Divergence::Kl => g.kl_divergence(heatmap, &q)?,
        Divergence::Js => g.js_divergence(heatmap, &q)?,
    };
    masked_mean(g, d, mask)
}

/// Regularization term alone (not multiplied by λ).
pub fn regularizer(
    g: &mut Graph,
    heatmap: Var,
    grid: &CoordGrid,
    target: &Tensor,
    kind: RegularizerKind,
    mask: &[bool],
) -> Result<Option<Var>> {
    Ok(match kind {
        RegularizerKind::None => None,
        RegularizerKind::Variance { sigma_t } => Some(variance_reg(g, heatmap, grid, sigma_t, mask)?),
        RegularizerKind::Kl { sigma_t } => {
            Some(divergence_reg(g, heatmap, grid, target, Divergence::Kl, sigma_t, mask)?)
        }
        RegularizerKind::Js { sigma_t } => {
            Some(divergence_reg(g, heatmap, grid, target, Divergence::Js, sigma_t, mask)?)
        }
    })
}

/// `L = L_euc(DSNT(Ẑ), p) + λ·L_reg(Ẑ)`.
///
/// Returns the loss and the predicted coordinates.
pub fn combined_loss(
    g: &mut Graph,
    heatmap: Var,
    grid: &CoordGrid,
    target: &Tensor,
    mask: &[bool],
    reg: &Regularization,
) -> Result<(Var, Var)> {
    reg.validate()?;
    let mu = dsnt(g, heatmap, grid)?;
    let euc = euclidean_loss(g, mu, target, mask)?;
    if reg.lambda == 0.0 {
        return Ok((euc, mu));
    }
    let Some(r) = regularizer(g, heatmap, grid, target, reg.kind, mask)? else {
        return Ok((euc, mu));
    };
    let weighted = g.mul_scalar(r, reg.lambda);
    Ok((g.add(euc, weighted)?, mu))
}

/// Pixel-wise mean squared error against a constant target.
pub fn mse_heatmap_loss(g: &mut Graph, raw: Var, target: &Tensor) -> Result<Var> {
    if g.shape(raw) != target.shape() {
        return Err(shape_mismatch("mse_heatmap_loss", g.shape(raw), target.shape()));
    }
    let t = g.constant(target.clone());
    let diff = g.sub(raw, t)?;
    let sq = g.square(diff);
    Ok(g.mean_all(sq))
}

/// Plain-value transform of one `m×n` heatmap, for inference and tests.
pub fn dsnt_value(heatmap: &Tensor, grid: &CoordGrid) -> Result<CoordPair> {
    grid.check(heatmap.shape())?;
    if heatmap.rank() != 2 {
        return Err(shape_mismatch("dsnt_value", heatmap.shape(), &[grid.rows(), grid.cols()]));
    }
    let dot = |w: &Tensor| heatmap.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
    Ok(CoordPair::new(dot(grid.x()), dot(grid.y())))
}

/// The 5×5 heatmap of the worked example: 0.6 at (row 3, col 4) and 0.1 at
/// each of its four neighbours (1-based).
pub fn worked_example_heatmap() -> Tensor {
    let mut h = Tensor::zeros(&[5, 5]);
    h.set(&[2, 3], 0.6);
    h.set(&[1, 3], 0.1);
    h.set(&[2, 2], 0.1);
    h.set(&[2, 4], 0.1);
    h.set(&[3, 3], 0.1);
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var4(g: &mut Graph, t: &Tensor) -> Var {
        let s = t.shape();
        g.variable(t.reshape(&[1, 1, s[0], s[1]]).unwrap())
    }

    #[test]
    fn grid_examples() {
        let g5 = CoordGrid::new(3, 5);
        let row: Vec<f64> = (0..5).map(|j| g5.x().get(&[1, j])).collect();
        let expected = [-0.8, -0.4, 0.0, 0.4, 0.8];
        for (a, b) in row.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let g1 = CoordGrid::new(1, 1);
        assert_eq!(g1.x().data(), &[0.0]);
        assert_eq!(g1.y().data(), &[0.0]);
        let g2 = CoordGrid::new(1, 2);
        assert_eq!(g2.x().data(), &[-0.5, 0.5]);
    }

    #[test]
    fn grid_axes_are_separable_and_inside() {
        let grid = CoordGrid::new(4, 7);
        for i in 0..4 {
            for j in 0..7 {
                assert_eq!(grid.x().get(&[i, j]), grid.x().get(&[0, j]));
                assert_eq!(grid.y().get(&[i, j]), grid.y().get(&[i, 0]));
                assert!(grid.x().get(&[i, j]).abs() < 1.0);
                assert!(grid.y().get(&[i, j]).abs() < 1.0);
            }
        }
        // Pixel edges: centre ± half a pitch reaches the image corners.
        assert_eq!(grid.x().get(&[0, 0]) - 1.0 / 7.0, -1.0);
        assert_eq!(grid.y().get(&[3, 0]) + 1.0 / 4.0, 1.0);
    }

    #[test]
    fn worked_example() {
        let grid = CoordGrid::new(5, 5);
        let mut g = Graph::new();
        let h = var4(&mut g, &worked_example_heatmap());
        let mu = dsnt(&mut g, h, &grid).unwrap();
        let v = g.value(mu).data();
        assert!((v[0] - 0.4).abs() < 1e-12);
        assert!(v[1].abs() < 1e-12);
    }

    #[test]
    fn uniform_and_delta() {
        let grid = CoordGrid::new(4, 6);
        let u = Tensor::full(&[4, 6], 1.0 / 24.0);
        let c = dsnt_value(&u, &grid).unwrap();
        assert!(c.x.abs() < 1e-15 && c.y.abs() < 1e-15);

        let mut d = Tensor::zeros(&[4, 6]);
        d.set(&[1, 4], 1.0);
        let c = dsnt_value(&d, &grid).unwrap();
        assert_eq!(c, CoordPair::new(grid.x().get(&[1, 4]), grid.y().get(&[1, 4])));
    }

    #[test]
    fn dsnt_rejects_wrong_grid() {
        let mut g = Graph::new();
        let h = g.variable(Tensor::zeros(&[1, 1, 4, 4]));
        assert!(dsnt(&mut g, h, &CoordGrid::new(4, 5)).is_err());
    }

    #[test]
    fn dsnt_gradient_is_grid() {
        let grid = CoordGrid::new(3, 4);
        let mut g = Graph::new();
        let h = g.variable(Tensor::full(&[1, 1, 3, 4], 1.0 / 12.0));
        let mu = dsnt(&mut g, h, &grid).unwrap();
        let x = g.select_last(mu, 0).unwrap();
        let loss = g.sum_all(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(h).data(), grid.x().data());
    }

    #[test]
    fn variance_examples() {
        let grid = CoordGrid::new(5, 5);
        let mut g = Graph::new();
        let mut delta = Tensor::zeros(&[5, 5]);
        delta.set(&[2, 2], 1.0);
        let h = var4(&mut g, &delta);
        let mu = dsnt(&mut g, h, &grid).unwrap();
        let v = coord_variance(&mut g, h, &grid, mu).unwrap();
        assert_eq!(g.value(v).data(), &[0.0, 0.0]);

        let mut split = Tensor::zeros(&[5, 5]);
        split.set(&[2, 1], 0.5);
        split.set(&[2, 3], 0.5);
        let h = var4(&mut g, &split);
        let mu = dsnt(&mut g, h, &grid).unwrap();
        let v = coord_variance(&mut g, h, &grid, mu).unwrap();
        // mean 0, offsets ±0.4
        let oracle = 0.5 * 0.4f64.powi(2) + 0.5 * (-0.4f64).powi(2);
        assert!((g.value(v).data()[0] - oracle).abs() < 1e-15);
        assert!((g.value(v).data()[0] - 0.16).abs() < 1e-15);
    }

    #[test]
    fn variance_of_uniform_row() {
        let n = 7;
        let grid = CoordGrid::new(1, n);
        let xs: Vec<f64> = (0..n).map(|j| grid.x().data()[j]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let oracle = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let mut g = Graph::new();
        let h = g.variable(Tensor::full(&[1, 1, 1, n], 1.0 / n as f64));
        let mu = dsnt(&mut g, h, &grid).unwrap();
        let v = coord_variance(&mut g, h, &grid, mu).unwrap();
        assert!((g.value(v).data()[0] - oracle).abs() < 1e-15);
    }

    #[test]
    fn euclidean_examples() {
        let mut g = Graph::new();
        let mu = g.variable(Tensor::from_vec(&[1, 2, 2], vec![0.0, 0.0, 0.5, 0.5]).unwrap());
        let p = Tensor::from_vec(&[1, 2, 2], vec![0.3, 0.4, 0.9, -0.1]).unwrap();
        let l = euclidean_loss(&mut g, mu, &p, &[true, false]).unwrap();
        assert!((g.value(l).item() - 0.5).abs() < 1e-15);
        g.backward(l).unwrap();
        let grad = g.grad(mu);
        assert_eq!(&grad.data()[2..], &[0.0, 0.0]);

        let at_mu = g.value(mu).clone();
        let same = euclidean_loss(&mut g, mu, &at_mu, &[true, true]).unwrap();
        assert_eq!(g.value(same).item(), 0.0);

        let none = euclidean_loss(&mut g, mu, &p, &[false, false]).unwrap();
        assert_eq!(g.value(none).item(), 0.0);
    }

    #[test]
    fn variance_reg_of_delta() {
        let grid = CoordGrid::new(7, 7);
        let mut g = Graph::new();
        let mut delta = Tensor::zeros(&[7, 7]);
        delta.set(&[3, 3], 1.0);
        let h = var4(&mut g, &delta);
        let r = variance_reg(&mut g, h, &grid, 1.0, &[true]).unwrap();
        let expected = 2.0 * (2.0f64 / 7.0).powi(4);
        assert!((g.value(r).item() - expected).abs() < 1e-15);
        assert!((g.value(r).item() - 0.013328).abs() < 1e-6);
    }

    #[test]
    fn variance_reg_zero_when_matched() {
        // A plus-shaped heatmap; pick σ_t so the x target equals its x variance.
        let grid = CoordGrid::new(5, 5);
        let mut h = Tensor::zeros(&[5, 5]);
        h.set(&[2, 1], 0.25);
        h.set(&[2, 3], 0.25);
        h.set(&[1, 2], 0.25);
        h.set(&[3, 2], 0.25);
        let mut g = Graph::new();
        let v = var4(&mut g, &h);
        let mu = dsnt(&mut g, v, &grid).unwrap();
        let var = coord_variance(&mut g, v, &grid, mu).unwrap();
        let (vx, vy) = (g.value(var).data()[0], g.value(var).data()[1]);
        assert_eq!(vx, vy);
        let sigma = vx.sqrt() * 5.0 / 2.0;
        let r = variance_reg(&mut g, v, &grid, sigma, &[true]).unwrap();
        assert!(g.value(r).item() < 1e-30);
    }

    #[test]
    fn divergences_zero_for_target_and_ln2_for_disjoint() {
        let grid = CoordGrid::new(7, 7);
        let p = Tensor::from_vec(&[1, 1, 2], vec![0.1, -0.2]).unwrap();
        let q = gaussian_targets(&p, &grid, 1.0).unwrap();
        let mut g = Graph::new();
        let h = g.variable(q.clone());
        for kind in [Divergence::Kl, Divergence::Js] {
            let d = divergence_reg(&mut g, h, &grid, &p, kind, 1.0, &[true]).unwrap();
            assert!(g.value(d).item().abs() < 1e-15);
        }

        let mut a = Tensor::zeros(&[1, 1, 2, 2]);
        a.set(&[0, 0, 0, 0], 1.0);
        let mut b = Tensor::zeros(&[1, 1, 2, 2]);
        b.set(&[0, 0, 1, 1], 1.0);
        let av = g.variable(a);
        let js = g.js_divergence(av, &b).unwrap();
        assert!((g.value(js).item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn combined_loss_reductions() {
        let grid = CoordGrid::new(7, 7);
        let p = Tensor::from_vec(&[1, 1, 2], vec![0.2, -0.3]).unwrap();
        let q = gaussian_targets(&p, &grid, 1.0).unwrap();
        let mut g = Graph::new();
        let h = g.variable(q.clone());
        let (plain, mu) = combined_loss(&mut g, h, &grid, &p, &[true], &Regularization::NONE).unwrap();
        let euc = euclidean_loss(&mut g, mu, &p, &[true]).unwrap();
        assert_eq!(g.value(plain).item(), g.value(euc).item());

        let zero_lambda = Regularization {
            kind: RegularizerKind::Kl { sigma_t: 1.0 },
            lambda: 0.0,
        };
        let (l0, _) = combined_loss(&mut g, h, &grid, &p, &[true], &zero_lambda).unwrap();
        assert_eq!(g.value(l0).item(), g.value(euc).item());

        let (ljs, _) = combined_loss(&mut g, h, &grid, &p, &[true], &Regularization::default_js()).unwrap();
        assert!((g.value(ljs).item() - g.value(euc).item()).abs() < 1e-15);
    }

    #[test]
    fn regularization_validation() {
        let bad = Regularization {
            kind: RegularizerKind::Js { sigma_t: 0.0 },
            lambda: 1.0,
        };
        assert!(bad.validate().is_err());
        let neg = Regularization {
            kind: RegularizerKind::None,
            lambda: -1.0,
        };
        assert!(neg.validate().is_err());
        assert!(Regularization::default_js().validate().is_ok());
    }

    #[test]
    fn mse_examples() {
        let t = Tensor::from_vec(&[1, 1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut g = Graph::new();
        let same = g.variable(t.clone());
        let l = mse_heatmap_loss(&mut g, same, &t).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let shifted = g.variable(t.map(|v| v + 1.0));
        let l = mse_heatmap_loss(&mut g, shifted, &t).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 1e-15);
        let wrong = g.variable(Tensor::zeros(&[1, 1, 2, 3]));
        assert!(mse_heatmap_loss(&mut g, wrong, &t).is_err());
    }
}
