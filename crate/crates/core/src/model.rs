//! A small fully convolutional backbone with interchangeable coordinate heads.
//!
//! The backbone is a stack of 3×3 convolutions with ReLU, the first
//! `downsample_count` of them with stride 2, followed by a 1×1 convolution that
//! emits one raw heatmap per keypoint. Heads only differ in what they do with
//! those raw heatmaps:
//!
//! | head | coordinates                                   | loss                      |
//! |------|-----------------------------------------------|---------------------------|
//! | HM   | argmax decode (outside the graph)             | pixel MSE vs. Gaussians   |
//! | FC   | softmax → flatten → linear                    | Euclidean                 |
//! | DSNT | softmax → DSNT                                | Euclidean (+ regularizer) |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dsnt::{combined_loss, dsnt, euclidean_loss, mse_heatmap_loss, CoordGrid, CoordPair, Regularization};
use crate::error::{shape_mismatch, Error, Result};
use crate::heatmap::{activate_or_uniform, argmax_decode, render_on_grid, RectifierKind, TargetHeatmapSpec, TargetNorm};
use crate::tensor::Tensor;

const KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_channels: usize,
    /// Side length of the square input image in pixels.
    pub input_size: usize,
    pub stage_widths: Vec<usize>,
    /// Number of leading stages that use stride 2.
    pub downsample_count: usize,
    pub keypoints: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_channels: 1,
            input_size: 32,
            stage_widths: vec![16, 32, 32],
            downsample_count: 2,
            keypoints: 1,
        }
    }
}

impl BackboneConfig {
    /// Heatmap side length, `input_size / 2^downsample_count`.
    pub fn heatmap_size(&self) -> Result<usize> {
        self.validate()?;
        Ok(self.input_size >> self.downsample_count)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.input_channels == 0 || self.keypoints == 0 || self.input_size == 0 {
            return bad("input channels, input size and keypoints must be positive".into());
        }
        if self.stage_widths.is_empty() || self.stage_widths.contains(&0) {
            return bad(format!("stage widths must be non-empty and positive: {:?}", self.stage_widths));
        }
        if self.downsample_count > self.stage_widths.len() {
            return bad(format!(
                "downsample count {} exceeds the {} available stages",
                self.downsample_count,
                self.stage_widths.len()
            ));
        }
        let factor = 1usize << self.downsample_count;
        if self.input_size % factor != 0 || self.input_size / factor < 4 {
            return bad(format!(
                "input size {} with {} downsamplings does not give an integral heatmap of at least 4 px",
                self.input_size, self.downsample_count
            ));
        }
        Ok(())
    }

    /// Backbone configured for a target heatmap resolution.
    pub fn with_heatmap_size(&self, size: usize) -> Result<Self> {
        if size == 0 || self.input_size % size != 0 || !(self.input_size / size).is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "heatmap size {size} is not reachable from input size {} by halving",
                self.input_size
            )));
        }
        let cfg = Self {
            downsample_count: (self.input_size / size).trailing_zeros() as usize,
            ..self.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Output strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "head", rename_all = "snake_case")]
pub enum HeadKind {
    HeatmapMatching { target: TargetHeatmapSpec },
    FullyConnected,
    Dsnt { regularization: Regularization },
}

impl HeadKind {
    pub fn hm() -> Self {
        HeadKind::HeatmapMatching {
            target: TargetHeatmapSpec {
                sigma_pixels: 1.0,
                normalize: TargetNorm::Amplitude,
            },
        }
    }

    pub fn fc() -> Self {
        HeadKind::FullyConnected
    }

    pub fn dsnt() -> Self {
        HeadKind::Dsnt {
            regularization: Regularization::NONE,
        }
    }

    /// DSNT with Jensen-Shannon regularization, σ_t = 1, λ = 1.
    pub fn dsntr() -> Self {
        HeadKind::Dsnt {
            regularization: Regularization::default_js(),
        }
    }

    /// Short label: `HM`, `FC`, `DSNT` or `DSNTr`.
    pub fn label(&self) -> &'static str {
        match self {
            HeadKind::HeatmapMatching { .. } => "HM",
            HeadKind::FullyConnected => "FC",
            HeadKind::Dsnt { regularization } => {
                if regularization.lambda > 0.0 && regularization.kind != crate::dsnt::RegularizerKind::None {
                    "DSNTr"
                } else {
                    "DSNT"
                }
            }
        }
    }

    /// Parses the short labels accepted by [`HeadKind::label`] (case-insensitive).
    pub fn from_label(label: &str) -> Result<Self> {
        match label.to_ascii_lowercase().as_str() {
            "hm" => Ok(Self::hm()),
            "fc" => Ok(Self::fc()),
            "dsnt" => Ok(Self::dsnt()),
            "dsntr" => Ok(Self::dsntr()),
            other => Err(Error::InvalidConfig(format!("unknown head '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            HeadKind::HeatmapMatching { target } => TargetHeatmapSpec::new(target.sigma_pixels, target.normalize).map(|_| ()),
            HeadKind::FullyConnected => Ok(()),
            HeadKind::Dsnt { regularization } => regularization.validate(),
        }
    }
}

/// Architecture description; together with the parameter tensors it fully
/// determines a [`Model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: BackboneConfig,
    pub head: HeadKind,
    pub rectifier: RectifierKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    grid: CoordGrid,
    names: Vec<String>,
    params: Vec<Tensor>,
    backbone_params: usize,
}

/// One recorded forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    pub graph: Graph,
    /// Parameter leaves, in [`Model::params`] order.
    pub params: Vec<Var>,
    /// Raw heatmaps, `N×K×m×n`.
    pub raw: Var,
    /// Normalized heatmaps (FC and DSNT heads).
    pub heatmap: Option<Var>,
    /// Differentiable coordinates, `N×K×2` (FC and DSNT heads).
    pub coords: Option<Var>,
}

impl Model {
    /// Fresh model with Glorot-uniform weights and zero biases.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.backbone.validate()?;
        spec.head.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = &spec.backbone;
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut in_ch = b.input_channels;
        for (i, &w) in b.stage_widths.iter().enumerate() {
            let k2 = KERNEL * KERNEL;
            names.push(format!("conv{i}.weight"));
            params.push(Tensor::glorot_uniform(&[w, in_ch, KERNEL, KERNEL], in_ch * k2, w * k2, &mut rng));
            names.push(format!("conv{i}.bias"));
            params.push(Tensor::zeros(&[w]));
            in_ch = w;
        }
        let k = b.keypoints;
        names.push("heatmap.weight".into());
        params.push(Tensor::glorot_uniform(&[k, in_ch, 1, 1], in_ch, k, &mut rng));
        names.push("heatmap.bias".into());
        params.push(Tensor::zeros(&[k]));
        let backbone_params = params.len();

        let hm = b.heatmap_size()?;
        if spec.head == HeadKind::FullyConnected {
            let (fan_in, fan_out) = (k * hm * hm, 2 * k);
            names.push("fc.weight".into());
            params.push(Tensor::glorot_uniform(&[fan_in, fan_out], fan_in, fan_out, &mut rng));
            names.push("fc.bias".into());
            params.push(Tensor::zeros(&[fan_out]));
        }
        Ok(Self {
            grid: CoordGrid::new(hm, hm),
            spec,
            names,
            params,
            backbone_params,
        })
    }

    /// Rebuilds a model from a spec and named parameters, checking names and shapes.
    pub fn from_parts(spec: ModelSpec, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(spec, 0)?;
        if named.len() != model.params.len() {
            return Err(Error::Format {
                what: "checkpoint",
                reason: format!("expected {} tensors, found {}", model.params.len(), named.len()),
            });
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != model.names[i] || t.shape() != model.params[i].shape() {
                return Err(Error::Format {
                    what: "checkpoint",
                    reason: format!(
                        "tensor {i}: expected {} {:?}, found {name} {:?}",
                        model.names[i],
                        model.params[i].shape(),
                        t.shape()
                    ),
                });
            }
            model.params[i] = t;
        }
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn grid(&self) -> &CoordGrid {
        &self.grid
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn backbone_parameter_count(&self) -> usize {
        self.params[..self.backbone_params].iter().map(Tensor::len).sum()
    }

    /// Trainable parameters added on top of the backbone.
    pub fn head_parameter_count(&self) -> usize {
        self.parameter_count() - self.backbone_parameter_count()
    }

    /// Runs the backbone and head on an `N×C×S×S` image batch.
    pub fn forward(&self, images: &Tensor) -> Result<ForwardPass> {
        let b = &self.spec.backbone;
        let s = images.shape();
        if s.len() != 4 || s[1] != b.input_channels || s[2] != b.input_size || s[3] != b.input_size {
            return Err(shape_mismatch(
                "model input",
                s,
                &[0, b.input_channels, b.input_size, b.input_size],
            ));
        }
        let n = s[0];
        let mut g = Graph::new();
        let params: Vec<Var> = self.params.iter().map(|p| g.variable(p.clone())).collect();
        let mut x = g.constant(images.clone());
        for i in 0..b.stage_widths.len() {
            let stride = if i < b.downsample_count { 2 } else { 1 };
            x = g.conv2d(x, params[2 * i], params[2 * i + 1], stride, KERNEL / 2)?;
            x = g.relu(x);
        }
        let hi = 2 * b.stage_widths.len();
        let raw = g.conv2d(x, params[hi], params[hi + 1], 1, 0)?;

        let (heatmap, coords) = match self.spec.head {
            HeadKind::HeatmapMatching { .. } => (None, None),
            HeadKind::FullyConnected => {
                let hm = activate_or_uniform(&mut g, raw, self.spec.rectifier)?;
                let k = b.keypoints;
                let side = self.grid.rows();
                let flat = g.reshape(hm, &[n, k * side * side])?;
                let out = g.linear(flat, params[hi + 2], params[hi + 3])?;
                let coords = g.reshape(out, &[n, k, 2])?;
                (Some(hm), Some(coords))
            }
            HeadKind::Dsnt { .. } => {
                let hm = activate_or_uniform(&mut g, raw, self.spec.rectifier)?;
                let coords = dsnt(&mut g, hm, &self.grid)?;
                (Some(hm), Some(coords))
            }
        };
        Ok(ForwardPass {
            graph: g,
            params,
            raw,
            heatmap,
            coords,
        })
    }

    /// Coordinate predictions, `N·K` pairs in sample-major order.
    pub fn predict(&self, pass: &ForwardPass) -> Result<Vec<CoordPair>> {
        match pass.coords {
            Some(c) => Ok(pass
                .graph
                .value(c)
                .data()
                .chunks(2)
                .map(|p| CoordPair::new(p[0], p[1]))
                .collect()),
            None => {
                let raw = pass.graph.value(pass.raw);
                let side = self.grid.rows();
                raw.data()
                    .chunks(side * side)
                    .map(|h| argmax_decode(&Tensor::from_vec(&[side, side], h.to_vec())?))
                    .collect()
            }
        }
    }

    /// Gaussian heatmap targets for the HM head, `N×K×m×n`.
    pub fn heatmap_targets(&self, target: &Tensor, spec: &TargetHeatmapSpec) -> Result<Tensor> {
        let mut shape = target.shape()[..target.rank() - 1].to_vec();
        shape.extend([self.grid.rows(), self.grid.cols()]);
        let mut data = Vec::with_capacity(shape.iter().product());
        for p in target.data().chunks(2) {
            data.extend_from_slice(render_on_grid(CoordPair::new(p[0], p[1]), spec, &self.grid).data());
        }
        Tensor::from_vec(&shape, data)
    }

    /// Training loss for the configured head. `target` is `N×K×2`; `mask` has `N·K` entries.
    pub fn loss(&self, pass: &mut ForwardPass, target: &Tensor, mask: &[bool]) -> Result<Var> {
        let g = &mut pass.graph;
        match self.spec.head {
            HeadKind::HeatmapMatching { target: spec } => {
                let targets = self.heatmap_targets(target, &spec)?;
                // Invisible keypoints train towards an empty heatmap.
                let mut targets = targets;
                let inner = self.grid.rows() * self.grid.cols();
                for (slice, &m) in targets.data_mut().chunks_mut(inner).zip(mask) {
                    if !m {
                        slice.fill(0.0);
                    }
                }
                mse_heatmap_loss(g, pass.raw, &targets)
            }
            HeadKind::FullyConnected => {
                let coords = pass.coords.expect("FC head produces coordinates");
                euclidean_loss(g, coords, target, mask)
            }
            HeadKind::Dsnt { regularization } => {
                let hm = pass.heatmap.expect("DSNT head produces heatmaps");
                let (loss, _) = combined_loss(g, hm, &self.grid, target, mask, &regularization)?;
                Ok(loss)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(head: HeadKind) -> ModelSpec {
        ModelSpec {
            backbone: BackboneConfig {
                input_channels: 1,
                input_size: 16,
                stage_widths: vec![4, 4],
                downsample_count: 2,
                keypoints: 2,
            },
            head,
            rectifier: RectifierKind::Softmax,
        }
    }

    #[test]
    fn backbone_validation() {
        let mut b = BackboneConfig::default();
        assert_eq!(b.heatmap_size().unwrap(), 8);
        b.downsample_count = 4;
        assert!(b.validate().is_err());
        let b = BackboneConfig {
            input_size: 24,
            downsample_count: 3,
            ..BackboneConfig::default()
        };
        assert!(b.validate().is_err());
        let b = BackboneConfig::default().with_heatmap_size(4).unwrap();
        assert_eq!(b.downsample_count, 3);
        assert!(BackboneConfig::default().with_heatmap_size(2).is_err());
        assert!(BackboneConfig::default().with_heatmap_size(12).is_err());
    }

    #[test]
    fn parameter_counts() {
        let hm = Model::new(spec(HeadKind::hm()), 0).unwrap();
        let ds = Model::new(spec(HeadKind::dsntr()), 0).unwrap();
        let fc = Model::new(spec(HeadKind::fc()), 0).unwrap();
        assert_eq!(hm.head_parameter_count(), 0);
        assert_eq!(ds.head_parameter_count(), 0);
        let (m, n, k) = (4, 4, 2);
        assert_eq!(fc.head_parameter_count(), (m * n * k) * 2 * k + 2 * k);
        assert_eq!(hm.backbone_parameter_count(), fc.backbone_parameter_count());
    }

    #[test]
    fn forward_shapes_for_every_head() {
        let images = Tensor::full(&[3, 1, 16, 16], 0.5);
        for head in [HeadKind::hm(), HeadKind::fc(), HeadKind::dsnt(), HeadKind::dsntr()] {
            let model = Model::new(spec(head), 1).unwrap();
            let pass = model.forward(&images).unwrap();
            assert_eq!(pass.graph.shape(pass.raw), &[3, 2, 4, 4]);
            let preds = model.predict(&pass).unwrap();
            assert_eq!(preds.len(), 6);
            assert_eq!(pass.coords.is_some(), head != HeadKind::hm());
        }
        let model = Model::new(spec(HeadKind::dsnt()), 1).unwrap();
        assert!(model.forward(&Tensor::zeros(&[1, 2, 16, 16])).is_err());
    }

    #[test]
    fn labels_round_trip() {
        for label in ["HM", "FC", "DSNT", "DSNTr"] {
            assert_eq!(HeadKind::from_label(label).unwrap().label(), label);
        }
        assert!(HeadKind::from_label("mlp").is_err());
    }

    #[test]
    fn perfect_predictions_give_zero_loss() {
        let images = Tensor::full(&[2, 1, 16, 16], 0.2);
        for head in [HeadKind::fc(), HeadKind::dsnt()] {
            let model = Model::new(spec(head), 2).unwrap();
            let mut pass = model.forward(&images).unwrap();
            let coords = pass.graph.value(pass.coords.unwrap()).clone();
            let loss = model.loss(&mut pass, &coords, &[true; 4]).unwrap();
            assert_eq!(pass.graph.value(loss).item(), 0.0);
        }
    }

    #[test]
    fn hm_loss_is_mse_against_rendered_targets() {
        let images = Tensor::full(&[1, 1, 16, 16], 0.3);
        let model = Model::new(spec(HeadKind::hm()), 3).unwrap();
        let target = Tensor::from_vec(&[1, 2, 2], vec![0.1, -0.3, -0.5, 0.6]).unwrap();
        let mut pass = model.forward(&images).unwrap();
        let loss = model.loss(&mut pass, &target, &[true, true]).unwrap();
        let rendered = model.heatmap_targets(&target, &TargetHeatmapSpec::default()).unwrap();
        let raw = pass.graph.value(pass.raw).clone();
        let mut g = Graph::new();
        let r = g.variable(raw);
        let direct = mse_heatmap_loss(&mut g, r, &rendered).unwrap();
        assert_eq!(pass.graph.value(loss).item(), g.value(direct).item());
    }
}
