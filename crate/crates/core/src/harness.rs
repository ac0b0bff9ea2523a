//! Training loop, evaluation and the comparison experiments.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, augment, pck, DEFAULT_PCK_THRESHOLD, AugmentKind, CoordinateRegion, Dataset, DatasetConfig, SyntheticSample};
use crate::dsnt::CoordPair;
use crate::error::{Error, Result};
use crate::heatmap::RectifierKind;
use crate::model::{BackboneConfig, HeadKind, Model, ModelSpec};
use crate::optim::{RmsProp, RmsPropConfig};

/// A held-out evaluation set. Its samples come from the experiment's dataset
/// config with the region, size and seed replaced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSplit {
    pub name: String,
    pub region: CoordinateRegion,
    pub sample_count: usize,
    pub seed: u64,
}

impl EvalSplit {
    pub fn new(name: &str, region: CoordinateRegion, sample_count: usize, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            region,
            sample_count,
            seed,
        }
    }

    pub fn dataset_config(&self, base: &DatasetConfig) -> DatasetConfig {
        DatasetConfig {
            sample_count: self.sample_count,
            region: self.region,
            seed: self.seed,
            augment: AugmentKind::None,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub backbone: BackboneConfig,
    pub head: HeadKind,
    pub rectifier: RectifierKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rmsprop_smoothing: f64,
    pub rmsprop_epsilon: f64,
    /// Epochs, as fractions of the total, at which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_fractions: Vec<f64>,
    pub lr_decay_factor: f64,
    /// Seeds weight initialization, shuffling and augmentation.
    pub seed: u64,
    pub pck_thresholds: Vec<f64>,
    pub eval_splits: Vec<EvalSplit>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let rms = RmsPropConfig::default();
        Self {
            dataset: DatasetConfig::default(),
            backbone: BackboneConfig::default(),
            head: HeadKind::dsntr(),
            rectifier: RectifierKind::Softmax,
            epochs: 30,
            batch_size: 32,
            learning_rate: 2e-3,
            rmsprop_smoothing: rms.smoothing,
            rmsprop_epsilon: rms.epsilon,
            lr_decay_fractions: vec![0.6, 0.9],
            lr_decay_factor: 0.1,
            seed: 0,
            pck_thresholds: vec![DEFAULT_PCK_THRESHOLD, 0.05],
            eval_splits: vec![EvalSplit::new("test", CoordinateRegion::Full, 256, 1_000_003)],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        self.dataset.validate()?;
        self.backbone.validate()?;
        self.head.validate()?;
        let (d, b) = (&self.dataset, &self.backbone);
        if b.input_size != d.image_size || b.input_channels != d.keypoints || b.keypoints != d.keypoints {
            return bad(format!(
                "backbone expects {} channels of {}×{} and {} keypoints; dataset has {} keypoint channels of {}×{}",
                b.input_channels, b.input_size, b.input_size, b.keypoints, d.keypoints, d.image_size, d.image_size
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.rmsprop_smoothing > 0.0 && self.rmsprop_smoothing < 1.0 && self.rmsprop_epsilon > 0.0) {
            return bad("rmsprop smoothing must be in (0, 1) and epsilon positive".into());
        }
        let mut prev = 0.0;
        for &f in &self.lr_decay_fractions {
            if !(f > prev && f < 1.0) {
                return bad(format!(
                    "decay fractions must be strictly increasing in (0, 1), got {:?}",
                    self.lr_decay_fractions
                ));
            }
            prev = f;
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad(format!("decay factor must be in (0, 1], got {}", self.lr_decay_factor));
        }
        if self.pck_thresholds.iter().any(|&t| !(t > 0.0)) {
            return bad("pck thresholds must be positive".into());
        }
        let mut names: Vec<&str> = self.eval_splits.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) || names.contains(&"train") {
            return bad("eval split names must be unique and not 'train'".into());
        }
        for s in &self.eval_splits {
            s.dataset_config(&self.dataset).validate()?;
        }
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            backbone: self.backbone.clone(),
            head: self.head,
            rectifier: self.rectifier,
        }
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let passed = self
            .lr_decay_fractions
            .iter()
            .filter(|&&f| epoch >= (f * self.epochs as f64).floor() as usize)
            .count() as i32;
        // Dividing by the inverse keeps e.g. two 0.1 decays at exactly lr / 100.
        self.learning_rate / (1.0 / self.lr_decay_factor).powi(passed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: String,
    /// `(threshold, pck)` pairs.
    pub pck: Vec<(f64, f64)>,
    pub mean_error: f64,
    pub visible: usize,
}

impl SplitMetrics {
    pub fn pck_at(&self, threshold: f64) -> Option<f64> {
        self.pck.iter().find(|(t, _)| *t == threshold).map(|&(_, v)| v)
    }
}

/// Everything in `report.csv`. Wall-clock time is kept out so reruns compare bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub head: String,
    pub epoch_losses: Vec<f64>,
    pub splits: Vec<SplitMetrics>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    head: String,
    split: String,
    epoch: usize,
    metric: String,
    value: f64,
}

impl MetricsReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }

    pub fn split(&self, name: &str) -> Option<&SplitMetrics> {
        self.splits.iter().find(|s| s.split == name)
    }

    /// Columns `head,split,epoch,metric,value`; one `loss` row per training
    /// epoch, then `pck@<t>`, `mean_error` and `visible` rows per split.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let epochs = self.epoch_losses.len();
        let row = |split: &str, epoch, metric: String, value| CsvRow {
            head: self.head.clone(),
            split: split.to_string(),
            epoch,
            metric,
            value,
        };
        for (e, &l) in self.epoch_losses.iter().enumerate() {
            w.serialize(row("train", e + 1, "loss".into(), l))?;
        }
        for s in &self.splits {
            for &(t, v) in &s.pck {
                w.serialize(row(&s.split, epochs, format!("pck@{t}"), v))?;
            }
            w.serialize(row(&s.split, epochs, "mean_error".into(), s.mean_error))?;
            w.serialize(row(&s.split, epochs, "visible".into(), s.visible as f64))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let mut report = MetricsReport {
            head: String::new(),
            epoch_losses: Vec::new(),
            splits: Vec::new(),
        };
        let bad = |reason: String| Error::Format { what: "report.csv", reason };
        for row in r.deserialize::<CsvRow>() {
            let row = row?;
            report.head = row.head;
            if row.split == "train" {
                if row.metric != "loss" || row.epoch != report.epoch_losses.len() + 1 {
                    return Err(bad(format!("unexpected train row {} @ {}", row.metric, row.epoch)));
                }
                report.epoch_losses.push(row.value);
                continue;
            }
            if report.splits.last().map_or(true, |s| s.split != row.split) {
                report.splits.push(SplitMetrics {
                    split: row.split.clone(),
                    pck: Vec::new(),
                    mean_error: f64::NAN,
                    visible: 0,
                });
            }
            let s = report.splits.last_mut().expect("pushed above");
            match row.metric.as_str() {
                "mean_error" => s.mean_error = row.value,
                "visible" => s.visible = row.value as usize,
                m => {
                    let t = m
                        .strip_prefix("pck@")
                        .and_then(|t| t.parse::<f64>().ok())
                        .ok_or_else(|| bad(format!("unknown metric '{m}'")))?;
                    s.pck.push((t, row.value));
                }
            }
        }
        Ok(report)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub report: MetricsReport,
    pub wall_clock_seconds: f64,
}

/// Mean Euclidean error and PCK of `model` on `dataset`.
pub fn evaluate(model: &Model, dataset: &Dataset, name: &str, thresholds: &[f64], batch_size: usize) -> Result<SplitMetrics> {
    let mut preds: Vec<CoordPair> = Vec::new();
    let mut truth: Vec<CoordPair> = Vec::new();
    let mut visible: Vec<bool> = Vec::new();
    for chunk in dataset.samples.chunks(batch_size.max(1)) {
        let (images, _, mask) = Dataset::batch(chunk)?;
        let pass = model.forward(&images)?;
        preds.extend(model.predict(&pass)?);
        truth.extend(chunk.iter().flat_map(|s| s.keypoints.iter().copied()));
        visible.extend(mask);
    }
    let pck = thresholds
        .iter()
        .map(|&t| Ok((t, pck(&preds, &truth, &visible, t)?)))
        .collect::<Result<Vec<_>>>()?;
    let (sum, count) = preds
        .iter()
        .zip(&truth)
        .zip(&visible)
        .filter(|(_, &v)| v)
        .fold((0.0, 0usize), |(s, c), ((p, t), _)| (s + p.distance(t), c + 1));
    Ok(SplitMetrics {
        split: name.to_string(),
        pck,
        mean_error: if count > 0 { sum / count as f64 } else { 0.0 },
        visible: count,
    })
}

/// Evaluates `model` on every configured split.
pub fn evaluate_splits(model: &Model, config: &ExperimentConfig) -> Result<Vec<SplitMetrics>> {
    config
        .eval_splits
        .iter()
        .map(|s| {
            let ds = data::generate(&s.dataset_config(&config.dataset))?;
            evaluate(model, &ds, &s.name, &config.pck_thresholds, config.batch_size)
        })
        .collect()
}

/// Trains a fresh model with RMSProp. Deterministic for a given config.
pub fn train(config: &ExperimentConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let start = Instant::now();
    let train_set = data::generate(&config.dataset)?;
    let mut model = Model::new(config.model_spec(), config.seed)?;
    let mut opt = RmsProp::new(RmsPropConfig {
        learning_rate: config.learning_rate,
        smoothing: config.rmsprop_smoothing,
        epsilon: config.rmsprop_epsilon,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        opt.set_learning_rate(config.learning_rate_at(epoch));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<SyntheticSample> = chunk
                .iter()
                .map(|&i| augment(&train_set.samples[i], config.dataset.augment, &mut rng))
                .collect();
            let (images, targets, mask) = Dataset::batch(&batch)?;
            let mut pass = model.forward(&images)?;
            let loss = model.loss(&mut pass, &targets, &mask)?;
            let value = pass.graph.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    batch: b + 1,
                    loss: value,
                });
            }
            pass.graph.backward(loss)?;
            let grads: Vec<_> = pass.params.iter().map(|&p| pass.graph.grad(p)).collect();
            opt.step(model.params_mut(), &grads)?;
            total += value * chunk.len() as f64;
        }
        let mean = total / train_set.len().max(1) as f64;
        log::info!("{} epoch {}/{} loss {mean:.6}", config.head.label(), epoch + 1, config.epochs);
        epoch_losses.push(mean);
    }
    if model.params().iter().any(|p| !p.all_finite()) {
        return Err(Error::Divergence {
            epoch: config.epochs,
            batch: 0,
            loss: f64::NAN,
        });
    }

    let splits = evaluate_splits(&model, config)?;
    Ok(TrainOutcome {
        report: MetricsReport {
            head: config.head.label().to_string(),
            epoch_losses,
            splits,
        },
        model,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub head: String,
    pub resolution: usize,
    pub pck: f64,
    pub mean_error: f64,
}

/// Downsample count that turns `input_size` into `resolution`.
pub fn downsample_for(input_size: usize, resolution: usize) -> Result<usize> {
    let mut size = input_size;
    let mut count = 0;
    while size > resolution && size % 2 == 0 {
        size /= 2;
        count += 1;
    }
    if size != resolution {
        return Err(Error::InvalidConfig(format!(
            "heatmap resolution {resolution} is not reachable from {input_size} by halving"
        )));
    }
    Ok(count)
}

/// Trains every `(head, resolution)` pair and reports PCK on the first eval
/// split at the first configured threshold.
pub fn resolution_sweep(base: &ExperimentConfig, resolutions: &[usize], heads: &[HeadKind]) -> Result<Vec<SweepRow>> {
    let threshold = *base
        .pck_thresholds
        .first()
        .ok_or_else(|| Error::InvalidConfig("sweep needs a pck threshold".into()))?;
    for &r in resolutions {
        BackboneConfig {
            downsample_count: downsample_for(base.backbone.input_size, r)?,
            ..base.backbone.clone()
        }
        .validate()?;
    }
    let mut rows = Vec::new();
    for &head in heads {
        for &r in resolutions {
            let config = ExperimentConfig {
                head,
                backbone: BackboneConfig {
                    downsample_count: downsample_for(base.backbone.input_size, r)?,
                    ..base.backbone.clone()
                },
                ..base.clone()
            };
            let out = train(&config)?;
            let split = out
                .report
                .splits
                .first()
                .ok_or_else(|| Error::InvalidConfig("sweep needs an eval split".into()))?;
            rows.push(SweepRow {
                head: head.label().to_string(),
                resolution: r,
                pck: split.pck_at(threshold).expect("threshold evaluated"),
                mean_error: split.mean_error,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialRow {
    pub head: String,
    pub side: String,
    pub pck: f64,
    pub mean_error: f64,
}

/// Trains on left-half coordinates and tests on both halves.
pub fn spatialgen_config(base: &ExperimentConfig, head: HeadKind) -> ExperimentConfig {
    let test_count = base.eval_splits.first().map_or(256, |s| s.sample_count);
    ExperimentConfig {
        head,
        dataset: DatasetConfig {
            region: CoordinateRegion::LeftHalf,
            augment: AugmentKind::None,
            ..base.dataset.clone()
        },
        eval_splits: vec![
            EvalSplit::new("left", CoordinateRegion::LeftHalf, test_count, 2_000_003),
            EvalSplit::new("right", CoordinateRegion::right_half(), test_count, 3_000_017),
        ],
        ..base.clone()
    }
}

pub const SPATIALGEN_HEADS: [fn() -> HeadKind; 3] = [HeadKind::fc, HeadKind::hm, HeadKind::dsntr];

pub fn spatialgen_experiment(base: &ExperimentConfig) -> Result<Vec<SpatialRow>> {
    let threshold = *base
        .pck_thresholds
        .first()
        .ok_or_else(|| Error::InvalidConfig("spatialgen needs a pck threshold".into()))?;
    let mut rows = Vec::new();
    for head in SPATIALGEN_HEADS.map(|h| h()) {
        let out = train(&spatialgen_config(base, head))?;
        for s in &out.report.splits {
            rows.push(SpatialRow {
                head: head.label().to_string(),
                side: s.split.clone(),
                pck: s.pck_at(threshold).expect("threshold evaluated"),
                mean_error: s.mean_error,
            });
        }
    }
    Ok(rows)
}

pub fn rows_to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn rows_from_csv<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}
