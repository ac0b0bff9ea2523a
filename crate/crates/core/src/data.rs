//! Procedural keypoint-localization datasets.
//!
//! Every keypoint is a soft isotropic Gaussian blob drawn in its own image
//! channel, so keypoints are identifiable by channel and the ground truth is the
//! exact continuous blob centre. Generation is a pure function of the config:
//! sample `i` draws from its own ChaCha stream of `seed`.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dsnt::CoordPair;
use crate::error::{shape_mismatch, Error, Result};
use crate::heatmap::normalized_to_pixel;
use crate::tensor::Tensor;

/// Default PCK threshold, in normalized units.
pub const DEFAULT_PCK_THRESHOLD: f64 = 0.1;

const PLACEMENT_ATTEMPTS: usize = 1000;
const FILE_MAGIC: &[u8; 8] = b"DSNTSET1";

/// Where blob centres may fall, before the border margin is applied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "region", rename_all = "snake_case")]
pub enum CoordinateRegion {
    Full,
    LeftHalf,
    Rect {
        x_min: f64,
        x_max: f64,
        y_min: f64,
        y_max: f64,
    },
}

impl CoordinateRegion {
    pub fn right_half() -> Self {
        CoordinateRegion::Rect {
            x_min: 0.0,
            x_max: 1.0,
            y_min: -1.0,
            y_max: 1.0,
        }
    }

    /// `(x_min, x_max, y_min, y_max)` after clipping to `[-1 + margin, 1 - margin]`.
    pub fn bounds(&self, margin: f64) -> (f64, f64, f64, f64) {
        let (x0, x1, y0, y1) = match *self {
            CoordinateRegion::Full => (-1.0, 1.0, -1.0, 1.0),
            CoordinateRegion::LeftHalf => (-1.0, 0.0, -1.0, 1.0),
            CoordinateRegion::Rect {
                x_min,
                x_max,
                y_min,
                y_max,
            } => (x_min, x_max, y_min, y_max),
        };
        let lo = -1.0 + margin;
        let hi = 1.0 - margin;
        (x0.max(lo), x1.min(hi), y0.max(lo), y1.min(hi))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    None,
    FlipJitter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub sample_count: usize,
    pub image_size: usize,
    pub keypoints: usize,
    /// Blob standard deviation range in pixels, inclusive.
    pub blob_radius_range: (f64, f64),
    /// Standard deviation of additive pixel noise.
    pub noise_level: f64,
    pub region: CoordinateRegion,
    /// Distance kept clear of the image border, in normalized units.
    pub border_margin: f64,
    pub seed: u64,
    pub augment: AugmentKind,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            sample_count: 512,
            image_size: 32,
            keypoints: 1,
            blob_radius_range: (1.5, 2.5),
            noise_level: 0.05,
            region: CoordinateRegion::Full,
            border_margin: 0.25,
            seed: 0,
            augment: AugmentKind::None,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.image_size == 0 || self.keypoints == 0 {
            return bad("image size and keypoint count must be positive".into());
        }
        let (r0, r1) = self.blob_radius_range;
        if !(r0 > 0.0 && r1 >= r0 && r1.is_finite()) {
            return bad(format!("invalid blob radius range ({r0}, {r1})"));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return bad(format!("noise level must be non-negative, got {}", self.noise_level));
        }
        if !(0.0..1.0).contains(&self.border_margin) {
            return bad(format!("border margin must be in [0, 1), got {}", self.border_margin));
        }
        let (x0, x1, y0, y1) = self.region.bounds(self.border_margin);
        if !(x1 > x0 && y1 > y0) {
            return bad(format!("coordinate region is empty: x [{x0}, {x1}), y [{y0}, {y1})"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    /// `C×H×W` in `[0, 1]`, one channel per keypoint.
    pub image: Tensor,
    pub keypoints: Vec<CoordPair>,
    pub visible: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub samples: Vec<SyntheticSample>,
}

/// Generates `config.sample_count` samples.
pub fn generate(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let samples = (0..config.sample_count)
        .map(|i| generate_sample(config, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: config.clone(),
        samples,
    })
}

/// Sample `index` of the dataset described by `config`.
pub fn generate_sample(config: &DatasetConfig, index: usize) -> Result<SyntheticSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let (x0, x1, y0, y1) = config.region.bounds(config.border_margin);
    let k = config.keypoints;
    let s = config.image_size;
    let (r0, r1) = config.blob_radius_range;

    let radii: Vec<f64> = (0..k)
        .map(|_| if r1 > r0 { rng.gen_range(r0..=r1) } else { r0 })
        .collect();
    let mut centres: Vec<CoordPair> = Vec::with_capacity(k);
    let mut attempts = 0;
    while centres.len() < k {
        attempts += 1;
        if attempts > PLACEMENT_ATTEMPTS * k {
            return Err(Error::RegionTooSmall {
                keypoints: k,
                reason: format!(
                    "no non-overlapping placement found in x [{x0}, {x1}), y [{y0}, {y1}) after {} attempts",
                    attempts - 1
                ),
            });
        }
        let c = CoordPair::new(rng.gen_range(x0..x1), rng.gen_range(y0..y1));
        let j = centres.len();
        let clear = centres.iter().enumerate().all(|(i, other)| {
            let dx = (c.x - other.x) * s as f64 / 2.0;
            let dy = (c.y - other.y) * s as f64 / 2.0;
            dx.hypot(dy) >= radii[i] + radii[j]
        });
        if clear {
            centres.push(c);
        }
    }

    let mut image = Tensor::zeros(&[k, s, s]);
    let noise = Normal::new(0.0, config.noise_level.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let data = image.data_mut();
    for (ch, (c, &r)) in centres.iter().zip(&radii).enumerate() {
        let u = normalized_to_pixel(c.x, s);
        let v = normalized_to_pixel(c.y, s);
        for i in 0..s {
            for j in 0..s {
                let d2 = (j as f64 - u).powi(2) + (i as f64 - v).powi(2);
                data[(ch * s + i) * s + j] = (-d2 / (2.0 * r * r)).exp();
            }
        }
    }
    if config.noise_level > 0.0 {
        for px in data.iter_mut() {
            *px += noise.sample(&mut rng);
        }
    }
    data.iter_mut().for_each(|px| *px = px.clamp(0.0, 1.0));

    Ok(SyntheticSample {
        image,
        keypoints: centres,
        visible: vec![true; k],
    })
}

/// Mirrors the image left-right and negates every keypoint's x.
pub fn flip_horizontal(sample: &SyntheticSample) -> SyntheticSample {
    let shape = sample.image.shape().to_vec();
    let w = shape[2];
    let mut image = sample.image.clone();
    for row in image.data_mut().chunks_mut(w) {
        row.reverse();
    }
    SyntheticSample {
        image,
        keypoints: sample.keypoints.iter().map(|p| CoordPair::new(-p.x, p.y)).collect(),
        visible: sample.visible.clone(),
    }
}

/// Multiplies channel `c` by `factors[c]` and clamps to `[0, 1]`.
pub fn scale_channels(sample: &SyntheticSample, factors: &[f64]) -> Result<SyntheticSample> {
    let c = sample.image.shape()[0];
    if factors.len() != c {
        return Err(shape_mismatch("scale_channels", &[c], &[factors.len()]));
    }
    let inner = sample.image.len() / c.max(1);
    let mut image = sample.image.clone();
    for (chunk, &f) in image.data_mut().chunks_mut(inner).zip(factors) {
        chunk.iter_mut().for_each(|v| *v = (*v * f).clamp(0.0, 1.0));
    }
    Ok(SyntheticSample {
        image,
        keypoints: sample.keypoints.clone(),
        visible: sample.visible.clone(),
    })
}

/// Random horizontal flip (p = 0.5) followed by per-channel scaling in `[0.6, 1.4]`.
pub fn augment<R: Rng + ?Sized>(sample: &SyntheticSample, kind: AugmentKind, rng: &mut R) -> SyntheticSample {
    match kind {
        AugmentKind::None => sample.clone(),
        AugmentKind::FlipJitter => {
            let flipped = if rng.gen_bool(0.5) {
                flip_horizontal(sample)
            } else {
                sample.clone()
            };
            let factors: Vec<f64> = (0..sample.image.shape()[0])
                .map(|_| rng.gen_range(0.6..=1.4))
                .collect();
            scale_channels(&flipped, &factors).expect("one factor per channel")
        }
    }
}

/// Fraction of visible keypoints predicted within `threshold` of the ground truth.
/// With no visible keypoints the score is 1.0.
pub fn pck(predictions: &[CoordPair], truth: &[CoordPair], visible: &[bool], threshold: f64) -> Result<f64> {
    if predictions.len() != truth.len() || truth.len() != visible.len() {
        return Err(shape_mismatch(
            "pck",
            &[predictions.len(), truth.len()],
            &[visible.len()],
        ));
    }
    if !(threshold > 0.0) {
        return Err(Error::InvalidConfig(format!("pck threshold must be positive, got {threshold}")));
    }
    let mut total = 0usize;
    let mut hits = 0usize;
    for ((p, t), &v) in predictions.iter().zip(truth).zip(visible) {
        if v {
            total += 1;
            if p.distance(t) <= threshold {
                hits += 1;
            }
        }
    }
    if total == 0 {
        log::warn!("pck called with no visible keypoints; reporting 1.0");
        return Ok(1.0);
    }
    Ok(hits as f64 / total as f64)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks samples into `(images N×C×H×W, targets N×K×2, mask N·K)`.
    pub fn batch<'a>(samples: impl IntoIterator<Item = &'a SyntheticSample>) -> Result<(Tensor, Tensor, Vec<bool>)> {
        let samples: Vec<&SyntheticSample> = samples.into_iter().collect();
        let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
        let images = Tensor::stack(&images)?;
        let k = samples.first().map_or(0, |s| s.keypoints.len());
        let mut coords = Vec::with_capacity(samples.len() * k * 2);
        let mut mask = Vec::with_capacity(samples.len() * k);
        for s in &samples {
            if s.keypoints.len() != k {
                return Err(shape_mismatch("batch keypoints", &[k], &[s.keypoints.len()]));
            }
            coords.extend(s.keypoints.iter().flat_map(|p| [p.x, p.y]));
            mask.extend_from_slice(&s.visible);
        }
        let targets = Tensor::from_vec(&[samples.len(), k, 2], coords)?;
        Ok((images, targets, mask))
    }

    /// Writes the dataset container: magic, JSON header length (u64 LE), JSON
    /// header, then per sample the image, keypoint coordinates and visibility
    /// flags as little-endian `f64`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = FileHeader {
            version: 1,
            config: self.config.clone(),
            sample_count: self.samples.len(),
            channels: self.config.keypoints,
            height: self.config.image_size,
            width: self.config.image_size,
            keypoints: self.config.keypoints,
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(FILE_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for s in &self.samples {
            for v in s.image.data() {
                w.write_all(&v.to_le_bytes())?;
            }
            for p in &s.keypoints {
                w.write_all(&p.x.to_le_bytes())?;
                w.write_all(&p.y.to_le_bytes())?;
            }
            for &v in &s.visible {
                w.write_all(&(if v { 1.0f64 } else { 0.0 }).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != FILE_MAGIC {
            return Err(Error::Format {
                what: "dataset file",
                reason: format!("bad magic {magic:?}"),
            });
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let header: FileHeader = serde_json::from_slice(&json)?;
        if header.version != 1 {
            return Err(Error::Format {
                what: "dataset file",
                reason: format!("unsupported version {}", header.version),
            });
        }
        let mut read_f64 = || -> Result<f64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(f64::from_le_bytes(b))
        };
        let (c, h, w, k) = (header.channels, header.height, header.width, header.keypoints);
        let mut samples = Vec::with_capacity(header.sample_count);
        for _ in 0..header.sample_count {
            let image: Vec<f64> = (0..c * h * w).map(|_| read_f64()).collect::<Result<_>>()?;
            let keypoints = (0..k)
                .map(|_| Ok(CoordPair::new(read_f64()?, read_f64()?)))
                .collect::<Result<Vec<_>>>()?;
            let visible = (0..k).map(|_| Ok(read_f64()? != 0.0)).collect::<Result<Vec<_>>>()?;
            samples.push(SyntheticSample {
                image: Tensor::from_vec(&[c, h, w], image)?,
                keypoints,
                visible,
            });
        }
        Ok(Self {
            config: header.config,
            samples,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(f)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FileHeader {
    version: u32,
    config: DatasetConfig,
    sample_count: usize,
    channels: usize,
    height: usize,
    width: usize,
    keypoints: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> DatasetConfig {
        DatasetConfig {
            sample_count: 16,
            seed,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small(7)).unwrap();
        let b = generate(&small(7)).unwrap();
        assert_eq!(a, b);
        let c = generate(&small(8)).unwrap();
        assert_ne!(a.samples[0], c.samples[0]);
    }

    #[test]
    fn samples_are_independent_of_count() {
        let few = generate(&small(3)).unwrap();
        let more = generate(&DatasetConfig {
            sample_count: 40,
            ..small(3)
        })
        .unwrap();
        assert_eq!(few.samples[..], more.samples[..16]);
    }

    #[test]
    fn left_half_region() {
        let cfg = DatasetConfig {
            sample_count: 200,
            region: CoordinateRegion::LeftHalf,
            ..DatasetConfig::default()
        };
        for s in generate(&cfg).unwrap().samples {
            assert!(s.keypoints.iter().all(|p| p.x < 0.0));
        }
    }

    #[test]
    fn noiseless_argmax_near_truth() {
        let cfg = DatasetConfig {
            sample_count: 50,
            noise_level: 0.0,
            ..DatasetConfig::default()
        };
        let s = cfg.image_size;
        for sample in generate(&cfg).unwrap().samples {
            let data = sample.image.data();
            let best = (0..data.len()).fold(0, |b, i| if data[i] > data[b] { i } else { b });
            let (row, col) = (best / s, best % s);
            let px = crate::heatmap::pixel_to_normalized(col as f64, s);
            let py = crate::heatmap::pixel_to_normalized(row as f64, s);
            let half_pitch = 1.0 / s as f64;
            assert!((px - sample.keypoints[0].x).abs() <= half_pitch + 1e-12);
            assert!((py - sample.keypoints[0].y).abs() <= half_pitch + 1e-12);
        }
    }

    #[test]
    fn region_too_small_is_reported() {
        let cfg = DatasetConfig {
            sample_count: 1,
            keypoints: 3,
            region: CoordinateRegion::Rect {
                x_min: 0.0,
                x_max: 0.01,
                y_min: 0.0,
                y_max: 0.01,
            },
            ..DatasetConfig::default()
        };
        assert!(matches!(generate(&cfg), Err(Error::RegionTooSmall { .. })));
    }

    #[test]
    fn multi_keypoint_blobs_do_not_overlap() {
        let cfg = DatasetConfig {
            sample_count: 30,
            keypoints: 3,
            ..DatasetConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        for s in &ds.samples {
            assert_eq!(s.image.shape(), &[3, 32, 32]);
            for i in 0..3 {
                for j in i + 1..3 {
                    let d = s.keypoints[i].distance(&s.keypoints[j]) * 16.0;
                    assert!(d >= 2.0 * cfg.blob_radius_range.0);
                }
            }
        }
    }

    #[test]
    fn empty_region_rejected() {
        let cfg = DatasetConfig {
            region: CoordinateRegion::Rect {
                x_min: 0.5,
                x_max: 0.2,
                y_min: -1.0,
                y_max: 1.0,
            },
            ..DatasetConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn flip_examples() {
        let s = generate(&small(1)).unwrap().samples.remove(0);
        let mut s = s;
        s.keypoints[0] = CoordPair::new(0.4, 0.1);
        assert_eq!(flip_horizontal(&s).keypoints[0].x, -0.4);
        assert_eq!(flip_horizontal(&flip_horizontal(&s)), s);
    }

    #[test]
    fn unit_jitter_is_identity() {
        let s = generate(&small(2)).unwrap().samples.remove(0);
        assert_eq!(scale_channels(&s, &[1.0]).unwrap(), s);
        assert!(scale_channels(&s, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn augment_keeps_coordinates_up_to_flip() {
        let s = generate(&small(4)).unwrap().samples.remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let a = augment(&s, AugmentKind::FlipJitter, &mut rng);
            let p = a.keypoints[0];
            assert!(p == s.keypoints[0] || p == CoordPair::new(-s.keypoints[0].x, s.keypoints[0].y));
            assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(augment(&s, AugmentKind::None, &mut rng), s);
    }

    #[test]
    fn pck_examples() {
        let truth = vec![CoordPair::new(0.3, 0.0), CoordPair::new(-0.5, 0.5), CoordPair::new(0.0, -0.2)];
        assert_eq!(pck(&truth, &truth, &[true; 3], 0.1).unwrap(), 1.0);

        let centre = vec![CoordPair::default(); 2];
        let far = vec![CoordPair::new(0.2, 0.0), CoordPair::new(0.0, -0.2)];
        assert_eq!(pck(&centre, &far, &[true; 2], 0.1).unwrap(), 0.0);

        // distances 0.05, 0.15, 0.25 (third masked) → 1 of 2 visible within 0.1
        let preds = vec![CoordPair::new(0.35, 0.0), CoordPair::new(-0.5, 0.35), CoordPair::new(0.0, 0.05)];
        assert_eq!(pck(&preds, &truth, &[true, true, false], 0.1).unwrap(), 0.5);
        assert_eq!(pck(&preds, &truth, &[false; 3], 0.1).unwrap(), 1.0);
        assert!(pck(&preds, &truth, &[true; 3], 0.0).is_err());
    }

    #[test]
    fn file_round_trip() {
        let ds = generate(&DatasetConfig {
            sample_count: 5,
            keypoints: 2,
            ..DatasetConfig::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], FILE_MAGIC);
        let back = Dataset::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
        buf[0] = b'X';
        assert!(Dataset::read_from(buf.as_slice()).is_err());
    }

    #[test]
    fn batch_layout() {
        let ds = generate(&DatasetConfig {
            sample_count: 3,
            keypoints: 2,
            ..DatasetConfig::default()
        })
        .unwrap();
        let (images, targets, mask) = Dataset::batch(&ds.samples).unwrap();
        assert_eq!(images.shape(), &[3, 2, 32, 32]);
        assert_eq!(targets.shape(), &[3, 2, 2]);
        assert_eq!(targets.get(&[1, 1, 0]), ds.samples[1].keypoints[1].x);
        assert_eq!(mask.len(), 6);
    }
}
