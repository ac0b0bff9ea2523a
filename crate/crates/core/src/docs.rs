//! Executable walkthroughs: the 5×5 worked example, a regularizer heatmap
//! gallery and the heatmap-matching MSE pathology.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::Graph;
use crate::checkpoint;
use crate::data::{self, Dataset};
use crate::dsnt::{dsnt_value, worked_example_heatmap, CoordGrid, CoordPair, Regularization, RegularizerKind};
use crate::error::{Error, Result};
use crate::harness::{train, ExperimentConfig};
use crate::heatmap::{argmax_decode, render_target, TargetHeatmapSpec, TargetNorm};
use crate::model::{HeadKind, Model};
use crate::tensor::Tensor;

fn short(v: f64) -> String {
    // Round away float noise, and print -0 as 0.0.
    let r = (v * 1e12).round() / 1e12 + 0.0;
    format!("{r:?}")
}

/// Term-by-term DSNT computation on the 5×5 example heatmap.
///
/// Fails if the traced sum differs from [`dsnt_value`] by more than 1e-12.
pub fn demo_fig4() -> Result<String> {
    let z = worked_example_heatmap();
    let grid = CoordGrid::new(5, 5);
    let mut out = String::new();
    let matrix = |out: &mut String, title: &str, t: &Tensor| {
        writeln!(out, "{title}").unwrap();
        for row in t.data().chunks(5) {
            let cells: Vec<String> = row.iter().map(|v| format!("{:>5.1}", v)).collect();
            writeln!(out, "  {}", cells.join(" ")).unwrap();
        }
    };
    matrix(&mut out, "Z (normalized heatmap):", &z);
    matrix(&mut out, "X:", grid.x());
    matrix(&mut out, "Y:", grid.y());

    let mut sums = [0.0; 2];
    for (axis, (name, coords)) in [("x", grid.x()), ("y", grid.y())].into_iter().enumerate() {
        let terms: Vec<String> = z
            .data()
            .iter()
            .zip(coords.data())
            .filter(|(w, _)| **w != 0.0)
            .map(|(w, c)| {
                sums[axis] += w * c;
                format!("{}×{}={}", short(*w), short(*c), short(w * c))
            })
            .collect();
        writeln!(out, "{name} = <Z, {}> = {}", name.to_uppercase(), terms.join(" + ")).unwrap();
    }
    let direct = dsnt_value(&z, &grid)?;
    for (name, traced, value) in [("x", sums[0], direct.x), ("y", sums[1], direct.y)] {
        if (traced - value).abs() > 1e-12 {
            return Err(Error::Format {
                what: "worked example",
                reason: format!("traced {name}={traced} but dsnt gives {value}"),
            });
        }
    }
    writeln!(out, "result: x={}, y={}", short(direct.x), short(direct.y)).unwrap();
    Ok(out)
}

/// Target heatmap plus two candidate outputs: `a` is the target moved one
/// pixel to the right, `b` is a single bright pixel at the true location.
#[derive(Debug, Clone)]
pub struct PathologyFixture {
    pub truth: CoordPair,
    pub target: Tensor,
    pub a: Tensor,
    pub b: Tensor,
}

pub const PATHOLOGY_SIZE: usize = 8;

pub fn mse_pathology_fixture() -> PathologyFixture {
    let s = PATHOLOGY_SIZE;
    let spec = TargetHeatmapSpec {
        sigma_pixels: 1.0,
        normalize: TargetNorm::Amplitude,
    };
    let (row, col) = (3, 4);
    let centre = |c: usize| (2 * c + 1) as f64 / s as f64 - 1.0;
    let truth = CoordPair::new(centre(col), centre(row));
    let shifted = CoordPair::new(centre(col + 1), centre(row));
    let mut b = Tensor::zeros(&[s, s]);
    b.set(&[row, col], 1.0);
    PathologyFixture {
        truth,
        target: render_target(truth, &spec, s, s),
        a: render_target(shifted, &spec, s, s),
        b,
    }
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    let sq = a.zip_map(b, "mse", |x, y| (x - y) * (x - y))?;
    Ok(sq.sum() / sq.len() as f64)
}

pub fn decode_error(heatmap: &Tensor, truth: CoordPair) -> Result<f64> {
    Ok(argmax_decode(heatmap)?.distance(&truth))
}

/// The four regularizers of the gallery, all with σ_t = 1 and λ = 1.
pub fn gallery_regularizers() -> [(&'static str, Regularization); 4] {
    let with = |kind| Regularization { kind, lambda: 1.0 };
    [
        ("none", Regularization::NONE),
        ("variance", with(RegularizerKind::Variance { sigma_t: 1.0 })),
        ("kl", with(RegularizerKind::Kl { sigma_t: 1.0 })),
        ("js", with(RegularizerKind::Js { sigma_t: 1.0 })),
    ]
}

/// Small training setup used when no checkpoints are supplied.
pub fn gallery_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        epochs: 10,
        ..ExperimentConfig::default()
    };
    cfg.dataset.sample_count = 256;
    cfg.eval_splits[0].sample_count = 64;
    cfg
}

#[derive(Debug, Clone)]
pub struct GalleryEntry {
    pub regularizer: &'static str,
    /// One CSV per keypoint, for the first evaluation sample.
    pub files: Vec<PathBuf>,
    pub heatmaps: Vec<Tensor>,
    /// Mean JS divergence between each evaluation heatmap and a σ = 1 px
    /// Gaussian centred on that heatmap's own DSNT prediction.
    pub divergence_to_reference: f64,
}

#[derive(Debug, Clone)]
pub struct Gallery {
    pub entries: Vec<GalleryEntry>,
}

impl Gallery {
    pub fn entry(&self, name: &str) -> Option<&GalleryEntry> {
        self.entries.iter().find(|e| e.regularizer == name)
    }

    /// True when the JS-regularized heatmaps are closer to Gaussians than the unregularized ones.
    pub fn js_more_gaussian_than_none(&self) -> bool {
        match (self.entry("js"), self.entry("none")) {
            (Some(js), Some(none)) => js.divergence_to_reference < none.divergence_to_reference,
            _ => false,
        }
    }
}

fn write_matrix(path: &Path, t: &Tensor) -> Result<()> {
    let cols = *t.shape().last().expect("matrix");
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in t.data().chunks(cols) {
        w.write_record(row.iter().map(|v| format!("{v:?}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Trains (or loads from `checkpoints/<reg>.ckpt`) one DSNT model per
/// regularizer and writes `<reg>.<k>.csv` heatmap dumps into `out_dir`.
pub fn demo_reg_gallery(out_dir: &Path, base: &ExperimentConfig, checkpoints: Option<&Path>) -> Result<Gallery> {
    std::fs::create_dir_all(out_dir)?;
    let split = base
        .eval_splits
        .first()
        .ok_or_else(|| Error::InvalidConfig("gallery needs an eval split".into()))?;
    let eval = data::generate(&split.dataset_config(&base.dataset))?;
    let (images, _, _) = Dataset::batch(&eval.samples)?;

    let mut entries = Vec::new();
    for (name, regularization) in gallery_regularizers() {
        let model = match checkpoints {
            Some(dir) => {
                let path = dir.join(format!("{name}.ckpt"));
                if !path.exists() {
                    return Err(Error::InvalidConfig(format!("missing checkpoint {}", path.display())));
                }
                checkpoint::load(&path)?
            }
            None => {
                let cfg = ExperimentConfig {
                    head: HeadKind::Dsnt { regularization },
                    ..base.clone()
                };
                let model = train(&cfg)?.model;
                checkpoint::save(&model, &out_dir.join(format!("{name}.ckpt")))?;
                model
            }
        };
        entries.push(gallery_entry(name, &model, &images, out_dir)?);
    }
    Ok(Gallery { entries })
}

fn gallery_entry(name: &'static str, model: &Model, images: &Tensor, out_dir: &Path) -> Result<GalleryEntry> {
    let pass = model.forward(images)?;
    let hm = pass
        .heatmap
        .ok_or_else(|| Error::InvalidConfig("gallery checkpoints must use a DSNT head".into()))?;
    let heatmaps = pass.graph.value(hm);
    let preds = model.predict(&pass)?;
    let grid = model.grid();
    let (m, n) = (grid.rows(), grid.cols());
    let spec = TargetHeatmapSpec {
        sigma_pixels: 1.0,
        normalize: TargetNorm::Sum,
    };

    let slices: Vec<Tensor> = heatmaps
        .data()
        .chunks(m * n)
        .map(|c| Tensor::from_vec(&[m, n], c.to_vec()))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    for (z, p) in slices.iter().zip(&preds) {
        let reference = render_target(*p, &spec, m, n);
        let mut g = Graph::new();
        let v = g.constant(z.clone());
        let d = g.js_divergence(v, &reference)?;
        total += g.value(d).item();
    }

    let k = model.spec().backbone.keypoints;
    let mut files = Vec::new();
    for (i, z) in slices.iter().take(k).enumerate() {
        let path = out_dir.join(format!("{name}.{i}.csv"));
        write_matrix(&path, z)?;
        files.push(path);
    }
    Ok(GalleryEntry {
        regularizer: name,
        files,
        heatmaps: slices.into_iter().take(k).collect(),
        divergence_to_reference: total / preds.len() as f64,
    })
}
