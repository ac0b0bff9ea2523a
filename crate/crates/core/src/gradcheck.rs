//! Central finite-difference checks of every backward rule.
//!
//! Each case draws inputs from a seeded RNG, reduces non-scalar outputs to a
//! scalar with a fixed random projection, and compares the analytic gradient
//! with `(f(x + h) − f(x − h)) / 2h` element by element. The relative error is
//! `|a − n| / max(|a|, |n|, floor)`; the floor keeps near-zero gradients from
//! turning rounding noise into huge ratios.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ReduceKind, Var};
use crate::dsnt::{
    combined_loss, coord_variance, divergence_reg, dsnt, euclidean_loss, mse_heatmap_loss, variance_reg, CoordGrid,
    Divergence, Regularization, RegularizerKind,
};
use crate::error::{Error, Result};
use crate::heatmap::{activate, RectifierKind};
use crate::model::{BackboneConfig, HeadKind, Model, ModelSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub denominator_floor: f64,
    pub seeds: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            denominator_floor: 1e-3,
            seeds: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    AllOps,
    DsntOnly,
    Losses,
}

impl FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-ops" => Ok(Scope::AllOps),
            "dsnt-only" => Ok(Scope::DsntOnly),
            "losses" => Ok(Scope::Losses),
            other => Err(Error::InvalidConfig(format!(
                "unknown gradcheck scope '{other}' (expected all-ops, dsnt-only or losses)"
            ))),
        }
    }
}

/// Worst relative error of one case over all seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub name: String,
    pub seeds: usize,
    pub worst_relative_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub cases: Vec<CaseReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn worst(&self) -> f64 {
        self.cases.iter().map(|c| c.worst_relative_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.cases {
            writeln!(
                f,
                "{:<6} {:<32} worst rel err {:.3e} over {} seeds",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.worst_relative_error,
                c.seeds
            )?;
        }
        Ok(())
    }
}

/// Compares `analytic` against central differences of `eval` around `inputs`.
/// Returns the worst relative error.
pub fn compare(
    inputs: &[Tensor],
    analytic: &[Tensor],
    eval: impl Fn(&[Tensor]) -> Result<f64>,
    cfg: &GradcheckConfig,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[t].len() {
            let x = inputs[t].data()[i];
            probe[t].data_mut()[i] = x + cfg.step;
            let plus = eval(&probe)?;
            probe[t].data_mut()[i] = x - cfg.step;
            let minus = eval(&probe)?;
            probe[t].data_mut()[i] = x;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.denominator_floor);
            if !rel.is_finite() {
                return Ok(f64::INFINITY);
            }
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Gradient check of a scalar-valued graph function of `inputs`.
pub fn check_fn<F>(inputs: &[Tensor], f: F, cfg: &GradcheckConfig) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad(v)).collect();
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    compare(inputs, &analytic, eval, cfg)
}

type GraphFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// Inputs plus the function to differentiate, drawn for one seed.
pub struct Prepared {
    pub inputs: Vec<Tensor>,
    pub f: GraphFn,
}

/// A named, seedable gradient-check case.
pub struct Case {
    pub name: String,
    pub prepare: Box<dyn Fn(&mut ChaCha8Rng) -> Prepared>,
}

impl Case {
    fn new(name: impl Into<String>, prepare: impl Fn(&mut ChaCha8Rng) -> Prepared + 'static) -> Self {
        Self {
            name: name.into(),
            prepare: Box::new(prepare),
        }
    }

    pub fn run(&self, cfg: &GradcheckConfig) -> Result<CaseReport> {
        let mut worst: f64 = 0.0;
        for seed in 0..cfg.seeds as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = (self.prepare)(&mut rng);
            worst = worst.max(check_fn(&p.inputs, &p.f, cfg)?);
        }
        Ok(CaseReport {
            name: self.name.clone(),
            seeds: cfg.seeds,
            worst_relative_error: worst,
            passed: worst < cfg.tolerance,
        })
    }
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Values in `±[0.1, 1.1)`, clear of the kinks of relu, abs and the norm.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    uniform(shape, rng).map(|v| v.signum() * (0.1 + v.abs()))
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 0.1, 1.0, rng)
}

fn coords(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -0.8, 0.8, rng)
}

/// Sums `out ⊙ w` for a fixed random `w` of the output's shape.
fn projected(
    rng: &mut ChaCha8Rng,
    out_shape: &[usize],
    op: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
) -> GraphFn {
    let w = uniform(out_shape, rng);
    Box::new(move |g, v| {
        let out = op(g, v)?;
        let s = g.scale(out, &w)?;
        Ok(g.sum_all(s))
    })
}

fn unary_case(name: &'static str, op: fn(&mut Graph, Var) -> Var) -> Case {
    Case::new(name, move |rng| {
        let inputs = vec![away_from_zero(&[3, 4], rng)];
        let f = projected(rng, &[3, 4], move |g, v| Ok(op(g, v[0])));
        Prepared { inputs, f }
    })
}

fn binary_case(name: &'static str, op: fn(&mut Graph, Var, Var) -> Result<Var>) -> Case {
    Case::new(name, move |rng| {
        let inputs = vec![uniform(&[2, 3], rng), uniform(&[2, 3], rng)];
        let f = projected(rng, &[2, 3], move |g, v| op(g, v[0], v[1]));
        Prepared { inputs, f }
    })
}

const MASK: [bool; 4] = [true, false, true, true];

fn elementwise_cases() -> Vec<Case> {
    vec![
        unary_case("relu", |g, x| g.relu(x)),
        unary_case("abs", |g, x| g.abs(x)),
        unary_case("sigmoid", |g, x| g.sigmoid(x)),
        unary_case("exp", |g, x| g.exp(x)),
        unary_case("negate", |g, x| g.negate(x)),
        unary_case("add_scalar", |g, x| g.add_scalar(x, 0.7)),
        unary_case("mul_scalar", |g, x| g.mul_scalar(x, -1.3)),
        unary_case("square", |g, x| g.square(x)),
        binary_case("add", |g, a, b| g.add(a, b)),
        binary_case("sub", |g, a, b| g.sub(a, b)),
        binary_case("mul", |g, a, b| g.mul(a, b)),
        Case::new("scale", |rng| {
            let factor = uniform(&[2, 3], rng);
            let inputs = vec![uniform(&[2, 3], rng)];
            let f = projected(rng, &[2, 3], move |g, v| g.scale(v[0], &factor));
            Prepared { inputs, f }
        }),
    ]
}

fn structural_cases() -> Vec<Case> {
    let mut cases = Vec::new();
    for (name, kind, axes, keep, out) in [
        ("reduce sum axis 1", ReduceKind::Sum, vec![1], false, vec![2, 4]),
        ("reduce mean axes 0,2 keep", ReduceKind::Mean, vec![0, 2], true, vec![1, 3, 1]),
        ("reduce mean all", ReduceKind::Mean, vec![0, 1, 2], false, vec![]),
    ] {
        cases.push(Case::new(name, move |rng| {
            let inputs = vec![uniform(&[2, 3, 4], rng)];
            let (axes, out) = (axes.clone(), out.clone());
            let f = projected(rng, &out, move |g, v| g.reduce(v[0], kind, &axes, keep));
            Prepared { inputs, f }
        }));
    }
    cases.push(Case::new("reshape", |rng| {
        let inputs = vec![uniform(&[2, 6], rng)];
        let f = projected(rng, &[3, 4], |g, v| g.reshape(v[0], &[3, 4]));
        Prepared { inputs, f }
    }));
    cases.push(Case::new("stack_last/select_last", |rng| {
        let inputs = vec![uniform(&[2, 3], rng), uniform(&[2, 3], rng)];
        let f = projected(rng, &[2, 3], |g, v| {
            let s = g.stack_last(&[v[0], v[1]])?;
            let a = g.select_last(s, 1)?;
            let b = g.select_last(s, 0)?;
            let b2 = g.square(b);
            g.mul(a, b2)
        });
        Prepared { inputs, f }
    }));
    cases
}

fn layer_cases() -> Vec<Case> {
    let mut cases = Vec::new();
    for (stride, padding) in [(1, 1), (2, 1), (2, 0), (1, 0)] {
        cases.push(Case::new(format!("conv2d stride {stride} pad {padding}"), move |rng| {
            let (n, c, o, h, w) = (2, 2, 3, 5, 6);
            let inputs = vec![uniform(&[n, c, h, w], rng), uniform(&[o, c, 3, 3], rng), uniform(&[o], rng)];
            let oh = (h + 2 * padding - 3) / stride + 1;
            let ow = (w + 2 * padding - 3) / stride + 1;
            let f = projected(rng, &[n, o, oh, ow], move |g, v| g.conv2d(v[0], v[1], v[2], stride, padding));
            Prepared { inputs, f }
        }));
    }
    cases.push(Case::new("conv2d 1x1", |rng| {
        let inputs = vec![uniform(&[1, 3, 4, 4], rng), uniform(&[2, 3, 1, 1], rng), uniform(&[2], rng)];
        let f = projected(rng, &[1, 2, 4, 4], |g, v| g.conv2d(v[0], v[1], v[2], 1, 0));
        Prepared { inputs, f }
    }));
    cases.push(Case::new("linear", |rng| {
        let inputs = vec![uniform(&[3, 4], rng), uniform(&[4, 5], rng), uniform(&[5], rng)];
        let f = projected(rng, &[3, 5], |g, v| g.linear(v[0], v[1], v[2]));
        Prepared { inputs, f }
    }));
    cases.push(Case::new("frobenius_inner", |rng| {
        let weight = uniform(&[4, 5], rng);
        let inputs = vec![uniform(&[2, 3, 4, 5], rng)];
        let f = projected(rng, &[2, 3], move |g, v| g.frobenius_inner(v[0], &weight));
        Prepared { inputs, f }
    }));
    cases.push(Case::new("weighted_squared_deviation", |rng| {
        let grid = uniform(&[4, 5], rng);
        let inputs = vec![positive(&[3, 4, 5], rng), uniform(&[3], rng)];
        let f = projected(rng, &[3], move |g, v| g.weighted_squared_deviation(v[0], &grid, v[1]));
        Prepared { inputs, f }
    }));
    cases.push(Case::new("euclidean_norm", |rng| {
        let inputs = vec![away_from_zero(&[3, 2], rng)];
        let f = projected(rng, &[3], |g, v| g.euclidean_norm(v[0]));
        Prepared { inputs, f }
    }));
    cases
}

fn normalization_cases() -> Vec<Case> {
    let mut cases = vec![
        Case::new("spatial_softmax", |rng| {
            let inputs = vec![uniform(&[2, 4, 5], rng)];
            let f = projected(rng, &[2, 4, 5], |g, v| g.spatial_softmax(v[0]));
            Prepared { inputs, f }
        }),
        Case::new("spatial_l1_normalize", |rng| {
            let inputs = vec![positive(&[2, 4, 5], rng)];
            let f = projected(rng, &[2, 4, 5], |g, v| g.spatial_l1_normalize(v[0]));
            Prepared { inputs, f }
        }),
    ];
    for div in ["kl", "js"] {
        for broadcast in [false, true] {
            let name = format!("{div}_divergence{}", if broadcast { " broadcast" } else { "" });
            cases.push(Case::new(name, move |rng| {
                let target_shape: &[usize] = if broadcast { &[4, 5] } else { &[2, 4, 5] };
                let mut target = positive(target_shape, rng);
                let total = target.sum();
                target = target.map(|v| v / total);
                let inputs = vec![positive(&[2, 4, 5], rng)];
                let f = projected(rng, &[2], move |g, v| {
                    if div == "kl" {
                        g.kl_divergence(v[0], &target)
                    } else {
                        g.js_divergence(v[0], &target)
                    }
                });
                Prepared { inputs, f }
            }));
        }
    }
    for kind in RectifierKind::ALL {
        cases.push(Case::new(format!("activate {kind:?}").to_lowercase(), move |rng| {
            // Relu needs a non-empty positive part in every slice: keep a strip positive.
            let mut raw = away_from_zero(&[2, 4, 5], rng);
            for v in raw.data_mut().iter_mut().step_by(3) {
                *v = v.abs();
            }
            let inputs = vec![raw];
            let f = projected(rng, &[2, 4, 5], move |g, v| activate(g, v[0], kind));
            Prepared { inputs, f }
        }));
    }
    cases
}

fn dsnt_cases() -> Vec<Case> {
    vec![
        Case::new("dsnt", |rng| {
            let grid = CoordGrid::new(4, 5);
            let inputs = vec![positive(&[2, 3, 4, 5], rng)];
            let f = projected(rng, &[2, 3, 2], move |g, v| dsnt(g, v[0], &grid));
            Prepared { inputs, f }
        }),
        Case::new("dsnt after softmax", |rng| {
            let grid = CoordGrid::new(5, 4);
            let inputs = vec![uniform(&[2, 5, 4], rng)];
            let f = projected(rng, &[2, 2], move |g, v| {
                let hm = g.spatial_softmax(v[0])?;
                dsnt(g, hm, &grid)
            });
            Prepared { inputs, f }
        }),
        Case::new("coord_variance", |rng| {
            let grid = CoordGrid::new(4, 5);
            let inputs = vec![uniform(&[3, 4, 5], rng)];
            let f = projected(rng, &[3, 2], move |g, v| {
                let hm = g.spatial_softmax(v[0])?;
                let mu = dsnt(g, hm, &grid)?;
                coord_variance(g, hm, &grid, mu)
            });
            Prepared { inputs, f }
        }),
    ]
}

/// Raw `2×2×m×n` logits, `2×2×2` targets and a mask with one hidden keypoint.
fn loss_inputs(rng: &mut ChaCha8Rng, m: usize, n: usize) -> (Tensor, Tensor) {
    (uniform(&[2, 2, m, n], rng), coords(&[2, 2, 2], rng))
}

fn loss_cases() -> Vec<Case> {
    let mut cases = vec![
        Case::new("euclidean_loss", |rng| {
            let target = coords(&[2, 2, 2], rng);
            let inputs = vec![coords(&[2, 2, 2], rng)];
            Prepared {
                inputs,
                f: Box::new(move |g, v| euclidean_loss(g, v[0], &target, &MASK)),
            }
        }),
        Case::new("mse_heatmap_loss", |rng| {
            let target = positive(&[2, 2, 4, 4], rng);
            let inputs = vec![uniform(&[2, 2, 4, 4], rng)];
            Prepared {
                inputs,
                f: Box::new(move |g, v| mse_heatmap_loss(g, v[0], &target)),
            }
        }),
        Case::new("variance_reg", |rng| {
            let grid = CoordGrid::new(5, 6);
            let (raw, _) = loss_inputs(rng, 5, 6);
            Prepared {
                inputs: vec![raw],
                f: Box::new(move |g, v| {
                    let hm = g.spatial_softmax(v[0])?;
                    variance_reg(g, hm, &grid, 1.0, &MASK)
                }),
            }
        }),
    ];
    for (name, kind) in [("kl_reg", Divergence::Kl), ("js_reg", Divergence::Js)] {
        cases.push(Case::new(name, move |rng| {
            let grid = CoordGrid::new(5, 6);
            let (raw, target) = loss_inputs(rng, 5, 6);
            Prepared {
                inputs: vec![raw],
                f: Box::new(move |g, v| {
                    let hm = g.spatial_softmax(v[0])?;
                    divergence_reg(g, hm, &grid, &target, kind, 1.0, &MASK)
                }),
            }
        }));
    }
    for kind in [
        RegularizerKind::None,
        RegularizerKind::Variance { sigma_t: 1.0 },
        RegularizerKind::Kl { sigma_t: 1.0 },
        RegularizerKind::Js { sigma_t: 1.0 },
    ] {
        cases.push(Case::new(format!("combined_loss {}", kind.name()), move |rng| {
            let grid = CoordGrid::new(5, 6);
            let (raw, target) = loss_inputs(rng, 5, 6);
            let reg = Regularization { kind, lambda: 0.5 };
            Prepared {
                inputs: vec![raw],
                f: Box::new(move |g, v| {
                    let hm = g.spatial_softmax(v[0])?;
                    Ok(combined_loss(g, hm, &grid, &target, &MASK, &reg)?.0)
                }),
            }
        }));
    }
    cases
}

/// Whole-model checks: loss of a tiny network with respect to every parameter.
pub fn model_case_report(head: HeadKind, rectifier: RectifierKind, cfg: &GradcheckConfig) -> Result<CaseReport> {
    let spec = ModelSpec {
        backbone: BackboneConfig {
            input_channels: 2,
            input_size: 8,
            stage_widths: vec![3],
            downsample_count: 1,
            keypoints: 2,
        },
        head,
        rectifier,
    };
    let mut worst: f64 = 0.0;
    for seed in 0..cfg.seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::new(spec.clone(), seed)?;
        let images = Tensor::uniform(&[2, 2, 8, 8], 0.0, 1.0, &mut rng);
        let target = coords(&[2, 2, 2], &mut rng);
        let mut pass = model.forward(&images)?;
        let loss = model.loss(&mut pass, &target, &MASK)?;
        pass.graph.backward(loss)?;
        let analytic: Vec<Tensor> = pass.params.iter().map(|&p| pass.graph.grad(p)).collect();
        let eval = |params: &[Tensor]| -> Result<f64> {
            let named = model.param_names().iter().cloned().zip(params.iter().cloned()).collect();
            let m = Model::from_parts(spec.clone(), named)?;
            let mut pass = m.forward(&images)?;
            let loss = m.loss(&mut pass, &target, &MASK)?;
            Ok(pass.graph.value(loss).item())
        };
        worst = worst.max(compare(model.params(), &analytic, eval, cfg)?);
    }
    Ok(CaseReport {
        name: match head {
            HeadKind::Dsnt { regularization } => format!("end-to-end dsnt {} {rectifier:?}", regularization.kind.name()),
            other => format!("end-to-end {} {rectifier:?}", other.label()),
        }
        .to_lowercase(),
        seeds: cfg.seeds,
        worst_relative_error: worst,
        passed: worst < cfg.tolerance,
    })
}

pub fn cases(scope: Scope) -> Vec<Case> {
    match scope {
        Scope::DsntOnly => dsnt_cases(),
        Scope::Losses => loss_cases(),
        Scope::AllOps => {
            let mut all = elementwise_cases();
            all.extend(structural_cases());
            all.extend(layer_cases());
            all.extend(normalization_cases());
            all.extend(dsnt_cases());
            all.extend(loss_cases());
            all
        }
    }
}

/// Runs every case of `scope`; `AllOps` and `Losses` also check whole models.
pub fn run(scope: Scope, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut reports = cases(scope).iter().map(|c| c.run(cfg)).collect::<Result<Vec<_>>>()?;
    if scope != Scope::DsntOnly {
        for head in [HeadKind::hm(), HeadKind::fc(), HeadKind::dsnt(), HeadKind::dsntr()] {
            reports.push(model_case_report(head, RectifierKind::Softmax, cfg)?);
        }
        let variance = HeadKind::Dsnt {
            regularization: Regularization {
                kind: RegularizerKind::Variance { sigma_t: 1.0 },
                lambda: 1.0,
            },
        };
        reports.push(model_case_report(variance, RectifierKind::Sigmoid, cfg)?);
    }
    Ok(GradcheckReport { cases: reports })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scope_parsing() {
        assert_eq!("all-ops".parse::<Scope>().unwrap(), Scope::AllOps);
        assert_eq!("dsnt-only".parse::<Scope>().unwrap(), Scope::DsntOnly);
        assert!("everything".parse::<Scope>().is_err());
    }

    #[test]
    fn compare_flags_wrong_gradient() {
        let cfg = GradcheckConfig::default();
        let x = [Tensor::from_vec(&[2], vec![0.5, -1.5]).unwrap()];
        let f = |xs: &[Tensor]| Ok(xs[0].data().iter().map(|v| v * v).sum::<f64>());
        let right = [x[0].map(|v| 2.0 * v)];
        let wrong = [x[0].map(|v| 2.1 * v)];
        assert!(compare(&x, &right, f, &cfg).unwrap() < 1e-8);
        assert!(compare(&x, &wrong, f, &cfg).unwrap() > 1e-2);
    }

    #[test]
    fn dsnt_scope_passes() {
        let report = run(Scope::DsntOnly, &GradcheckConfig::default()).unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.worst() < 1e-4);
    }
}
