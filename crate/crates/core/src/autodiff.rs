//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles in
//! execution order, which is already a topological order. [`Graph::backward`]
//! walks that record in reverse and accumulates `d(loss)/d(node)` for every node
//! that requires a gradient. Graphs are cheap to build; training code creates a
//! fresh one per forward pass.
//!
//! ```
//! use dsnt_core::autodiff::Graph;
//! use dsnt_core::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.variable(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
//! let sq = g.square(x);
//! let loss = g.sum_all(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).data(), &[2.0, 4.0, 6.0]);
//! ```

use std::fmt;

use crate::error::{shape_mismatch, Error, Result};
use crate::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};

/// Probability floor used by the divergence operations in place of exact zeros.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryKind {
    Relu,
    Abs,
    Sigmoid,
    Exp,
    Negate,
    AddConstant(f64),
    MultiplyConstant(f64),
    Square,
}

impl UnaryKind {
    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryKind::Relu => x.max(0.0),
            UnaryKind::Abs => x.abs(),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Negate => -x,
            UnaryKind::AddConstant(c) => x + c,
            UnaryKind::MultiplyConstant(c) => x * c,
            UnaryKind::Square => x * x,
        }
    }

    /// Derivative given the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryKind::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            UnaryKind::Sigmoid => y * (1.0 - y),
            UnaryKind::Exp => y,
            UnaryKind::Negate => -1.0,
            UnaryKind::AddConstant(_) => 1.0,
            UnaryKind::MultiplyConstant(c) => c,
            UnaryKind::Square => 2.0 * x,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

/// A user-supplied differentiable operation.
///
/// Used for experimental layers and by the gradient-check suite's sensitivity
/// fixtures; the built-in operations cover everything the models need.
pub trait CustomOp: fmt::Debug {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// One gradient per input, each shaped like that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &Tensor) -> Vec<Tensor>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary {
        input: Var,
        kind: UnaryKind,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale {
        input: Var,
        factor: Tensor,
    },
    Reduce {
        input: Var,
        kind: ReduceKind,
        axes: Vec<usize>,
    },
    Reshape {
        input: Var,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    FrobeniusInner {
        input: Var,
        weight: Tensor,
    },
    WeightedSquaredDeviation {
        weights: Var,
        grid: Tensor,
        mean: Var,
    },
    StackLast(Vec<Var>),
    SelectLast {
        input: Var,
        index: usize,
    },
    SpatialSoftmax {
        input: Var,
    },
    SpatialL1Normalize {
        input: Var,
    },
    KlDivergence {
        input: Var,
        target: Tensor,
    },
    JsDivergence {
        input: Var,
        target: Tensor,
    },
    EuclideanNorm {
        input: Var,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record plus gradient accumulators for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf whose gradient is tracked (parameters, differentiable inputs).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient (images, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// `d(loss)/d(v)` from the last backward pass; zeros when `v` does not reach the loss.
    pub fn grad(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shape(v)),
        }
    }

    // ---- elementwise ----

    pub fn unary(&mut self, input: Var, kind: UnaryKind) -> Var {
        let value = self.value(input).map(|x| kind.apply(x));
        let rg = self.needs(&[input]);
        self.push(value, Op::Unary { input, kind }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Relu)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Abs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Exp)
    }

    pub fn negate(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Negate)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, UnaryKind::AddConstant(c))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, UnaryKind::MultiplyConstant(c))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Square)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn scale(&mut self, input: Var, factor: &Tensor) -> Result<Var> {
        let value = self.value(input).zip_map(factor, "scale", |x, f| x * f)?;
        let rg = self.needs(&[input]);
        Ok(self.push(
            value,
            Op::Scale {
                input,
                factor: factor.clone(),
            },
            rg,
        ))
    }

    // ---- shape ----

    /// Sum or mean over `axes`; reduced axes are dropped unless `keep_dims`.
    /// An empty axis list is the identity.
    pub fn reduce(&mut self, input: Var, kind: ReduceKind, axes: &[usize], keep_dims: bool) -> Result<Var> {
        let in_shape = self.shape(input).to_vec();
        let plan = ReducePlan::new(&in_shape, axes)?;
        let src = self.value(input).data();
        let mut out = vec![0.0; plan.out_len];
        plan.for_each(|i, o| out[o] += src[i]);
        if kind == ReduceKind::Mean && plan.count > 1 {
            let inv = 1.0 / plan.count as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let shape = if keep_dims {
            plan.kept_shape.clone()
        } else {
            plan.dropped_shape.clone()
        };
        let value = Tensor::from_vec(&shape, out)?;
        let rg = self.needs(&[input]);
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        Ok(self.push(
            value,
            Op::Reduce {
                input,
                kind,
                axes: sorted,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(input, ReduceKind::Sum, axes, false)
    }

    pub fn mean(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(input, ReduceKind::Mean, axes, false)
    }

    /// Sum over every axis, giving a rank-0 scalar.
    pub fn sum_all(&mut self, input: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(input).len()).collect();
        self.sum(input, &axes).expect("all axes are valid")
    }

    pub fn mean_all(&mut self, input: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(input).len()).collect();
        self.mean(input, &axes).expect("all axes are valid")
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).reshape(shape)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::Reshape { input }, rg))
    }

    /// Stacks equally shaped inputs along a new trailing axis.
    pub fn stack_last(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| shape_mismatch("stack_last", &[], &[]))?;
        let shape = self.shape(first).to_vec();
        for &v in inputs {
            if self.shape(v) != shape.as_slice() {
                return Err(shape_mismatch("stack_last", &shape, self.shape(v)));
            }
        }
        let k = inputs.len();
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n * k];
        for (j, &v) in inputs.iter().enumerate() {
            for (i, &x) in self.value(v).data().iter().enumerate() {
                data[i * k + j] = x;
            }
        }
        let mut out_shape = shape;
        out_shape.push(k);
        let value = Tensor::from_vec(&out_shape, data)?;
        let rg = self.needs(inputs);
        Ok(self.push(value, Op::StackLast(inputs.to_vec()), rg))
    }

    /// Picks entry `index` of the last axis, dropping that axis.
    pub fn select_last(&mut self, input: Var, index: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let (&k, lead) = shape
            .split_last()
            .ok_or(Error::InvalidAxis { axis: 0, rank: 0 })?;
        if index >= k {
            return Err(Error::InvalidAxis {
                axis: index,
                rank: k,
            });
        }
        let data: Vec<f64> = self.value(input).data().iter().skip(index).step_by(k).copied().collect();
        let value = Tensor::from_vec(lead, data)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::SelectLast { input, index }, rg))
    }

    // ---- layers ----

    /// 2-D cross-correlation: input `N×C×H×W`, weight `O×C×kh×kw`, bias `O`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(input), self.shape(weight), self.shape(bias), stride, padding)?;
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; geom.n * geom.o * geom.out_hw()];
        let mut cols = vec![0.0; geom.col_rows() * geom.out_hw()];
        let hw = geom.out_hw();
        for s in 0..geom.n {
            geom.im2col(&x[s * geom.in_sample()..(s + 1) * geom.in_sample()], &mut cols);
            let out_s = &mut out[s * geom.o * hw..(s + 1) * geom.o * hw];
            for (oc, row) in out_s.chunks_mut(hw).enumerate() {
                row.fill(b[oc]);
            }
            matmul_acc(w, &cols, out_s, geom.o, geom.col_rows(), hw);
        }
        let value = Tensor::from_vec(&[geom.n, geom.o, geom.out_h, geom.out_w], out)?;
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    /// Affine map: input `N×F`, weight `F×G`, bias `G`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(shape_mismatch("linear", &xs, &ws));
        }
        if bs != [ws[1]] {
            return Err(shape_mismatch("linear bias", &ws, &bs));
        }
        let (n, f, g) = (xs[0], xs[1], ws[1]);
        let b = self.value(bias).data();
        let mut out: Vec<f64> = (0..n).flat_map(|_| b.iter().copied()).collect();
        matmul_acc(self.value(input).data(), self.value(weight).data(), &mut out, n, f, g);
        let value = Tensor::from_vec(&[n, g], out)?;
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(value, Op::Linear { input, weight, bias }, rg))
    }

    /// Frobenius inner product of the trailing axes of `input` with a constant
    /// `weight` shaped like those axes. An `m×n` input gives a scalar; an
    /// `N×K×m×n` input gives `N×K`.
    pub fn frobenius_inner(&mut self, input: Var, weight: &Tensor) -> Result<Var> {
        let (lead, inner) = split_trailing(self.shape(input), weight.shape(), "frobenius_inner")?;
        let x = self.value(input).data();
        let w = weight.data();
        let out: Vec<f64> = x
            .chunks(inner)
            .map(|c| c.iter().zip(w).map(|(a, b)| a * b).sum())
            .collect();
        let value = Tensor::from_vec(&lead, out)?;
        let rg = self.needs(&[input]);
        Ok(self.push(
            value,
            Op::FrobeniusInner {
                input,
                weight: weight.clone(),
            },
            rg,
        ))
    }

    /// `Σᵢⱼ wᵢⱼ·(gᵢⱼ − mean)²` per leading index, with `weights` shaped
    /// `[lead.., m, n]`, constant `grid` shaped `m×n` and `mean` shaped `lead`.
    pub fn weighted_squared_deviation(&mut self, weights: Var, grid: &Tensor, mean: Var) -> Result<Var> {
        let (lead, inner) = split_trailing(self.shape(weights), grid.shape(), "weighted_squared_deviation")?;
        if self.shape(mean) != lead.as_slice() {
            return Err(shape_mismatch("weighted_squared_deviation mean", &lead, self.shape(mean)));
        }
        let z = self.value(weights).data();
        let mu = self.value(mean).data();
        let g = grid.data();
        let out: Vec<f64> = z
            .chunks(inner)
            .zip(mu)
            .map(|(c, &m)| c.iter().zip(g).map(|(zv, gv)| zv * (gv - m) * (gv - m)).sum())
            .collect();
        let value = Tensor::from_vec(&lead, out)?;
        let rg = self.needs(&[weights, mean]);
        Ok(self.push(
            value,
            Op::WeightedSquaredDeviation {
                weights,
                grid: grid.clone(),
                mean,
            },
            rg,
        ))
    }

    /// Softmax over the last two axes, evaluated with max subtraction.
    pub fn spatial_softmax(&mut self, input: Var) -> Result<Var> {
        let inner = spatial_size(self.shape(input))?;
        let mut out = self.value(input).clone();
        for slice in out.data_mut().chunks_mut(inner) {
            let max = slice.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in slice.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            slice.iter_mut().for_each(|v| *v /= total);
        }
        let rg = self.needs(&[input]);
        Ok(self.push(out, Op::SpatialSoftmax { input }, rg))
    }

    /// Divides each slice over the last two axes by its sum. Slices summing to
    /// zero are an error.
    pub fn spatial_l1_normalize(&mut self, input: Var) -> Result<Var> {
        let inner = spatial_size(self.shape(input))?;
        let mut out = self.value(input).clone();
        for (idx, slice) in out.data_mut().chunks_mut(inner).enumerate() {
            let total: f64 = slice.iter().sum();
            if total == 0.0 || !total.is_finite() {
                return Err(Error::DegenerateNormalization { slice: idx });
            }
            slice.iter_mut().for_each(|v| *v /= total);
        }
        let rg = self.needs(&[input]);
        Ok(self.push(out, Op::SpatialL1Normalize { input }, rg))
    }

    /// `KL(P‖Q) = Σ P·ln(P/Q)` over the trailing axes shared with `target`.
    /// Zero entries of `P` contribute nothing; `Q` is floored at [`PROB_FLOOR`].
    pub fn kl_divergence(&mut self, input: Var, target: &Tensor) -> Result<Var> {
        let value = divergence_forward(self.value(input), target, kl_terms, "kl_divergence")?;
        let rg = self.needs(&[input]);
        Ok(self.push(
            value,
            Op::KlDivergence {
                input,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// Jensen-Shannon divergence `½KL(P‖M) + ½KL(Q‖M)` with `M = (P+Q)/2`.
    pub fn js_divergence(&mut self, input: Var, target: &Tensor) -> Result<Var> {
        let value = divergence_forward(self.value(input), target, js_terms, "js_divergence")?;
        let rg = self.needs(&[input]);
        Ok(self.push(
            value,
            Op::JsDivergence {
                input,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// L2 norm over the last axis. The gradient at the origin is zero.
    pub fn euclidean_norm(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let (&d, lead) = shape
            .split_last()
            .ok_or_else(|| shape_mismatch("euclidean_norm", &shape, &[1]))?;
        let out: Vec<f64> = self
            .value(input)
            .data()
            .chunks(d.max(1))
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let value = Tensor::from_vec(lead, out)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::EuclideanNorm { input }, rg))
    }

    pub fn custom(&mut self, inputs: &[Var], op: Box<dyn CustomOp>) -> Result<Var> {
        let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
        let value = op.forward(&vals)?;
        let rg = self.needs(inputs);
        Ok(self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        ))
    }

    // ---- backward ----

    /// Populates gradients of the scalar `loss` with respect to every node that
    /// requires one. Previous gradients are discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(dy) = self.grads[id].take() else {
                continue;
            };
            self.backward_node(id, &dy)?;
            self.grads[id] = Some(dy);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v), "gradient shape mismatch");
        match &mut self.grads[v.0] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&mut self, id: usize, dy: &Tensor) -> Result<()> {
        let node = &self.nodes[id];
        let y = &node.value;
        let mut out: Vec<(Var, Tensor)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Unary { input, kind } => {
                let x = self.value(*input);
                let mut g = dy.clone();
                for ((gv, &xv), &yv) in g.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                    *gv *= kind.derivative(xv, yv);
                }
                out.push((*input, g));
            }
            Op::Add(a, b) => {
                out.push((*a, dy.clone()));
                out.push((*b, dy.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, dy.clone()));
                out.push((*b, dy.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                out.push((*a, dy.zip_map(bv, "mul backward", |g, x| g * x)?));
                out.push((*b, dy.zip_map(av, "mul backward", |g, x| g * x)?));
            }
            Op::Scale { input, factor } => {
                out.push((*input, dy.zip_map(factor, "scale backward", |g, f| g * f)?));
            }
            Op::Reduce { input, kind, axes } => {
                let in_shape = self.shape(*input).to_vec();
                let plan = ReducePlan::new(&in_shape, axes)?;
                let scale = match kind {
                    ReduceKind::Sum => 1.0,
                    ReduceKind::Mean => 1.0 / plan.count.max(1) as f64,
                };
                let src = dy.data();
                let mut g = vec![0.0; in_shape.iter().product()];
                plan.for_each(|i, o| g[i] = src[o] * scale);
                out.push((*input, Tensor::from_vec(&in_shape, g)?));
            }
            Op::Reshape { input } => {
                out.push((*input, dy.reshape(self.shape(*input))?));
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let geom = ConvGeometry::new(
                    self.shape(input),
                    self.shape(weight),
                    self.shape(bias),
                    *stride,
                    *padding,
                )?;
                let x = self.value(input).data();
                let w = self.value(weight).data();
                let want_x = self.nodes[input.0].requires_grad;
                let hw = geom.out_hw();
                let rows = geom.col_rows();
                let mut dx = vec![0.0; if want_x { x.len() } else { 0 }];
                let mut dw = vec![0.0; w.len()];
                let mut db = vec![0.0; geom.o];
                let mut cols = vec![0.0; rows * hw];
                let mut dcols = vec![0.0; rows * hw];
                for s in 0..geom.n {
                    let dy_s = &dy.data()[s * geom.o * hw..(s + 1) * geom.o * hw];
                    for (oc, row) in dy_s.chunks(hw).enumerate() {
                        db[oc] += row.iter().sum::<f64>();
                    }
                    geom.im2col(&x[s * geom.in_sample()..(s + 1) * geom.in_sample()], &mut cols);
                    matmul_bt_acc(dy_s, &cols, &mut dw, geom.o, hw, rows);
                    if want_x {
                        dcols.fill(0.0);
                        matmul_at_acc(w, dy_s, &mut dcols, rows, geom.o, hw);
                        geom.col2im_acc(
                            &dcols,
                            &mut dx[s * geom.in_sample()..(s + 1) * geom.in_sample()],
                        );
                    }
                }
                if want_x {
                    out.push((input, Tensor::from_vec(self.shape(input), dx)?));
                }
                out.push((weight, Tensor::from_vec(self.shape(weight), dw)?));
                out.push((bias, Tensor::from_vec(self.shape(bias), db)?));
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let xs = self.shape(input);
                let (n, f) = (xs[0], xs[1]);
                let g = self.shape(weight)[1];
                let mut dx = vec![0.0; n * f];
                matmul_bt_acc(dy.data(), self.value(weight).data(), &mut dx, n, g, f);
                let mut dw = vec![0.0; f * g];
                matmul_at_acc(self.value(input).data(), dy.data(), &mut dw, f, n, g);
                let mut db = vec![0.0; g];
                for row in dy.data().chunks(g) {
                    db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                out.push((input, Tensor::from_vec(&[n, f], dx)?));
                out.push((weight, Tensor::from_vec(&[f, g], dw)?));
                out.push((bias, Tensor::from_vec(&[g], db)?));
            }
            Op::FrobeniusInner { input, weight } => {
                let inner = weight.len();
                let mut g = Vec::with_capacity(dy.len() * inner);
                for &d in dy.data() {
                    g.extend(weight.data().iter().map(|w| d * w));
                }
                out.push((*input, Tensor::from_vec(self.shape(*input), g)?));
            }
            Op::WeightedSquaredDeviation {
                weights,
                grid,
                mean,
            } => {
                let inner = grid.len();
                let z = self.value(*weights).data();
                let mu = self.value(*mean).data();
                let mut dz = Vec::with_capacity(z.len());
                let mut dmu = Vec::with_capacity(mu.len());
                for ((c, &m), &d) in z.chunks(inner).zip(mu).zip(dy.data()) {
                    let mut acc = 0.0;
                    for (&zv, &gv) in c.iter().zip(grid.data()) {
                        let dev = gv - m;
                        dz.push(d * dev * dev);
                        acc += zv * dev;
                    }
                    dmu.push(-2.0 * d * acc);
                }
                out.push((*weights, Tensor::from_vec(self.shape(*weights), dz)?));
                out.push((*mean, Tensor::from_vec(self.shape(*mean), dmu)?));
            }
            Op::StackLast(inputs) => {
                let k = inputs.len();
                for (j, &v) in inputs.iter().enumerate() {
                    let g: Vec<f64> = dy.data().iter().skip(j).step_by(k).copied().collect();
                    out.push((v, Tensor::from_vec(self.shape(v), g)?));
                }
            }
            Op::SelectLast { input, index } => {
                let shape = self.shape(*input);
                let k = *shape.last().expect("rank checked in forward");
                let mut g = vec![0.0; shape.iter().product()];
                for (i, &d) in dy.data().iter().enumerate() {
                    g[i * k + index] = d;
                }
                out.push((*input, Tensor::from_vec(shape, g)?));
            }
            Op::SpatialSoftmax { input } => {
                let inner = spatial_size(y.shape())?;
                let mut g = Vec::with_capacity(y.len());
                for (ys, ds) in y.data().chunks(inner).zip(dy.data().chunks(inner)) {
                    let dot: f64 = ys.iter().zip(ds).map(|(a, b)| a * b).sum();
                    g.extend(ys.iter().zip(ds).map(|(yv, dv)| yv * (dv - dot)));
                }
                out.push((*input, Tensor::from_vec(y.shape(), g)?));
            }
            Op::SpatialL1Normalize { input } => {
                let inner = spatial_size(y.shape())?;
                let x = self.value(*input).data();
                let mut g = Vec::with_capacity(y.len());
                for ((ys, ds), xs) in y
                    .data()
                    .chunks(inner)
                    .zip(dy.data().chunks(inner))
                    .zip(x.chunks(inner))
                {
                    let total: f64 = xs.iter().sum();
                    let dot: f64 = ys.iter().zip(ds).map(|(a, b)| a * b).sum();
                    g.extend(ds.iter().map(|dv| (dv - dot) / total));
                }
                out.push((*input, Tensor::from_vec(y.shape(), g)?));
            }
            Op::KlDivergence { input, target } => {
                let g = divergence_backward(self.value(*input), target, dy, |p, q| {
                    (p.max(PROB_FLOOR) / q.max(PROB_FLOOR)).ln() + 1.0
                });
                out.push((*input, g?));
            }
            Op::JsDivergence { input, target } => {
                let g = divergence_backward(self.value(*input), target, dy, |p, q| {
                    let m = (0.5 * (p + q)).max(PROB_FLOOR);
                    0.5 * (p.max(PROB_FLOOR) / m).ln()
                });
                out.push((*input, g?));
            }
            Op::EuclideanNorm { input } => {
                let x = self.value(*input);
                let d = *x.shape().last().unwrap_or(&1);
                let mut g = Vec::with_capacity(x.len());
                for (c, (&norm, &dv)) in x.data().chunks(d.max(1)).zip(y.data().iter().zip(dy.data())) {
                    if norm > 0.0 {
                        g.extend(c.iter().map(|v| dv * v / norm));
                    } else {
                        g.extend(std::iter::repeat(0.0).take(c.len()));
                    }
                }
                out.push((*input, Tensor::from_vec(x.shape(), g)?));
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = op.backward(&vals, y, dy);
                for (&v, g) in inputs.iter().zip(grads) {
                    if g.shape() != self.shape(v) {
                        return Err(shape_mismatch("custom backward", self.shape(v), g.shape()));
                    }
                    out.push((v, g));
                }
            }
        }
        for (v, g) in out {
            self.accumulate(v, g);
        }
        Ok(())
    }
}

/// Splits `shape` into leading dims and the trailing block matching `trailing`.
fn split_trailing(shape: &[usize], trailing: &[usize], op: &'static str) -> Result<(Vec<usize>, usize)> {
    if shape.len() < trailing.len() || &shape[shape.len() - trailing.len()..] != trailing {
        return Err(shape_mismatch(op, shape, trailing));
    }
    let lead = shape[..shape.len() - trailing.len()].to_vec();
    Ok((lead, trailing.iter().product()))
}

fn spatial_size(shape: &[usize]) -> Result<usize> {
    if shape.len() < 2 {
        return Err(Error::InvalidAxis {
            axis: 1,
            rank: shape.len(),
        });
    }
    Ok(shape[shape.len() - 2] * shape[shape.len() - 1])
}

fn kl_terms(p: f64, q: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        p * (p / q.max(PROB_FLOOR)).ln()
    }
}

fn js_terms(p: f64, q: f64) -> f64 {
    let m = 0.5 * (p + q);
    let half = |a: f64| if a <= 0.0 { 0.0 } else { a * (a / m).ln() };
    0.5 * (half(p) + half(q))
}

fn divergence_forward(input: &Tensor, target: &Tensor, term: fn(f64, f64) -> f64, op: &'static str) -> Result<Tensor> {
    // A target with the full input shape pairs slices one-to-one; otherwise it
    // must match the trailing axes and is shared by every slice.
    let (lead, inner) = if input.shape() == target.shape() && input.rank() >= 2 {
        let r = input.rank();
        (input.shape()[..r - 2].to_vec(), input.shape()[r - 2] * input.shape()[r - 1])
    } else {
        split_trailing(input.shape(), target.shape(), op)?
    };
    let broadcast = target.len() == inner;
    let out: Vec<f64> = input
        .data()
        .chunks(inner)
        .enumerate()
        .map(|(s, p)| {
            let q = if broadcast {
                target.data()
            } else {
                &target.data()[s * inner..(s + 1) * inner]
            };
            p.iter().zip(q).map(|(&pv, &qv)| term(pv, qv)).sum()
        })
        .collect();
    Tensor::from_vec(&lead, out)
}

fn divergence_backward(
    input: &Tensor,
    target: &Tensor,
    dy: &Tensor,
    deriv: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let inner = input.len() / dy.len().max(1);
    let broadcast = target.len() == inner;
    let mut g = Vec::with_capacity(input.len());
    for (s, (p, &d)) in input.data().chunks(inner).zip(dy.data()).enumerate() {
        let q = if broadcast {
            target.data()
        } else {
            &target.data()[s * inner..(s + 1) * inner]
        };
        g.extend(p.iter().zip(q).map(|(&pv, &qv)| d * deriv(pv, qv)));
    }
    Tensor::from_vec(input.shape(), g)
}

struct ReducePlan {
    /// Output offset stride for each input axis (0 on reduced axes).
    out_strides: Vec<usize>,
    in_shape: Vec<usize>,
    out_len: usize,
    count: usize,
    kept_shape: Vec<usize>,
    dropped_shape: Vec<usize>,
}

impl ReducePlan {
    fn new(shape: &[usize], axes: &[usize]) -> Result<Self> {
        let rank = shape.len();
        let mut reduced = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(Error::InvalidAxis { axis: a, rank });
            }
            reduced[a] = true;
        }
        let kept_shape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .map(|(&d, &r)| if r { 1 } else { d })
            .collect();
        let dropped_shape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&d, _)| d)
            .collect();
        let mut out_strides = vec![0; rank];
        let mut stride = 1;
        for ax in (0..rank).rev() {
            if !reduced[ax] {
                out_strides[ax] = stride;
                stride *= shape[ax];
            }
        }
        let count = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| r)
            .map(|(&d, _)| d)
            .product();
        Ok(Self {
            out_strides,
            in_shape: shape.to_vec(),
            out_len: dropped_shape.iter().product(),
            count,
            kept_shape,
            dropped_shape,
        })
    }

    /// Calls `f(input_offset, output_offset)` for every input element.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let total: usize = self.in_shape.iter().product();
        let rank = self.in_shape.len();
        let mut idx = vec![0usize; rank];
        let mut out = 0usize;
        for i in 0..total {
            f(i, out);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                out += self.out_strides[ax];
                if idx[ax] < self.in_shape[ax] {
                    break;
                }
                out -= self.out_strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], b: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
            return Err(shape_mismatch("conv2d", x, w));
        }
        if b != [w[0]] {
            return Err(shape_mismatch("conv2d bias", w, b));
        }
        if stride == 0 {
            return Err(Error::InvalidConfig("conv2d stride must be positive".into()));
        }
        let (h, wd, kh, kw) = (x[2], x[3], w[2], w[3]);
        if kh > h + 2 * padding || kw > wd + 2 * padding || kh == 0 || kw == 0 {
            return Err(shape_mismatch("conv2d kernel", x, w));
        }
        Ok(Self {
            n: x[0],
            c: x[1],
            h,
            w: wd,
            o: w[0],
            kh,
            kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (wd + 2 * padding - kw) / stride + 1,
        })
    }

    fn out_hw(&self) -> usize {
        self.out_h * self.out_w
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn in_sample(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Visits `(col_row, col_index, input_offset)` for every in-bounds tap.
    #[inline]
    fn taps(&self, mut f: impl FnMut(usize, usize, usize)) {
        let hw = self.out_hw();
        for ch in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ch * self.kh + ky) * self.kw + kx;
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = (ch * self.h + iy as usize) * self.w;
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(row * hw, oy * self.out_w + ox, base + ix as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        cols.fill(0.0);
        self.taps(|row, col, off| cols[row + col] = x[off]);
    }

    fn col2im_acc(&self, cols: &[f64], dx: &mut [f64]) {
        self.taps(|row, col, off| dx[off] += cols[row + col]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = g.variable(Tensor::ones(&[1, 1, 3, 3]));
        let b = g.variable(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).item(), 9.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = Tensor::uniform(&[2, 1, 5, 4], -1.0, 1.0, &mut rng);
        let mut kernel = Tensor::zeros(&[1, 1, 3, 3]);
        kernel.set(&[0, 0, 1, 1], 1.0);
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let w = g.variable(kernel);
        let b = g.variable(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.value(y), &input);
    }

    #[test]
    fn conv_output_size_and_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 7, 7]));
        let w = g.variable(Tensor::zeros(&[4, 2, 3, 3]));
        let b = g.variable(Tensor::zeros(&[4]));
        let y = g.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 4, 4, 4]);

        let bad = g.variable(Tensor::zeros(&[4, 3, 3, 3]));
        let err = g.conv2d(x, bad, b, 1, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2, 7, 7]") && msg.contains("[4, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn elementwise_values() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[-1.5, 0.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0]);
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).data()[1], 0.5);
        let y = g.variable(t(&[2], &[0.0, 2f64.ln()]));
        let e = g.exp(y);
        assert_eq!(g.value(e).data()[0], 1.0);
        assert!((g.value(e).data()[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn relu_and_abs_gradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.variable(t(&[3], &[-1.0, 0.0, 1.0]));
        let r = g.relu(x);
        let a = g.abs(x);
        let s = g.add(r, a).unwrap();
        let loss = g.sum_all(s);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).data(), &[-1.0, 0.0, 2.0]);
    }

    #[test]
    fn reduce_sum_mean_and_axes() {
        let mut g = Graph::new();
        let x = g.variable(t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.sum(x, &[0]).unwrap();
        assert_eq!(g.value(s).item(), 6.0);
        let id = g.mean(x, &[]).unwrap();
        assert_eq!(g.value(id), g.value(x));

        let m = g.variable(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let rows = g.sum(m, &[1]).unwrap();
        assert_eq!(g.value(rows).data(), &[6.0, 15.0]);
        let cols = g.reduce(m, ReduceKind::Mean, &[0], true).unwrap();
        assert_eq!(g.shape(cols), &[1, 3]);
        assert_eq!(g.value(cols).data(), &[2.5, 3.5, 4.5]);
        assert!(matches!(g.sum(m, &[2]), Err(Error::InvalidAxis { axis: 2, rank: 2 })));
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::full(&[2, 3, 4], 0.7));
        let loss = g.sum_all(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x), Tensor::ones(&[2, 3, 4]));
    }

    #[test]
    fn frobenius_inner_examples() {
        let b = t(&[2, 2], &[1., 2., 3., 4.]);
        let mut g = Graph::new();
        let a = g.variable(t(&[2, 2], &[1., 0., 0., 1.]));
        let y = g.frobenius_inner(a, &b).unwrap();
        assert_eq!(g.value(y).item(), 5.0);
        g.backward(y).unwrap();
        assert_eq!(g.grad(a), b);

        let z = g.variable(Tensor::zeros(&[2, 2]));
        let y0 = g.frobenius_inner(z, &b).unwrap();
        assert_eq!(g.value(y0).item(), 0.0);
        assert!(g.frobenius_inner(z, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn linear_examples() {
        let mut g = Graph::new();
        let x = g.variable(t(&[1, 2], &[1., 1.]));
        let w = g.variable(t(&[2, 1], &[1., 1.]));
        let b = g.variable(t(&[1], &[1.]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0]);

        let xi = g.variable(t(&[2, 2], &[0.3, -0.2, 1.5, 2.0]));
        let eye = g.variable(t(&[2, 2], &[1., 0., 0., 1.]));
        let zero = g.variable(Tensor::zeros(&[2]));
        let yi = g.linear(xi, eye, zero).unwrap();
        assert_eq!(g.value(yi), g.value(xi));
        assert!(g.linear(x, eye, b).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_variable_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::ones(&[2]));
        let unused = g.variable(Tensor::ones(&[3]));
        let _dangling = g.square(unused);
        let loss = g.sum_all(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(unused), Tensor::zeros(&[3]));
    }

    #[test]
    fn repeated_backward_resets_accumulators() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, -2.0]));
        let sq = g.square(x);
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        let first = g.grad(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x), first);
    }

    #[test]
    fn shared_input_accumulates_each_use() {
        let mut g = Graph::new();
        let x = g.variable(t(&[1], &[3.0]));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let loss = g.sum_all(z);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).data(), &[7.0]);
    }

    #[test]
    fn stack_last_interleaves() {
        let mut g = Graph::new();
        let a = g.variable(t(&[2], &[1., 2.]));
        let b = g.variable(t(&[2], &[3., 4.]));
        let s = g.stack_last(&[a, b]).unwrap();
        assert_eq!(g.shape(s), &[2, 2]);
        assert_eq!(g.value(s).data(), &[1., 3., 2., 4.]);
    }

    #[test]
    fn divergences_of_identical_distributions_are_zero() {
        let p = t(&[1, 2, 2], &[0.1, 0.2, 0.3, 0.4]);
        let q = t(&[2, 2], &[0.1, 0.2, 0.3, 0.4]);
        let mut g = Graph::new();
        let x = g.variable(p);
        let kl = g.kl_divergence(x, &q).unwrap();
        let js = g.js_divergence(x, &q).unwrap();
        assert!(g.value(kl).item().abs() < 1e-15);
        assert!(g.value(js).item().abs() < 1e-15);
    }

    #[test]
    fn euclidean_norm_and_zero_gradient() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2, 2], &[0.3, 0.4, 0.0, 0.0]));
        let n = g.euclidean_norm(x).unwrap();
        assert!((g.value(n).data()[0] - 0.5).abs() < 1e-15);
        let loss = g.sum_all(n);
        g.backward(loss).unwrap();
        let gr = g.grad(x);
        assert!((gr.data()[0] - 0.6).abs() < 1e-15);
        assert_eq!(&gr.data()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn l1_normalize_degenerate_slice() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(matches!(
            g.spatial_l1_normalize(x),
            Err(Error::DegenerateNormalization { slice: 0 })
        ));
    }
}
