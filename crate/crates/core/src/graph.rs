//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every op appends one node; nodes are stored in execution order, so the
//! node list is already a topological order and `backward` is a single
//! reverse sweep that visits each node once. Gradients from several
//! consumers of one node are summed.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::corr::{correlate_backward, correlate_forward, CorrConfig};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, GroupStats};
use crate::param::{ParamId, ParamSet};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Abs(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    PowScalar(Var, T),
    Sum(Var),
    Mean(Var),
    MeanSpatial(Var),
    WeightedBce {
        logits: Var,
        target: Vec<T>,
        pos_weight: T,
    },
    Correlate {
        f1: Var,
        f2: Var,
        cfg: CorrConfig,
    },
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: GroupStats<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "max_pool2d",
            Op::AvgPool2(_) => "avg_pool2d",
            Op::Upsample2(_) => "upsample_nearest2",
            Op::Concat(..) => "concat_channels",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Abs(_) => "abs",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::PowScalar(..) => "pow_scalar",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MeanSpatial(_) => "mean_spatial",
            Op::WeightedBce { .. } => "weighted_bce",
            Op::Correlate { .. } => "correlate",
            Op::GroupNorm { .. } => "group_norm",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias.iter().copied());
                v
            }
            Op::MaxPool2 { input, .. } => vec![*input],
            Op::WeightedBce { logits, .. } => vec![*logits],
            Op::Correlate { f1, f2, .. } => vec![*f1, *f2],
            Op::GroupNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Op::AvgPool2(a)
            | Op::Upsample2(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Abs(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::PowScalar(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanSpatial(a) => vec![*a],
            Op::Concat(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                vec![*a, *b]
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Clone)]
pub struct Graph<T: Real = f32> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<T>>>,
    bound: BTreeMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
            bound: BTreeMap::new(),
        }
    }

    fn push(&mut self, mut value: Tensor<T>, op: Op<T>) -> Var {
        let requires = match &op {
            Op::Leaf => value.requires_grad(),
            other => other.inputs().iter().any(|v| self.requires[v.0]),
        };
        value.set_requires_grad(requires);
        let _ = value.set_grad(None);
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    fn shaped(&mut self, shape: &[usize], data: Vec<T>, op: Op<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, op))
    }

    /// Adds a leaf. Gradients flow to it iff `tensor.requires_grad()`.
    pub fn input(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf)
    }

    /// Adds a leaf that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf)
    }

    /// Leaf bound to a parameter. Repeated calls with the same id return the
    /// same node, so every use of a shared parameter feeds one gradient.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let t = params.get(id).tensor.clone().with_requires_grad(true);
        let v = self.push(t, Op::Leaf);
        self.bound.insert(id, v);
        v
    }

    /// Parameters used by this graph with their nodes, in id order.
    pub fn param_bindings(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().map(|(&p, &v)| (p, v))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Op names in execution order.
    pub fn trace(&self) -> Vec<&'static str> {
        self.ops.iter().map(Op::name).collect()
    }

    /// Number of nodes created by the op named `name`.
    pub fn count(&self, name: &str) -> usize {
        self.ops.iter().filter(|op| op.name() == name).count()
    }

    /// Data-flow edges `(producer, consumer)` in node order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, op) in self.ops.iter().enumerate() {
            for v in op.inputs() {
                out.push((v.0, i));
            }
        }
        out
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let src = &self.values[a.0];
        let shape = src.shape().to_vec();
        let data = src.data().iter().map(|&x| f(x)).collect();
        self.push(Tensor::new(&shape, data).expect("same length"), op)
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let shape = ta.shape().to_vec();
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        self.shaped(&shape, data, op)
    }

    /// 2-D convolution, weight `O x I x K x K`, optional bias of length `O`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let x = &self.values[input.0];
        let wt = &self.values[weight.0];
        let dims = x.dims4()?;
        let (o, i, kh, kw) = wt.dims4()?;
        if i != dims.1 || kh != kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: wt.shape().to_vec(),
            });
        }
        if let Some(b) = bias {
            if self.values[b.0].shape() != [o] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: wt.shape().to_vec(),
                    rhs: self.values[b.0].shape().to_vec(),
                });
            }
        }
        let geom = ConvGeom::new(dims, o, kh, stride, padding).ok_or_else(|| Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: wt.shape().to_vec(),
        })?;
        let out = kernels::conv2d_forward(&geom, x.data(), wt.data(), bias.map(|b| self.values[b.0].data()));
        self.shaped(
            &[geom.n, o, geom.oh, geom.ow],
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        )
    }

    /// 2x2 max pool with stride 2; ties go to the first element in row-major
    /// window order.
    pub fn max_pool2d(&mut self, input: Var) -> Result<Var> {
        let x = &self.values[input.0];
        let (n, c, h, w) = x.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::BadShape {
                op: "max_pool2d",
                shape: x.shape().to_vec(),
                reason: "spatial extents must be even",
            });
        }
        let (out, argmax) = kernels::max_pool2_forward((n, c, h, w), x.data());
        self.shaped(&[n, c, h / 2, w / 2], out, Op::MaxPool2 { input, argmax })
    }

    /// 2x2 average pool with stride 2, dropping an odd trailing row/column.
    pub fn avg_pool2d(&mut self, input: Var) -> Result<Var> {
        let x = &self.values[input.0];
        let (n, c, h, w) = x.dims4()?;
        if h < 2 || w < 2 {
            return Err(Error::BadShape {
                op: "avg_pool2d",
                shape: x.shape().to_vec(),
                reason: "spatial extents must be at least 2",
            });
        }
        let out = kernels::avg_pool2_forward((n, c, h, w), x.data());
        self.shaped(&[n, c, h / 2, w / 2], out, Op::AvgPool2(input))
    }

    pub fn upsample_nearest2(&mut self, input: Var) -> Result<Var> {
        let x = &self.values[input.0];
        let (n, c, h, w) = x.dims4()?;
        let out = kernels::upsample2_forward((n, c, h, w), x.data());
        self.shaped(&[n, c, 2 * h, 2 * w], out, Op::Upsample2(input))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let (n, ca, h, w) = ta.dims4()?;
        let (nb, cb, hb, wb) = tb.dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out = kernels::concat_forward(n, ca, cb, h * w, ta.data(), tb.data());
        self.shaped(&[n, ca + cb, h, w], out, Op::Concat(a, b))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, softplus, Op::Softplus(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a, c))
    }

    /// `x^p` for `p > 0` on nonnegative inputs; zero maps to zero with a zero
    /// gradient.
    pub fn pow_scalar(&mut self, a: Var, p: T) -> Var {
        self.map(a, |x| if x > T::zero() { x.powf(p) } else { T::zero() }, Op::PowScalar(a, p))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.values[a.0].data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.values[a.0];
        let s: T = t.data().iter().copied().sum();
        let m = s / T::lit(t.numel().max(1) as f64);
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    /// Spatial mean of an NCHW tensor, giving `N x C x 1 x 1`.
    pub fn mean_spatial(&mut self, a: Var) -> Result<Var> {
        let t = &self.values[a.0];
        let (n, c, h, w) = t.dims4()?;
        let plane = h * w;
        let inv = T::one() / T::lit(plane as f64);
        let out = t
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        self.shaped(&[n, c, 1, 1], out, Op::MeanSpatial(a))
    }

    /// Mean over elements of `pos_weight * y * softplus(-z) + (1 - y) * softplus(z)`,
    /// i.e. class-weighted binary cross-entropy evaluated from logits `z`.
    pub fn weighted_bce_with_logits(&mut self, logits: Var, target: &Tensor<T>, pos_weight: T) -> Result<Var> {
        let z = &self.values[logits.0];
        if z.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "weighted_bce",
                lhs: z.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let mut acc = T::zero();
        for (&zi, &yi) in z.data().iter().zip(target.data()) {
            acc += pos_weight * yi * softplus(-zi) + (T::one() - yi) * softplus(zi);
        }
        let m = acc / T::lit(z.numel().max(1) as f64);
        Ok(self.push(
            Tensor::scalar(m),
            Op::WeightedBce {
                logits,
                target: target.data().to_vec(),
                pos_weight,
            },
        ))
    }

    /// Bounded-displacement correlation of `f1` against `f2`.
    pub fn correlate(&mut self, f1: Var, f2: Var, cfg: &CorrConfig) -> Result<Var> {
        cfg.validate()?;
        self.same_shape("correlate", f1, f2)?;
        let dims = self.values[f1.0].dims4()?;
        let out = correlate_forward(cfg, dims, self.values[f1.0].data(), self.values[f2.0].data());
        self.shaped(
            &[dims.0, cfg.out_channels(), dims.2, dims.3],
            out,
            Op::Correlate { f1, f2, cfg: *cfg },
        )
    }

    /// Group normalization with per-channel scale `gamma` and shift `beta`;
    /// statistics are taken per sample over each group of `C / groups`
    /// channels and all pixels.
    pub fn group_norm(&mut self, input: Var, gamma: Var, beta: Var, groups: usize, eps: T) -> Result<Var> {
        let dims = self.values[input.0].dims4()?;
        if groups == 0 || dims.1 % groups != 0 {
            return Err(Error::BadShape {
                op: "group_norm",
                shape: self.values[input.0].shape().to_vec(),
                reason: "channels must split evenly into groups",
            });
        }
        for p in [gamma, beta] {
            if self.values[p.0].shape() != [dims.1] {
                return Err(Error::ShapeMismatch {
                    op: "group_norm",
                    lhs: self.values[input.0].shape().to_vec(),
                    rhs: self.values[p.0].shape().to_vec(),
                });
            }
        }
        let (out, stats) = kernels::group_norm_forward(
            dims,
            groups,
            self.values[input.0].data(),
            self.values[gamma.0].data(),
            self.values[beta.0].data(),
            eps,
        );
        let shape = self.values[input.0].shape().to_vec();
        self.shaped(
            &shape,
            out,
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                stats,
            },
        )
    }

    /// Reverse sweep from a one-element `loss`. Afterwards every node that
    /// requires grad and is reachable from `loss` holds its gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = &self.values[loss.0];
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.requires[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if self.requires[i] {
                for (v, contrib) in self.local_grads(i, &g) {
                    if self.requires[v.0] {
                        match &mut self.grads[v.0] {
                            Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &b)| *a += b),
                            slot => *slot = Some(contrib),
                        }
                    }
                }
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let val = |v: Var| self.values[v.0].data();
        let out = self.values[i].data();
        let unary = |a: Var, f: &dyn Fn(T, T, T) -> T| -> Vec<(Var, Vec<T>)> {
            // f(input, output, upstream)
            let d = val(a)
                .iter()
                .zip(out)
                .zip(g)
                .map(|((&x, &y), &gi)| f(x, y, gi))
                .collect();
            vec![(a, d)]
        };
        match &self.ops[i] {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (gi, gw, gb) = kernels::conv2d_backward(geom, g, val(*input), val(*weight));
                let mut v = vec![(*input, gi), (*weight, gw)];
                if let Some(b) = bias {
                    v.push((*b, gb));
                }
                v
            }
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let dims = self.values[input.0].dims4().expect("rank 4");
                let (gx, gg, gb) = kernels::group_norm_backward(dims, *groups, g, val(*input), val(*gamma), stats);
                vec![(*input, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::MaxPool2 { input, argmax } => {
                let mut d = vec![T::zero(); val(*input).len()];
                for (&idx, &gi) in argmax.iter().zip(g) {
                    d[idx as usize] += gi;
                }
                vec![(*input, d)]
            }
            Op::AvgPool2(a) => {
                let dims = self.values[a.0].dims4().expect("rank 4");
                vec![(*a, kernels::avg_pool2_backward(dims, g))]
            }
            Op::Upsample2(a) => {
                let dims = self.values[a.0].dims4().expect("rank 4");
                vec![(*a, kernels::upsample2_backward(dims, g))]
            }
            Op::Concat(a, b) => {
                let (n, ca, h, w) = self.values[a.0].dims4().expect("rank 4");
                let cb = self.values[b.0].dims4().expect("rank 4").1;
                let (ga, gb) = kernels::concat_backward(n, ca, cb, h * w, g);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Relu(a) => unary(*a, &|x, _, gi| if x > T::zero() { gi } else { T::zero() }),
            Op::Sigmoid(a) => unary(*a, &|_, y, gi| gi * y * (T::one() - y)),
            Op::Softplus(a) => unary(*a, &|x, _, gi| gi * sigmoid(x)),
            Op::Abs(a) => unary(*a, &|x, _, gi| {
                if x > T::zero() {
                    gi
                } else if x < T::zero() {
                    -gi
                } else {
                    T::zero()
                }
            }),
            Op::Scale(a, c) => unary(*a, &|_, _, gi| gi * *c),
            Op::AddScalar(a, _) => vec![(*a, g.to_vec())],
            Op::PowScalar(a, p) => unary(*a, &|x, _, gi| {
                if x > T::zero() {
                    gi * *p * x.powf(*p - T::one())
                } else {
                    T::zero()
                }
            }),
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&x| -x).collect())],
            Op::Mul(a, b) => {
                let ga = g.iter().zip(val(*b)).map(|(&gi, &y)| gi * y).collect();
                let gb = g.iter().zip(val(*a)).map(|(&gi, &x)| gi * x).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Div(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                let ga = g.iter().zip(xb).map(|(&gi, &y)| gi / y).collect();
                let gb = g
                    .iter()
                    .zip(xa)
                    .zip(xb)
                    .map(|((&gi, &x), &y)| -gi * x / (y * y))
                    .collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
            Op::Mean(a) => {
                let n = val(*a).len();
                vec![(*a, vec![g[0] / T::lit(n.max(1) as f64); n])]
            }
            Op::MeanSpatial(a) => {
                let (_, _, h, w) = self.values[a.0].dims4().expect("rank 4");
                let plane = h * w;
                let inv = T::one() / T::lit(plane as f64);
                let mut d = Vec::with_capacity(plane * g.len());
                for &gi in g {
                    d.extend(core::iter::repeat(gi * inv).take(plane));
                }
                vec![(*a, d)]
            }
            Op::WeightedBce {
                logits,
                target,
                pos_weight,
            } => {
                let z = val(*logits);
                let scale = g[0] / T::lit(z.len().max(1) as f64);
                let d = z
                    .iter()
                    .zip(target)
                    .map(|(&zi, &yi)| {
                        let p = sigmoid(zi);
                        scale * ((T::one() - yi) * p - *pos_weight * yi * (T::one() - p))
                    })
                    .collect();
                vec![(*logits, d)]
            }
            Op::Correlate { f1, f2, cfg } => {
                let dims = self.values[f1.0].dims4().expect("rank 4");
                let (g1, g2) = correlate_backward(cfg, dims, val(*f1), val(*f2), g);
                vec![(*f1, g1), (*f2, g2)]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph<f64>, shape: &[usize], data: &[f64]) -> Var {
        g.input(Tensor::new(shape, data.to_vec()).unwrap().with_requires_grad(true))
    }

    #[test]
    fn sum_gives_unit_grad() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 2], &[1.0, -2.0, 3.0, 0.5]);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let y = leaf(&mut g, &[3], &[1.0, 2.0, 3.0]);
        let a = g.sum(y);
        let b = g.sum(y);
        let l = g.add(a, b).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(y).unwrap(), &[2.0; 3]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let y = leaf(&mut g, &[3], &[1.0, 2.0, 3.0]);
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_get_no_grad() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2], &[1.0, 2.0]);
        let c = g.constant(Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
        let m = g.mul(x, c).unwrap();
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn conv_sum_of_ones() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = g.input(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::<f32>::new();
        let data: Vec<f32> = (0..25).map(|i| i as f32 * 0.5 - 3.0).collect();
        let x = g.input(Tensor::new(&[1, 1, 5, 5], data.clone()).unwrap());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.input(Tensor::new(&[1, 1, 3, 3], k).unwrap());
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.input(Tensor::zeros(&[1, 3, 3, 3]));
        let err = g.conv2d(x, w, None, 1, 1).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn max_pool_basic_and_ties() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.max_pool2d(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);

        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::full(&[1, 1, 4, 4], 7.0).with_requires_grad(true));
        let y = g.max_pool2d(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 7.0));
        let s = g.sum(y);
        g.backward(s).unwrap();
        let gx = g.grad(x).unwrap();
        let expect: Vec<f32> = (0..16)
            .map(|i| if (i / 4) % 2 == 0 && (i % 4) % 2 == 0 { 1.0 } else { 0.0 })
            .collect();
        assert_eq!(gx, &expect[..]);
    }

    #[test]
    fn max_pool_rejects_odd() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(g.max_pool2d(x).is_err());
    }

    #[test]
    fn upsample_replicates_and_pool_inverts() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::full(&[1, 1, 1, 1], 5.0));
        let y = g.upsample_nearest2(x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
        assert!(g.value(y).data().iter().all(|&v| v == 5.0));

        let src = Tensor::from_fn(&[2, 3, 4, 5], |i| ((i * 37) % 17) as f32 - 8.0);
        let x = g.input(src.clone());
        let up = g.upsample_nearest2(x).unwrap();
        let back = g.max_pool2d(up).unwrap();
        assert_eq!(g.value(back).data(), src.data());
    }

    #[test]
    fn upsample_grad_counts_replicas() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_fn(&[1, 3, 4, 4], |i| i as f64).with_requires_grad(true));
        let y = g.upsample_nearest2(x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn concat_extents_and_identity() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::from_fn(&[1, 2, 4, 4], |i| i as f32));
        let b = g.input(Tensor::from_fn(&[1, 3, 4, 4], |i| -(i as f32)));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 5, 4, 4]);
        let e = g.input(Tensor::zeros(&[1, 0, 4, 4]));
        let same = g.concat_channels(a, e).unwrap();
        assert_eq!(g.value(same), g.value(a));
        let bad = g.input(Tensor::zeros(&[1, 1, 2, 4]));
        assert!(g.concat_channels(a, bad).is_err());
    }

    #[test]
    fn activations() {
        let mut g = Graph::<f32>::new();
        let z = g.input(Tensor::zeros(&[1]));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).data(), &[0.5]);

        let data = vec![-2.0f32, -0.5, 0.0, 1.5, 3.0];
        let x = g.input(Tensor::new(&[5], data.clone()).unwrap());
        let nx = g.scale(x, -1.0);
        let r1 = g.relu(x);
        let r2 = g.relu(nx);
        let sum = g.add(r1, r2).unwrap();
        let abs: Vec<f32> = data.iter().map(|v| v.abs()).collect();
        assert_eq!(g.value(sum).data(), &abs[..]);
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros(&[2, 2]));
        let b = g.input(Tensor::zeros(&[4]));
        assert!(g.add(a, b).is_err());
        assert!(g.mul(a, b).is_err());
        assert!(g.sub(a, b).is_err());
        assert!(g.div(a, b).is_err());
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let mut g = Graph::<f64>::new();
        let src = Tensor::from_fn(&[1, 2, 4, 4], |i| (i as f64 * 0.37).sin()).with_requires_grad(true);
        let x = g.input(src.clone());
        let w = g.input(Tensor::from_fn(&[2, 2, 3, 3], |i| (i as f64 * 0.11).cos()).with_requires_grad(true));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let r = g.relu(y);
        let p = g.max_pool2d(r).unwrap();
        let u = g.upsample_nearest2(p).unwrap();
        let c = g.correlate(u, x, &CorrConfig::with_displacement(1)).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.value(x).data(), src.data());
    }

    #[test]
    fn group_norm_normalizes_each_group() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[2, 4, 3, 3], |i| ((i * 7) % 11) as f64 - 4.0));
        let gamma = g.input(Tensor::full(&[4], 1.0));
        let beta = g.input(Tensor::zeros(&[4]));
        let y = g.group_norm(x, gamma, beta, 2, 0.0).unwrap();
        for chunk in g.value(y).data().chunks(18) {
            let mean = chunk.iter().sum::<f64>() / 18.0;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 18.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9, "{mean} {var}");
        }
        assert!(g.group_norm(x, gamma, beta, 3, 1e-5).is_err());
    }

    #[test]
    fn group_norm_gradients() {
        use crate::gradcheck::gradient_check;
        let x = Tensor::from_fn(&[2, 4, 3, 2], |i| ((i as f64) * 1.37).sin() * 2.0);
        let w = Tensor::from_fn(&[2, 4, 3, 2], |i| ((i as f64) * 0.71).cos());
        let gamma = Tensor::new(&[4], alloc::vec![1.2, -0.7, 0.4, 2.0]).unwrap();
        let beta = Tensor::new(&[4], alloc::vec![0.1, 0.0, -0.3, 0.5]).unwrap();
        let loss = |g: &mut Graph<f64>, y: Var| -> Result<Var> {
            let wv = g.constant(w.clone());
            let p = g.mul(y, wv)?;
            Ok(g.sum(p))
        };
        let err = gradient_check(
            |g, v| {
                let (ga, be) = (g.constant(gamma.clone()), g.constant(beta.clone()));
                let y = g.group_norm(v, ga, be, 2, 1e-5)?;
                loss(g, y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "input {err}");
        let err = gradient_check(
            |g, v| {
                let (xv, be) = (g.constant(x.clone()), g.constant(beta.clone()));
                let y = g.group_norm(xv, v, be, 4, 1e-5)?;
                loss(g, y)
            },
            &gamma,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "gamma {err}");
        let err = gradient_check(
            |g, v| {
                let (xv, ga) = (g.constant(x.clone()), g.constant(gamma.clone()));
                let y = g.group_norm(xv, ga, v, 1, 1e-5)?;
                loss(g, y)
            },
            &beta,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "beta {err}");
    }
}
