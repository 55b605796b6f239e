//! Recorded computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is always a
//! topological order. A graph built with [`Graph::shape_only`] records shapes
//! but never allocates values, which lets full-size configurations be traced
//! cheaply.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self as k, ConvGeom, ScanDims, ScanInputs};
use super::ops::{Attrs, Op, PrimitiveKind};
use super::{numel, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Values saved at forward time for the backward pass.
#[derive(Clone, Debug)]
enum Aux<T> {
    None,
    /// Per-row (layer norm) or per-channel (batch norm) mean and rstd / var.
    Stats(Vec<T>, Vec<T>),
    Mask(Vec<T>),
    States(Vec<T>),
    Probs(Vec<T>),
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op,
    inputs: Vec<usize>,
    shape: Vec<usize>,
    value: Option<Vec<T>>,
    aux: Aux<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    shape_only: bool,
    rng: ChaCha8Rng,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self::with_seed(0)
    }

    /// Numeric graph whose dropout masks are drawn from `seed`.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            shape_only: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn shape_only() -> Self {
        Self {
            nodes: Vec::new(),
            shape_only: true,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn is_shape_only(&self) -> bool {
        self.shape_only
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// All nodes in recording (topological) order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.push_leaf(t.shape().to_vec(), Some(t.data().to_vec()))
    }

    pub fn input_owned(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push_leaf(shape, Some(t.into_data()))
    }

    /// Leaf known only by shape. Only valid on shape-only graphs.
    pub fn input_shape(&mut self, shape: &[usize]) -> Result<Var> {
        if !self.shape_only {
            return Err(Error::InvalidArgument(
                "shape-only leaves need a shape-only graph".into(),
            ));
        }
        if shape.contains(&0) {
            return Err(Error::invalid_shape("leaf", shape, "extents must be >= 1"));
        }
        Ok(self.push_leaf(shape.to_vec(), None))
    }

    fn push_leaf(&mut self, shape: Vec<usize>, data: Option<Vec<T>>) -> Var {
        let value = if self.shape_only { None } else { data };
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            shape,
            value,
            aux: Aux::None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn data(&self, v: Var) -> Result<&[T]> {
        self.nodes[v.0].value.as_deref().ok_or(Error::ShapeOnly)
    }

    pub fn value(&self, v: Var) -> Result<Tensor<T>> {
        Ok(Tensor::from_parts(
            self.nodes[v.0].shape.clone(),
            self.data(v)?.to_vec(),
        ))
    }

    /// Batch mean and biased variance recorded by a training-mode batch norm.
    pub fn batch_stats(&self, v: Var) -> Option<(&[T], &[T])> {
        match (&self.nodes[v.0].op, &self.nodes[v.0].aux) {
            (Op::BatchNorm { train: true, .. }, Aux::Stats(m, s)) => Some((m, s)),
            _ => None,
        }
    }

    /// Generic entry point: primitive kind plus an attribute map. Unknown
    /// attributes are rejected.
    pub fn apply_primitive(&mut self, kind: PrimitiveKind, inputs: &[Var], attrs: &Attrs) -> Result<Var> {
        let op = attrs.to_op(kind)?;
        if let Op::Dropout { rate } = op {
            if let Some(seed) = attrs.0.get("seed") {
                let seed = match seed {
                    super::AttrValue::Int(s) => *s as u64,
                    _ => return Err(Error::InvalidArgument("dropout: seed must be an integer".into())),
                };
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                return self.dropout_with(inputs[0], rate, &mut rng);
            }
        }
        self.apply(op, inputs)
    }

    /// Records `op` applied to `inputs`.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        if let Op::Dropout { rate } = op {
            if inputs.len() != 1 {
                return Err(Error::InvalidArgument("dropout: expects 1 input".into()));
            }
            let mut rng = std::mem::replace(&mut self.rng, ChaCha8Rng::seed_from_u64(0));
            let r = self.dropout_with(inputs[0], rate, &mut rng);
            self.rng = rng;
            return r;
        }
        self.record(op, inputs, None)
    }

    fn dropout_with(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        let mask = if self.shape_only {
            None
        } else {
            let keep = T::of(1.0 / (1.0 - rate));
            Some(
                (0..numel(self.shape(x)))
                    .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
                    .collect(),
            )
        };
        self.record(Op::Dropout { rate }, &[x], mask)
    }

    fn record(&mut self, op: Op, inputs: &[Var], mask: Option<Vec<T>>) -> Result<Var> {
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(Error::InvalidArgument(format!("unknown node {}", bad.0)));
        }
        let shapes: Vec<&[usize]> = inputs.iter().map(|v| self.nodes[v.0].shape.as_slice()).collect();
        let shape = op.infer_shape(&shapes)?;
        let (value, aux) = if self.shape_only {
            (None, Aux::None)
        } else {
            let vals: Vec<&[T]> = inputs
                .iter()
                .map(|v| self.nodes[v.0].value.as_deref().ok_or(Error::ShapeOnly))
                .collect::<Result<_>>()?;
            let (value, aux) = forward(&op, &vals, &shapes, &shape, mask);
            debug_assert_eq!(value.len(), numel(&shape), "{} kernel/shape disagreement", op.name());
            (Some(value), aux)
        };
        self.nodes.push(Node {
            op,
            inputs: inputs.iter().map(|v| v.0).collect(),
            shape,
            value,
            aux,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // Typed helpers.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        self.apply(Op::BatchMatMul { transpose_b }, &[a, b])
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.apply(Op::AddBias, &[x, b])
    }

    /// `x w (+ b)` over the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.apply(Op::Scale(factor), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Silu, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Gelu, &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Softplus, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Exp, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Relu, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Softmax, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.apply(Op::LayerNorm { eps }, &[x, gamma, beta])
    }

    pub fn batch_norm(&mut self, x: Var, params: [Var; 4], eps: f64, train: bool) -> Result<Var> {
        let [gamma, beta, mean, var] = params;
        self.apply(Op::BatchNorm { eps, train }, &[x, gamma, beta, mean, var])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        self.apply(Op::Conv2d { stride, padding }, &[x, w])
    }

    pub fn conv1d_depthwise(&mut self, x: Var, w: Var) -> Result<Var> {
        self.apply(Op::DepthwiseConv1d, &[x, w])
    }

    pub fn selective_scan(&mut self, inputs: [Var; 6], exact_zoh: bool) -> Result<Var> {
        self.apply(Op::SelectiveScan { exact_zoh }, &inputs)
    }

    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        self.apply(Op::Gather { index }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        self.apply(Op::Reshape { shape: shape.to_vec() }, &[x])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.apply(Op::Permute { axes: axes.to_vec() }, &[x])
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Op::Narrow { axis, start, len }, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat { axis }, xs)
    }

    pub fn avg_pool(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::AvgPool, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sum, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Mean, &[x])
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if rate == 0.0 {
            return Ok(x);
        }
        self.apply(Op::Dropout { rate }, &[x])
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>, weights: Vec<f64>) -> Result<Var> {
        self.apply(
            Op::CrossEntropy {
                targets: Arc::new(targets),
                weights: Arc::new(weights),
            },
            &[logits],
        )
    }

    /// Reverse pass from a scalar node. Every ancestor of `seed` receives a
    /// gradient; other nodes have none.
    pub fn backward(&self, seed: Var) -> Result<Gradients<T>> {
        if self.shape_only {
            return Err(Error::ShapeOnly);
        }
        if numel(self.shape(seed)) != 1 {
            return Err(Error::invalid_shape(
                "backward",
                self.shape(seed),
                "seed must be scalar",
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[seed.0] = Some(vec![T::one()]);
        for i in (0..=seed.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.inputs.is_empty() {
                let input_grads = backward_node(node, &self.nodes, &gy);
                for (&inp, g) in node.inputs.iter().zip(input_grads) {
                    let Some(g) = g else { continue };
                    match &mut grads[inp] {
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(&g) {
                                *a = *a + *v;
                            }
                        }
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            grads[i] = Some(gy);
        }
        let shapes = self.nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads
            .get(v.0)?
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    pub fn data(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0)?.as_deref()
    }

    pub fn contains(&self, v: Var) -> bool {
        self.data(v).is_some()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    (numel(shape) / cols, cols)
}

fn conv_geom(x: &[usize], w: &[usize], y: &[usize], stride: usize, pad: usize) -> ConvGeom {
    ConvGeom {
        n: x[0],
        h: x[1],
        w: x[2],
        cin: x[3],
        kh: w[0],
        kw: w[1],
        cout: w[3],
        oh: y[1],
        ow: y[2],
        stride,
        pad,
    }
}

fn scan_dims(u: &[usize], a: &[usize]) -> ScanDims {
    ScanDims {
        batch: u[0],
        len: u[1],
        chans: u[2],
        state: a[1],
    }
}

fn unary<T: Element>(x: &[T], f: impl Fn(T) -> T) -> Vec<T> {
    x.iter().map(|&v| f(v)).collect()
}

fn forward<T: Element>(
    op: &Op,
    x: &[&[T]],
    shapes: &[&[usize]],
    out_shape: &[usize],
    mask: Option<Vec<T>>,
) -> (Vec<T>, Aux<T>) {
    let none = |v| (v, Aux::None);
    match op {
        Op::Leaf => unreachable!("leaves are not recorded through forward"),
        Op::MatMul => {
            let (m, kk) = rows_cols(shapes[0]);
            none(k::gemm(x[0], x[1], m, kk, shapes[1][1]))
        }
        Op::BatchMatMul { transpose_b } => {
            let (b, m, kk) = (shapes[0][0], shapes[0][1], shapes[0][2]);
            none(k::batch_matmul(x[0], x[1], b, m, kk, out_shape[2], *transpose_b))
        }
        Op::AddBias => {
            let c = x[1].len();
            let mut y = x[0].to_vec();
            for row in y.chunks_mut(c) {
                for (v, &b) in row.iter_mut().zip(x[1]) {
                    *v = *v + b;
                }
            }
            none(y)
        }
        Op::Add => none(x[0].iter().zip(x[1]).map(|(&a, &b)| a + b).collect()),
        Op::Mul => none(x[0].iter().zip(x[1]).map(|(&a, &b)| a * b).collect()),
        Op::Scale(f) => {
            let f = T::of(*f);
            none(unary(x[0], |v| v * f))
        }
        Op::Silu => none(unary(x[0], k::silu)),
        Op::Gelu => none(unary(x[0], k::gelu)),
        Op::Softplus => none(unary(x[0], k::softplus)),
        Op::Exp => none(unary(x[0], |v| v.exp())),
        Op::Relu => none(unary(x[0], |v| v.max(T::zero()))),
        Op::Softmax => none(k::softmax_rows(x[0], *shapes[0].last().unwrap())),
        Op::LayerNorm { eps } => {
            let (y, mean, rstd) = k::layer_norm(x[0], x[1], x[2], x[1].len(), *eps);
            (y, Aux::Stats(mean, rstd))
        }
        Op::BatchNorm { eps, train } => {
            if *train {
                let (mean, var) = k::channel_stats(x[0], x[1].len());
                let y = k::affine_normalize(x[0], &mean, &var, x[1], x[2], *eps);
                (y, Aux::Stats(mean, var))
            } else {
                none(k::affine_normalize(x[0], x[3], x[4], x[1], x[2], *eps))
            }
        }
        Op::Conv2d { stride, padding } => {
            let g = conv_geom(shapes[0], shapes[1], out_shape, *stride, *padding);
            none(k::conv2d(x[0], x[1], &g))
        }
        Op::DepthwiseConv1d => {
            let s = shapes[0];
            none(k::dwconv1d(x[0], x[1], s[0], s[1], s[2], shapes[1][0]))
        }
        Op::SelectiveScan { exact_zoh } => {
            let inp = ScanInputs {
                u: x[0],
                delta: x[1],
                a: x[2],
                b: x[3],
                c: x[4],
                d: x[5],
            };
            let (y, hs) = k::selective_scan(&inp, scan_dims(shapes[0], shapes[2]), *exact_zoh);
            (y, Aux::States(hs))
        }
        Op::Gather { index } => {
            let c = shapes[0][1];
            let mut y = Vec::with_capacity(index.len() * c);
            for &i in index.iter() {
                y.extend_from_slice(&x[0][i * c..(i + 1) * c]);
            }
            none(y)
        }
        Op::Reshape { .. } => none(x[0].to_vec()),
        Op::Permute { axes } => none(k::permute(x[0], shapes[0], axes)),
        Op::Narrow { axis, start, len } => none(k::narrow(x[0], shapes[0], *axis, *start, *len)),
        Op::Concat { axis } => {
            let (outer, _, inner) = k::split_axis(out_shape, *axis);
            let mut y = Vec::with_capacity(numel(out_shape));
            for o in 0..outer {
                for (xi, si) in x.iter().zip(shapes) {
                    let len = si[*axis] * inner;
                    y.extend_from_slice(&xi[o * len..(o + 1) * len]);
                }
            }
            none(y)
        }
        Op::AvgPool => {
            let s = shapes[0];
            let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
            let inv = T::of(1.0 / hw as f64);
            let mut y = vec![T::zero(); n * c];
            for img in 0..n {
                for p in 0..hw {
                    let row = &x[0][(img * hw + p) * c..(img * hw + p + 1) * c];
                    for (d, &v) in y[img * c..(img + 1) * c].iter_mut().zip(row) {
                        *d = *d + v;
                    }
                }
            }
            none(unary(&y, |v| v * inv))
        }
        Op::Sum => none(vec![x[0].iter().copied().sum()]),
        Op::Mean => none(vec![x[0].iter().copied().sum::<T>() / T::of(x[0].len() as f64)]),
        Op::Dropout { .. } => {
            let mask = mask.expect("dropout mask drawn at record time");
            let y = x[0].iter().zip(&mask).map(|(&v, &m)| v * m).collect();
            (y, Aux::Mask(mask))
        }
        Op::CrossEntropy { targets, weights } => {
            let (loss, probs) = k::cross_entropy(x[0], shapes[0][1], targets, weights);
            (vec![loss], Aux::Probs(probs))
        }
    }
}

/// Input gradients of one node given its output gradient.
fn backward_node<T: Element>(node: &Node<T>, nodes: &[Node<T>], gy: &[T]) -> Vec<Option<Vec<T>>> {
    let val = |i: usize| nodes[node.inputs[i]].value.as_deref().expect("numeric graph");
    let shp = |i: usize| nodes[node.inputs[i]].shape.as_slice();
    let out = node.value.as_deref().expect("numeric graph");
    let elementwise = |f: &dyn Fn(T) -> T| -> Vec<Option<Vec<T>>> {
        vec![Some(val(0).iter().zip(gy).map(|(&x, &g)| g * f(x)).collect())]
    };
    match &node.op {
        Op::Leaf => vec![],
        Op::MatMul => {
            let (m, kk) = rows_cols(shp(0));
            let n = shp(1)[1];
            let ga = k::gemm_nt(gy, val(1), m, n, kk);
            let gb = k::gemm_tn(val(0), gy, m, kk, n);
            vec![Some(ga), Some(gb)]
        }
        Op::BatchMatMul { transpose_b } => {
            let (b, m, kk) = (shp(0)[0], shp(0)[1], shp(0)[2]);
            let n = node.shape[2];
            let (ga, gb) = k::batch_matmul_backward(val(0), val(1), gy, b, m, kk, n, *transpose_b);
            vec![Some(ga), Some(gb)]
        }
        Op::AddBias => {
            let c = shp(1)[0];
            let mut gb = vec![T::zero(); c];
            for row in gy.chunks(c) {
                for (d, &g) in gb.iter_mut().zip(row) {
                    *d = *d + g;
                }
            }
            vec![Some(gy.to_vec()), Some(gb)]
        }
        Op::Add => vec![Some(gy.to_vec()), Some(gy.to_vec())],
        Op::Mul => {
            let ga = gy.iter().zip(val(1)).map(|(&g, &b)| g * b).collect();
            let gb = gy.iter().zip(val(0)).map(|(&g, &a)| g * a).collect();
            vec![Some(ga), Some(gb)]
        }
        Op::Scale(f) => {
            let f = T::of(*f);
            vec![Some(gy.iter().map(|&g| g * f).collect())]
        }
        Op::Silu => elementwise(&k::silu_grad),
        Op::Gelu => elementwise(&k::gelu_grad),
        Op::Softplus => elementwise(&k::sigmoid),
        Op::Exp => vec![Some(out.iter().zip(gy).map(|(&y, &g)| y * g).collect())],
        Op::Relu => elementwise(&|x: T| if x > T::zero() { T::one() } else { T::zero() }),
        Op::Softmax => vec![Some(k::softmax_backward(out, gy, *node.shape.last().unwrap()))],
        Op::LayerNorm { .. } => {
            let Aux::Stats(mean, rstd) = &node.aux else {
                unreachable!()
            };
            let (gx, gg, gb) = k::layer_norm_backward(val(0), val(1), mean, rstd, gy, shp(1)[0]);
            vec![Some(gx), Some(gg), Some(gb)]
        }
        Op::BatchNorm { eps, train } => {
            if *train {
                let Aux::Stats(mean, var) = &node.aux else {
                    unreachable!()
                };
                let (gx, gg, gb) = k::batch_norm_train_backward(val(0), val(1), mean, var, gy, *eps);
                let c = mean.len();
                vec![
                    Some(gx),
                    Some(gg),
                    Some(gb),
                    Some(vec![T::zero(); c]),
                    Some(vec![T::zero(); c]),
                ]
            } else {
                let (gx, gg, gb, gm, gv) = k::batch_norm_eval_backward(val(0), val(1), val(3), val(4), gy, *eps);
                vec![Some(gx), Some(gg), Some(gb), Some(gm), Some(gv)]
            }
        }
        Op::Conv2d { stride, padding } => {
            let g = conv_geom(shp(0), shp(1), &node.shape, *stride, *padding);
            let (gx, gw) = k::conv2d_backward(val(0), val(1), gy, &g);
            vec![Some(gx), Some(gw)]
        }
        Op::DepthwiseConv1d => {
            let s = shp(0);
            let (gx, gw) = k::dwconv1d_backward(val(0), val(1), gy, s[0], s[1], s[2], shp(1)[0]);
            vec![Some(gx), Some(gw)]
        }
        Op::SelectiveScan { exact_zoh } => {
            let Aux::States(hs) = &node.aux else { unreachable!() };
            let inp = ScanInputs {
                u: val(0),
                delta: val(1),
                a: val(2),
                b: val(3),
                c: val(4),
                d: val(5),
            };
            let g = k::selective_scan_backward(&inp, hs, gy, scan_dims(shp(0), shp(2)), *exact_zoh);
            vec![Some(g.u), Some(g.delta), Some(g.a), Some(g.b), Some(g.c), Some(g.d)]
        }
        Op::Gather { index } => {
            let c = shp(0)[1];
            let mut gx = vec![T::zero(); numel(shp(0))];
            for (r, &i) in index.iter().enumerate() {
                for j in 0..c {
                    gx[i * c + j] = gx[i * c + j] + gy[r * c + j];
                }
            }
            vec![Some(gx)]
        }
        Op::Reshape { .. } => vec![Some(gy.to_vec())],
        Op::Permute { axes } => vec![Some(k::permute(gy, &node.shape, &k::inverse_axes(axes)))],
        Op::Narrow { axis, start, len } => {
            vec![Some(k::narrow_backward(gy, shp(0), *axis, *start, *len))]
        }
        Op::Concat { axis } => {
            let (outer, ext, inner) = k::split_axis(&node.shape, *axis);
            let mut offset = 0;
            let mut out = Vec::with_capacity(node.inputs.len());
            for i in 0..node.inputs.len() {
                let len = shp(i)[*axis];
                let mut g = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = (o * ext + offset) * inner;
                    g.extend_from_slice(&gy[base..base + len * inner]);
                }
                offset += len;
                out.push(Some(g));
            }
            out
        }
        Op::AvgPool => {
            let s = shp(0);
            let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
            let inv = T::of(1.0 / hw as f64);
            let mut gx = vec![T::zero(); numel(s)];
            for img in 0..n {
                for p in 0..hw {
                    for j in 0..c {
                        gx[(img * hw + p) * c + j] = gy[img * c + j] * inv;
                    }
                }
            }
            vec![Some(gx)]
        }
        Op::Sum => vec![Some(vec![gy[0]; numel(shp(0))])],
        Op::Mean => {
            let n = numel(shp(0));
            vec![Some(vec![gy[0] / T::of(n as f64); n])]
        }
        Op::Dropout { .. } => {
            let Aux::Mask(mask) = &node.aux else { unreachable!() };
            vec![Some(gy.iter().zip(mask).map(|(&g, &m)| g * m).collect())]
        }
        Op::CrossEntropy { targets, weights } => {
            let Aux::Probs(probs) = &node.aux else { unreachable!() };
            let classes = shp(0)[1];
            let mut gx = vec![T::zero(); probs.len()];
            for (r, (dst, p)) in gx.chunks_mut(classes).zip(probs.chunks(classes)).enumerate() {
                let w = T::of(weights[r]) * gy[0];
                if weights[r] == 0.0 {
                    continue;
                }
                for (j, (d, &pv)) in dst.iter_mut().zip(p).enumerate() {
                    let onehot = if j == targets[r] { T::one() } else { T::zero() };
                    *d = w * (pv - onehot);
                }
            }
            vec![Some(gx)]
        }
    }
}
