//! Primitive operations: typed attributes and shape inference.
//!
//! `Op::infer_shape` is the shape-only evaluator; the numeric kernels must
//! produce exactly the shape it returns.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    /// `(.., K) x (K, M) -> (.., M)`.
    MatMul,
    /// `(B, M, K) x (B, K, N) -> (B, M, N)`; with `transpose_b` the right
    /// operand is `(B, N, K)`.
    BatchMatMul {
        transpose_b: bool,
    },
    /// `(.., C) + (C)`.
    AddBias,
    Add,
    Mul,
    Scale(f64),
    Silu,
    Gelu,
    Softplus,
    Exp,
    Relu,
    /// Softmax over the last axis.
    Softmax,
    /// Inputs: x `(.., C)`, gamma `(C)`, beta `(C)`.
    LayerNorm {
        eps: f64,
    },
    /// Inputs: x `(.., C)`, gamma, beta, running mean, running var (all `(C)`).
    /// Statistics are taken over every axis but the last.
    BatchNorm {
        eps: f64,
        train: bool,
    },
    /// x `(N, H, W, Cin)`, w `(KH, KW, Cin, Cout)`.
    Conv2d {
        stride: usize,
        padding: usize,
    },
    /// Depthwise, same-padded: x `(B, T, C)`, w `(K, C)` with K odd.
    DepthwiseConv1d,
    /// u `(B, T, E)`, delta `(B, T, E)`, a `(E, N)`, b `(B, T, N)`,
    /// c `(B, T, N)`, d `(E)`.
    SelectiveScan {
        exact_zoh: bool,
    },
    /// Row gather on a rank-2 input: `out[i] = x[index[i]]`.
    Gather {
        index: Arc<Vec<usize>>,
    },
    Reshape {
        shape: Vec<usize>,
    },
    Permute {
        axes: Vec<usize>,
    },
    Narrow {
        axis: usize,
        start: usize,
        len: usize,
    },
    Concat {
        axis: usize,
    },
    /// Global average pool `(N, H, W, C) -> (N, C)`.
    AvgPool,
    Sum,
    Mean,
    /// Inverted dropout; the keep-mask is drawn when the node is recorded.
    Dropout {
        rate: f64,
    },
    /// Logits `(B, K)` to the scalar `sum_i weights[i] * CE(logits_i, targets[i])`.
    CrossEntropy {
        targets: Arc<Vec<usize>>,
        weights: Arc<Vec<f64>>,
    },
}

/// Kind of a primitive, without attributes. Used by the attribute-map entry
/// point [`crate::tensor::Graph::apply_primitive`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PrimitiveKind {
    MatMul,
    BatchMatMul,
    AddBias,
    Add,
    Mul,
    Scale,
    Silu,
    Gelu,
    Softplus,
    Exp,
    Relu,
    Softmax,
    LayerNorm,
    BatchNorm,
    Conv2d,
    DepthwiseConv1d,
    SelectiveScan,
    Gather,
    Reshape,
    Permute,
    Narrow,
    Concat,
    AvgPool,
    Sum,
    Mean,
    Dropout,
    CrossEntropy,
}

const KINDS: &[(PrimitiveKind, &str, &[&str])] = &[
    (PrimitiveKind::MatMul, "matmul", &[]),
    (PrimitiveKind::BatchMatMul, "batch_matmul", &["transpose_b"]),
    (PrimitiveKind::AddBias, "add_bias", &[]),
    (PrimitiveKind::Add, "add", &[]),
    (PrimitiveKind::Mul, "mul", &[]),
    (PrimitiveKind::Scale, "scale", &["factor"]),
    (PrimitiveKind::Silu, "silu", &[]),
    (PrimitiveKind::Gelu, "gelu", &[]),
    (PrimitiveKind::Softplus, "softplus", &[]),
    (PrimitiveKind::Exp, "exp", &[]),
    (PrimitiveKind::Relu, "relu", &[]),
    (PrimitiveKind::Softmax, "softmax", &[]),
    (PrimitiveKind::LayerNorm, "layer_norm", &["eps"]),
    (PrimitiveKind::BatchNorm, "batch_norm", &["eps", "train"]),
    (PrimitiveKind::Conv2d, "conv2d", &["stride", "padding"]),
    (PrimitiveKind::DepthwiseConv1d, "conv1d", &[]),
    (PrimitiveKind::SelectiveScan, "selective_scan", &["exact_zoh"]),
    (PrimitiveKind::Gather, "gather", &["index"]),
    (PrimitiveKind::Reshape, "reshape", &["shape"]),
    (PrimitiveKind::Permute, "permute", &["axes"]),
    (PrimitiveKind::Narrow, "narrow", &["axis", "start", "len"]),
    (PrimitiveKind::Concat, "concat", &["axis"]),
    (PrimitiveKind::AvgPool, "avg_pool", &[]),
    (PrimitiveKind::Sum, "sum", &[]),
    (PrimitiveKind::Mean, "mean", &[]),
    (PrimitiveKind::Dropout, "dropout", &["rate", "seed"]),
    (PrimitiveKind::CrossEntropy, "cross_entropy", &["targets", "weights"]),
];

impl PrimitiveKind {
    pub fn name(self) -> &'static str {
        KINDS.iter().find(|k| k.0 == self).map(|k| k.1).unwrap_or("?")
    }

    pub fn allowed_attrs(self) -> &'static [&'static str] {
        KINDS.iter().find(|k| k.0 == self).map(|k| k.2).unwrap_or(&[])
    }
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrimitiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KINDS
            .iter()
            .find(|k| k.1 == s)
            .map(|k| k.0)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown primitive `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AttrValue {
    Int(i64),
    Float(f64),
    Bool(bool),
    Ints(Vec<i64>),
    Floats(Vec<f64>),
}

/// Attribute map for [`PrimitiveKind`]-driven application.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Attrs(pub BTreeMap<String, AttrValue>);

impl Attrs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: &str, value: AttrValue) -> Self {
        self.0.insert(key.to_string(), value);
        self
    }

    fn missing(kind: PrimitiveKind, name: &str) -> Error {
        Error::MissingAttribute {
            op: kind.name().into(),
            name: name.into(),
        }
    }

    fn wrong(kind: PrimitiveKind, name: &str) -> Error {
        Error::InvalidArgument(format!("{kind}: attribute `{name}` has the wrong type"))
    }

    fn usize(&self, kind: PrimitiveKind, name: &str) -> Result<usize> {
        match self.0.get(name) {
            Some(AttrValue::Int(v)) if *v >= 0 => Ok(*v as usize),
            Some(_) => Err(Self::wrong(kind, name)),
            None => Err(Self::missing(kind, name)),
        }
    }

    fn float(&self, kind: PrimitiveKind, name: &str) -> Result<f64> {
        match self.0.get(name) {
            Some(AttrValue::Float(v)) => Ok(*v),
            Some(AttrValue::Int(v)) => Ok(*v as f64),
            Some(_) => Err(Self::wrong(kind, name)),
            None => Err(Self::missing(kind, name)),
        }
    }

    fn float_or(&self, kind: PrimitiveKind, name: &str, default: f64) -> Result<f64> {
        if self.0.contains_key(name) {
            self.float(kind, name)
        } else {
            Ok(default)
        }
    }

    fn bool_or(&self, kind: PrimitiveKind, name: &str, default: bool) -> Result<bool> {
        match self.0.get(name) {
            Some(AttrValue::Bool(b)) => Ok(*b),
            Some(_) => Err(Self::wrong(kind, name)),
            None => Ok(default),
        }
    }

    fn usizes(&self, kind: PrimitiveKind, name: &str) -> Result<Vec<usize>> {
        match self.0.get(name) {
            Some(AttrValue::Ints(v)) if v.iter().all(|&x| x >= 0) => Ok(v.iter().map(|&x| x as usize).collect()),
            Some(_) => Err(Self::wrong(kind, name)),
            None => Err(Self::missing(kind, name)),
        }
    }

    fn floats(&self, kind: PrimitiveKind, name: &str) -> Result<Vec<f64>> {
        match self.0.get(name) {
            Some(AttrValue::Floats(v)) => Ok(v.clone()),
            Some(_) => Err(Self::wrong(kind, name)),
            None => Err(Self::missing(kind, name)),
        }
    }

    /// Rejects unknown attributes, then builds the typed op.
    pub(crate) fn to_op(&self, kind: PrimitiveKind) -> Result<Op> {
        let allowed = kind.allowed_attrs();
        if let Some(bad) = self.0.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(Error::UnknownAttribute {
                op: kind.name().into(),
                name: bad.clone(),
            });
        }
        Ok(match kind {
            PrimitiveKind::MatMul => Op::MatMul,
            PrimitiveKind::BatchMatMul => Op::BatchMatMul {
                transpose_b: self.bool_or(kind, "transpose_b", false)?,
            },
            PrimitiveKind::AddBias => Op::AddBias,
            PrimitiveKind::Add => Op::Add,
            PrimitiveKind::Mul => Op::Mul,
            PrimitiveKind::Scale => Op::Scale(self.float(kind, "factor")?),
            PrimitiveKind::Silu => Op::Silu,
            PrimitiveKind::Gelu => Op::Gelu,
            PrimitiveKind::Softplus => Op::Softplus,
            PrimitiveKind::Exp => Op::Exp,
            PrimitiveKind::Relu => Op::Relu,
            PrimitiveKind::Softmax => Op::Softmax,
            PrimitiveKind::LayerNorm => Op::LayerNorm {
                eps: self.float_or(kind, "eps", 1e-5)?,
            },
            PrimitiveKind::BatchNorm => Op::BatchNorm {
                eps: self.float_or(kind, "eps", 1e-5)?,
                train: self.bool_or(kind, "train", true)?,
            },
            PrimitiveKind::Conv2d => Op::Conv2d {
                stride: self.usize(kind, "stride")?,
                padding: self.usize(kind, "padding")?,
            },
            PrimitiveKind::DepthwiseConv1d => Op::DepthwiseConv1d,
            PrimitiveKind::SelectiveScan => Op::SelectiveScan {
                exact_zoh: self.bool_or(kind, "exact_zoh", false)?,
            },
            PrimitiveKind::Gather => Op::Gather {
                index: Arc::new(self.usizes(kind, "index")?),
            },
            PrimitiveKind::Reshape => Op::Reshape {
                shape: self.usizes(kind, "shape")?,
            },
            PrimitiveKind::Permute => Op::Permute {
                axes: self.usizes(kind, "axes")?,
            },
            PrimitiveKind::Narrow => Op::Narrow {
                axis: self.usize(kind, "axis")?,
                start: self.usize(kind, "start")?,
                len: self.usize(kind, "len")?,
            },
            PrimitiveKind::Concat => Op::Concat {
                axis: self.usize(kind, "axis")?,
            },
            PrimitiveKind::AvgPool => Op::AvgPool,
            PrimitiveKind::Sum => Op::Sum,
            PrimitiveKind::Mean => Op::Mean,
            PrimitiveKind::Dropout => Op::Dropout {
                rate: self.float(kind, "rate")?,
            },
            PrimitiveKind::CrossEntropy => Op::CrossEntropy {
                targets: Arc::new(self.usizes(kind, "targets")?),
                weights: Arc::new(self.floats(kind, "weights")?),
            },
        })
    }
}

fn expect_inputs(op: &'static str, shapes: &[&[usize]], n: usize) -> Result<()> {
    if shapes.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{op}: expects {n} inputs, got {}",
            shapes.len()
        )));
    }
    Ok(())
}

fn expect_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(Error::invalid_shape(op, shape, format!("expected rank {rank}")));
    }
    Ok(())
}

fn same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, a, b));
    }
    Ok(())
}

fn last(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::AddBias => "add_bias",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Silu => "silu",
            Op::Gelu => "gelu",
            Op::Softplus => "softplus",
            Op::Exp => "exp",
            Op::Relu => "relu",
            Op::Softmax => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::DepthwiseConv1d => "conv1d",
            Op::SelectiveScan { .. } => "selective_scan",
            Op::Gather { .. } => "gather",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::AvgPool => "avg_pool",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Dropout { .. } => "dropout",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    /// Output shape as a pure function of the input shapes and attributes.
    pub fn infer_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        let name = self.name();
        match self {
            Op::Leaf => Err(Error::InvalidArgument("leaf has no inputs".into())),
            Op::MatMul => {
                expect_inputs(name, inputs, 2)?;
                let (a, b) = (inputs[0], inputs[1]);
                expect_rank(name, b, 2)?;
                if a.is_empty() || last(a) != b[0] {
                    return Err(Error::shape(name, a, b));
                }
                let mut out = a.to_vec();
                *out.last_mut().unwrap() = b[1];
                Ok(out)
            }
            Op::BatchMatMul { transpose_b } => {
                expect_inputs(name, inputs, 2)?;
                let (a, b) = (inputs[0], inputs[1]);
                expect_rank(name, a, 3)?;
                expect_rank(name, b, 3)?;
                let (bk, bn) = if *transpose_b { (b[2], b[1]) } else { (b[1], b[2]) };
                if a[0] != b[0] || a[2] != bk {
                    return Err(Error::shape(name, a, b));
                }
                Ok(vec![a[0], a[1], bn])
            }
            Op::AddBias => {
                expect_inputs(name, inputs, 2)?;
                let (x, b) = (inputs[0], inputs[1]);
                if b.len() != 1 || x.is_empty() || last(x) != b[0] {
                    return Err(Error::shape(name, x, b));
                }
                Ok(x.to_vec())
            }
            Op::Add | Op::Mul => {
                expect_inputs(name, inputs, 2)?;
                same(name, inputs[0], inputs[1])?;
                Ok(inputs[0].to_vec())
            }
            Op::Scale(_) | Op::Silu | Op::Gelu | Op::Softplus | Op::Exp | Op::Relu => {
                expect_inputs(name, inputs, 1)?;
                Ok(inputs[0].to_vec())
            }
            Op::Dropout { rate } => {
                expect_inputs(name, inputs, 1)?;
                if !(0.0..1.0).contains(rate) {
                    return Err(Error::InvalidArgument(format!("dropout rate {rate} not in [0, 1)")));
                }
                Ok(inputs[0].to_vec())
            }
            Op::Softmax => {
                expect_inputs(name, inputs, 1)?;
                if inputs[0].is_empty() {
                    return Err(Error::invalid_shape(name, inputs[0], "needs rank >= 1"));
                }
                Ok(inputs[0].to_vec())
            }
            Op::LayerNorm { .. } => {
                expect_inputs(name, inputs, 3)?;
                let c = last(inputs[0]);
                for p in &inputs[1..] {
                    if *p != [c] {
                        return Err(Error::shape(name, inputs[0], p));
                    }
                }
                Ok(inputs[0].to_vec())
            }
            Op::BatchNorm { .. } => {
                expect_inputs(name, inputs, 5)?;
                let c = last(inputs[0]);
                if inputs[0].len() < 2 {
                    return Err(Error::invalid_shape(name, inputs[0], "needs rank >= 2"));
                }
                for p in &inputs[1..] {
                    if *p != [c] {
                        return Err(Error::shape(name, inputs[0], p));
                    }
                }
                Ok(inputs[0].to_vec())
            }
            Op::Conv2d { stride, padding } => {
                expect_inputs(name, inputs, 2)?;
                let (x, w) = (inputs[0], inputs[1]);
                expect_rank(name, x, 4)?;
                expect_rank(name, w, 4)?;
                if x[3] != w[2] {
                    return Err(Error::shape(name, x, w));
                }
                if *stride == 0 {
                    return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
                }
                let (ph, pw) = (x[1] + 2 * padding, x[2] + 2 * padding);
                if ph < w[0] || pw < w[1] {
                    return Err(Error::shape(name, x, w));
                }
                Ok(vec![x[0], (ph - w[0]) / stride + 1, (pw - w[1]) / stride + 1, w[3]])
            }
            Op::DepthwiseConv1d => {
                expect_inputs(name, inputs, 2)?;
                let (x, w) = (inputs[0], inputs[1]);
                expect_rank(name, x, 3)?;
                expect_rank(name, w, 2)?;
                if w[1] != x[2] || w[0] % 2 == 0 {
                    return Err(Error::shape(name, x, w));
                }
                Ok(x.to_vec())
            }
            Op::SelectiveScan { .. } => {
                expect_inputs(name, inputs, 6)?;
                let (u, dt, a, b, c, d) = (inputs[0], inputs[1], inputs[2], inputs[3], inputs[4], inputs[5]);
                expect_rank(name, u, 3)?;
                same(name, u, dt)?;
                expect_rank(name, a, 2)?;
                if a[0] != u[2] {
                    return Err(Error::shape(name, u, a));
                }
                let bc = [u[0], u[1], a[1]];
                same(name, b, &bc)?;
                same(name, c, &bc)?;
                same(name, d, &[u[2]])?;
                Ok(u.to_vec())
            }
            Op::Gather { index } => {
                expect_inputs(name, inputs, 1)?;
                let x = inputs[0];
                expect_rank(name, x, 2)?;
                if index.is_empty() {
                    return Err(Error::InvalidArgument("gather: empty index".into()));
                }
                if let Some(&bad) = index.iter().find(|&&i| i >= x[0]) {
                    return Err(Error::InvalidArgument(format!(
                        "gather: index {bad} out of range for {} rows",
                        x[0]
                    )));
                }
                Ok(vec![index.len(), x[1]])
            }
            Op::Reshape { shape } => {
                expect_inputs(name, inputs, 1)?;
                if shape.contains(&0) || super::numel(shape) != super::numel(inputs[0]) {
                    return Err(Error::shape(name, inputs[0], shape));
                }
                Ok(shape.clone())
            }
            Op::Permute { axes } => {
                expect_inputs(name, inputs, 1)?;
                let x = inputs[0];
                let mut seen = vec![false; x.len()];
                if axes.len() != x.len()
                    || axes
                        .iter()
                        .any(|&a| a >= x.len() || std::mem::replace(&mut seen[a], true))
                {
                    return Err(Error::shape(name, x, axes));
                }
                Ok(axes.iter().map(|&a| x[a]).collect())
            }
            Op::Narrow { axis, start, len } => {
                expect_inputs(name, inputs, 1)?;
                let x = inputs[0];
                if *axis >= x.len() || *len == 0 || start + len > x[*axis] {
                    return Err(Error::invalid_shape(
                        name,
                        x,
                        format!("cannot take [{start}, {}) on axis {axis}", start + len),
                    ));
                }
                let mut out = x.to_vec();
                out[*axis] = *len;
                Ok(out)
            }
            Op::Concat { axis } => {
                if inputs.is_empty() {
                    return Err(Error::InvalidArgument("concat: no inputs".into()));
                }
                let first = inputs[0];
                if *axis >= first.len() {
                    return Err(Error::invalid_shape(name, first, "axis out of range"));
                }
                let mut out = first.to_vec();
                for s in &inputs[1..] {
                    let ok = s.len() == first.len()
                        && s.iter().zip(first).enumerate().all(|(i, (a, b))| i == *axis || a == b);
                    if !ok {
                        return Err(Error::shape(name, first, s));
                    }
                    out[*axis] += s[*axis];
                }
                Ok(out)
            }
            Op::AvgPool => {
                expect_inputs(name, inputs, 1)?;
                expect_rank(name, inputs[0], 4)?;
                Ok(vec![inputs[0][0], inputs[0][3]])
            }
            Op::Sum | Op::Mean => {
                expect_inputs(name, inputs, 1)?;
                Ok(vec![])
            }
            Op::CrossEntropy { targets, weights } => {
                expect_inputs(name, inputs, 1)?;
                let x = inputs[0];
                expect_rank(name, x, 2)?;
                if targets.len() != x[0] || weights.len() != x[0] {
                    return Err(Error::InvalidArgument(format!(
                        "cross_entropy: {} rows but {} targets / {} weights",
                        x[0],
                        targets.len(),
                        weights.len()
                    )));
                }
                if let Some(&t) = targets.iter().find(|&&t| t >= x[1]) {
                    return Err(Error::InvalidArgument(format!(
                        "cross_entropy: target {t} out of range for {} classes",
                        x[1]
                    )));
                }
                Ok(vec![])
            }
        }
    }
}
