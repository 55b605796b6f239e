//! Parameterized layers shared by the model blocks.

use crate::error::{Error, Result};
use crate::params::{Ctx, Init, ParamBuilder, ParamId};
use crate::tensor::{Element, Var};

pub const LINEAR_INIT_STD: f64 = 0.02;
pub const NORM_EPS: f64 = 1e-5;

/// `x @ w + b` over the last axis; `w` is stored `in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        Linear {
            w: pb.weight(
                format!("{name}.weight"),
                &[d_in, d_out],
                Init::TruncNormal { std: LINEAR_INIT_STD },
            ),
            b: bias.then(|| pb.weight(format!("{name}.bias"), &[d_out], Init::Zeros)),
        }
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = cx.param(self.w)?;
        let b = self.b.map(|b| cx.param(b)).transpose()?;
        cx.g.linear(x, w, b)
    }
}

/// Square-kernel 2D convolution over NHWC maps, no bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(pb: &mut ParamBuilder, name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        let fan_in = (kernel * kernel * c_in) as f64;
        Conv2d {
            w: pb.weight(
                format!("{name}.weight"),
                &[kernel, kernel, c_in, c_out],
                Init::TruncNormal {
                    std: (2.0 / fan_in).sqrt(),
                },
            ),
            stride,
            padding: kernel / 2,
        }
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = cx.param(self.w)?;
        cx.g.conv2d(x, w, self.stride, self.padding)
    }
}

/// Batch norm over the channel (last) axis with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: pb.weight(format!("{name}.weight"), &[channels], Init::Ones),
            beta: pb.weight(format!("{name}.bias"), &[channels], Init::Zeros),
            running_mean: pb.buffer(format!("{name}.running_mean"), &[channels], Init::Zeros),
            running_var: pb.buffer(format!("{name}.running_var"), &[channels], Init::Ones),
        }
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let p = [
            cx.param(self.gamma)?,
            cx.param(self.beta)?,
            cx.param(self.running_mean)?,
            cx.param(self.running_var)?,
        ];
        // one value per channel has no batch variance: use running statistics
        let shape = cx.g.shape(x);
        let per_channel = shape.iter().product::<usize>() / shape.last().copied().unwrap_or(1).max(1);
        let train = cx.train() && per_channel > 1;
        let y = cx.g.batch_norm(x, p, NORM_EPS, train)?;
        if train {
            cx.record_bn(y, self.running_mean, self.running_var);
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: pb.weight(format!("{name}.weight"), &[dim], Init::Ones),
            beta: pb.weight(format!("{name}.bias"), &[dim], Init::Zeros),
        }
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (g, b) = (cx.param(self.gamma)?, cx.param(self.beta)?);
        cx.g.layer_norm(x, g, b, NORM_EPS)
    }
}

/// `fc2(drop(gelu(fc1(x))))`, followed by dropout.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout: f64,
}

impl Mlp {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, hidden: usize, dropout: f64) -> Self {
        Mlp {
            fc1: Linear::new(pb, &format!("{name}.fc1"), dim, hidden, true),
            fc2: Linear::new(pb, &format!("{name}.fc2"), hidden, dim, true),
            dropout,
        }
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(cx, x)?;
        let h = cx.g.gelu(h)?;
        let h = cx.dropout(h, self.dropout)?;
        let y = self.fc2.forward(cx, h)?;
        cx.dropout(y, self.dropout)
    }
}

/// Multi-head self-attention over `(batch, tokens, dim)` without positional
/// terms.
#[derive(Clone, Debug)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dropout: f64,
}

impl Attention {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize, dropout: f64) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "{heads} heads do not divide dimension {dim}"
            )));
        }
        Ok(Attention {
            qkv: Linear::new(pb, &format!("{name}.qkv"), dim, 3 * dim, true),
            proj: Linear::new(pb, &format!("{name}.proj"), dim, dim, true),
            heads,
            dropout,
        })
    }

    /// Returns the output and the attention weights `(batch*heads, T, T)`.
    pub fn forward_with_weights<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<(Var, Var)> {
        let &[b, t, d] = cx.g.shape(x) else {
            return Err(Error::invalid_shape(
                "attention",
                cx.g.shape(x),
                "expected (batch, tokens, dim)",
            ));
        };
        let (h, hd) = (self.heads, d / self.heads);
        let qkv = self.qkv.forward(cx, x)?;
        let qkv = cx.g.reshape(qkv, &[b, t, 3, h, hd])?;
        let qkv = cx.g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut parts = [qkv; 3];
        for (i, part) in parts.iter_mut().enumerate() {
            let p = cx.g.narrow(qkv, 0, i, 1)?;
            *part = cx.g.reshape(p, &[b * h, t, hd])?;
        }
        let [q, k, v] = parts;
        let scores = cx.g.batch_matmul(q, k, true)?;
        let scores = cx.g.scale(scores, 1.0 / (hd as f64).sqrt())?;
        let attn = cx.g.softmax(scores)?;
        let out = cx.g.batch_matmul(attn, v, false)?;
        let out = cx.g.reshape(out, &[b, h, t, hd])?;
        let out = cx.g.permute(out, &[0, 2, 1, 3])?;
        let out = cx.g.reshape(out, &[b, t, d])?;
        let out = self.proj.forward(cx, out)?;
        Ok((cx.dropout(out, self.dropout)?, attn))
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(cx, x)?.0)
    }
}
