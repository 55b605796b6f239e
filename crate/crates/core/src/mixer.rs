//! Selective state-space mixer over scanned token sequences.
//!
//! Input `(batch, T, D)` is projected and split into two halves of width
//! `E = D / 2`. Each half runs a same-padded depthwise 1D convolution and
//! SiLU; the first half then drives a selective scan. The output is the
//! channel concatenation `[scan, gate]` with no output projection.

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Ctx, Init, ParamBuilder, ParamId};
use crate::tensor::{Element, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct MixerConfig {
    pub dim: usize,
    pub state_dim: usize,
    pub conv_kernel: usize,
    /// Exact zero-order hold for the input matrix instead of `dt * B`.
    pub exact_zoh: bool,
}

impl MixerConfig {
    pub fn branch_dim(&self) -> usize {
        self.dim / 2
    }
}

/// Depthwise 1D convolution with bias, kernel stored `(K, E)`.
#[derive(Clone, Debug)]
pub struct DepthwiseConv1d {
    pub w: ParamId,
    pub b: ParamId,
}

impl DepthwiseConv1d {
    fn new(pb: &mut ParamBuilder, name: &str, kernel: usize, channels: usize) -> Self {
        let bound = 1.0 / (kernel as f64).sqrt();
        DepthwiseConv1d {
            w: pb.weight(format!("{name}.weight"), &[kernel, channels], Init::Uniform { bound }),
            b: pb.weight(format!("{name}.bias"), &[channels], Init::Zeros),
        }
    }

    fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (w, b) = (cx.param(self.w)?, cx.param(self.b)?);
        let y = cx.g.conv1d_depthwise(x, w)?;
        cx.g.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct Mixer {
    pub cfg: MixerConfig,
    pub in_proj: Linear,
    pub conv_x: DepthwiseConv1d,
    pub conv_z: DepthwiseConv1d,
    /// Per-channel step size before softplus, `E -> E`.
    pub dt_proj: Linear,
    pub b_proj: Linear,
    pub c_proj: Linear,
    pub a_log: ParamId,
    pub skip: ParamId,
}

impl Mixer {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: MixerConfig) -> Result<Self> {
        if cfg.dim < 2 || cfg.dim % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "mixer dimension {} must be even",
                cfg.dim
            )));
        }
        if cfg.conv_kernel % 2 == 0 || cfg.state_dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "mixer needs an odd conv kernel and a positive state size, got {} and {}",
                cfg.conv_kernel, cfg.state_dim
            )));
        }
        let (d, e, n) = (cfg.dim, cfg.branch_dim(), cfg.state_dim);
        let in_proj = Linear::new(pb, &format!("{name}.in_proj"), d, d, false);
        let conv_x = DepthwiseConv1d::new(pb, &format!("{name}.conv_x"), cfg.conv_kernel, e);
        let conv_z = DepthwiseConv1d::new(pb, &format!("{name}.conv_z"), cfg.conv_kernel, e);
        let dt_proj = Linear {
            w: pb.weight(
                format!("{name}.dt_proj.weight"),
                &[e, e],
                Init::Uniform {
                    bound: 1.0 / (e as f64).sqrt(),
                },
            ),
            b: Some(pb.weight(
                format!("{name}.dt_proj.bias"),
                &[e],
                Init::DtBias { min: 1e-3, max: 0.1 },
            )),
        };
        let b_proj = Linear::new(pb, &format!("{name}.b_proj"), e, n, false);
        let c_proj = Linear::new(pb, &format!("{name}.c_proj"), e, n, false);
        let a_log = pb.weight(format!("{name}.a_log"), &[e, n], Init::ALog);
        let skip = pb.weight(format!("{name}.skip"), &[e], Init::Ones);
        Ok(Mixer {
            cfg,
            in_proj,
            conv_x,
            conv_z,
            dt_proj,
            b_proj,
            c_proj,
            a_log,
            skip,
        })
    }

    /// Trainable elements, from the configuration alone.
    pub fn param_count(cfg: &MixerConfig) -> usize {
        let (d, e, n, k) = (cfg.dim, cfg.branch_dim(), cfg.state_dim, cfg.conv_kernel);
        d * d + 2 * (k * e + e) + (e * e + e) + 2 * e * n + e * n + e
    }

    /// `(batch, T, D) -> (batch, T, D)`.
    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let shape = cx.g.shape(x);
        if shape.len() != 3 || shape[2] != self.cfg.dim {
            return Err(Error::shape("mixer", shape, &[self.cfg.dim]));
        }
        let e = self.cfg.branch_dim();
        let xz = self.in_proj.forward(cx, x)?;
        let xs = cx.g.narrow(xz, 2, 0, e)?;
        let z = cx.g.narrow(xz, 2, e, e)?;

        let xs = self.conv_x.forward(cx, xs)?;
        let u = cx.g.silu(xs)?;
        let z = self.conv_z.forward(cx, z)?;
        let z = cx.g.silu(z)?;

        let dt = self.dt_proj.forward(cx, u)?;
        let dt = cx.g.softplus(dt)?;
        let b = self.b_proj.forward(cx, u)?;
        let c = self.c_proj.forward(cx, u)?;
        let a_log = cx.param(self.a_log)?;
        let a = cx.g.exp(a_log)?;
        let a = cx.g.scale(a, -1.0)?;
        let skip = cx.param(self.skip)?;
        let y = cx.g.selective_scan([u, dt, a, b, c, skip], self.cfg.exact_zoh)?;
        cx.g.concat(&[y, z], 2)
    }
}
