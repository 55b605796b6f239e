//! Full network: flow-triplet input, convolutional patch embedding, a
//! convolutional first stage, three local-global stages, and the heads.

use std::fmt;
use std::sync::Arc;

use rand::Rng;

use crate::config::Config;
use crate::dgcm::LabelSpace;
use crate::error::{Error, Result};
use crate::lgfi::{window_count, LgfiStage, StageConfig};
use crate::mixer::MixerConfig;
use crate::nn::{BatchNorm, Conv2d, Linear};
use crate::params::{Ctx, ParamBuilder, ParamSpec, ParamStore};
use crate::scan::ScanDirection;
use crate::tensor::{Element, Tensor, Var};

/// Horizontal flow, vertical flow and flow magnitude, each `H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowTriplet {
    pub u: Tensor<f32>,
    pub v: Tensor<f32>,
    pub m: Tensor<f32>,
}

pub fn make_triplet(u: Tensor<f32>, v: Tensor<f32>) -> Result<FlowTriplet> {
    if u.rank() != 2 || u.shape() != v.shape() {
        return Err(Error::shape("make_triplet", u.shape(), v.shape()));
    }
    let m = Tensor::from_parts(
        u.shape().to_vec(),
        u.data().iter().zip(v.data()).map(|(a, b)| a.hypot(*b)).collect(),
    );
    Ok(FlowTriplet { u, v, m })
}

impl FlowTriplet {
    pub fn height(&self) -> usize {
        self.u.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.u.shape()[1]
    }

    /// Interleaved `H x W x 3` map with channels `(u, v, m)`.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let data = (0..self.u.numel())
            .flat_map(|i| [self.u.data()[i], self.v.data()[i], self.m.data()[i]])
            .map(|x| T::of(x as f64))
            .collect();
        Tensor::from_parts(vec![self.height(), self.width(), 3], data)
    }

    /// Reads an `H x W x 2` (u, v) or `H x W x 3` map; the magnitude is
    /// always recomputed from `u` and `v`.
    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Result<Self> {
        let &[h, w, c] = t.shape() else {
            return Err(Error::invalid_shape(
                "flow",
                t.shape(),
                "expected H x W x 2 or H x W x 3",
            ));
        };
        if c != 2 && c != 3 {
            return Err(Error::invalid_shape("flow", t.shape(), "expected 2 or 3 channels"));
        }
        let channel =
            |k: usize| Tensor::from_parts(vec![h, w], t.data().chunks(c).map(|px| px[k].f64() as f32).collect());
        make_triplet(channel(0), channel(1))
    }
}

fn mirror_columns(t: &Tensor<f32>, negate: bool) -> Tensor<f32> {
    let w = t.shape()[1];
    let sign = if negate { -1.0 } else { 1.0 };
    let data = t
        .data()
        .chunks(w)
        .flat_map(|row| row.iter().rev().map(move |&x| sign * x))
        .collect();
    Tensor::from_parts(t.shape().to_vec(), data)
}

/// Mirror about the vertical axis; horizontal flow changes sign when
/// `negate_u` is set.
pub fn flip(x: &FlowTriplet, negate_u: bool) -> FlowTriplet {
    FlowTriplet {
        u: mirror_columns(&x.u, negate_u),
        v: mirror_columns(&x.v, false),
        m: mirror_columns(&x.m, false),
    }
}

/// Flips with probability `prob`.
pub fn flip_augment(x: &FlowTriplet, rng: &mut impl Rng, prob: f64, negate_u: bool) -> FlowTriplet {
    if rng.random::<f64>() < prob {
        flip(x, negate_u)
    } else {
        x.clone()
    }
}

/// Stacks samples into a `(B, H, W, 3)` batch.
pub fn stack<T: Element>(xs: &[&FlowTriplet]) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(xs.len() * h * w * 3);
    for x in xs {
        if (x.height(), x.width()) != (h, w) {
            return Err(Error::shape("stack", &[h, w], &[x.height(), x.width()]));
        }
        data.extend(x.to_tensor::<T>().into_data());
    }
    Tensor::new(vec![xs.len(), h, w, 3], data)
}

/// Two stride-2 3x3 convolutions, each followed by batch norm and GELU.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
}

impl PatchEmbed {
    pub fn new(pb: &mut ParamBuilder, name: &str, c_in: usize, hidden: usize, dim: usize) -> Self {
        PatchEmbed {
            conv1: Conv2d::new(pb, &format!("{name}.conv1"), c_in, hidden, 3, 2),
            bn1: BatchNorm::new(pb, &format!("{name}.bn1"), hidden),
            conv2: Conv2d::new(pb, &format!("{name}.conv2"), hidden, dim, 3, 2),
            bn2: BatchNorm::new(pb, &format!("{name}.bn2"), dim),
        }
    }

    pub fn param_count(c_in: usize, hidden: usize, dim: usize) -> usize {
        9 * c_in * hidden + 2 * hidden + 9 * hidden * dim + 2 * dim
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let s = cx.g.shape(x);
        if s.len() != 4 || s[1] % 4 != 0 || s[2] % 4 != 0 {
            return Err(Error::invalid_shape(
                "patch_embed",
                s,
                "spatial extents must be divisible by 4",
            ));
        }
        let mut y = x;
        for (conv, bn) in [(&self.conv1, &self.bn1), (&self.conv2, &self.bn2)] {
            y = conv.forward(cx, y)?;
            y = bn.forward(cx, y)?;
            y = cx.g.gelu(y)?;
        }
        Ok(y)
    }
}

/// Residual `conv -> BN -> GELU -> conv -> BN` block.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
}

impl ConvBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Self {
        ConvBlock {
            conv1: Conv2d::new(pb, &format!("{name}.conv1"), dim, dim, 3, 1),
            bn1: BatchNorm::new(pb, &format!("{name}.bn1"), dim),
            conv2: Conv2d::new(pb, &format!("{name}.conv2"), dim, dim, 3, 1),
            bn2: BatchNorm::new(pb, &format!("{name}.bn2"), dim),
        }
    }

    pub fn param_count(dim: usize) -> usize {
        2 * (9 * dim * dim + 2 * dim)
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(cx, x)?;
        let y = self.bn1.forward(cx, y)?;
        let y = cx.g.gelu(y)?;
        let y = self.conv2.forward(cx, y)?;
        let y = self.bn2.forward(cx, y)?;
        cx.g.add(x, y)
    }
}

/// Convolution-only first stage.
#[derive(Clone, Debug)]
pub struct FfeStage {
    pub blocks: Vec<ConvBlock>,
    pub downsample: Conv2d,
}

impl FfeStage {
    pub fn new(pb: &mut ParamBuilder, name: &str, depth: usize, dim: usize, next: usize) -> Self {
        FfeStage {
            blocks: (0..depth)
                .map(|i| ConvBlock::new(pb, &format!("{name}.blocks.{i}"), dim))
                .collect(),
            downsample: Conv2d::new(pb, &format!("{name}.downsample"), dim, next, 3, 2),
        }
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let mut y = x;
        for b in &self.blocks {
            y = b.forward(cx, y)?;
        }
        let s = cx.g.shape(y);
        if s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::invalid_shape("downsample", s, "extents must be even"));
        }
        self.downsample.forward(cx, y)
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Single(Linear),
    Dgcm { coarse: Linear, fine: Linear },
}

/// Logit nodes, `(B, classes)` each.
#[derive(Clone, Copy, Debug)]
pub enum Logits {
    Single(Var),
    Dgcm { coarse: Var, fine: Var },
}

/// One row of the shape trace, batch axis omitted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRow {
    pub name: String,
    pub input: [usize; 3],
    pub output: [usize; 3],
    /// Local windows per map (LGFI stages only).
    pub windows: Option<usize>,
}

impl fmt::Display for TraceRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims = |s: &[usize; 3]| format!("{}x{}x{}", s[0], s[1], s[2]);
        write!(f, "{}: {} -> {}", self.name, dims(&self.input), dims(&self.output))
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Pooled `(B, D4)` features.
    pub feature: Var,
    /// Last-stage map before the final norm and pooling, `(B, H4, W4, D4)`.
    pub last_map: Var,
    pub logits: Logits,
    pub trace: Vec<TraceRow>,
}

#[derive(Clone, Debug)]
pub struct Merba {
    pub cfg: Config,
    pub space: LabelSpace,
    pub patch: PatchEmbed,
    pub stage1: FfeStage,
    pub stages: Vec<LgfiStage>,
    pub head: Head,
    specs: Arc<[ParamSpec]>,
}

/// Configuration of LGFI stage `k` (1-based, 2..=4).
pub fn stage_config(cfg: &Config, k: usize) -> Result<StageConfig> {
    let i = k - 1;
    let dim = cfg.model.dims[i];
    let directions = cfg
        .extractor
        .directions
        .iter()
        .map(|d| d.parse::<ScanDirection>())
        .collect::<Result<_>>()?;
    Ok(StageConfig {
        dim,
        depth: cfg.model.depths[i],
        window: cfg.model.window,
        heads: cfg.heads(i),
        mlp_ratio: cfg.model.mlp_ratio,
        dropout: cfg.model.dropout,
        mixer: MixerConfig {
            dim,
            state_dim: cfg.mixer.state_dim,
            conv_kernel: cfg.mixer.conv_kernel,
            exact_zoh: cfg.mixer.exact_zoh,
        },
        directions,
        prenorm: cfg.mixer.prenorm,
        residual: cfg.extractor.residual,
        per_direction_params: cfg.extractor.per_direction_params,
        next_dim: (k < 4).then(|| cfg.model.dims[i + 1]),
    })
}

pub const INPUT_CHANNELS: usize = 3;

impl Merba {
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let space = LabelSpace::from_config(&cfg.labels)?;
        let m = &cfg.model;
        let mut pb = ParamBuilder::new();
        let patch = PatchEmbed::new(&mut pb, "patch_embed", INPUT_CHANNELS, m.embed_hidden, m.dims[0]);
        let stage1 = FfeStage::new(&mut pb, "stage1", m.depths[0], m.dims[0], m.dims[1]);
        let stages = (2..=4)
            .map(|k| LgfiStage::new(&mut pb, &format!("stage{k}"), stage_config(cfg, k)?))
            .collect::<Result<_>>()?;
        let d4 = m.dims[3];
        let head = if cfg.dgcm.enabled {
            Head::Dgcm {
                coarse: Linear::new(&mut pb, "head.coarse", d4, space.coarse().len(), true),
                fine: Linear::new(&mut pb, "head.fine", d4, space.fine().len().max(1), true),
            }
        } else {
            Head::Single(Linear::new(&mut pb, "head.full", d4, space.full().len(), true))
        };
        Ok(Merba {
            cfg: cfg.clone(),
            space,
            patch,
            stage1,
            stages,
            head,
            specs: pb.finish()?,
        })
    }

    pub fn specs(&self) -> &Arc<[ParamSpec]> {
        &self.specs
    }

    pub fn init_params<T: Element>(&self, rng: &mut impl Rng) -> ParamStore<T> {
        ParamStore::init(Arc::clone(&self.specs), rng)
    }

    /// `x` is `(B, H, W, 3)`.
    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<ForwardOutput> {
        let s = cx.g.shape(x).to_vec();
        let size = self.cfg.model.input_size;
        if s.len() != 4 || s[1] != size || s[2] != size || s[3] != INPUT_CHANNELS {
            return Err(Error::shape("merba", &s, &[size, size, INPUT_CHANNELS]));
        }
        let hwc = |cx: &Ctx<T>, v: Var| -> [usize; 3] {
            let s = cx.g.shape(v);
            [s[1], s[2], s[3]]
        };
        let mut trace = Vec::with_capacity(5);
        let y = self.patch.forward(cx, x)?;
        trace.push(TraceRow {
            name: "patch_embed".into(),
            input: [s[1], s[2], s[3]],
            output: hwc(cx, y),
            windows: None,
        });
        let z = self.stage1.forward(cx, y)?;
        trace.push(TraceRow {
            name: "stage1".into(),
            input: hwc(cx, y),
            output: hwc(cx, z),
            windows: None,
        });
        let mut x = z;
        let mut last_map = z;
        for (i, stage) in self.stages.iter().enumerate() {
            let input = hwc(cx, x);
            let windows = window_count(input[0], input[1], stage.cfg.window, stage.cfg.window)?;
            let out = stage.forward(cx, x)?;
            let output = match cx.g.shape(out.out) {
                &[_, d] => [1, 1, d],
                _ => hwc(cx, out.out),
            };
            trace.push(TraceRow {
                name: format!("stage{}", i + 2),
                input,
                output,
                windows: Some(windows),
            });
            last_map = out.features;
            x = out.out;
        }
        let feature = x;
        let logits = match &self.head {
            Head::Single(l) => Logits::Single(l.forward(cx, feature)?),
            Head::Dgcm { coarse, fine } => Logits::Dgcm {
                coarse: coarse.forward(cx, feature)?,
                fine: fine.forward(cx, feature)?,
            },
        };
        Ok(ForwardOutput {
            feature,
            last_map,
            logits,
            trace,
        })
    }

    /// Table-style trace from a shape-only pass (no weights are allocated).
    pub fn shape_trace(&self) -> Result<Vec<TraceRow>> {
        let mut cx = Ctx::<f32>::shape_only(&self.specs);
        let size = self.cfg.model.input_size;
        let x = cx.g.input_shape(&[1, size, size, INPUT_CHANNELS])?;
        Ok(self.forward(&mut cx, x)?.trace)
    }
}

/// Trainable parameters per module, from the configuration alone.
pub fn param_breakdown(cfg: &Config) -> Result<Vec<(String, usize)>> {
    cfg.validate()?;
    let space = LabelSpace::from_config(&cfg.labels)?;
    let m = &cfg.model;
    let mut out = vec![
        (
            "patch_embed".to_string(),
            PatchEmbed::param_count(INPUT_CHANNELS, m.embed_hidden, m.dims[0]),
        ),
        (
            "stage1.blocks".to_string(),
            m.depths[0] * ConvBlock::param_count(m.dims[0]),
        ),
        ("stage1.downsample".to_string(), 9 * m.dims[0] * m.dims[1]),
    ];
    for k in 2..=4 {
        let sc = stage_config(cfg, k)?;
        let [local, global, tail] = LgfiStage::param_breakdown(&sc);
        out.push((format!("stage{k}.extractor"), local));
        out.push((format!("stage{k}.global"), global));
        let tail_name = if k < 4 { "downsample" } else { "norm" };
        out.push((format!("stage{k}.{tail_name}"), tail));
    }
    let d4 = m.dims[3];
    if cfg.dgcm.enabled {
        let (c, f) = (space.coarse().len(), space.fine().len().max(1));
        out.push(("head.coarse".to_string(), d4 * c + c));
        out.push(("head.fine".to_string(), d4 * f + f));
    } else {
        let n = space.full().len();
        out.push(("head.full".to_string(), d4 * n + n));
    }
    Ok(out)
}

pub fn count_params(cfg: &Config) -> Result<usize> {
    Ok(param_breakdown(cfg)?.iter().map(|(_, n)| n).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::count_weights;

    #[test]
    fn triplet_magnitude() {
        let u = Tensor::full(&[2, 3], 3.0f32);
        let v = Tensor::full(&[2, 3], 4.0f32);
        let t = make_triplet(u, v).unwrap();
        assert!(t.m.data().iter().all(|&m| m == 5.0));
        assert!(make_triplet(Tensor::zeros(&[2, 3]), Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn closed_form_count_matches_declared_shapes() {
        for cfg in [Config::default(), Config::miniature()] {
            let model = Merba::new(&cfg).unwrap();
            assert_eq!(count_weights(model.specs()), count_params(&cfg).unwrap());
        }
    }

    #[test]
    fn tensor_round_trip_recomputes_magnitude() {
        let t = make_triplet(
            Tensor::from_f64(&[1, 2], &[3.0, 0.0]).unwrap(),
            Tensor::from_f64(&[1, 2], &[4.0, -2.0]).unwrap(),
        )
        .unwrap();
        let back = FlowTriplet::from_tensor(&t.to_tensor::<f64>()).unwrap();
        assert_eq!(back, t);
    }
}
