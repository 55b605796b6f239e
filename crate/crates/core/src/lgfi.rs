//! Local-global feature integration stage.
//!
//! A stage runs `depth` extractor blocks over non-overlapping windows, two
//! global self-attention blocks over the whole map, then either a stride-2
//! convolution or (last stage) batch norm and global average pooling.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mixer::{Mixer, MixerConfig};
use crate::nn::{Attention, BatchNorm, Conv2d, LayerNorm, Linear, Mlp};
use crate::params::{Ctx, ParamBuilder};
use crate::scan::{cached_permutation, Permutation, ScanDirection};
use crate::tensor::{Element, Tensor, Var};

pub const GLOBAL_BLOCKS: usize = 2;

/// Number of `wh x ww` windows tiling an `h x w` map.
pub fn window_count(h: usize, w: usize, wh: usize, ww: usize) -> Result<usize> {
    if wh == 0 || ww == 0 {
        return Err(Error::InvalidArgument("window extents must be >= 1".into()));
    }
    if h % wh != 0 || w % ww != 0 {
        let pad_h = (wh - h % wh) % wh;
        let pad_w = (ww - w % ww) % ww;
        return Err(Error::invalid_shape(
            "partition",
            &[h, w],
            format!("not divisible by {wh}x{ww} windows; pad by {pad_h} rows and {pad_w} columns"),
        ));
    }
    Ok((h / wh) * (w / ww))
}

/// Windows of an `H x W x D` map in row-major window order.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowGrid<T> {
    pub windows: Vec<Tensor<T>>,
    pub rows: usize,
    pub cols: usize,
    pub source_shape: [usize; 3],
}

pub fn partition<T: Element>(x: &Tensor<T>, wh: usize, ww: usize) -> Result<WindowGrid<T>> {
    let &[h, w, d] = x.shape() else {
        return Err(Error::invalid_shape("partition", x.shape(), "expected H x W x D"));
    };
    window_count(h, w, wh, ww)?;
    let (rows, cols) = (h / wh, w / ww);
    let src = x.data();
    let mut windows = Vec::with_capacity(rows * cols);
    for wr in 0..rows {
        for wc in 0..cols {
            let mut data = Vec::with_capacity(wh * ww * d);
            for r in 0..wh {
                let start = ((wr * wh + r) * w + wc * ww) * d;
                data.extend_from_slice(&src[start..start + ww * d]);
            }
            windows.push(Tensor::new(vec![wh, ww, d], data)?);
        }
    }
    Ok(WindowGrid {
        windows,
        rows,
        cols,
        source_shape: [h, w, d],
    })
}

pub fn merge<T: Element>(grid: &WindowGrid<T>) -> Result<Tensor<T>> {
    let [h, w, d] = grid.source_shape;
    if grid.windows.len() != grid.rows * grid.cols {
        return Err(Error::InvalidArgument(format!(
            "{} windows for a {}x{} grid",
            grid.windows.len(),
            grid.rows,
            grid.cols
        )));
    }
    let (wh, ww) = (h / grid.rows, w / grid.cols);
    let mut out = vec![T::zero(); h * w * d];
    for (i, win) in grid.windows.iter().enumerate() {
        if win.shape() != [wh, ww, d] {
            return Err(Error::shape("merge", win.shape(), &[wh, ww, d]));
        }
        let (wr, wc) = (i / grid.cols, i % grid.cols);
        for r in 0..wh {
            let dst = ((wr * wh + r) * w + wc * ww) * d;
            out[dst..dst + ww * d].copy_from_slice(&win.data()[r * ww * d..(r + 1) * ww * d]);
        }
    }
    Tensor::new(vec![h, w, d], out)
}

/// Row indices into a `(batch*H*W, D)` token matrix that lay out every
/// window of every batch item as a sequence in `perm` order.
///
/// The result has `batch * S * T` entries: batch-major, then windows in
/// row-major order, then scan steps.
pub fn scan_gather_index(batch: usize, h: usize, w: usize, perm: &Permutation) -> Result<Vec<usize>> {
    let (wh, ww) = (perm.height(), perm.width());
    let s = window_count(h, w, wh, ww)?;
    let mut index = Vec::with_capacity(batch * s * perm.len());
    for b in 0..batch {
        for wr in 0..h / wh {
            for wc in 0..w / ww {
                for &g in perm.order() {
                    let (r, c) = (wr * wh + g / ww, wc * ww + g % ww);
                    index.push((b * h + r) * w + c);
                }
            }
        }
    }
    Ok(index)
}

/// Inverse of [`scan_gather_index`]: entry `p` is the sequence row that
/// holds map token `p`.
pub fn invert_index(index: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; index.len()];
    for (row, &p) in index.iter().enumerate() {
        inv[p] = row;
    }
    inv
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub dim: usize,
    pub depth: usize,
    pub window: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
    pub mixer: MixerConfig,
    pub directions: Vec<ScanDirection>,
    /// Layer norm in front of the mixers.
    pub prenorm: bool,
    pub residual: bool,
    pub per_direction_params: bool,
    /// Output channels of the stride-2 downsample; `None` for the last stage.
    pub next_dim: Option<usize>,
}

impl StageConfig {
    fn mixers_per_block(&self) -> usize {
        if self.per_direction_params {
            self.directions.len()
        } else {
            1
        }
    }
}

/// Mixer fusion sub-block followed by an MLP sub-block.
#[derive(Clone, Debug)]
pub struct ExtractorBlock {
    pub norm1: Option<LayerNorm>,
    pub mixers: Vec<Mixer>,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub directions: Vec<ScanDirection>,
    pub window: usize,
    pub residual: bool,
}

impl ExtractorBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: &StageConfig) -> Result<Self> {
        if cfg.directions.is_empty() {
            return Err(Error::InvalidArgument(
                "extractor needs at least one scan direction".into(),
            ));
        }
        let d = cfg.dim;
        let norm1 = cfg.prenorm.then(|| LayerNorm::new(pb, &format!("{name}.norm1"), d));
        let mixers = (0..cfg.mixers_per_block())
            .map(|i| {
                let mname = if cfg.per_direction_params {
                    format!("{name}.mixer_{}", cfg.directions[i])
                } else {
                    format!("{name}.mixer")
                };
                Mixer::new(pb, &mname, cfg.mixer.clone())
            })
            .collect::<Result<_>>()?;
        Ok(ExtractorBlock {
            norm1,
            mixers,
            proj: Linear::new(pb, &format!("{name}.proj"), d, d, true),
            norm2: LayerNorm::new(pb, &format!("{name}.norm2"), d),
            mlp: Mlp::new(pb, &format!("{name}.mlp"), d, d * cfg.mlp_ratio, cfg.dropout),
            directions: cfg.directions.clone(),
            window: cfg.window,
            residual: cfg.residual,
        })
    }

    /// Sum over directions of the mixer outputs placed back on the map.
    pub fn fuse<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let &[b, h, w, d] = cx.g.shape(x) else {
            return Err(Error::invalid_shape(
                "extractor",
                cx.g.shape(x),
                "expected (B, H, W, D)",
            ));
        };
        let tokens = cx.g.reshape(x, &[b * h * w, d])?;
        let t = self.window * self.window;
        let seqs = b * h * w / t;
        let mut indices = Vec::with_capacity(self.directions.len());
        let mut scanned = Vec::with_capacity(self.directions.len());
        for dir in &self.directions {
            let perm = cached_permutation(dir, self.window, self.window)?;
            let index = scan_gather_index(b, h, w, &perm)?;
            let seq = cx.g.gather(tokens, Arc::new(index.clone()))?;
            scanned.push(cx.g.reshape(seq, &[seqs, t, d])?);
            indices.push(index);
        }
        let mixed: Vec<Var> = if self.mixers.len() == 1 {
            // one shared mixer: run all directions as a single batch
            let all = cx.g.concat(&scanned, 0)?;
            let out = self.mixers[0].forward(cx, all)?;
            (0..scanned.len())
                .map(|i| cx.g.narrow(out, 0, i * seqs, seqs))
                .collect::<Result<_>>()?
        } else {
            scanned
                .iter()
                .zip(&self.mixers)
                .map(|(&s, m)| m.forward(cx, s))
                .collect::<Result<_>>()?
        };
        let mut fused: Option<Var> = None;
        for (out, index) in mixed.into_iter().zip(&indices) {
            let rows = cx.g.reshape(out, &[seqs * t, d])?;
            let back = cx.g.gather(rows, Arc::new(invert_index(index)))?;
            fused = Some(match fused {
                Some(acc) => cx.g.add(acc, back)?,
                None => back,
            });
        }
        cx.g.reshape(fused.expect("at least one direction"), &[b, h, w, d])
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let h = match &self.norm1 {
            Some(n) => n.forward(cx, x)?,
            None => x,
        };
        let f = self.fuse(cx, h)?;
        let f = self.proj.forward(cx, f)?;
        let x1 = if self.residual { cx.g.add(x, f)? } else { f };
        let h = self.norm2.forward(cx, x1)?;
        let m = self.mlp.forward(cx, h)?;
        if self.residual {
            cx.g.add(x1, m)
        } else {
            Ok(m)
        }
    }
}

/// Pre-norm self-attention and MLP with residuals over all map tokens.
#[derive(Clone, Debug)]
pub struct GlobalBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl GlobalBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: &StageConfig) -> Result<Self> {
        let d = cfg.dim;
        Ok(GlobalBlock {
            norm1: LayerNorm::new(pb, &format!("{name}.norm1"), d),
            attn: Attention::new(pb, &format!("{name}.attn"), d, cfg.heads, cfg.dropout)?,
            norm2: LayerNorm::new(pb, &format!("{name}.norm2"), d),
            mlp: Mlp::new(pb, &format!("{name}.mlp"), d, d * cfg.mlp_ratio, cfg.dropout),
        })
    }

    /// `(B, T, D) -> (B, T, D)`.
    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(cx, x)?;
        let a = self.attn.forward(cx, h)?;
        let x = cx.g.add(x, a)?;
        let h = self.norm2.forward(cx, x)?;
        let m = self.mlp.forward(cx, h)?;
        cx.g.add(x, m)
    }
}

#[derive(Clone, Debug)]
pub enum StageTail {
    Downsample(Conv2d),
    NormPool(BatchNorm),
}

#[derive(Clone, Debug)]
pub struct LgfiStage {
    pub cfg: StageConfig,
    pub blocks: Vec<ExtractorBlock>,
    pub global: Vec<GlobalBlock>,
    pub tail: StageTail,
}

/// Intermediate maps of one stage pass.
#[derive(Clone, Copy, Debug)]
pub struct StageOutput {
    /// Map after the global blocks, before downsampling or pooling.
    pub features: Var,
    /// `(B, H/2, W/2, D')` or pooled `(B, D)` on the last stage.
    pub out: Var,
}

impl LgfiStage {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: StageConfig) -> Result<Self> {
        let blocks = (0..cfg.depth)
            .map(|i| ExtractorBlock::new(pb, &format!("{name}.blocks.{i}"), &cfg))
            .collect::<Result<_>>()?;
        let global = (0..GLOBAL_BLOCKS)
            .map(|i| GlobalBlock::new(pb, &format!("{name}.global.{i}"), &cfg))
            .collect::<Result<_>>()?;
        let tail = match cfg.next_dim {
            Some(next) => StageTail::Downsample(Conv2d::new(pb, &format!("{name}.downsample"), cfg.dim, next, 3, 2)),
            None => StageTail::NormPool(BatchNorm::new(pb, &format!("{name}.norm"), cfg.dim)),
        };
        Ok(LgfiStage {
            cfg,
            blocks,
            global,
            tail,
        })
    }

    /// Trainable elements, from the configuration alone.
    pub fn param_count(cfg: &StageConfig) -> usize {
        Self::param_breakdown(cfg).iter().sum()
    }

    /// Trainable counts of the extractor blocks, the global blocks, and the
    /// downsample or final norm.
    pub fn param_breakdown(cfg: &StageConfig) -> [usize; 3] {
        let d = cfg.dim;
        let r = cfg.mlp_ratio;
        let ln = 2 * d;
        let mlp = (d * d * r + d * r) + (d * r * d + d);
        let extractor = if cfg.prenorm { ln } else { 0 }
            + cfg.mixers_per_block() * Mixer::param_count(&cfg.mixer)
            + (d * d + d)
            + ln
            + mlp;
        let attention = (d * 3 * d + 3 * d) + (d * d + d);
        let global = 2 * ln + attention + mlp;
        let tail = match cfg.next_dim {
            Some(next) => 9 * d * next,
            None => 2 * d,
        };
        [cfg.depth * extractor, GLOBAL_BLOCKS * global, tail]
    }

    /// Local blocks over windows, then global blocks over the full map.
    pub fn features<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let &[b, h, w, d] = cx.g.shape(x) else {
            return Err(Error::invalid_shape(
                "lgfi_stage",
                cx.g.shape(x),
                "expected (B, H, W, D)",
            ));
        };
        if d != self.cfg.dim {
            return Err(Error::shape("lgfi_stage", cx.g.shape(x), &[self.cfg.dim]));
        }
        window_count(h, w, self.cfg.window, self.cfg.window)?;
        let mut x = x;
        for block in &self.blocks {
            x = block.forward(cx, x)?;
        }
        let mut t = cx.g.reshape(x, &[b, h * w, d])?;
        for block in &self.global {
            t = block.forward(cx, t)?;
        }
        cx.g.reshape(t, &[b, h, w, d])
    }

    pub fn tail<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        match &self.tail {
            StageTail::Downsample(conv) => {
                let s = cx.g.shape(x);
                if s[1] % 2 != 0 || s[2] % 2 != 0 {
                    return Err(Error::invalid_shape("downsample", s, "extents must be even"));
                }
                conv.forward(cx, x)
            }
            StageTail::NormPool(bn) => {
                let y = bn.forward(cx, x)?;
                cx.g.avg_pool(y)
            }
        }
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<StageOutput> {
        let features = self.features(cx, x)?;
        let out = self.tail(cx, features)?;
        Ok(StageOutput { features, out })
    }
}
