//! Gradient-weighted class activation maps over the last-stage feature map
//! (before the final norm and pooling).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{FlowTriplet, Logits, Merba};
use crate::params::{Ctx, ParamStore};
use crate::tensor::{Element, Graph, Var};

/// Heat map on the `(height, width)` grid, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CamMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// Set when the weighted map is zero everywhere (for instance because
    /// the score has no gradient); `values` is then all zeros.
    pub degenerate: bool,
}

/// Channel weights are spatial means of `grads`; the map is
/// `relu(sum_c w_c * acts_c)`, min-max normalised. A constant non-zero map
/// normalises to all ones. `acts` and `grads` are `(h, w, c)` row-major.
pub fn cam_from_activations(acts: &[f64], grads: &[f64], h: usize, w: usize, c: usize) -> Result<CamMap> {
    let n = h * w * c;
    if n == 0 || acts.len() != n || grads.len() != n {
        return Err(Error::InvalidArgument(format!(
            "activations ({}) and gradients ({}) must both hold {h}x{w}x{c} values",
            acts.len(),
            grads.len()
        )));
    }
    let hw = (h * w) as f64;
    let mut weights = vec![0.0; c];
    for px in grads.chunks_exact(c) {
        for (wc, g) in weights.iter_mut().zip(px) {
            *wc += g / hw;
        }
    }
    let raw: Vec<f64> = acts
        .chunks_exact(c)
        .map(|px| px.iter().zip(&weights).map(|(a, w)| a * w).sum::<f64>().max(0.0))
        .collect();
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (values, degenerate) = if hi <= 0.0 {
        (vec![0.0; h * w], true)
    } else if hi == lo {
        (vec![1.0; h * w], false)
    } else {
        (raw.iter().map(|v| (v - lo) / (hi - lo)).collect(), false)
    };
    Ok(CamMap {
        height: h,
        width: w,
        values,
        degenerate,
    })
}

/// Scalar score for `target` (a full-label index): the single-head logit,
/// or the coarse logit plus, for negative targets, the fine logit.
fn score<T: Element>(g: &mut Graph<T>, model: &Merba, logits: Logits, target: usize) -> Result<Var> {
    let pick = |g: &mut Graph<T>, l: Var, i: usize| -> Result<Var> {
        let col = g.narrow(l, 1, i, 1)?;
        g.sum(col)
    };
    match logits {
        Logits::Single(l) => pick(g, l, target),
        Logits::Dgcm { coarse, fine } => {
            let c = pick(g, coarse, model.space.coarse_of(target)?)?;
            match model.space.fine_of(target)? {
                Some(f) => {
                    let f = pick(g, fine, f)?;
                    g.add(c, f)
                }
                None => Ok(c),
            }
        }
    }
}

/// Eval-mode Grad-CAM for one sample.
pub fn grad_cam<T: Element>(model: &Merba, params: &ParamStore<T>, x: &FlowTriplet, target: usize) -> Result<CamMap> {
    if target >= model.space.full().len() {
        return Err(Error::InvalidArgument(format!(
            "target {target} outside the label space"
        )));
    }
    let mut cx = Ctx::new(params, false, 0);
    let input =
        cx.g.input_owned(x.to_tensor::<T>().reshape(&[1, x.height(), x.width(), 3])?);
    let out = model.forward(&mut cx, input)?;
    let s = score(&mut cx.g, model, out.logits, target)?;
    let grads = cx.g.backward(s)?;
    let shape = cx.g.shape(out.last_map).to_vec();
    let acts: Vec<f64> = cx.g.data(out.last_map)?.iter().map(|v| v.f64()).collect();
    let grads: Vec<f64> = match grads.data(out.last_map) {
        Some(d) => d.iter().map(|v| v.f64()).collect(),
        None => vec![0.0; acts.len()],
    };
    cam_from_activations(&acts, &grads, shape[1], shape[2], shape[3])
}

/// Nearest-neighbour resize of a map to `(out_h, out_w)`.
pub fn upsample_nearest(cam: &CamMap, out_h: usize, out_w: usize) -> CamMap {
    let values = (0..out_h * out_w)
        .map(|p| {
            let (r, c) = (p / out_w, p % out_w);
            cam.values[(r * cam.height / out_h) * cam.width + c * cam.width / out_w]
        })
        .collect();
    CamMap {
        height: out_h,
        width: out_w,
        values,
        degenerate: cam.degenerate,
    }
}

/// Binary greyscale PGM (P5), values in `[0, 1]` mapped to `0..=255`.
pub fn write_pgm(path: impl AsRef<Path>, cam: &CamMap) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", cam.width, cam.height).into_bytes();
    bytes.extend(cam.values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes)?;
    Ok(())
}
