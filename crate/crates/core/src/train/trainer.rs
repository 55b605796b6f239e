//! Training loop, batched prediction and evaluation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::OptimizerState;
use crate::dgcm::{alpha, dgcm_batch_loss, dgcm_predict, single_head_predict};
use crate::error::{Error, Result};
use crate::model::{flip_augment, stack, FlowTriplet, Logits, Merba};
use crate::params::{Ctx, ParamStore};
use crate::tensor::{Element, Graph, Var};
use crate::train::metrics::{evaluate_predictions, EvalReport};
use crate::train::optim::AdamW;
use crate::train::schedule::Schedule;
use crate::train::synth::Sample;

pub const LOG_HEADER: &str = "epoch,lr,loss_total,loss_coarse,loss_fine,alpha,train_uf1,val_uf1";

/// Batch size used by prediction helpers.
pub const EVAL_BATCH: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Rate at the first step of the epoch.
    pub lr: f64,
    /// Sample-weighted means over the epoch's batches.
    pub loss_total: f64,
    pub loss_coarse: f64,
    /// Absent for the single head or when no batch held a negative sample.
    pub loss_fine: Option<f64>,
    /// Absent for the single head.
    pub alpha: Option<f64>,
    /// UF1 of the training-mode predictions made during the epoch.
    pub train_uf1: f64,
    pub val_uf1: Option<f64>,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.loss_total,
            self.loss_coarse,
            opt(self.loss_fine),
            opt(self.alpha),
            self.train_uf1,
            opt(self.val_uf1)
        )
    }
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for row in log {
        let _ = writeln!(s, "{}", row.csv_row());
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Parameters of the best validation epoch, or of the last epoch when
    /// there is no validation set.
    pub params: ParamStore<T>,
    pub optimizer: OptimizerState<T>,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

struct StepLoss {
    total: f64,
    coarse: f64,
    fine: Option<f64>,
    preds: Vec<usize>,
}

fn logits_rows<T: Element>(g: &Graph<T>, v: Var) -> Result<Vec<Vec<f64>>> {
    let cols = g.shape(v)[1];
    Ok(g.data(v)?
        .chunks(cols)
        .map(|r| r.iter().map(|x| x.f64()).collect())
        .collect())
}

fn predictions<T: Element>(g: &Graph<T>, model: &Merba, logits: Logits) -> Result<Vec<usize>> {
    Ok(match logits {
        Logits::Single(l) => logits_rows(g, l)?.iter().map(|r| single_head_predict(r)).collect(),
        Logits::Dgcm { coarse, fine } => logits_rows(g, coarse)?
            .iter()
            .zip(logits_rows(g, fine)?)
            .map(|(c, f)| dgcm_predict(c, &f, &model.space))
            .collect(),
    })
}

fn scalar<T: Element>(g: &Graph<T>, v: Var) -> Result<f64> {
    Ok(g.data(v)?[0].f64())
}

/// One optimisation step on `batch`; returns the loss parts and the
/// training-mode predictions.
#[allow(clippy::too_many_arguments)]
fn train_step<T: Element>(
    model: &Merba,
    params: &mut ParamStore<T>,
    opt: &mut AdamW<T>,
    batch: &[&FlowTriplet],
    labels: &[usize],
    lr: f64,
    alpha_now: f64,
    dropout_seed: u64,
) -> Result<StepLoss> {
    let x = stack::<T>(batch)?;
    let (grads, bn, loss) = {
        let mut cx = Ctx::new(params, true, dropout_seed);
        let input = cx.g.input_owned(x);
        let out = model.forward(&mut cx, input)?;
        let preds = predictions(&cx.g, model, out.logits)?;
        let n = labels.len();
        let (total, coarse, fine) = match out.logits {
            Logits::Single(l) => {
                let t = cx.g.cross_entropy(l, labels.to_vec(), vec![1.0 / n as f64; n])?;
                (t, t, None)
            }
            Logits::Dgcm { coarse, fine } => {
                let b = dgcm_batch_loss(
                    &mut cx.g,
                    coarse,
                    fine,
                    labels,
                    &model.space,
                    alpha_now,
                    model.cfg.dgcm.fine_mean_over_negatives,
                )?;
                (b.total, b.coarse, b.fine)
            }
        };
        let loss = StepLoss {
            total: scalar(&cx.g, total)?,
            coarse: scalar(&cx.g, coarse)?,
            fine: fine.map(|f| scalar(&cx.g, f)).transpose()?,
            preds,
        };
        if !loss.total.is_finite() {
            return Ok(loss);
        }
        let g = cx.g.backward(total)?;
        (cx.param_grads(&g), cx.bn_updates(), loss)
    };
    opt.step(params, &grads, lr);
    params.apply_bn_updates(&bn, model.cfg.train.bn_momentum);
    Ok(loss)
}

fn uf1(model: &Merba, truth: &[usize], pred: &[usize]) -> Result<f64> {
    Ok(evaluate_predictions(truth, pred, model.space.full())?.uf1)
}

/// Trains from `params` with the settings in `model.cfg.train`. Batches are
/// reshuffled every epoch; the rate follows the schedule per step.
/// Validation UF1 drives early stopping when `val` is non-empty.
pub fn train<T: Element>(
    model: &Merba,
    mut params: ParamStore<T>,
    train_set: &[Sample],
    val: &[Sample],
    seed: u64,
) -> Result<TrainOutcome<T>> {
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let n_labels = model.space.full().len();
    if let Some(s) = train_set.iter().chain(val).find(|s| s.label >= n_labels) {
        return Err(Error::InvalidArgument(format!(
            "label {} outside the {n_labels}-class label space",
            s.label
        )));
    }
    let tc = &model.cfg.train;
    let aug = &model.cfg.augment;
    let schedule = Schedule::from_config(tc);
    let mut opt = AdamW::new(tc, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch_size = tc.batch_size.max(1);
    let steps = train_set.len().div_ceil(batch_size);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(tc.epochs);
    let mut best: Option<(f64, usize, ParamStore<T>)> = None;
    let mut stopped_early = false;

    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let a = alpha(epoch, tc.epochs)?;
        let (mut total, mut coarse, mut fine, mut fine_n) = (0.0, 0.0, 0.0, 0usize);
        let (mut truth, mut preds) = (Vec::new(), Vec::new());
        let mut first_lr = None;
        for (step, idx) in order.chunks(batch_size).enumerate() {
            let lr = schedule.lr_at(epoch as f64 + step as f64 / steps as f64);
            first_lr.get_or_insert(lr);
            let flows: Vec<FlowTriplet> = idx
                .iter()
                .map(|&i| flip_augment(&train_set[i].flow, &mut rng, aug.flip_prob, aug.negate_u))
                .collect();
            let refs: Vec<&FlowTriplet> = flows.iter().collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train_set[i].label).collect();
            let loss = train_step(model, &mut params, &mut opt, &refs, &labels, lr, a, rng.random())?;
            if !loss.total.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            let n = idx.len() as f64;
            total += loss.total * n;
            coarse += loss.coarse * n;
            if let Some(f) = loss.fine {
                fine += f * n;
                fine_n += idx.len();
            }
            truth.extend(labels);
            preds.extend(loss.preds);
        }
        let n = train_set.len() as f64;
        let val_uf1 = if val.is_empty() {
            None
        } else {
            Some(evaluate(model, &params, val)?.uf1)
        };
        log.push(EpochLog {
            epoch,
            lr: first_lr.unwrap_or(0.0),
            loss_total: total / n,
            loss_coarse: coarse / n,
            loss_fine: (fine_n > 0).then(|| fine / fine_n as f64),
            alpha: model.cfg.dgcm.enabled.then_some(a),
            train_uf1: uf1(model, &truth, &preds)?,
            val_uf1,
        });
        if let Some(v) = val_uf1 {
            if best.as_ref().is_none_or(|(b, _, _)| v > *b) {
                best = Some((v, epoch, params.clone()));
            } else if epoch - best.as_ref().map_or(0, |b| b.1) >= tc.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let last = log.len().saturating_sub(1);
    let (params, best_epoch) = match best {
        Some((_, e, p)) => (p, e),
        None => (params, last),
    };
    Ok(TrainOutcome {
        params,
        optimizer: opt.state,
        log,
        best_epoch,
        stopped_early,
    })
}

/// Eval-mode full-label predictions; batches run in parallel.
pub fn predict<T: Element>(model: &Merba, params: &ParamStore<T>, flows: &[&FlowTriplet]) -> Result<Vec<usize>> {
    let chunks: Vec<Vec<usize>> = flows
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let mut cx = Ctx::new(params, false, 0);
            let input = cx.g.input_owned(stack::<T>(chunk)?);
            let out = model.forward(&mut cx, input)?;
            predictions(&cx.g, model, out.logits)
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

pub fn evaluate<T: Element>(model: &Merba, params: &ParamStore<T>, data: &[Sample]) -> Result<EvalReport> {
    let flows: Vec<&FlowTriplet> = data.iter().map(|s| &s.flow).collect();
    let pred = predict(model, params, &flows)?;
    let truth: Vec<usize> = data.iter().map(|s| s.label).collect();
    evaluate_predictions(&truth, &pred, model.space.full())
}
