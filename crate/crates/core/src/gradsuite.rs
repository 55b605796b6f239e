//! Finite-difference gradient checks, in f64, over the mixer, attention,
//! extractor and global blocks in isolation and over the miniature network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::dgcm::dgcm_batch_loss;
use crate::error::Result;
use crate::lgfi::{ExtractorBlock, GlobalBlock, StageConfig};
use crate::mixer::{Mixer, MixerConfig};
use crate::model::{Logits, Merba};
use crate::nn::Attention;
use crate::params::{grad_check_params, Ctx, ParamBuilder, ParamKind, ParamStore};
use crate::scan::ScanDirection;
use crate::tensor::{GradCheckReport, Tensor, Var};

/// Central-difference step.
pub const STEP: f64 = 1e-4;
/// Relative error tolerance.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteResult {
    pub fn line(&self) -> String {
        format!(
            "{}: {} (max rel err {:.3e}, tol {:.0e})",
            self.name,
            if self.report.passed { "PASS" } else { "FAIL" },
            self.report.max_rel_err(),
            self.report.tolerance
        )
    }
}

/// Adds uniform noise in `[-scale, scale)` to every trainable weight.
pub fn jitter_weights(store: &mut ParamStore<f64>, rng: &mut impl Rng, scale: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        if store.spec(id).kind == ParamKind::Weight {
            for v in store.get_mut(id).data_mut() {
                *v += rng.random_range(-scale..scale);
            }
        }
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `sum(y * r)` for a fixed random `r`, so every output element matters.
fn project(cx: &mut Ctx<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = cx.g.input(r);
    let p = cx.g.mul(y, rv)?;
    cx.g.sum(p)
}

fn block_config(dim: usize) -> StageConfig {
    StageConfig {
        dim,
        depth: 1,
        window: 2,
        heads: 2,
        mlp_ratio: 2,
        dropout: 0.1,
        mixer: MixerConfig {
            dim,
            state_dim: 3,
            conv_kernel: 3,
            exact_zoh: false,
        },
        directions: ScanDirection::PRODUCTION.to_vec(),
        prenorm: true,
        residual: true,
        per_direction_params: false,
        next_dim: None,
    }
}

/// Builds a module, initialises and jitters its weights, and checks
/// `sum(module(x) * r)` against central differences.
fn check_module<M>(
    name: &str,
    rng: &mut ChaCha8Rng,
    build: impl FnOnce(&mut ParamBuilder) -> Result<M>,
    forward: impl Fn(&M, &mut Ctx<f64>, Var) -> Result<Var>,
    in_shape: &[usize],
    out_shape: &[usize],
    train: bool,
) -> Result<SuiteResult> {
    let mut pb = ParamBuilder::new();
    let module = build(&mut pb)?;
    let mut store = ParamStore::init(pb.finish()?, rng);
    jitter_weights(&mut store, rng, 0.3);
    let x = uniform(rng, in_shape);
    let r = uniform(rng, out_shape);
    let report = grad_check_params(
        &store,
        train,
        |cx| {
            let xv = cx.g.input(&x);
            let y = forward(&module, cx, xv)?;
            project(cx, y, &r)
        },
        STEP,
        TOLERANCE,
        None,
    )?;
    Ok(SuiteResult {
        name: name.to_string(),
        report,
    })
}

/// End-to-end check of the miniature network in training mode with the
/// dual-granularity loss on one negative and one non-negative sample.
/// Coordinates are sampled (three per tensor) to bound the run time.
pub fn check_miniature(seed: u64) -> Result<SuiteResult> {
    let cfg = Config::miniature();
    let model = Merba::new(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = model.init_params::<f64>(&mut rng);
    jitter_weights(&mut store, &mut rng, 0.05);
    let size = cfg.model.input_size;
    let x = uniform(&mut rng, &[2, size, size, 3]);
    let negative = (0..model.space.full().len())
        .find(|&i| model.space.is_negative(i).unwrap_or(false))
        .unwrap_or(0);
    let other = (0..model.space.full().len()).find(|&i| i != negative).unwrap_or(0);
    let labels = [negative, other];
    let report = grad_check_params(
        &store,
        true,
        |cx| {
            let xv = cx.g.input(&x);
            let out = model.forward(cx, xv)?;
            match out.logits {
                Logits::Dgcm { coarse, fine } => {
                    Ok(dgcm_batch_loss(&mut cx.g, coarse, fine, &labels, &model.space, 1.0, true)?.total)
                }
                Logits::Single(logits) => {
                    let ce = cx.g.cross_entropy(logits, labels.to_vec(), vec![0.5; 2])?;
                    Ok(ce)
                }
            }
        },
        STEP,
        TOLERANCE,
        Some(3),
    )?;
    Ok(SuiteResult {
        name: "miniature".into(),
        report,
    })
}

/// Every block check followed by the end-to-end check.
pub fn gradient_suite(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, zoh) in [("mixer", false), ("mixer_zoh", true)] {
        let cfg = MixerConfig {
            dim: 8,
            state_dim: 4,
            conv_kernel: 3,
            exact_zoh: zoh,
        };
        out.push(check_module(
            name,
            &mut rng,
            |pb| Mixer::new(pb, "mixer", cfg),
            |m, cx, x| m.forward(cx, x),
            &[2, 9, 8],
            &[2, 9, 8],
            false,
        )?);
    }
    out.push(check_module(
        "attention",
        &mut rng,
        |pb| Attention::new(pb, "attn", 8, 2, 0.1),
        |a, cx, x| a.forward(cx, x),
        &[2, 5, 8],
        &[2, 5, 8],
        true,
    )?);
    let cfg = block_config(8);
    out.push(check_module(
        "extractor",
        &mut rng,
        |pb| ExtractorBlock::new(pb, "block", &cfg),
        |b, cx, x| b.forward(cx, x),
        &[3, 2, 2, 8],
        &[3, 2, 2, 8],
        true,
    )?);
    out.push(check_module(
        "global",
        &mut rng,
        |pb| GlobalBlock::new(pb, "block", &cfg),
        |b, cx, x| b.forward(cx, x),
        &[2, 6, 8],
        &[2, 6, 8],
        true,
    )?);
    out.push(check_miniature(rng.random())?);
    Ok(out)
}
