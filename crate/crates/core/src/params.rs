//! Named parameter registry, parameter values, and the forward context that
//! binds values into a graph.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::gradcheck::coords;
use crate::tensor::{numel, rel_err, Element, GradCheckReport, Gradients, Graph, ParamCheck, Tensor, Var};

/// Weights are trained; buffers (batch-norm running statistics) are updated
/// outside the optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal truncated at two standard deviations.
    TruncNormal {
        std: f64,
    },
    Uniform {
        bound: f64,
    },
    /// Row `e` of an `E x N` matrix holds `ln 1, ..., ln N`.
    ALog,
    /// Bias whose softplus is log-uniform in `[min, max]`.
    DtBias {
        min: f64,
        max: f64,
    },
}

impl Init {
    fn sample(&self, shape: &[usize], rng: &mut impl Rng) -> Vec<f64> {
        let n = numel(shape);
        match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::TruncNormal { std } => {
                let dist = Normal::new(0.0, *std).expect("finite std");
                (0..n)
                    .map(|_| loop {
                        let v: f64 = dist.sample(rng);
                        if v.abs() <= 2.0 * std {
                            break v;
                        }
                    })
                    .collect()
            }
            Init::Uniform { bound } => (0..n).map(|_| rng.random_range(-bound..=*bound)).collect(),
            Init::ALog => {
                let cols = *shape.last().unwrap_or(&1);
                (0..n).map(|i| ((i % cols + 1) as f64).ln()).collect()
            }
            Init::DtBias { min, max } => (0..n)
                .map(|_| {
                    let dt = (rng.random_range(min.ln()..=max.ln())).exp();
                    // inverse softplus
                    dt + (-(-dt).exp_m1()).ln()
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub init: Init,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Collects parameter declarations while a model is being assembled.
#[derive(Default)]
pub struct ParamBuilder {
    specs: Vec<ParamSpec>,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn weight(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        self.push(name.into(), shape, ParamKind::Weight, init)
    }

    pub fn buffer(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        self.push(name.into(), shape, ParamKind::Buffer, init)
    }

    fn push(&mut self, name: String, shape: &[usize], kind: ParamKind, init: Init) -> ParamId {
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            kind,
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn finish(self) -> Result<Arc<[ParamSpec]>> {
        let mut seen = HashMap::new();
        for s in &self.specs {
            if s.shape.contains(&0) {
                return Err(Error::invalid_shape(
                    "param",
                    &s.shape,
                    format!("`{}` has a zero extent", s.name),
                ));
            }
            if seen.insert(s.name.as_str(), ()).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate parameter name `{}`", s.name)));
            }
        }
        Ok(self.specs.into())
    }
}

/// Trainable element count of a set of declarations.
pub fn count_weights(specs: &[ParamSpec]) -> usize {
    specs
        .iter()
        .filter(|s| s.kind == ParamKind::Weight)
        .map(|s| numel(&s.shape))
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    specs: Arc<[ParamSpec]>,
    values: Vec<Tensor<T>>,
}

/// Running-statistic update produced by one training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    /// Elements per channel that produced the statistics.
    pub count: usize,
}

impl<T: Element> ParamStore<T> {
    pub fn init(specs: Arc<[ParamSpec]>, rng: &mut impl Rng) -> Self {
        let values = specs
            .iter()
            .map(|s| {
                Tensor::from_parts(
                    s.shape.clone(),
                    s.init.sample(&s.shape, rng).into_iter().map(T::of).collect(),
                )
            })
            .collect();
        ParamStore { specs, values }
    }

    pub fn from_values(specs: Arc<[ParamSpec]>, values: Vec<Tensor<T>>) -> Result<Self> {
        if specs.len() != values.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameter declarations but {} tensors",
                specs.len(),
                values.len()
            )));
        }
        for (s, v) in specs.iter().zip(&values) {
            if s.shape != v.shape() {
                return Err(Error::InvalidArgument(format!(
                    "parameter `{}` expects shape {:?}, got {:?}",
                    s.name,
                    s.shape,
                    v.shape()
                )));
            }
        }
        Ok(ParamStore { specs, values })
    }

    pub fn specs(&self) -> &Arc<[ParamSpec]> {
        &self.specs
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn count_weights(&self) -> usize {
        self.ids()
            .filter(|&id| self.spec(id).kind == ParamKind::Weight)
            .map(|id| self.get(id).numel())
            .sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            specs: Arc::clone(&self.specs),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    /// Exponential moving average of batch statistics; the variance is
    /// stored unbiased.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate], momentum: f64) {
        for u in updates {
            let correction = if u.count > 1 {
                u.count as f64 / (u.count - 1) as f64
            } else {
                1.0
            };
            let blend = |running: &mut Tensor<T>, batch: &[f64], scale: f64| {
                for (r, &b) in running.data_mut().iter_mut().zip(batch) {
                    *r = T::of((1.0 - momentum) * r.f64() + momentum * b * scale);
                }
            };
            blend(&mut self.values[u.mean_id.0], &u.batch_mean, 1.0);
            blend(&mut self.values[u.var_id.0], &u.batch_var, correction);
        }
    }
}

/// One forward pass: a graph plus the lazily created leaves for each
/// parameter it touches.
pub struct Ctx<'a, T: Element> {
    pub g: Graph<T>,
    specs: &'a [ParamSpec],
    values: Option<&'a [Tensor<T>]>,
    bound: Vec<Option<Var>>,
    train: bool,
    bn: Vec<(Var, ParamId, ParamId)>,
}

impl<'a, T: Element> Ctx<'a, T> {
    /// `seed` drives dropout masks; it is ignored when `train` is false.
    pub fn new(store: &'a ParamStore<T>, train: bool, seed: u64) -> Self {
        Ctx {
            g: Graph::with_seed(seed),
            specs: &store.specs,
            values: Some(&store.values),
            bound: vec![None; store.values.len()],
            train,
            bn: Vec::new(),
        }
    }

    /// Shapes only: no parameter values are needed.
    pub fn shape_only(specs: &'a [ParamSpec]) -> Self {
        Ctx {
            g: Graph::shape_only(),
            specs,
            values: None,
            bound: vec![None; specs.len()],
            train: false,
            bn: Vec::new(),
        }
    }

    pub fn train(&self) -> bool {
        self.train
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let v = match self.values {
            Some(values) => self.g.input(&values[id.0]),
            None => self.g.input_shape(&self.specs[id.0].shape)?,
        };
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    /// Leaf node for `id` if the pass used it.
    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if self.train {
            self.g.dropout(x, rate)
        } else {
            Ok(x)
        }
    }

    pub(crate) fn record_bn(&mut self, out: Var, mean_id: ParamId, var_id: ParamId) {
        self.bn.push((out, mean_id, var_id));
    }

    /// Gradients for every trainable parameter the pass used, by id.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.bound
            .iter()
            .zip(self.specs)
            .map(|(b, s)| match (b, s.kind) {
                (Some(v), ParamKind::Weight) => grads.get(*v),
                _ => None,
            })
            .collect()
    }

    /// Running-statistic updates from training-mode batch norms.
    pub fn bn_updates(&self) -> Vec<BnUpdate> {
        self.bn
            .iter()
            .filter_map(|&(out, mean_id, var_id)| {
                let (m, v) = self.g.batch_stats(out)?;
                let shape = self.g.shape(out);
                let count = numel(shape) / shape.last().copied().unwrap_or(1);
                Some(BnUpdate {
                    mean_id,
                    var_id,
                    batch_mean: m.iter().map(|x| x.f64()).collect(),
                    batch_var: v.iter().map(|x| x.f64()).collect(),
                    count,
                })
            })
            .collect()
    }
}

/// Finite-difference check of every trainable parameter a module pass
/// touches. `f` builds the scalar to differentiate; each evaluation runs in
/// a fresh context with the same `train` flag and dropout seed, so dropout
/// masks coincide. Weights the pass leaves unused get an analytic gradient
/// of zero.
pub fn grad_check_params<F>(
    store: &ParamStore<f64>,
    train: bool,
    f: F,
    step: f64,
    tolerance: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx<f64>) -> Result<Var>,
{
    const SEED: u64 = 17;
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut cx = Ctx::new(s, train, SEED);
        let out = f(&mut cx)?;
        Ok(cx.g.data(out)?[0])
    };
    let analytic = {
        let mut cx = Ctx::new(store, train, SEED);
        let out = f(&mut cx)?;
        let grads = cx.g.backward(out)?;
        cx.param_grads(&grads)
    };
    let mut work = store.clone();
    let mut report = Vec::new();
    for id in store.ids() {
        let spec = store.spec(id);
        if spec.kind != ParamKind::Weight {
            continue;
        }
        let mut check = ParamCheck {
            name: spec.name.clone(),
            coords_checked: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for i in coords(store.get(id).numel(), max_coords) {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[id.0].as_ref().map_or(0.0, |g| g.data()[i]);
            check.max_rel_err = check.max_rel_err.max(rel_err(a, numeric));
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
            check.coords_checked += 1;
        }
        report.push(check);
    }
    let passed = report.iter().all(|p| p.max_rel_err <= tolerance);
    Ok(GradCheckReport {
        params: report,
        tolerance,
        passed,
    })
}
