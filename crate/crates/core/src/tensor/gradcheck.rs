//! Central finite-difference gradient checking in f64.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Result for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

/// Denominator floor for relative error, so that gradients that are zero in
/// both routes compare as exact.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

pub(crate) fn coords(numel: usize, max_coords: Option<usize>) -> Vec<usize> {
    match max_coords {
        Some(m) if m < numel => {
            // evenly spaced, always including the first and last coordinate
            (0..m).map(|i| i * (numel - 1) / (m - 1).max(1)).collect()
        }
        _ => (0..numel).collect(),
    }
}

fn eval_scalar<F>(f: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.input(p)).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.data(out)?[0])
}

/// Compares `analytic` gradients against central differences of `f`.
///
/// `f` rebuilds the graph from the parameter leaves and returns the scalar
/// node. Graphs are rebuilt with the same dropout seed, so stochastic
/// primitives see identical masks in every evaluation.
pub fn grad_check_against<F>(
    names: &[String],
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    f: F,
    step: f64,
    tolerance: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (pi, name) in names.iter().enumerate() {
        let mut check = ParamCheck {
            name: name.clone(),
            coords_checked: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for i in coords(params[pi].numel(), max_coords) {
            let orig = params[pi].data()[i];
            work[pi].data_mut()[i] = orig + step;
            let plus = eval_scalar(&f, &work)?;
            work[pi].data_mut()[i] = orig - step;
            let minus = eval_scalar(&f, &work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi].data()[i];
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

/// Full check: analytic gradients come from [`Graph::backward`].
pub fn grad_check<F>(
    names: &[String],
    params: &[Tensor<f64>],
    f: F,
    step: f64,
    tolerance: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.input(p)).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    grad_check_against(names, params, &analytic, f, step, tolerance, max_coords)
}
