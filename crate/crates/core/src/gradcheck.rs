//! Central finite-difference gradient oracle.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator floor for the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Coordinate with the largest relative error.
#[derive(Debug, Clone, PartialEq)]
pub struct WorstCoordinate {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    /// Largest relative error per parameter tensor.
    pub per_param: Vec<f64>,
    pub coordinates: usize,
    pub worst: Option<WorstCoordinate>,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Compares `analytic` against `(f(θ+h) − f(θ−h)) / 2h` for every coordinate
/// of every parameter tensor.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Input(format!("finite-difference step must be positive, got {h}")));
    }
    if params.len() != analytic.len() {
        return Err(Error::Input(format!(
            "{} parameter tensors but {} gradients",
            params.len(),
            analytic.len()
        )));
    }
    let mut work = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut worst: Option<WorstCoordinate> = None;
    let mut max_rel_err = 0.0f64;
    let mut coordinates = 0;
    for (pi, grad) in analytic.iter().enumerate() {
        if grad.shape() != params[pi].shape() {
            return Err(Error::shape("finite_diff_check", params[pi].shape(), grad.shape()));
        }
        let mut param_max = 0.0f64;
        for idx in 0..grad.numel() {
            let orig = work[pi].data()[idx];
            work[pi].data_mut()[idx] = orig + h;
            let plus = f(&work)?;
            work[pi].data_mut()[idx] = orig - h;
            let minus = f(&work)?;
            work[pi].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[idx];
            let err = relative_error(a, numeric);
            coordinates += 1;
            param_max = param_max.max(err);
            // NaN errors must register as failures.
            if err > max_rel_err || err.is_nan() {
                max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
                worst = Some(WorstCoordinate { param: pi, index: idx, analytic: a, numeric });
            }
        }
        per_param.push(param_max);
    }
    Ok(GradCheckReport { max_rel_err, pass: max_rel_err < tol, per_param, coordinates, worst })
}

/// Runs `build` once for analytic gradients, then replays it for the
/// finite-difference estimates. `build` receives one leaf per parameter.
pub fn check_gradients<F>(params: &[Tensor<f64>], build: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&mut Graph<'g, f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(params, &build)?;
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param_ref(p)).collect();
        let loss = build(&mut g, &vars)?;
        g.value(loss).item()
    };
    finite_diff_check(eval, params, &analytic, h, tol)
}

pub fn analytic_gradients<F>(params: &[Tensor<f64>], build: &F) -> Result<Vec<Tensor<f64>>>
where
    F: for<'g> Fn(&mut Graph<'g, f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param_ref(p)).collect();
    let loss = build(&mut g, &vars)?;
    let mut grads = g.backward(loss)?;
    Ok(vars.iter().map(|&v| grads.take(v).expect("leaf gradient")).collect())
}
