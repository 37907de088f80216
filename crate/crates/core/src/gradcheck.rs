//! Finite-difference verification of analytic gradients.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Real;

const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamError {
    pub name: String,
    pub abs_err: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub per_parameter: Vec<ParamError>,
}

/// Difference stencil used for the numerical derivative.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`
    #[default]
    Central,
    /// Fourth-order central stencil over `x ± h, x ± 2h`.
    Central4,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub stencil: Stencil,
    /// Checks at most this many evenly strided coordinates per parameter.
    pub max_coords_per_param: Option<usize>,
}

impl GradCheckOptions {
    pub fn new(eps: f64) -> Self {
        GradCheckOptions {
            eps,
            stencil: Stencil::Central,
            max_coords_per_param: None,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn evaluate<T: Real, F>(f: &mut F, params: &ParamStore<T>) -> Result<f64>
where
    F: FnMut(&ParamStore<T>, &mut Graph<T>) -> Result<Var>,
{
    let mut g = Graph::inference();
    let out = f(params, &mut g)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::Usage(format!(
            "grad_check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0].as_f64())
}

/// Analytic gradient of `f` with respect to every parameter in `params`.
pub fn analytic_gradients<T: Real, F>(f: &mut F, params: &mut ParamStore<T>) -> Result<Vec<Vec<T>>>
where
    F: FnMut(&ParamStore<T>, &mut Graph<T>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(params, &mut g)?;
    g.backward(loss)?;
    params.zero_grads();
    g.accumulate_param_grads(params);
    Ok(params.iter().map(|p| p.grad.clone()).collect())
}

/// Compares central finite differences of `f` against its analytic gradient.
///
/// `f` builds a scalar from the parameters on the given graph. It must be
/// deterministic; stochastic layers have to be disabled by the caller.
pub fn grad_check<T: Real, F>(f: F, params: &mut ParamStore<T>, eps: f64) -> Result<GradReport>
where
    F: FnMut(&ParamStore<T>, &mut Graph<T>) -> Result<Var>,
{
    grad_check_with(f, params, GradCheckOptions::new(eps))
}

pub fn grad_check_with<T: Real, F>(
    mut f: F,
    params: &mut ParamStore<T>,
    opts: GradCheckOptions,
) -> Result<GradReport>
where
    F: FnMut(&ParamStore<T>, &mut Graph<T>) -> Result<Var>,
{
    if !(opts.eps > 0.0) {
        return Err(Error::Usage(format!("grad_check eps must be > 0, got {}", opts.eps)));
    }
    let first = evaluate(&mut f, params)?;
    let second = evaluate(&mut f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Usage(
            "grad_check function is not deterministic; disable stochastic layers".into(),
        ));
    }
    let analytic = analytic_gradients(&mut f, params)?;
    compare_gradients(|p| evaluate(&mut f, p), params, &analytic, opts)
}

/// Checks externally supplied gradients against finite differences of `eval`.
pub fn compare_gradients<T: Real, E>(
    mut eval: E,
    params: &mut ParamStore<T>,
    analytic: &[Vec<T>],
    opts: GradCheckOptions,
) -> Result<GradReport>
where
    E: FnMut(&ParamStore<T>) -> Result<f64>,
{
    if analytic.len() != params.len() {
        return Err(Error::Usage(format!(
            "{} gradient buffers for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let h = opts.eps;
    let mut report = GradReport::default();
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let len = params.get(id).len();
        let stride = match opts.max_coords_per_param {
            Some(k) if k > 0 && len > k => len.div_ceil(k),
            _ => 1,
        };
        let mut worst = ParamError {
            name: params.param(id).name.clone(),
            abs_err: 0.0,
            rel_err: 0.0,
        };
        for c in (0..len).step_by(stride) {
            let orig = params.get(id).data()[c];
            let mut at = |params: &mut ParamStore<T>, delta: f64| -> Result<f64> {
                params.get_mut(id).data_mut()[c] = T::of(orig.as_f64() + delta);
                let v = eval(params);
                params.get_mut(id).data_mut()[c] = orig;
                v
            };
            let numeric = match opts.stencil {
                Stencil::Central => (at(params, h)? - at(params, -h)?) / (2.0 * h),
                Stencil::Central4 => {
                    let (p1, m1) = (at(params, h)?, at(params, -h)?);
                    let (p2, m2) = (at(params, 2.0 * h)?, at(params, -2.0 * h)?);
                    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
                }
            };
            let a = analytic[id.0][c].as_f64();
            let abs = (a - numeric).abs();
            let rel = relative_error(a, numeric);
            worst.abs_err = worst.abs_err.max(abs);
            worst.rel_err = worst.rel_err.max(rel);
        }
        report.max_abs_err = report.max_abs_err.max(worst.abs_err);
        report.max_rel_err = report.max_rel_err.max(worst.rel_err);
        report.per_parameter.push(worst);
    }
    Ok(report)
}
