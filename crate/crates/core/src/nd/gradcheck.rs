//! Central-difference verification of tape gradients.

use super::layers::Module;
use super::param::Parameter;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Denominator floor for relative errors. Components whose analytic and
/// numeric magnitudes are both below it are compared in absolute terms,
/// since central differences cannot resolve them relative to themselves.
pub const DEFAULT_SCALE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients of `f` with central differences of step `h`.
pub fn gradcheck<F>(f: F, params: &[Parameter], h: f64, tol: f64) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    gradcheck_with_floor(f, params, h, tol, DEFAULT_SCALE_FLOOR)
}

pub fn gradcheck_with_floor<F>(
    f: F,
    params: &[Parameter],
    h: f64,
    tol: f64,
    floor: f64,
) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |values: &[Parameter]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|p| tape.constant(p.value.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };

    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&tape, &vars)?;
    let first = loss.value().item();
    let grads = tape.backward(loss)?;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut work = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let mut check = ParamCheck {
            name: params[pi].name.clone(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: 0,
        };
        for i in 0..analytic.len() {
            let orig = work[pi].value.data()[i];
            work[pi].value.data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[pi].value.data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[pi].value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = relative_error(a, numeric, floor);
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst_index = i;
            }
        }
        report.push(check);
    }
    let max_rel_err = report.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport { params: report, max_rel_err, tol, passed: max_rel_err <= tol })
}

/// Gradcheck over every parameter of a module.
///
/// `f` binds the module on the tape it is given; gradients are collected
/// by parameter name, so a parameter bound several times is summed.
pub fn gradcheck_module<M, F>(f: F, module: &M, h: f64, tol: f64) -> Result<GradcheckReport>
where
    M: Module,
    F: for<'t> Fn(&'t Tape, &M) -> Result<Var<'t>>,
{
    let eval = |m: &M| -> Result<f64> {
        let tape = Tape::new();
        Ok(f(&tape, m)?.value().item())
    };
    let tape = Tape::new();
    let loss = f(&tape, module)?;
    let first = loss.value().item();
    let grads = tape.backward(loss)?;
    let second = eval(module)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut work = module.clone();
    let count = module.params().len();
    let mut report = Vec::with_capacity(count);
    for pi in 0..count {
        let (name, len) = {
            let p = module.params()[pi];
            (p.name.clone(), p.value.len())
        };
        let analytic = grads.param(&name);
        let mut check = ParamCheck { name, max_rel_err: 0.0, max_abs_err: 0.0, worst_index: 0 };
        for i in 0..len {
            let orig = work.params()[pi].value.data()[i];
            work.params_mut()[pi].value.data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work.params_mut()[pi].value.data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work.params_mut()[pi].value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.as_ref().map_or(0.0, |g| g.data()[i]);
            let rel = relative_error(a, numeric, DEFAULT_SCALE_FLOOR);
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst_index = i;
            }
        }
        report.push(check);
    }
    let max_rel_err = report.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport { params: report, max_rel_err, tol, passed: max_rel_err <= tol })
}
