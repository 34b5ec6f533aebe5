//! Fixed-step integrators for the prototype ODE.
//!
//! Integration runs on a [`Tape`] so that training can backpropagate
//! through the unrolled steps; [`integrate_tensor`] wraps it for plain
//! numeric use.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nd::{BoundMlp2, Linear, Mlp2, Module, Parameter, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Euler,
    #[default]
    Rk4,
    E2,
}

impl SolverKind {
    pub fn code(self) -> f64 {
        match self {
            SolverKind::Euler => 0.0,
            SolverKind::Rk4 => 1.0,
            SolverKind::E2 => 2.0,
        }
    }

    pub fn from_code(code: f64) -> Option<Self> {
        [SolverKind::Euler, SolverKind::Rk4, SolverKind::E2].into_iter().find(|k| k.code() == code)
    }
}

impl std::str::FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(SolverKind::Euler),
            "rk4" => Ok(SolverKind::Rk4),
            "e2" | "e2solver" => Ok(SolverKind::E2),
            other => Err(Error::Config(format!("unknown solver {other:?} (euler, rk4, e2)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub kind: SolverKind,
    pub integral_time: f64,
    pub steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { kind: SolverKind::Rk4, integral_time: 40.0, steps: 40 }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("solver steps must be at least 1".into()));
        }
        if !(self.integral_time.is_finite() && self.integral_time > 0.0) {
            return Err(Error::Config(format!("integral_time must be positive, got {}", self.integral_time)));
        }
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        self.integral_time / self.steps as f64
    }
}

/// Learned per-step correction `eta`, applied to each prototype row.
#[derive(Clone, Debug, PartialEq)]
pub struct E2SolverParams {
    pub eta: Mlp2,
}

impl E2SolverParams {
    /// Random hidden layer, zero output layer: starts as plain Euler.
    pub fn new(dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            eta: Mlp2 {
                hidden: Linear::new("eta.hidden", dim, dim, rng),
                output: Linear::zeroed("eta.output", dim, dim),
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.eta.fan_in()
    }

}

impl Module for E2SolverParams {
    fn params(&self) -> Vec<&Parameter> {
        self.eta.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.eta.params_mut()
    }
}

fn check_step(v: Var<'_>, step: usize) -> Result<()> {
    if v.value().is_finite() {
        Ok(())
    } else {
        Err(Error::Integration { step, detail: "non-finite prototype state".into() })
    }
}

/// Integrates `dp/dt = flow(p, t)` from `t = 0` to `config.integral_time`.
///
/// `correction` is required for [`SolverKind::E2`] and ignored otherwise.
pub fn integrate<'t, F>(
    flow: F,
    p0: Var<'t>,
    config: &SolverConfig,
    correction: Option<&BoundMlp2<'t>>,
) -> Result<Var<'t>>
where
    F: FnMut(Var<'t>, f64) -> Result<Var<'t>>,
{
    config.validate()?;
    integrate_steps(flow, p0, config.kind, config.step_size(), config.steps, correction)
}

/// Fixed-step integration with an explicit step size `h`.
pub fn integrate_steps<'t, F>(
    mut flow: F,
    p0: Var<'t>,
    kind: SolverKind,
    h: f64,
    steps: usize,
    correction: Option<&BoundMlp2<'t>>,
) -> Result<Var<'t>>
where
    F: FnMut(Var<'t>, f64) -> Result<Var<'t>>,
{
    let eta = match (kind, correction) {
        (SolverKind::E2, None) => {
            return Err(Error::Config("the e2 solver needs correction parameters".into()));
        }
        (SolverKind::E2, Some(eta)) => Some(eta),
        _ => None,
    };
    let mut p = p0;
    for n in 0..steps {
        let t = n as f64 * h;
        p = match kind {
            SolverKind::Euler => p.add(flow(p, t)?.scale(h))?,
            SolverKind::E2 => {
                let base = p.add(flow(p, t)?.scale(h))?;
                base.add(eta.expect("checked above").forward(p)?)?
            }
            SolverKind::Rk4 => {
                let k1 = flow(p, t)?;
                let k2 = flow(p.add(k1.scale(h / 2.0))?, t + h / 2.0)?;
                let k3 = flow(p.add(k2.scale(h / 2.0))?, t + h / 2.0)?;
                let k4 = flow(p.add(k3.scale(h))?, t + h)?;
                let sum = k1.add(k2.scale(2.0))?.add(k3.scale(2.0))?.add(k4)?;
                p.add(sum.scale(h / 6.0))?
            }
        };
        check_step(p, n)?;
    }
    Ok(p)
}

/// [`integrate`] for a plain numeric flow, on a private tape.
pub fn integrate_tensor(
    flow: impl Fn(&Tensor, f64) -> Result<Tensor>,
    p0: &Tensor,
    config: &SolverConfig,
    correction: Option<&E2SolverParams>,
) -> Result<Tensor> {
    let tape = Tape::new();
    let eta = correction.map(|c| c.eta.bind(&tape));
    let out = integrate(
        |p, t| Ok(tape.constant(flow(&p.value(), t)?)),
        tape.constant(p0.clone()),
        config,
        eta.as_ref(),
    )?;
    Ok((*out.value()).clone())
}

/// Outcome of comparing Euler integration with explicit gradient descent.
#[derive(Clone, Debug, PartialEq)]
pub struct GdaComparison {
    pub euler: Tensor,
    pub descent: Tensor,
    pub max_abs_diff: f64,
}

impl GdaComparison {
    pub fn identical(&self) -> bool {
        self.max_abs_diff == 0.0
    }
}

/// Runs Euler with `h = lr` on the flow `-grad` next to `n_steps` of
/// `p <- p - lr * grad(p)`.
pub fn gda_equivalence(
    grad: impl Fn(&Tensor) -> Result<Tensor>,
    p0: &Tensor,
    lr: f64,
    n_steps: usize,
) -> Result<GdaComparison> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    let tape = Tape::new();
    let euler = integrate_steps(
        |p, _| Ok(tape.constant(grad(&p.value())?.scale(-1.0))),
        tape.constant(p0.clone()),
        SolverKind::Euler,
        lr,
        n_steps,
        None,
    )?;
    let euler = (*euler.value()).clone();
    let mut descent = p0.clone();
    for _ in 0..n_steps {
        let g = grad(&descent)?;
        descent = descent.sub(&g.scale(lr))?;
    }
    let max_abs_diff = euler.max_abs_diff(&descent);
    Ok(GdaComparison { euler, descent, max_abs_diff })
}

/// Scalar test problems with closed-form solutions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TestOde {
    /// `dp/dt = -rate * p`.
    Decay { rate: f64 },
    /// `dp/dt = c`.
    Constant { c: f64 },
}

impl TestOde {
    pub fn flow(&self, p: &Tensor) -> Tensor {
        match *self {
            TestOde::Decay { rate } => p.scale(-rate),
            TestOde::Constant { c } => p.map(|_| c),
        }
    }

    pub fn exact(&self, p0: &Tensor, t: f64) -> Tensor {
        match *self {
            TestOde::Decay { rate } => p0.scale((-rate * t).exp()),
            TestOde::Constant { c } => p0.map(|v| v + c * t),
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct OrderPoint {
    pub steps: usize,
    pub h: f64,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct OrderReport {
    pub order: f64,
    pub points: Vec<OrderPoint>,
}

/// Global error of a fixed-step solve against the closed form.
pub fn global_error(
    kind: SolverKind,
    ode: TestOde,
    p0: &Tensor,
    integral_time: f64,
    steps: usize,
    correction: Option<&E2SolverParams>,
) -> Result<f64> {
    let config = SolverConfig { kind, integral_time, steps };
    let got = integrate_tensor(|p, _| Ok(ode.flow(p)), p0, &config, correction)?;
    Ok(got.max_abs_diff(&ode.exact(p0, integral_time)))
}

/// Least-squares slope of `log(error)` against `log(h)`.
pub fn empirical_order(
    kind: SolverKind,
    ode: TestOde,
    p0: &Tensor,
    integral_time: f64,
    step_counts: &[usize],
    correction: Option<&E2SolverParams>,
) -> Result<OrderReport> {
    if step_counts.len() < 3 {
        return Err(Error::Config("empirical order needs at least three step counts".into()));
    }
    let mut points = Vec::with_capacity(step_counts.len());
    for &steps in step_counts {
        let error = global_error(kind, ode, p0, integral_time, steps, correction)?;
        if error < 1e-13 {
            return Err(Error::ErrorUnderflow(error));
        }
        points.push(OrderPoint { steps, h: integral_time / steps as f64, error });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.h.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.error.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(OrderReport { order: sxy / sxx, points })
}
