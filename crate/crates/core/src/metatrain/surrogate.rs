use std::time::Instant;

use rand::Rng;

use super::adam::{adam_step, AdamState};
use super::model::Model;
use super::train::final_prototypes;
use crate::episodes::{episode_rng, Episode};
use crate::error::{Error, Result};
use crate::nd::{Module, Tape, Tensor};
use crate::solvers::{global_error, integrate_steps, E2SolverParams, SolverKind, TestOde};

/// Fitting the E² correction to a linear ODE whose flow is known exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateConfig {
    pub dim: usize,
    pub decay_rate: f64,
    pub integral_time: f64,
    pub steps: usize,
    pub adam_steps: usize,
    pub lr: f64,
    /// Initial states per Adam step, redrawn each step.
    pub batch: usize,
    /// Held-out initial states used for the reported errors.
    pub eval_batch: usize,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            decay_rate: 1.0,
            integral_time: 1.0,
            steps: 8,
            adam_steps: 200,
            lr: 1e-2,
            batch: 32,
            eval_batch: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SurrogateReport {
    pub correction: E2SolverParams,
    pub euler_error: f64,
    pub e2_error: f64,
    /// Training loss before each Adam step.
    pub losses: Vec<f64>,
}

impl SurrogateReport {
    pub fn error_ratio(&self) -> f64 {
        self.e2_error / self.euler_error
    }
}

fn draw_states(rng: &mut impl Rng, rows: usize, dim: usize) -> Tensor {
    let data = (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, dim], data).expect("finite draws")
}

/// Trains η by backpropagating the squared terminal error of the unrolled
/// E² solve against the closed-form solution.
pub fn train_e2_surrogate(config: &SurrogateConfig) -> Result<SurrogateReport> {
    if config.steps == 0 || config.dim == 0 || config.batch == 0 || config.eval_batch == 0 {
        return Err(Error::Config("surrogate sizes must be positive".into()));
    }
    let ode = TestOde::Decay { rate: config.decay_rate };
    let h = config.integral_time / config.steps as f64;
    let mut rng = episode_rng(config.seed, 0);
    let mut params = E2SolverParams::new(config.dim, &mut rng);
    let mut adam = AdamState::default();
    let mut losses = Vec::with_capacity(config.adam_steps);
    for _ in 0..config.adam_steps {
        let p0 = draw_states(&mut rng, config.batch, config.dim);
        let target = ode.exact(&p0, config.integral_time);
        let tape = Tape::new();
        let eta = params.eta.bind(&tape);
        let rate = config.decay_rate;
        let end = integrate_steps(
            |p, _| Ok(p.scale(-rate)),
            tape.constant(p0),
            SolverKind::E2,
            h,
            config.steps,
            Some(&eta),
        )?;
        let loss = end.sub(tape.constant(target))?.square().mean();
        let value = loss.value().item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("surrogate loss at step {}", losses.len())));
        }
        losses.push(value);
        tape.backward(loss)?.accumulate_into(params.params_mut());
        adam_step(params.params_mut(), &mut adam, config.lr, 0.0);
        params.zero_grad();
    }
    let held_out = draw_states(&mut episode_rng(config.seed, 1), config.eval_batch, config.dim);
    let euler_error = global_error(SolverKind::Euler, ode, &held_out, config.integral_time, config.steps, None)?;
    let e2_error = global_error(SolverKind::E2, ode, &held_out, config.integral_time, config.steps, Some(&params))?;
    Ok(SurrogateReport { correction: params, euler_error, e2_error, losses })
}

/// Median wall time of one full prototype solve on `episode`.
pub fn solve_wall_time(model: &Model, episode: &Episode, repeats: usize) -> Result<f64> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be positive".into()));
    }
    final_prototypes(model, episode)?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        std::hint::black_box(final_prototypes(model, episode)?);
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}
