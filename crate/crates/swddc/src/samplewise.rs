//! Sample-wise stochastic optimal control solver: backward adjoint
//! recursion along a single simulated path, pathwise gradient, and
//! stochastic gradient descent with the unknown parameter drawn from a
//! particle cloud each iteration.

use nalgebra::DVector;
use rand::Rng;

use crate::direct_filter::ParticleCloud;
use crate::error::{invalid, Error, Result};
use crate::sde::{simulate_path, ControlledModel, RngStream, StatePath, TemporalGrid};

pub use crate::sde::ControlTrajectory;

/// Adjoint values along one realized path: `values[k]` holds `Y` at grid
/// index `start_index + k`, running up to the terminal time.
#[derive(Debug, Clone)]
pub struct AdjointPath {
    pub start_index: usize,
    pub values: Vec<DVector<f64>>,
}

impl AdjointPath {
    pub fn at(&self, n: usize) -> &DVector<f64> {
        &self.values[n - self.start_index]
    }
}

/// Pathwise cost gradient with respect to each control value.
#[derive(Debug, Clone)]
pub struct GradientTrajectory {
    pub start_index: usize,
    pub values: Vec<DVector<f64>>,
}

impl GradientTrajectory {
    pub fn at(&self, n: usize) -> &DVector<f64> {
        &self.values[n - self.start_index]
    }
}

/// SGD configuration: iteration count `L`, step size
/// `rho_l = rho0 / (1 + l / l0)`, and mini-batch size.
#[derive(Debug, Clone)]
pub struct SgdSchedule {
    pub n_iterations: usize,
    pub rho0: f64,
    pub l0: f64,
    pub batch_size: usize,
}

impl SgdSchedule {
    pub fn new(n_iterations: usize, rho0: f64) -> Result<Self> {
        if rho0 <= 0.0 {
            return Err(invalid("SgdSchedule: rho0 must be positive"));
        }
        Ok(Self {
            n_iterations,
            rho0,
            l0: (n_iterations as f64 / 2.0).max(1.0),
            batch_size: 1,
        })
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    /// Step size at iteration `l` (zero-based).
    pub fn rate(&self, l: usize) -> f64 {
        self.rho0 / (1.0 + l as f64 / self.l0)
    }
}

/// Backward adjoint recursion along a realized path with right-point
/// coefficient evaluation: starting from `Y = h_x` at the terminal state,
/// `Y[n] = Y[n+1] + (b_x' Y[n+1] + f_x') dt` with drift and cost
/// linearized at the right endpoint. The control at the terminal time is
/// clamped to the last control value.
pub fn adjoint_backward(
    model: &dyn ControlledModel,
    grid: &TemporalGrid,
    path: &StatePath,
    control: &ControlTrajectory,
    alpha: &DVector<f64>,
) -> Result<AdjointPath> {
    let n = path.start_index;
    if control.start_index != n || path.values.len() != control.len() + 1 {
        return Err(invalid("adjoint_backward: path and control misaligned"));
    }
    let n_t = n + control.len();
    let mut values = vec![DVector::zeros(0); path.values.len()];
    values[control.len()] = model.term_cost_dx(path.last());
    for n_s in (n..n_t).rev() {
        let t_right = grid.t(n_s + 1);
        let x_right = path.at(n_s + 1);
        let u_right = control.at(n_s + 1); // clamped at the terminal index
        let y_right = &values[n_s + 1 - n];
        let bx = model.drift_dx(t_right, x_right, u_right, alpha);
        let fx = model.run_cost_dx(t_right, x_right, u_right);
        values[n_s - n] = y_right + (bx.transpose() * y_right + fx) * grid.dt;
    }
    Ok(AdjointPath {
        start_index: n,
        values,
    })
}

/// Pathwise gradient `g[n_s] = b_u' Y[n_s] + f_u'` evaluated along the
/// realized path and its adjoint.
pub fn samplewise_gradient(
    model: &dyn ControlledModel,
    grid: &TemporalGrid,
    path: &StatePath,
    adjoint: &AdjointPath,
    control: &ControlTrajectory,
    alpha: &DVector<f64>,
) -> Result<GradientTrajectory> {
    let n = path.start_index;
    if adjoint.start_index != n
        || control.start_index != n
        || path.values.len() != control.len() + 1
        || adjoint.values.len() != path.values.len()
    {
        return Err(invalid(
            "samplewise_gradient: path, adjoint, and control misaligned",
        ));
    }
    let mut values = Vec::with_capacity(control.len());
    for n_s in n..n + control.len() {
        let t = grid.t(n_s);
        let x = path.at(n_s);
        let u = control.at(n_s);
        let bu = model.drift_du(t, x, u, alpha);
        let fu = model.run_cost_du(t, x, u);
        values.push(bu.transpose() * adjoint.at(n_s) + fu);
    }
    Ok(GradientTrajectory {
        start_index: n,
        values,
    })
}

/// Draws a particle index uniformly from the cloud.
pub fn draw_particle_index(cloud: &ParticleCloud, rng: &mut impl Rng) -> usize {
    rng.gen_range(0..cloud.size())
}

/// Outcome of an SGD run: the final control, plus the iteration at which a
/// non-finite gradient forced an early stop (the returned control is then
/// the last finite iterate).
#[derive(Debug, Clone)]
pub struct SgdOutcome {
    pub control: ControlTrajectory,
    pub aborted_at: Option<usize>,
}

/// Sample-wise SGD over the remaining horizon: each iteration draws one
/// parameter particle uniformly from the cloud, simulates one path from
/// `x_n`, runs the backward adjoint, and takes a gradient step
/// `u <- u - rho_l g`. With `batch_size > 1` the gradients of independent
/// (particle, path) draws are averaged.
#[allow(clippy::too_many_arguments)]
pub fn sgd_optimize(
    model: &dyn ControlledModel,
    grid: &TemporalGrid,
    n: usize,
    x_n: &DVector<f64>,
    cloud: &ParticleCloud,
    control_init: &ControlTrajectory,
    schedule: &SgdSchedule,
    stream: RngStream,
) -> Result<SgdOutcome> {
    if cloud.size() == 0 {
        return Err(invalid("sgd_optimize: empty particle cloud"));
    }
    if control_init.start_index != n || n + control_init.len() != grid.n_steps {
        return Err(invalid(
            "sgd_optimize: control_init must cover the remaining horizon",
        ));
    }
    let mut rng = stream.rng();
    let mut control = control_init.clone();
    for l in 0..schedule.n_iterations {
        let mut batch_sum: Option<Vec<DVector<f64>>> = None;
        for _ in 0..schedule.batch_size.max(1) {
            let idx = draw_particle_index(cloud, &mut rng);
            let alpha = &cloud.particles[idx];
            let path = simulate_path(model, grid, n, x_n, &control, alpha, &mut rng)?;
            let adjoint = adjoint_backward(model, grid, &path, &control, alpha)?;
            let grad = samplewise_gradient(model, grid, &path, &adjoint, &control, alpha)?;
            match &mut batch_sum {
                None => batch_sum = Some(grad.values),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(grad.values) {
                        *a += g;
                    }
                }
            }
        }
        let batch = batch_sum.expect("batch_size >= 1");
        let scale = schedule.rate(l) / schedule.batch_size.max(1) as f64;
        if batch.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Ok(SgdOutcome {
                control,
                aborted_at: Some(l),
            });
        }
        for (u, g) in control.values.iter_mut().zip(&batch) {
            *u -= g * scale;
        }
    }
    Ok(SgdOutcome {
        control,
        aborted_at: None,
    })
}

/// Convenience wrapper for callers that treat an abort as an error.
#[allow(clippy::too_many_arguments)]
pub fn sgd_optimize_strict(
    model: &dyn ControlledModel,
    grid: &TemporalGrid,
    n: usize,
    x_n: &DVector<f64>,
    cloud: &ParticleCloud,
    control_init: &ControlTrajectory,
    schedule: &SgdSchedule,
    stream: RngStream,
) -> Result<ControlTrajectory> {
    let out = sgd_optimize(model, grid, n, x_n, cloud, control_init, schedule, stream)?;
    match out.aborted_at {
        Some(l) => Err(Error::NonFiniteGradient(l)),
        None => Ok(out.control),
    }
}
