//! Temporal grid, model abstraction, Brownian increments and Euler-Maruyama
//! forward simulation shared by the filters and both control solvers.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};

/// Uniform partition of `[0, horizon_t]` into `n_steps` intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalGrid {
    pub horizon_t: f64,
    pub n_steps: usize,
    pub dt: f64,
}

impl TemporalGrid {
    pub fn new(horizon_t: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(invalid("temporal grid needs at least one step"));
        }
        if !(horizon_t > 0.0) {
            return Err(invalid("horizon must be positive"));
        }
        Ok(Self {
            horizon_t,
            n_steps,
            dt: horizon_t / n_steps as f64,
        })
    }

    /// Grid point `t_n = n * dt`.
    pub fn t(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }
}

/// The problem definition: drift / diffusion / cost callbacks with their
/// exact partial derivatives. All callbacks are pure functions of their
/// arguments; the diffusion depends on `t` only.
pub trait ControlledModel: Send + Sync {
    fn dim_state(&self) -> usize;
    fn dim_control(&self) -> usize;
    fn dim_param(&self) -> usize;

    fn drift(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, alpha: &DVector<f64>)
        -> DVector<f64>;
    fn drift_dx(
        &self,
        t: f64,
        x: &DVector<f64>,
        u: &DVector<f64>,
        alpha: &DVector<f64>,
    ) -> DMatrix<f64>;
    fn drift_du(
        &self,
        t: f64,
        x: &DVector<f64>,
        u: &DVector<f64>,
        alpha: &DVector<f64>,
    ) -> DMatrix<f64>;
    fn diffusion(&self, t: f64) -> DMatrix<f64>;

    fn run_cost(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> f64;
    fn run_cost_dx(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn run_cost_du(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    fn term_cost(&self, x: &DVector<f64>) -> f64;
    fn term_cost_dx(&self, x: &DVector<f64>) -> DVector<f64>;
}

/// One realized forward sample path, indexed `start_index ..= n_steps`.
#[derive(Debug, Clone)]
pub struct StatePath {
    pub start_index: usize,
    pub values: Vec<DVector<f64>>,
}

impl StatePath {
    /// Value at absolute grid index `n` (must be >= `start_index`).
    pub fn at(&self, n: usize) -> &DVector<f64> {
        &self.values[n - self.start_index]
    }

    pub fn last(&self) -> &DVector<f64> {
        self.values.last().expect("non-empty path")
    }
}

/// Piecewise-constant control over grid indices `start_index .. n_steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlTrajectory {
    pub start_index: usize,
    pub values: Vec<DVector<f64>>,
}

impl ControlTrajectory {
    pub fn zeros(start_index: usize, n_steps: usize, dim_control: usize) -> Self {
        Self {
            start_index,
            values: vec![DVector::zeros(dim_control); n_steps - start_index],
        }
    }

    /// Control applied on `[t_n, t_{n+1})`. Indices at or beyond the last
    /// control interval clamp to the final value.
    pub fn at(&self, n: usize) -> &DVector<f64> {
        let i = n.saturating_sub(self.start_index);
        &self.values[i.min(self.values.len() - 1)]
    }

    /// Drops the first value; used when re-optimizing over a shrunk horizon.
    pub fn tail(&self) -> Self {
        Self {
            start_index: self.start_index + 1,
            values: self.values[1..].to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// A named, reproducible random stream. Two streams with identical
/// `(seed, stream_id)` produce identical draw sequences; distinct stream ids
/// are statistically independent. One stream is allocated per trial, per
/// filter and per optimizer so parallel trials stay reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// Instantiate the generator for this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// Deterministically derived child stream.
    pub fn substream(&self, k: u64) -> Self {
        Self {
            seed: self.seed,
            stream_id: self.stream_id.wrapping_mul(0x100_0003).wrapping_add(k + 1),
        }
    }
}

/// Draws `d` independent Gaussian increments with mean 0 and variance `dt`.
pub fn brownian_increments(rng: &mut impl Rng, d: usize, dt: f64) -> Result<DVector<f64>> {
    if !(dt > 0.0) {
        return Err(invalid("brownian_increments requires dt > 0"));
    }
    if d == 0 {
        return Err(invalid("brownian_increments requires d >= 1"));
    }
    let normal = Normal::new(0.0, dt.sqrt()).expect("valid std");
    Ok(DVector::from_iterator(d, (0..d).map(|_| normal.sample(rng))))
}

/// One Euler-Maruyama step: `x + b(t, x, u, alpha) dt + sigma(t) dW`.
pub fn euler_step(
    model: &dyn ControlledModel,
    t: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    alpha: &DVector<f64>,
    dw: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>> {
    let d = model.dim_state();
    if x.len() != d || dw.len() != d {
        return Err(invalid(format!(
            "euler_step: state/noise dimension mismatch (expected {d}, got x={}, dw={})",
            x.len(),
            dw.len()
        )));
    }
    if u.len() != model.dim_control() || alpha.len() != model.dim_param() {
        return Err(invalid("euler_step: control or parameter dimension mismatch"));
    }
    Ok(x + model.drift(t, x, u, alpha) * dt + model.diffusion(t) * dw)
}

/// Simulates one forward path from `x_start` at grid index `start_index`
/// to the final time, drawing fresh Brownian increments from `rng`.
pub fn simulate_path(
    model: &dyn ControlledModel,
    grid: &TemporalGrid,
    start_index: usize,
    x_start: &DVector<f64>,
    control: &ControlTrajectory,
    alpha: &DVector<f64>,
    rng: &mut impl Rng,
) -> Result<StatePath> {
    if control.start_index > start_index
        || control.start_index + control.len() < grid.n_steps
    {
        return Err(invalid(
            "simulate_path: control trajectory does not cover the remaining horizon",
        ));
    }
    let d = model.dim_state();
    let mut values = Vec::with_capacity(grid.n_steps - start_index + 1);
    values.push(x_start.clone());
    let mut x = x_start.clone();
    for n in start_index..grid.n_steps {
        let dw = brownian_increments(rng, d, grid.dt)?;
        x = euler_step(model, grid.t(n), &x, control.at(n), alpha, &dw, grid.dt)?;
        values.push(x.clone());
    }
    Ok(StatePath {
        start_index,
        values,
    })
}
