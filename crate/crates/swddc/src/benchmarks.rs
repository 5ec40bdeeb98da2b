//! Problem definitions and analytic oracles: the linear-quadratic family
//! with its Riccati-based exact feedback, and the drone maneuvering model.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::sde::{simulate_path, ControlTrajectory, ControlledModel, TemporalGrid};

/// Coefficients of the linear-quadratic problem
/// `dX = A(t) X dt + B u dt + C dW`, cost `1/2 (x'Qx + u'Ru)` running and
/// `1/2 x'Fx` terminal. `A` may embed the unknown parameter vector.
#[derive(Clone)]
pub struct LqSpec {
    pub dim_state: usize,
    pub dim_control: usize,
    pub dim_param: usize,
    pub a: Arc<dyn Fn(f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub x0: DVector<f64>,
}

impl LqSpec {
    /// 1D dynamics, one unknown parameter: `A(t) = alpha`.
    pub fn case1() -> Self {
        Self {
            dim_state: 1,
            dim_control: 1,
            dim_param: 1,
            a: Arc::new(|_t, alpha| DMatrix::from_element(1, 1, alpha[0])),
            b: DMatrix::from_element(1, 1, 0.5),
            c: DMatrix::from_element(1, 1, 0.01),
            q: DMatrix::from_element(1, 1, 1.0),
            r: DMatrix::from_element(1, 1, 0.1),
            f: DMatrix::from_element(1, 1, 1.0),
            x0: DVector::from_element(1, 2.0),
        }
    }

    /// 1D dynamics with `A(t) = 2 alpha sin(t)`; used for the solver
    /// efficiency comparison.
    pub fn case1_exp2() -> Self {
        Self {
            a: Arc::new(|t, alpha| DMatrix::from_element(1, 1, 2.0 * alpha[0] * t.sin())),
            ..Self::case1()
        }
    }

    /// 2D dynamics, scalar control, one unknown parameter:
    /// `A(t) = diag(alpha sin t, cos t)`.
    pub fn case2() -> Self {
        Self {
            dim_state: 2,
            dim_control: 1,
            dim_param: 1,
            a: Arc::new(|t, alpha| {
                DMatrix::from_diagonal(&DVector::from_vec(vec![alpha[0] * t.sin(), t.cos()]))
            }),
            b: DMatrix::from_column_slice(2, 1, &[0.5, 0.5]),
            c: DMatrix::from_diagonal_element(2, 2, 0.1),
            q: DMatrix::identity(2, 2),
            r: DMatrix::from_element(1, 1, 1.0),
            f: DMatrix::identity(2, 2),
            x0: DVector::from_vec(vec![2.0, -2.0]),
        }
    }

    /// 4D dynamics, 2D control, two unknown parameters:
    /// `A(t) = diag(sin t, cos t, alpha, beta)`.
    pub fn case3() -> Self {
        Self {
            dim_state: 4,
            dim_control: 2,
            dim_param: 2,
            a: Arc::new(|t, alpha| {
                DMatrix::from_diagonal(&DVector::from_vec(vec![
                    t.sin(),
                    t.cos(),
                    alpha[0],
                    alpha[1],
                ]))
            }),
            b: DMatrix::from_row_slice(4, 2, &[0.5, 0.0, 0.5, 0.0, 1.0, 0.0, 1.0, 0.0]),
            c: DMatrix::from_diagonal_element(4, 4, 0.1),
            q: DMatrix::identity(4, 4),
            r: DMatrix::identity(2, 2),
            f: DMatrix::identity(4, 4),
            x0: DVector::from_vec(vec![1.0, 2.0, -1.0, 2.0]),
        }
    }
}

fn check_symmetric(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if (m - m.transpose()).amax() > 1e-10 {
        return Err(invalid(format!("{name} must be symmetric")));
    }
    Ok(())
}

/// [`ControlledModel`] backed by an [`LqSpec`].
pub struct LqModel {
    spec: LqSpec,
}

/// Builds the controlled model for an LQ specification, validating the
/// dimension and definiteness requirements.
pub fn lq_model(spec: LqSpec) -> Result<LqModel> {
    let (d, m) = (spec.dim_state, spec.dim_control);
    if spec.b.shape() != (d, m)
        || spec.c.shape() != (d, d)
        || spec.q.shape() != (d, d)
        || spec.r.shape() != (m, m)
        || spec.f.shape() != (d, d)
        || spec.x0.len() != d
    {
        return Err(invalid("LqSpec coefficient dimensions are inconsistent"));
    }
    check_symmetric(&spec.q, "Q")?;
    check_symmetric(&spec.f, "F")?;
    check_symmetric(&spec.r, "R")?;
    spec.r
        .clone()
        .try_inverse()
        .ok_or_else(|| invalid("R must be invertible"))?;
    Ok(LqModel { spec })
}

impl LqModel {
    pub fn spec(&self) -> &LqSpec {
        &self.spec
    }
}

impl ControlledModel for LqModel {
    fn dim_state(&self) -> usize {
        self.spec.dim_state
    }
    fn dim_control(&self) -> usize {
        self.spec.dim_control
    }
    fn dim_param(&self) -> usize {
        self.spec.dim_param
    }
    fn drift(
        &self,
        t: f64,
        x: &DVector<f64>,
        u: &DVector<f64>,
        alpha: &DVector<f64>,
    ) -> DVector<f64> {
        (self.spec.a)(t, alpha) * x + &self.spec.b * u
    }
    fn drift_dx(
        &self,
        t: f64,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        alpha: &DVector<f64>,
    ) -> DMatrix<f64> {
        (self.spec.a)(t, alpha)
    }
    fn drift_du(
        &self,
        _t: f64,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _alpha: &DVector<f64>,
    ) -> DMatrix<f64> {
        self.spec.b.clone()
    }
    fn diffusion(&self, _t: f64) -> DMatrix<f64> {
        self.spec.c.clone()
    }
    fn run_cost(&self, _t: f64, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        0.5 * ((&self.spec.q * x).dot(x) + (&self.spec.r * u).dot(u))
    }
    fn run_cost_dx(&self, _t: f64, x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        &self.spec.q * x
    }
    fn run_cost_du(&self, _t: f64, _x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.spec.r * u
    }
    fn term_cost(&self, x: &DVector<f64>) -> f64 {
        0.5 * (&self.spec.f * x).dot(x)
    }
    fn term_cost_dx(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.spec.f * x
    }
}

/// Riccati solution `P(t)` sampled on the temporal grid.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub p: Vec<DMatrix<f64>>,
}

impl RiccatiSolution {
    pub fn at(&self, n: usize) -> &DMatrix<f64> {
        &self.p[n]
    }
}

/// Integrates `dP/dt = -P A - A' P + P B R^-1 B' P - Q`, `P(T) = F`,
/// backward with classical RK4 using `substeps` internal steps per grid
/// interval.
pub fn riccati_solve(
    spec: &LqSpec,
    alpha_true: &DVector<f64>,
    grid: &TemporalGrid,
    substeps: usize,
) -> Result<RiccatiSolution> {
    if substeps == 0 {
        return Err(invalid("riccati_solve requires substeps >= 1"));
    }
    let r_inv = spec
        .r
        .clone()
        .try_inverse()
        .ok_or_else(|| invalid("R must be invertible"))?;
    let brb = &spec.b * r_inv * spec.b.transpose();
    let rhs = |t: f64, p: &DMatrix<f64>| -> DMatrix<f64> {
        let a = (spec.a)(t, alpha_true);
        -p * &a - a.transpose() * p + p * &brb * p - &spec.q
    };
    let mut p = spec.f.clone();
    let mut out = vec![DMatrix::zeros(0, 0); grid.n_steps + 1];
    out[grid.n_steps] = p.clone();
    let h = grid.dt / substeps as f64;
    for n in (0..grid.n_steps).rev() {
        let t_right = grid.t(n + 1);
        for s in 0..substeps {
            let t = t_right - s as f64 * h;
            let k1 = rhs(t, &p);
            let k2 = rhs(t - h / 2.0, &(&p - &k1 * (h / 2.0)));
            let k3 = rhs(t - h / 2.0, &(&p - &k2 * (h / 2.0)));
            let k4 = rhs(t - h, &(&p - &k3 * h));
            p -= (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            if p.amax() > 1e12 {
                return Err(Error::FiniteEscape(1e12));
            }
        }
        out[n] = p.clone();
    }
    Ok(RiccatiSolution { p: out })
}

/// Exact LQ optimal feedback `-R^-1 B' P(t_n) x`.
pub fn lq_analytic_control(
    riccati: &RiccatiSolution,
    spec: &LqSpec,
    n: usize,
    x: &DVector<f64>,
) -> DVector<f64> {
    let r_inv = spec.r.clone().try_inverse().expect("R invertible");
    -(r_inv * spec.b.transpose() * riccati.at(n)) * x
}

/// LQ dynamics with the analytic feedback `u*(t, x) = -R^-1 B' P(t) x`
/// substituted into drift and running cost (the extra `u` argument acts
/// additively on top of the feedback). Along this closed loop the adjoint
/// satisfies `Y(t, x) = P(t) x` at every state, which makes it a pointwise
/// oracle for mesh-based value approximations.
pub struct ClosedLoopLqModel {
    spec: LqSpec,
    grid: TemporalGrid,
    /// Feedback gain `K(t_n) = R^-1 B' P(t_n)` per grid index.
    gains: Vec<DMatrix<f64>>,
}

pub fn closed_loop_lq_model(
    spec: LqSpec,
    riccati: &RiccatiSolution,
    grid: &TemporalGrid,
) -> Result<ClosedLoopLqModel> {
    let r_inv = spec
        .r
        .clone()
        .try_inverse()
        .ok_or_else(|| invalid("R must be invertible"))?;
    let gains = riccati
        .p
        .iter()
        .map(|p| &r_inv * spec.b.transpose() * p)
        .collect();
    Ok(ClosedLoopLqModel {
        spec,
        grid: grid.clone(),
        gains,
    })
}

impl ClosedLoopLqModel {
    fn gain(&self, t: f64) -> &DMatrix<f64> {
        let n = ((t / self.grid.dt).round() as usize).min(self.grid.n_steps);
        &self.gains[n]
    }
}

impl ControlledModel for ClosedLoopLqModel {
    fn dim_state(&self) -> usize {
        self.spec.dim_state
    }
    fn dim_control(&self) -> usize {
        self.spec.dim_control
    }
    fn dim_param(&self) -> usize {
        self.spec.dim_param
    }
    fn drift(
        &self,
        t: f64,
        x: &DVector<f64>,
        u: &DVector<f64>,
        alpha: &DVector<f64>,
    ) -> DVector<f64> {
        (self.spec.a)(t, alpha) * x + &self.spec.b * (u - self.gain(t) * x)
    }
    fn drift_dx(
        &self,
        t: f64,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        alpha: &DVector<f64>,
    ) -> DMatrix<f64> {
        (self.spec.a)(t, alpha) - &self.spec.b * self.gain(t)
    }
    fn drift_du(
        &self,
        _t: f64,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _alpha: &DVector<f64>,
    ) -> DMatrix<f64> {
        self.spec.b.clone()
    }
    fn diffusion(&self, _t: f64) -> DMatrix<f64> {
        self.spec.c.clone()
    }
    fn run_cost(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let v = self.gain(t) * x - u;
        0.5 * ((&self.spec.q * x).dot(x) + (&self.spec.r * &v).dot(&v))
    }
    fn run_cost_dx(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let k = self.gain(t);
        let v = k * x - u;
        &self.spec.q * x + k.transpose() * (&self.spec.r * v)
    }
    fn run_cost_du(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let v = self.gain(t) * x - u;
        -(&self.spec.r * v)
    }
    fn term_cost(&self, x: &DVector<f64>) -> f64 {
        0.5 * (&self.spec.f * x).dot(x)
    }
    fn term_cost_dx(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.spec.f * x
    }
}

/// Drone maneuvering problem parameters. The unknown parameter is the
/// total mass; gravity and steering resistance are fixed constants.
#[derive(Debug, Clone)]
pub struct DroneParams {
    pub mass: f64,
    pub gravity: f64,
    pub resistance: f64,
    pub sigma: f64,
    pub target: DVector<f64>,
    pub terminal_weight: f64,
}

impl Default for DroneParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            gravity: 9.8,
            resistance: 0.1,
            sigma: 0.2,
            target: DVector::from_vec(vec![6.0, 7.0, 8.0]),
            terminal_weight: 10.0,
        }
    }
}

/// [`ControlledModel`] for the drone: state `(X, Y, Z, theta)`, control
/// `(steering, lift force)`, parameter `m` (mass).
pub struct DroneModel {
    params: DroneParams,
}

pub fn drone_model(params: DroneParams) -> Result<DroneModel> {
    if !(params.mass > 0.0) {
        return Err(invalid("drone mass must be positive"));
    }
    if params.sigma < 0.0 {
        return Err(invalid("drone noise must be nonnegative"));
    }
    if params.target.len() != 3 {
        return Err(invalid("drone target must be 3-dimensional"));
    }
    Ok(DroneModel { params })
}

impl DroneModel {
    pub fn params(&self) -> &DroneParams {
        &self.params
    }
}

impl ControlledModel for DroneModel {
    fn dim_state(&self) -> usize {
        4
    }
    fn dim_control(&self) -> usize {
        2
    }
    fn dim_param(&self) -> usize {
        1
    }
    fn drift(
        &self,
        _t: f64,
        x: &DVector<f64>,
        u: &DVector<f64>,
        alpha: &DVector<f64>,
    ) -> DVector<f64> {
        let m = alpha[0];
        let theta = x[3];
        DVector::from_vec(vec![
            theta.sin(),
            theta.cos(),
            u[1] - m * self.params.gravity,
            u[0] - self.params.resistance * m,
        ])
    }
    fn drift_dx(
        &self,
        _t: f64,
        x: &DVector<f64>,
        _u: &DVector<f64>,
        _alpha: &DVector<f64>,
    ) -> DMatrix<f64> {
        let theta = x[3];
        let mut j = DMatrix::zeros(4, 4);
        j[(0, 3)] = theta.cos();
        j[(1, 3)] = -theta.sin();
        j
    }
    fn drift_du(
        &self,
        _t: f64,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _alpha: &DVector<f64>,
    ) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(4, 2);
        b[(2, 1)] = 1.0; // lift force drives Z
        b[(3, 0)] = 1.0; // steering drives theta
        b
    }
    fn diffusion(&self, _t: f64) -> DMatrix<f64> {
        let s = self.params.sigma;
        DMatrix::from_diagonal(&DVector::from_vec(vec![s, s, s, s * s]))
    }
    fn run_cost(&self, _t: f64, _x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        0.5 * (u[0] * u[0] + u[1] * u[1])
    }
    fn run_cost_dx(&self, _t: f64, _x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(4)
    }
    fn run_cost_du(&self, _t: f64, _x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        u.clone()
    }
    fn term_cost(&self, x: &DVector<f64>) -> f64 {
        let w = self.params.terminal_weight;
        let t = &self.params.target;
        w * ((x[0] - t[0]).powi(2) + (x[1] - t[1]).powi(2) + (x[2] - t[2]).powi(2))
    }
    fn term_cost_dx(&self, x: &DVector<f64>) -> DVector<f64> {
        let w = self.params.terminal_weight;
        let t = &self.params.target;
        DVector::from_vec(vec![
            2.0 * w * (x[0] - t[0]),
            2.0 * w * (x[1] - t[1]),
            2.0 * w * (x[2] - t[2]),
            0.0,
        ])
    }
}

/// Monte-Carlo estimate of the discretized cost functional under the true
/// parameter: left-point quadrature of the running cost plus terminal cost.
/// Returns `(mean, standard error)`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_cost(
    model: &dyn ControlledModel,
    grid: &TemporalGrid,
    n: usize,
    x_n: &DVector<f64>,
    control: &ControlTrajectory,
    alpha_true: &DVector<f64>,
    n_mc: usize,
    rng: &mut impl Rng,
) -> Result<(f64, f64)> {
    if n_mc == 0 {
        return Err(invalid("evaluate_cost requires n_mc >= 1"));
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_mc {
        let path = simulate_path(model, grid, n, x_n, control, alpha_true, rng)?;
        let cost = pathwise_cost(model, grid, &path, control);
        sum += cost;
        sum_sq += cost * cost;
    }
    let mean = sum / n_mc as f64;
    let var = (sum_sq / n_mc as f64 - mean * mean).max(0.0);
    let se = (var / n_mc as f64).sqrt();
    Ok((mean, se))
}

/// Left-point discretized cost of one realized path.
pub fn pathwise_cost(
    model: &dyn ControlledModel,
    grid: &TemporalGrid,
    path: &crate::sde::StatePath,
    control: &ControlTrajectory,
) -> f64 {
    let mut cost = 0.0;
    for k in path.start_index..grid.n_steps {
        cost += model.run_cost(grid.t(k), path.at(k), control.at(k)) * grid.dt;
    }
    cost + model.term_cost(path.last())
}
