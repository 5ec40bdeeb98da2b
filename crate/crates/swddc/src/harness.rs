//! Closed-loop experiment harness: configuration files, synthetic truth and
//! observation generation, the online estimate-then-control loop, repeated
//! seeded trials with per-step RMSE summaries, and CSV emission.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline_filters::{augenkf_step, augpf_step, AugmentedCloud, Ensemble};
use crate::benchmarks::{
    drone_model, lq_analytic_control, lq_model, riccati_solve, DroneParams, LqSpec,
    RiccatiSolution,
};
use crate::direct_filter::{df_step, posterior_mean, psd_sqrt, JitterSpec, ParticleCloud};
use crate::error::{Error, Result};
use crate::fullgrid::{gd_optimize, StateMesh};
use crate::samplewise::{sgd_optimize, SgdSchedule};
use crate::sde::{
    brownian_increments, euler_step, ControlTrajectory, ControlledModel, RngStream, TemporalGrid,
};

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Benchmark problem selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemId {
    LqCase1,
    LqCase1Exp2,
    LqCase2,
    LqCase3,
    Drone,
}

impl ProblemId {
    pub const ALL: [ProblemId; 5] = [
        ProblemId::LqCase1,
        ProblemId::LqCase1Exp2,
        ProblemId::LqCase2,
        ProblemId::LqCase3,
        ProblemId::Drone,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ProblemId::LqCase1 => "lq-case1",
            ProblemId::LqCase1Exp2 => "lq-case1-exp2",
            ProblemId::LqCase2 => "lq-case2",
            ProblemId::LqCase3 => "lq-case3",
            ProblemId::Drone => "drone",
        }
    }

    pub fn description(&self) -> &'static str {
        match self {
            ProblemId::LqCase1 => "1D linear-quadratic problem, A(t) = alpha",
            ProblemId::LqCase1Exp2 => "1D linear-quadratic problem, A(t) = 2 alpha sin(t)",
            ProblemId::LqCase2 => "2D linear-quadratic problem, A(t) = diag(alpha sin t, cos t)",
            ProblemId::LqCase3 => {
                "4D linear-quadratic problem, A(t) = diag(sin t, cos t, alpha, beta)"
            }
            ProblemId::Drone => "drone maneuvering with unknown total mass",
        }
    }
}

impl fmt::Display for ProblemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parameter estimator selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FilterKind {
    Direct,
    Augpf,
    Augenkf,
}

/// Control solver selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    Samplewise,
    Fullgrid,
}

/// Estimator section of a config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterConfig {
    pub kind: FilterKind,
    /// Particle count (direct / augpf) or ensemble size (augenkf).
    pub size: usize,
    /// Per-component artificial-noise standard deviation at step 0.
    pub jitter_std: f64,
    /// Geometric decay factor of the jitter covariance per step.
    pub jitter_decay: f64,
    pub prior_lower: Vec<f64>,
    pub prior_upper: Vec<f64>,
}

fn default_batch_size() -> usize {
    1
}

/// Solver section of a config file. `mesh_spacing`, `mc_p` and `mc_q` are
/// only consulted (and then required) when `kind = "fullgrid"`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    pub kind: SolverKind,
    /// Gradient iterations per closed-loop step.
    pub iterations: usize,
    pub rho0: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Step-size decay scale; defaults to `iterations / 2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh_spacing: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_p: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_q: Option<usize>,
}

/// True parameter trajectory: constant `initial`, optionally switching to
/// `switch_value` for `t >= switch_time` (a grid point).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthConfig {
    pub initial: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub switch_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub switch_value: Option<Vec<f64>>,
}

/// Observation section: diagonal of the noise covariance `Sigma`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObservationConfig {
    pub noise_diag: Vec<f64>,
}

/// One experiment, loadable from a TOML file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub problem: ProblemId,
    pub horizon: f64,
    pub n_steps: usize,
    pub trials: usize,
    pub seed: u64,
    pub truth: TruthConfig,
    pub observation: ObservationConfig,
    pub filter: FilterConfig,
    pub solver: SolverConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn grid(&self) -> Result<TemporalGrid> {
        TemporalGrid::new(self.horizon, self.n_steps)
    }

    /// Structural validation beyond what deserialization enforces.
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) {
            return Err(config_err("horizon must be positive"));
        }
        if self.n_steps == 0 {
            return Err(config_err("n_steps must be positive"));
        }
        if self.trials == 0 {
            return Err(config_err("trials must be positive"));
        }
        let problem = build_problem(self.problem)?;
        let d = problem.model.dim_state();
        let q = problem.model.dim_param();
        if self.truth.initial.len() != q {
            return Err(config_err(format!(
                "truth.initial must have {q} component(s)"
            )));
        }
        match (&self.truth.switch_time, &self.truth.switch_value) {
            (None, None) => {}
            (Some(st), Some(sv)) => {
                if sv.len() != q {
                    return Err(config_err(format!(
                        "truth.switch_value must have {q} component(s)"
                    )));
                }
                if !(*st > 0.0 && *st < self.horizon) {
                    return Err(config_err("truth.switch_time must lie inside (0, horizon)"));
                }
                let dt = self.horizon / self.n_steps as f64;
                if ((st / dt).round() * dt - st).abs() > 1e-9 {
                    return Err(config_err("truth.switch_time must lie on a grid point"));
                }
            }
            _ => {
                return Err(config_err(
                    "truth.switch_time and truth.switch_value must be given together",
                ));
            }
        }
        if self.observation.noise_diag.len() != d {
            return Err(config_err(format!(
                "observation.noise_diag must have {d} component(s)"
            )));
        }
        if self.observation.noise_diag.iter().any(|&v| v < 0.0) {
            return Err(config_err("observation.noise_diag must be nonnegative"));
        }
        let f = &self.filter;
        if f.size == 0 {
            return Err(config_err("filter.size must be positive"));
        }
        if f.kind == FilterKind::Augenkf && f.size < 2 {
            return Err(config_err("filter.size must be >= 2 for augenkf"));
        }
        if f.jitter_std < 0.0 {
            return Err(config_err("filter.jitter_std must be nonnegative"));
        }
        if !(f.jitter_decay > 0.0 && f.jitter_decay <= 1.0) {
            return Err(config_err("filter.jitter_decay must lie in (0, 1]"));
        }
        if f.prior_lower.len() != q || f.prior_upper.len() != q {
            return Err(config_err(format!(
                "filter prior bounds must have {q} component(s)"
            )));
        }
        if f
            .prior_lower
            .iter()
            .zip(&f.prior_upper)
            .any(|(lo, hi)| lo > hi)
        {
            return Err(config_err("filter.prior_lower must not exceed prior_upper"));
        }
        let s = &self.solver;
        if s.iterations == 0 {
            return Err(config_err("solver.iterations must be positive"));
        }
        if !(s.rho0 > 0.0) {
            return Err(config_err("solver.rho0 must be positive"));
        }
        if s.batch_size == 0 {
            return Err(config_err("solver.batch_size must be positive"));
        }
        if let Some(l0) = s.l0 {
            if !(l0 > 0.0) {
                return Err(config_err("solver.l0 must be positive"));
            }
        }
        if s.kind == SolverKind::Fullgrid {
            if d > 2 {
                return Err(config_err(
                    "fullgrid solver supports state dimension <= 2 only",
                ));
            }
            match s.mesh_spacing {
                Some(h) if h > 0.0 => {}
                _ => return Err(config_err("fullgrid solver requires positive mesh_spacing")),
            }
            if !matches!(s.mc_p, Some(p) if p > 0) {
                return Err(config_err("fullgrid solver requires positive mc_p"));
            }
            if !matches!(s.mc_q, Some(qn) if qn > 0) {
                return Err(config_err("fullgrid solver requires positive mc_q"));
            }
        }
        Ok(())
    }

    fn sigma_obs(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(self.observation.noise_diag.clone()))
    }

    fn jitter(&self, q: usize) -> Result<JitterSpec> {
        JitterSpec::isotropic(q, self.filter.jitter_std, self.filter.jitter_decay)
    }

    fn schedule(&self) -> Result<SgdSchedule> {
        let mut sched = SgdSchedule::new(self.solver.iterations, self.solver.rho0)?
            .with_batch_size(self.solver.batch_size);
        if let Some(l0) = self.solver.l0 {
            sched.l0 = l0;
        }
        Ok(sched)
    }

    /// True parameter in force on `[t, t + dt)`.
    pub fn true_param(&self, t: f64) -> DVector<f64> {
        match (&self.truth.switch_time, &self.truth.switch_value) {
            (Some(st), Some(sv)) if t >= st - 1e-12 => DVector::from_vec(sv.clone()),
            _ => DVector::from_vec(self.truth.initial.clone()),
        }
    }
}

/// A constructed benchmark problem: dynamics plus initial state, and the
/// linear-quadratic coefficients when an analytic reference exists.
pub struct Problem {
    pub model: Box<dyn ControlledModel>,
    pub x0: DVector<f64>,
    pub lq: Option<LqSpec>,
}

fn lq_problem(spec: LqSpec) -> Result<Problem> {
    let x0 = spec.x0.clone();
    let model = lq_model(spec.clone())?;
    Ok(Problem {
        model: Box::new(model),
        x0,
        lq: Some(spec),
    })
}

/// Instantiates the dynamics and initial state for a problem id.
pub fn build_problem(id: ProblemId) -> Result<Problem> {
    match id {
        ProblemId::LqCase1 => lq_problem(LqSpec::case1()),
        ProblemId::LqCase1Exp2 => lq_problem(LqSpec::case1_exp2()),
        ProblemId::LqCase2 => lq_problem(LqSpec::case2()),
        ProblemId::LqCase3 => lq_problem(LqSpec::case3()),
        ProblemId::Drone => {
            let model = drone_model(DroneParams::default())?;
            Ok(Problem {
                model: Box::new(model),
                x0: DVector::from_vec(vec![0.0, 0.0, 5.0, 0.0]),
                lq: None,
            })
        }
    }
}

/// Noisy direct observation `M = x_true + xi`, `xi ~ N(0, Sigma)`.
pub fn generate_observation(
    x_true: &DVector<f64>,
    sigma: &DMatrix<f64>,
    rng: &mut impl Rng,
) -> Result<DVector<f64>> {
    let tf = psd_sqrt(sigma)?;
    if tf.iter().all(|&v| v == 0.0) {
        return Ok(x_true.clone());
    }
    let xi = brownian_increments(rng, x_true.len(), 1.0)?;
    Ok(x_true + tf * xi)
}

/// Everything recorded along one closed-loop run. Vectors indexed by step
/// `n` have one entry per time step; `states` and `observations` also hold
/// the terminal entry.
#[derive(Debug, Clone)]
pub struct RunRecord {
    /// Posterior mean produced by the filter step at time `t_n` (i.e. after
    /// assimilating `M_{t_{n+1}}`).
    pub estimates: Vec<DVector<f64>>,
    /// Componentwise posterior standard deviation alongside `estimates`.
    pub estimate_stds: Vec<DVector<f64>>,
    /// Prior mean before any observation was assimilated.
    pub initial_estimate: DVector<f64>,
    /// Control applied on `[t_n, t_{n+1})`.
    pub controls: Vec<DVector<f64>>,
    /// Hidden truth at `t_0 .. t_N`.
    pub states: Vec<DVector<f64>>,
    /// Observations `M_{t_0} .. M_{t_N}`.
    pub observations: Vec<DVector<f64>>,
    /// True parameter in force on `[t_n, t_{n+1})`.
    pub true_params: Vec<DVector<f64>>,
    /// Steps whose likelihoods degenerated (uniform-weight fallback).
    pub degenerate_steps: Vec<bool>,
    /// Steps whose gradient iteration stopped early on a non-finite value.
    pub solver_aborted_steps: Vec<bool>,
    pub realized_cost: f64,
    /// Euclidean distance of the terminal position to the target (drone).
    pub terminal_distance: Option<f64>,
    pub solver_seconds: Vec<f64>,
    pub filter_seconds: Vec<f64>,
    /// Truth propagation, observation generation and bookkeeping.
    pub other_seconds: f64,
    pub total_seconds: f64,
}

enum FilterState {
    Direct(ParticleCloud),
    AugPf(AugmentedCloud),
    AugEnKf(Ensemble),
}

impl FilterState {
    fn init(
        cfg: &ExperimentConfig,
        q: usize,
        m0: &DVector<f64>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let lower = DVector::from_vec(cfg.filter.prior_lower.clone());
        let upper = DVector::from_vec(cfg.filter.prior_upper.clone());
        let prior = ParticleCloud::uniform_prior(&lower, &upper, cfg.filter.size, rng)?;
        let d = m0.len();
        let stack = |alpha: &DVector<f64>| {
            let mut s = DVector::zeros(d + q);
            s.rows_mut(0, d).copy_from(m0);
            s.rows_mut(d, q).copy_from(alpha);
            s
        };
        Ok(match cfg.filter.kind {
            FilterKind::Direct => FilterState::Direct(prior),
            FilterKind::Augpf => FilterState::AugPf(AugmentedCloud::equal_weighted(
                d,
                prior.particles.iter().map(&stack).collect(),
            )),
            FilterKind::Augenkf => FilterState::AugEnKf(Ensemble::new(
                d,
                prior.particles.iter().map(&stack).collect(),
            )?),
        })
    }

    /// Parameter marginal as a cloud the control solver can sample from.
    fn param_cloud(&self) -> ParticleCloud {
        match self {
            FilterState::Direct(c) => c.clone(),
            FilterState::AugPf(c) => {
                let d = c.dim_state;
                let q = c.dim_param();
                ParticleCloud {
                    particles: c
                        .particles
                        .iter()
                        .map(|s| s.rows(d, q).into_owned())
                        .collect(),
                    weights: c.weights.clone(),
                }
            }
            FilterState::AugEnKf(e) => {
                let d = e.dim_state;
                let q = e.dim_param();
                ParticleCloud::equal_weighted(
                    e.members.iter().map(|s| s.rows(d, q).into_owned()).collect(),
                )
            }
        }
    }

    /// Returns `(estimate, degenerate)` after assimilating `m_next`.
    #[allow(clippy::too_many_arguments)]
    fn step(
        &mut self,
        model: &dyn ControlledModel,
        t_n: f64,
        x_est: &DVector<f64>,
        u_n: &DVector<f64>,
        m_next: &DVector<f64>,
        sigma_obs: &DMatrix<f64>,
        jitter: &JitterSpec,
        grid: &TemporalGrid,
        rng: &mut impl Rng,
    ) -> Result<(DVector<f64>, bool)> {
        match self {
            FilterState::Direct(cloud) => {
                let out = df_step(
                    cloud, model, t_n, x_est, u_n, m_next, sigma_obs, jitter, grid, rng,
                )?;
                *cloud = out.cloud;
                Ok((out.estimate, out.degenerate))
            }
            FilterState::AugPf(cloud) => {
                let out = augpf_step(cloud, model, t_n, u_n, m_next, sigma_obs, jitter, grid, rng)?;
                *cloud = out.cloud;
                Ok((out.estimate, out.degenerate))
            }
            FilterState::AugEnKf(ens) => {
                let out =
                    augenkf_step(ens, model, t_n, u_n, m_next, sigma_obs, jitter, grid, rng)?;
                *ens = out.ensemble;
                Ok((out.estimate, out.regularized))
            }
        }
    }
}

/// One closed-loop run: at each step, optimize the control over the
/// remaining horizon with the current parameter cloud (forward paths start
/// from the latest observation, warm-started from the previous step's
/// control), apply the first control to the hidden truth, generate the next
/// observation and assimilate it. Solver aborts and filter degeneracies are
/// recorded, not fatal.
pub fn run_swddc(config: &ExperimentConfig, trial: usize) -> Result<RunRecord> {
    config.validate()?;
    let start = Instant::now();
    let problem = build_problem(config.problem)?;
    let model = problem.model.as_ref();
    let grid = config.grid()?;
    let n_t = grid.n_steps;
    let d = model.dim_state();
    let q = model.dim_param();
    let sigma_obs = config.sigma_obs();
    let jitter = config.jitter(q)?;
    let schedule = config.schedule()?;

    // Streams: truth and observation noise are separated from filter and
    // solver randomness so estimator settings never perturb the truth.
    let trial_stream = RngStream::new(config.seed, trial as u64 + 1);
    let mut truth_rng = trial_stream.substream(0).rng();
    let mut obs_rng = trial_stream.substream(1).rng();
    let mut init_rng = trial_stream.substream(2).rng();
    let mut filter_rng = trial_stream.substream(3).rng();
    let solver_base = trial_stream.substream(4);

    let mut x_true = problem.x0.clone();
    let mut m_n = generate_observation(&x_true, &sigma_obs, &mut obs_rng)?;
    let mut filter = FilterState::init(config, q, &m_n, &mut init_rng)?;
    let initial_estimate = posterior_mean(&filter.param_cloud());

    let mut pilot_rng = solver_base.substream(n_t as u64).rng();

    let mut record = RunRecord {
        estimates: Vec::with_capacity(n_t),
        estimate_stds: Vec::with_capacity(n_t),
        initial_estimate,
        controls: Vec::with_capacity(n_t),
        states: vec![x_true.clone()],
        observations: vec![m_n.clone()],
        true_params: Vec::with_capacity(n_t),
        degenerate_steps: Vec::with_capacity(n_t),
        solver_aborted_steps: Vec::with_capacity(n_t),
        realized_cost: 0.0,
        terminal_distance: None,
        solver_seconds: Vec::with_capacity(n_t),
        filter_seconds: Vec::with_capacity(n_t),
        other_seconds: 0.0,
        total_seconds: 0.0,
    };
    let mut other = start.elapsed().as_secs_f64();

    let mut warm: Option<ControlTrajectory> = None;
    for n in 0..n_t {
        let t_n = grid.t(n);
        let cloud = filter.param_cloud();

        // Optimize over [t_n, T] from the observed state.
        let solver_t0 = Instant::now();
        let init = warm
            .take()
            .unwrap_or_else(|| ControlTrajectory::zeros(n, n_t, model.dim_control()));
        let outcome = match config.solver.kind {
            SolverKind::Samplewise => sgd_optimize(
                model,
                &grid,
                n,
                &m_n,
                &cloud,
                &init,
                &schedule,
                solver_base.substream(n as u64),
            )?,
            SolverKind::Fullgrid => {
                // The mesh must cover the states reachable from the current
                // estimate under roughly the control about to be applied, so
                // it is re-sized every step from warm-started pilot paths.
                let alpha_hat = posterior_mean(&cloud);
                let mesh = StateMesh::from_pilot(
                    model,
                    &grid,
                    n,
                    &m_n,
                    &init,
                    &alpha_hat,
                    30,
                    config.solver.mesh_spacing.expect("validated"),
                    &mut pilot_rng,
                )?;
                gd_optimize(
                    model,
                    &mesh,
                    &grid,
                    n,
                    &m_n,
                    &alpha_hat,
                    &init,
                    &schedule,
                    config.solver.mc_p.expect("validated"),
                    config.solver.mc_q.expect("validated"),
                    solver_base.substream(n as u64),
                )?
            }
        };
        record.solver_seconds.push(solver_t0.elapsed().as_secs_f64());
        record.solver_aborted_steps.push(outcome.aborted_at.is_some());
        let u_n = outcome.control.at(n).clone();
        if outcome.control.len() > 1 {
            warm = Some(outcome.control.tail());
        }

        // Advance the hidden truth and observe it.
        let other_t0 = Instant::now();
        let alpha_true = config.true_param(t_n);
        record.realized_cost += model.run_cost(t_n, &x_true, &u_n) * grid.dt;
        let dw = brownian_increments(&mut truth_rng, d, grid.dt)?;
        let x_next = euler_step(model, t_n, &x_true, &u_n, &alpha_true, &dw, grid.dt)?;
        let m_next = generate_observation(&x_next, &sigma_obs, &mut obs_rng)?;
        other += other_t0.elapsed().as_secs_f64();

        // Assimilate, using the current observation as the state estimate.
        let filter_t0 = Instant::now();
        let (estimate, degenerate) = filter.step(
            model,
            t_n,
            &m_n,
            &u_n,
            &m_next,
            &sigma_obs,
            &jitter,
            &grid,
            &mut filter_rng,
        )?;
        record.filter_seconds.push(filter_t0.elapsed().as_secs_f64());

        let other_t1 = Instant::now();
        record.estimates.push(estimate);
        record.estimate_stds.push(filter.param_cloud().std());
        record.controls.push(u_n);
        record.true_params.push(alpha_true);
        record.degenerate_steps.push(degenerate);
        record.states.push(x_next.clone());
        record.observations.push(m_next.clone());
        x_true = x_next;
        m_n = m_next;
        other += other_t1.elapsed().as_secs_f64();
    }

    record.realized_cost += model.term_cost(&x_true);
    if config.problem == ProblemId::Drone {
        let target = DroneParams::default().target;
        let pos = x_true.rows(0, 3);
        record.terminal_distance = Some((pos - target).norm());
    }
    record.other_seconds = other;
    record.total_seconds = start.elapsed().as_secs_f64();
    Ok(record)
}

/// Per-index root-mean-square Euclidean error across trials:
/// `rmse[n] = sqrt(mean_k ||series[k][n] - reference[k][n]||^2)`.
pub fn rmse(series: &[Vec<DVector<f64>>], reference: &[Vec<DVector<f64>>]) -> Result<Vec<f64>> {
    if series.len() != reference.len() || series.is_empty() {
        return Err(Error::InvalidArgument(
            "rmse: need equally many non-empty trial series and references".into(),
        ));
    }
    let len = series[0].len();
    for (s, r) in series.iter().zip(reference) {
        if s.len() != len || r.len() != len {
            return Err(Error::InvalidArgument(
                "rmse: all series must share one length".into(),
            ));
        }
    }
    let k = series.len() as f64;
    Ok((0..len)
        .map(|n| {
            let mse: f64 = series
                .iter()
                .zip(reference)
                .map(|(s, r)| (&s[n] - &r[n]).norm_squared())
                .sum::<f64>()
                / k;
            mse.sqrt()
        })
        .collect())
}

/// Aggregate over the completed trials of one configuration.
pub struct TrialsSummary {
    pub records: Vec<RunRecord>,
    /// `(trial index, error message)` for trials that failed outright.
    pub failures: Vec<(usize, String)>,
    pub param_rmse: Vec<f64>,
    /// RMSE of applied controls against the analytic feedback (LQ only).
    pub control_rmse: Option<Vec<f64>>,
    pub mean_terminal_distance: Option<f64>,
    pub mean_total_seconds: f64,
    pub mean_solver_seconds: f64,
    pub mean_filter_seconds: f64,
}

/// Riccati solutions backing the analytic control reference: one for the
/// initial parameter and, after a switch, one for the post-switch parameter
/// (each solved over the whole horizon).
struct ControlReference {
    spec: LqSpec,
    pre: RiccatiSolution,
    post: Option<(f64, RiccatiSolution)>,
}

impl ControlReference {
    fn build(config: &ExperimentConfig, grid: &TemporalGrid) -> Result<Option<Self>> {
        let spec = match build_problem(config.problem)?.lq {
            Some(s) => s,
            None => return Ok(None),
        };
        let pre = riccati_solve(
            &spec,
            &DVector::from_vec(config.truth.initial.clone()),
            grid,
            10,
        )?;
        let post = match (&config.truth.switch_time, &config.truth.switch_value) {
            (Some(st), Some(sv)) => Some((
                *st,
                riccati_solve(&spec, &DVector::from_vec(sv.clone()), grid, 10)?,
            )),
            _ => None,
        };
        Ok(Some(Self { spec, pre, post }))
    }

    fn at(&self, grid: &TemporalGrid, n: usize, x: &DVector<f64>) -> DVector<f64> {
        let riccati = match &self.post {
            Some((st, post)) if grid.t(n) >= st - 1e-12 => post,
            _ => &self.pre,
        };
        lq_analytic_control(riccati, &self.spec, n, x)
    }
}

fn write_csv(dir: &Path, name: &str, header: &str, rows: &[String]) -> Result<()> {
    let mut f = fs::File::create(dir.join(name))?;
    writeln!(f, "{header}")?;
    for row in rows {
        writeln!(f, "{row}")?;
    }
    Ok(())
}

/// Runs `config.trials` independent seeded trials in parallel, aggregates
/// RMSE curves, and (when `out_dir` is given) writes one CSV per series:
/// `params.csv`, `controls.csv`, `states.csv`, `rmse.csv`, `timings.csv`.
pub fn run_trials(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<TrialsSummary> {
    config.validate()?;
    let grid = config.grid()?;
    let outcomes: Vec<(usize, Result<RunRecord>)> = (0..config.trials)
        .into_par_iter()
        .map(|k| (k, run_swddc(config, k)))
        .collect();
    let mut records = Vec::new();
    let mut trial_ids = Vec::new();
    let mut failures = Vec::new();
    for (k, outcome) in outcomes {
        match outcome {
            Ok(r) => {
                trial_ids.push(k);
                records.push(r);
            }
            Err(e) => failures.push((k, e.to_string())),
        }
    }
    if records.is_empty() {
        return Err(Error::Config(format!(
            "all {} trial(s) failed; first error: {}",
            config.trials,
            failures
                .first()
                .map(|(_, e)| e.as_str())
                .unwrap_or("unknown")
        )));
    }

    let est_series: Vec<_> = records.iter().map(|r| r.estimates.clone()).collect();
    let truth_series: Vec<_> = records.iter().map(|r| r.true_params.clone()).collect();
    let param_rmse = rmse(&est_series, &truth_series)?;

    let reference = ControlReference::build(config, &grid)?;
    let control_refs: Option<Vec<Vec<DVector<f64>>>> = reference.as_ref().map(|cr| {
        records
            .iter()
            .map(|r| {
                (0..grid.n_steps)
                    .map(|n| cr.at(&grid, n, &r.states[n]))
                    .collect()
            })
            .collect()
    });
    let control_rmse = match &control_refs {
        Some(refs) => {
            let applied: Vec<_> = records.iter().map(|r| r.controls.clone()).collect();
            Some(rmse(&applied, refs)?)
        }
        None => None,
    };

    let k = records.len() as f64;
    let mean_terminal_distance = records
        .iter()
        .map(|r| r.terminal_distance)
        .collect::<Option<Vec<_>>>()
        .map(|d| d.iter().sum::<f64>() / k);
    let mean_total_seconds = records.iter().map(|r| r.total_seconds).sum::<f64>() / k;
    let mean_solver_seconds = records
        .iter()
        .map(|r| r.solver_seconds.iter().sum::<f64>())
        .sum::<f64>()
        / k;
    let mean_filter_seconds = records
        .iter()
        .map(|r| r.filter_seconds.iter().sum::<f64>())
        .sum::<f64>()
        / k;

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let mut param_rows = Vec::new();
        let mut control_rows = Vec::new();
        let mut state_rows = Vec::new();
        let mut timing_rows = Vec::new();
        for (rec_idx, (k, r)) in trial_ids.iter().zip(&records).enumerate() {
            for n in 0..grid.n_steps {
                for i in 0..r.estimates[n].len() {
                    param_rows.push(format!(
                        "{k},{n},{i},{},{},{}",
                        r.estimates[n][i], r.true_params[n][i], r.estimate_stds[n][i]
                    ));
                }
                for i in 0..r.controls[n].len() {
                    let reference = control_refs
                        .as_ref()
                        .map(|refs| refs[rec_idx][n][i].to_string())
                        .unwrap_or_default();
                    control_rows.push(format!("{k},{n},{i},{},{reference}", r.controls[n][i]));
                }
            }
            for n in 0..=grid.n_steps {
                for i in 0..r.states[n].len() {
                    state_rows.push(format!(
                        "{k},{n},{i},{},{}",
                        r.states[n][i], r.observations[n][i]
                    ));
                }
            }
            timing_rows.push(format!(
                "{k},{},{},{},{}",
                r.solver_seconds.iter().sum::<f64>(),
                r.filter_seconds.iter().sum::<f64>(),
                r.other_seconds,
                r.total_seconds
            ));
        }
        let rmse_rows: Vec<String> = (0..grid.n_steps)
            .map(|n| {
                let c = control_rmse
                    .as_ref()
                    .map(|v| v[n].to_string())
                    .unwrap_or_default();
                format!("{n},{},{c}", param_rmse[n])
            })
            .collect();
        write_csv(
            dir,
            "params.csv",
            "trial,step,component,estimate,truth,std",
            &param_rows,
        )?;
        write_csv(
            dir,
            "controls.csv",
            "trial,step,component,control,reference",
            &control_rows,
        )?;
        write_csv(
            dir,
            "states.csv",
            "trial,step,component,state,observation",
            &state_rows,
        )?;
        write_csv(dir, "rmse.csv", "step,param_rmse,control_rmse", &rmse_rows)?;
        write_csv(
            dir,
            "timings.csv",
            "trial,solver_seconds,filter_seconds,other_seconds,total_seconds",
            &timing_rows,
        )?;
    }

    Ok(TrialsSummary {
        records,
        failures,
        param_rmse,
        control_rmse,
        mean_terminal_distance,
        mean_total_seconds,
        mean_solver_seconds,
        mean_filter_seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    const TINY_CONFIG: &str = r#"
        problem = "lq-case1"
        horizon = 0.1
        n_steps = 2
        trials = 2
        seed = 123

        [truth]
        initial = [1.0]

        [observation]
        noise_diag = [0.000001]

        [filter]
        kind = "direct"
        size = 5
        jitter_std = 0.1
        jitter_decay = 1.0
        prior_lower = [0.0]
        prior_upper = [2.0]

        [solver]
        kind = "samplewise"
        iterations = 5
        rho0 = 0.05
    "#;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig::from_toml_str(TINY_CONFIG).unwrap()
    }

    #[test]
    fn observation_with_zero_noise_is_exact() {
        let x = DVector::from_vec(vec![1.0, -2.0]);
        let sigma = DMatrix::zeros(2, 2);
        let m = generate_observation(&x, &sigma, &mut RngStream::new(0, 0).rng()).unwrap();
        assert_eq!(m, x);
    }

    #[test]
    fn observation_moment_check() {
        let x = DVector::from_vec(vec![1.0, 2.0]);
        let sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![0.4, 0.9]));
        let mut rng = RngStream::new(5, 0).rng();
        let n = 100_000;
        let draws: Vec<DVector<f64>> = (0..n)
            .map(|_| generate_observation(&x, &sigma, &mut rng).unwrap())
            .collect();
        let mean = draws.iter().sum::<DVector<f64>>() / n as f64;
        for i in 0..2 {
            let var: f64 =
                draws.iter().map(|d| (d[i] - mean[i]).powi(2)).sum::<f64>() / n as f64;
            assert!(
                (var - sigma[(i, i)]).abs() < 0.03 * sigma[(i, i)],
                "component {i}: var {var} vs {}",
                sigma[(i, i)]
            );
            assert!((mean[i] - x[i]).abs() < 0.02);
        }
    }

    #[test]
    fn observation_deterministic_for_fixed_seed() {
        let x = DVector::from_vec(vec![0.5]);
        let sigma = DMatrix::from_element(1, 1, 0.3);
        let s = RngStream::new(9, 2);
        let a = generate_observation(&x, &sigma, &mut s.rng()).unwrap();
        let b = generate_observation(&x, &sigma, &mut s.rng()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rmse_identical_series_is_zero() {
        let s = vec![vec![DVector::from_vec(vec![1.0, 2.0]); 4]; 3];
        let out = rmse(&s, &s).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rmse_constant_offset_is_offset() {
        let c = 0.7;
        let series = vec![vec![DVector::from_element(1, c); 5]; 2];
        let reference = vec![vec![DVector::zeros(1); 5]; 2];
        for v in rmse(&series, &reference).unwrap() {
            assert_relative_eq!(v, c, epsilon = 1e-12);
        }
    }

    #[test]
    fn rmse_hand_value() {
        let series = vec![
            vec![DVector::from_element(1, 4.0)],
            vec![DVector::from_element(1, 3.0)],
        ];
        let reference = vec![vec![DVector::zeros(1)]; 2];
        let out = rmse(&series, &reference).unwrap();
        assert_relative_eq!(out[0], (25.0f64 / 2.0).sqrt(), epsilon = 1e-12);
        assert_relative_eq!(out[0], 3.5355, epsilon = 1e-4);
    }

    #[test]
    fn rmse_rejects_misaligned_input() {
        let series = vec![vec![DVector::zeros(1); 3]];
        let reference = vec![vec![DVector::zeros(1); 2]];
        assert!(rmse(&series, &reference).is_err());
        assert!(rmse(&series, &[]).is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = tiny_config();
        assert_eq!(cfg.problem, ProblemId::LqCase1);
        assert_eq!(cfg.filter.kind, FilterKind::Direct);
        assert_eq!(cfg.solver.kind, SolverKind::Samplewise);
        assert_eq!(cfg.solver.batch_size, 1);
        let text = toml::to_string(&cfg).unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.filter.size, cfg.filter.size);
    }

    #[test]
    fn config_validation_rejects_bad_inputs() {
        let mut off_grid = tiny_config();
        off_grid.truth.switch_time = Some(0.033);
        off_grid.truth.switch_value = Some(vec![2.0]);
        assert!(off_grid.validate().is_err());

        let mut lonely_switch = tiny_config();
        lonely_switch.truth.switch_time = Some(0.05);
        assert!(lonely_switch.validate().is_err());

        let mut bad_prior = tiny_config();
        bad_prior.filter.prior_lower = vec![3.0];
        assert!(bad_prior.validate().is_err());

        let mut bad_dim = tiny_config();
        bad_dim.observation.noise_diag = vec![1e-6, 1e-6];
        assert!(bad_dim.validate().is_err());

        let mut mesh_4d = tiny_config();
        mesh_4d.problem = ProblemId::LqCase3;
        mesh_4d.truth.initial = vec![1.0, 2.0];
        mesh_4d.observation.noise_diag = vec![1e-4; 4];
        mesh_4d.filter.prior_lower = vec![0.0, 0.0];
        mesh_4d.filter.prior_upper = vec![2.0, 2.0];
        mesh_4d.solver.kind = SolverKind::Fullgrid;
        mesh_4d.solver.mesh_spacing = Some(0.2);
        mesh_4d.solver.mc_p = Some(10);
        mesh_4d.solver.mc_q = Some(10);
        assert!(mesh_4d.validate().is_err());
    }

    #[test]
    fn true_param_switches_on_grid_point() {
        let mut cfg = tiny_config();
        cfg.truth.switch_time = Some(0.05);
        cfg.truth.switch_value = Some(vec![5.0]);
        cfg.validate().unwrap();
        assert_eq!(cfg.true_param(0.0)[0], 1.0);
        assert_eq!(cfg.true_param(0.049)[0], 1.0);
        assert_eq!(cfg.true_param(0.05)[0], 5.0);
        assert_eq!(cfg.true_param(0.09)[0], 5.0);
    }

    #[test]
    fn run_swddc_is_deterministic() {
        let cfg = tiny_config();
        let a = run_swddc(&cfg, 0).unwrap();
        let b = run_swddc(&cfg, 0).unwrap();
        assert_eq!(a.estimates, b.estimates);
        assert_eq!(a.controls, b.controls);
        assert_eq!(a.states, b.states);
        assert_eq!(a.observations, b.observations);
        assert_eq!(a.realized_cost, b.realized_cost);
        let c = run_swddc(&cfg, 1).unwrap();
        assert_ne!(a.states, c.states, "distinct trials share no randomness");
    }

    #[test]
    fn record_shapes_are_consistent() {
        let cfg = tiny_config();
        let r = run_swddc(&cfg, 0).unwrap();
        let n = cfg.n_steps;
        assert_eq!(r.estimates.len(), n);
        assert_eq!(r.controls.len(), n);
        assert_eq!(r.true_params.len(), n);
        assert_eq!(r.states.len(), n + 1);
        assert_eq!(r.observations.len(), n + 1);
        assert_eq!(r.solver_seconds.len(), n);
        assert_eq!(r.filter_seconds.len(), n);
        assert!(r.solver_seconds.iter().all(|&t| t >= 0.0));
        assert!(r.terminal_distance.is_none());
        assert!(r.realized_cost.is_finite());
    }

    /// With the parameter known exactly (point prior, no jitter) and nearly
    /// noiseless observations, the closed loop reduces to receding-horizon
    /// LQ control and must reproduce the analytic feedback along the
    /// realized trajectory.
    #[test]
    fn degenerate_closed_loop_matches_analytic_control() {
        let mut cfg = tiny_config();
        cfg.horizon = 1.0;
        cfg.n_steps = 50;
        cfg.observation.noise_diag = vec![1e-12];
        cfg.filter.size = 4;
        cfg.filter.jitter_std = 0.0;
        cfg.filter.prior_lower = vec![1.0];
        cfg.filter.prior_upper = vec![1.0];
        cfg.solver.iterations = 2000;
        cfg.solver.rho0 = 0.1;
        cfg.validate().unwrap();
        let record = run_swddc(&cfg, 0).unwrap();
        let grid = cfg.grid().unwrap();
        let spec = LqSpec::case1();
        let riccati =
            riccati_solve(&spec, &DVector::from_element(1, 1.0), &grid, 10).unwrap();
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for n in 1..grid.n_steps {
            let reference = lq_analytic_control(&riccati, &spec, n, &record.states[n]);
            worst = worst.max((&record.controls[n] - &reference).norm());
            scale = scale.max(reference.norm());
        }
        assert!(
            worst < 0.05 * scale,
            "sup deviation {worst} vs 5% of {scale}"
        );
    }

    #[test]
    fn timing_phases_sum_to_total() {
        let mut cfg = tiny_config();
        cfg.horizon = 1.0;
        cfg.n_steps = 20;
        cfg.solver.iterations = 500;
        let r = run_swddc(&cfg, 0).unwrap();
        let phases: f64 = r.solver_seconds.iter().sum::<f64>()
            + r.filter_seconds.iter().sum::<f64>()
            + r.other_seconds;
        assert!(
            (phases - r.total_seconds).abs() < 0.05 * r.total_seconds,
            "phases {phases} vs total {}",
            r.total_seconds
        );
    }

    #[test]
    fn single_trial_rmse_is_absolute_error() {
        let mut cfg = tiny_config();
        cfg.trials = 1;
        let summary = run_trials(&cfg, None).unwrap();
        let record = &summary.records[0];
        for n in 0..cfg.n_steps {
            let expected = (&record.estimates[n] - &record.true_params[n]).norm();
            assert_relative_eq!(summary.param_rmse[n], expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn run_trials_writes_stable_csvs() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        run_trials(&cfg, Some(dir_a.path())).unwrap();
        run_trials(&cfg, Some(dir_b.path())).unwrap();
        for name in ["params.csv", "controls.csv", "states.csv", "rmse.csv"] {
            let a = fs::read_to_string(dir_a.path().join(name)).unwrap();
            let b = fs::read_to_string(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
        // Timings are wall-clock readings, so only their shape is stable.
        let timings = fs::read_to_string(dir_a.path().join("timings.csv")).unwrap();
        let lines: Vec<&str> = timings.lines().collect();
        assert_eq!(
            lines[0],
            "trial,solver_seconds,filter_seconds,other_seconds,total_seconds"
        );
        assert_eq!(lines.len(), 1 + cfg.trials);
    }

    #[test]
    fn csv_golden_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        run_trials(&cfg, Some(dir.path())).unwrap();
        let params = fs::read_to_string(dir.path().join("params.csv")).unwrap();
        let rmse_csv = fs::read_to_string(dir.path().join("rmse.csv")).unwrap();
        assert_eq!(params, GOLDEN_PARAMS, "params.csv drifted from the frozen run");
        assert_eq!(rmse_csv, GOLDEN_RMSE, "rmse.csv drifted from the frozen run");
        let controls = fs::read_to_string(dir.path().join("controls.csv")).unwrap();
        assert!(controls.starts_with("trial,step,component,control,reference\n"));
        let states = fs::read_to_string(dir.path().join("states.csv")).unwrap();
        assert!(states.starts_with("trial,step,component,state,observation\n"));
        assert_eq!(states.lines().count(), 1 + cfg.trials * (cfg.n_steps + 1));
    }

    const GOLDEN_PARAMS: &str = "\
trial,step,component,estimate,truth,std
0,0,0,0.9124826496560043,1,0.00000000000000011102230246251565
0,1,0,0.9557487095971455,1,0.00000000000000011102230246251565
1,0,0,1.2127906158557602,1,0
1,1,0,1.0905268824267549,1,0
";

    const GOLDEN_RMSE: &str = "\
step,param_rmse,control_rmse
0,0.16269470305991432,10.232211637365177
1,0.07125058997729515,10.354804729078126
";
}
