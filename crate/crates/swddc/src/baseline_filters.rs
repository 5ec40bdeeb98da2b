//! Baseline estimators on the augmented state-parameter vector
//! `S = [X; alpha]`: a bootstrap particle filter (AugPF) and a
//! perturbed-observation ensemble Kalman filter (AugEnKF).

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::direct_filter::{
    bayes_update, posterior_mean, psd_sqrt, systematic_resample, JitterSpec, ParticleCloud,
};
use crate::error::{invalid, Error, Result};
use crate::sde::{brownian_increments, euler_step, ControlledModel, TemporalGrid};

/// Weighted particle cloud over the augmented vector `[X; alpha]`.
#[derive(Debug, Clone)]
pub struct AugmentedCloud {
    pub dim_state: usize,
    pub particles: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
}

impl AugmentedCloud {
    pub fn equal_weighted(dim_state: usize, particles: Vec<DVector<f64>>) -> Self {
        let m = particles.len();
        Self {
            dim_state,
            particles,
            weights: vec![1.0 / m as f64; m],
        }
    }

    pub fn size(&self) -> usize {
        self.particles.len()
    }

    pub fn dim_param(&self) -> usize {
        self.particles[0].len() - self.dim_state
    }

    fn state_block(&self, i: usize) -> DVector<f64> {
        self.particles[i].rows(0, self.dim_state).into_owned()
    }

    fn param_block(&self, i: usize) -> DVector<f64> {
        self.particles[i]
            .rows(self.dim_state, self.dim_param())
            .into_owned()
    }
}

/// Ensemble of augmented vectors for the EnKF baseline.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub dim_state: usize,
    pub members: Vec<DVector<f64>>,
}

impl Ensemble {
    pub fn new(dim_state: usize, members: Vec<DVector<f64>>) -> Result<Self> {
        if members.len() < 2 {
            return Err(invalid("Ensemble needs at least 2 members"));
        }
        Ok(Self { dim_state, members })
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn dim_param(&self) -> usize {
        self.members[0].len() - self.dim_state
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.members[0].len());
        for s in &self.members {
            m += s;
        }
        m / self.size() as f64
    }

    /// Sample covariance (divisor `N - 1`).
    pub fn covariance(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let k = self.members[0].len();
        let mut cov = DMatrix::zeros(k, k);
        for s in &self.members {
            let d = s - &mean;
            cov += &d * d.transpose();
        }
        cov / (self.size() - 1) as f64
    }
}

/// Outcome of one baseline filter step.
#[derive(Debug, Clone)]
pub struct AugPfStep {
    pub cloud: AugmentedCloud,
    /// Mean of the parameter block after resampling.
    pub estimate: DVector<f64>,
    pub degenerate: bool,
}

fn gaussian_log_density(dev: &DVector<f64>, sigma_inv: &DMatrix<f64>) -> f64 {
    -0.5 * (sigma_inv * dev).dot(dev)
}

/// One bootstrap-particle-filter step on the augmented vector: the state
/// block moves one Euler step under the particle's own parameter, the
/// parameter block only receives jitter, and weights come from the
/// Gaussian observation density of `m_next` around the state block.
#[allow(clippy::too_many_arguments)]
pub fn augpf_step(
    cloud: &AugmentedCloud,
    model: &dyn ControlledModel,
    t_n: f64,
    u_n: &DVector<f64>,
    m_next: &DVector<f64>,
    sigma_obs: &DMatrix<f64>,
    jitter: &JitterSpec,
    grid: &TemporalGrid,
    rng: &mut impl Rng,
) -> Result<AugPfStep> {
    let d = cloud.dim_state;
    let q = cloud.dim_param();
    if m_next.len() != d {
        return Err(invalid("augpf_step: observation dimension mismatch"));
    }
    let sigma_inv = sigma_obs
        .clone()
        .try_inverse()
        .ok_or_else(|| invalid("augpf_step: observation covariance is singular"))?;
    let step_index = (t_n / grid.dt).round() as usize;
    let jitter_tf = jitter.noise_transform(step_index)?;

    let mut propagated = Vec::with_capacity(cloud.size());
    let mut log_w = Vec::with_capacity(cloud.size());
    for i in 0..cloud.size() {
        let alpha = cloud.param_block(i);
        let dw = brownian_increments(rng, d, grid.dt)?;
        let x_next = euler_step(model, t_n, &cloud.state_block(i), u_n, &alpha, &dw, grid.dt)?;
        let alpha_next = if q > 0 {
            let g = brownian_increments(rng, q, 1.0)?;
            alpha + &jitter_tf * g
        } else {
            alpha
        };
        let mut s = DVector::zeros(d + q);
        s.rows_mut(0, d).copy_from(&x_next);
        s.rows_mut(d, q).copy_from(&alpha_next);
        log_w.push(gaussian_log_density(&(m_next - &x_next), &sigma_inv));
        propagated.push(s);
    }
    // Same log-space weighting and degenerate fallback as the direct filter.
    let predicted = ParticleCloud {
        particles: propagated,
        weights: cloud.weights.clone(),
    };
    let max_lw = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (posterior, degenerate) = if max_lw.is_finite() {
        let raw: Vec<f64> = log_w.iter().map(|lw| (lw - max_lw).exp()).collect();
        match bayes_update(&predicted, &raw) {
            Ok(c) => (c, false),
            Err(Error::DegenerateLikelihood) => (predicted.clone(), true),
            Err(e) => return Err(e),
        }
    } else {
        (predicted.clone(), true)
    };
    let resampled = systematic_resample(&posterior, rng);
    let mean = posterior_mean(&resampled);
    let out = AugmentedCloud {
        dim_state: d,
        particles: resampled.particles,
        weights: resampled.weights,
    };
    Ok(AugPfStep {
        cloud: out,
        estimate: mean.rows(d, q).into_owned(),
        degenerate,
    })
}

/// Outcome of one EnKF analysis step.
#[derive(Debug, Clone)]
pub struct AugEnKfStep {
    pub ensemble: Ensemble,
    /// Mean of the parameter block of the analyzed ensemble.
    pub estimate: DVector<f64>,
    /// Set when the innovation covariance needed diagonal regularization.
    pub regularized: bool,
}

/// One perturbed-observation EnKF step on the augmented vector: every
/// member is forecast through the Euler scheme (parameter block jittered),
/// then updated with the ensemble Kalman gain against the observation
/// operator `H = [I_d, 0]`.
#[allow(clippy::too_many_arguments)]
pub fn augenkf_step(
    ensemble: &Ensemble,
    model: &dyn ControlledModel,
    t_n: f64,
    u_n: &DVector<f64>,
    m_next: &DVector<f64>,
    sigma_obs: &DMatrix<f64>,
    jitter: &JitterSpec,
    grid: &TemporalGrid,
    rng: &mut impl Rng,
) -> Result<AugEnKfStep> {
    let d = ensemble.dim_state;
    let q = ensemble.dim_param();
    let n = ensemble.size();
    if m_next.len() != d {
        return Err(invalid("augenkf_step: observation dimension mismatch"));
    }
    let step_index = (t_n / grid.dt).round() as usize;
    let jitter_tf = jitter.noise_transform(step_index)?;

    // Forecast.
    let mut forecast = Vec::with_capacity(n);
    for s in &ensemble.members {
        let x = s.rows(0, d).into_owned();
        let alpha = s.rows(d, q).into_owned();
        let dw = brownian_increments(rng, d, grid.dt)?;
        let x_next = euler_step(model, t_n, &x, u_n, &alpha, &dw, grid.dt)?;
        let alpha_next = if q > 0 {
            let g = brownian_increments(rng, q, 1.0)?;
            alpha + &jitter_tf * g
        } else {
            alpha
        };
        let mut f = DVector::zeros(d + q);
        f.rows_mut(0, d).copy_from(&x_next);
        f.rows_mut(d, q).copy_from(&alpha_next);
        forecast.push(f);
    }

    // Sample covariances against H = [I_d, 0]: P_sy and P_yy are just the
    // corresponding blocks of the forecast covariance.
    let mut mean = DVector::zeros(d + q);
    for f in &forecast {
        mean += f;
    }
    mean /= n as f64;
    let mut p_sy = DMatrix::zeros(d + q, d);
    let mut p_yy = DMatrix::zeros(d, d);
    for f in &forecast {
        let ds = f - &mean;
        let dy = ds.rows(0, d).into_owned();
        p_sy += &ds * dy.transpose();
        p_yy += &dy * dy.transpose();
    }
    p_sy /= (n - 1) as f64;
    p_yy /= (n - 1) as f64;

    let mut innovation = &p_yy + sigma_obs;
    let mut regularized = false;
    let inv = match innovation.clone().try_inverse() {
        Some(inv) => inv,
        None => {
            let eps = 1e-10 * innovation.trace();
            eprintln!(
                "augenkf_step: singular innovation covariance, adding {eps:.3e} I"
            );
            regularized = true;
            innovation += DMatrix::from_diagonal_element(d, d, eps);
            innovation
                .try_inverse()
                .ok_or_else(|| invalid("augenkf_step: innovation covariance not invertible"))?
        }
    };
    let gain = p_sy * inv;

    // Perturbed-observation update.
    let obs_tf = psd_sqrt(sigma_obs)?;
    let mut analyzed = Vec::with_capacity(n);
    for f in &forecast {
        let eta = brownian_increments(rng, d, 1.0)?;
        let perturbed = m_next + &obs_tf * eta;
        let y = f.rows(0, d).into_owned();
        analyzed.push(f + &gain * (perturbed - y));
    }
    let out = Ensemble::new(d, analyzed)?;
    let estimate = out.mean().rows(d, q).into_owned();
    Ok(AugEnKfStep {
        ensemble: out,
        estimate,
        regularized,
    })
}
