//! Online parameter estimation via the direct filter: parameter particles
//! propagated under zero dynamics with artificial jitter, weighted through a
//! pseudo-observation likelihood built from the state model, then resampled.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::sde::{ControlledModel, TemporalGrid};

/// Weighted samples in parameter space representing the filter posterior.
#[derive(Debug, Clone)]
pub struct ParticleCloud {
    pub particles: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
}

impl ParticleCloud {
    /// Equally weighted cloud from the given particles.
    pub fn equal_weighted(particles: Vec<DVector<f64>>) -> Self {
        let m = particles.len();
        Self {
            particles,
            weights: vec![1.0 / m as f64; m],
        }
    }

    /// Uniform draw over the prior box `[lower, upper]^q`.
    pub fn uniform_prior(
        lower: &DVector<f64>,
        upper: &DVector<f64>,
        size: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if size == 0 {
            return Err(invalid("particle cloud needs size >= 1"));
        }
        if lower.len() != upper.len() {
            return Err(invalid("prior box bounds disagree in dimension"));
        }
        let q = lower.len();
        let particles = (0..size)
            .map(|_| {
                DVector::from_iterator(q, (0..q).map(|i| rng.gen_range(lower[i]..=upper[i])))
            })
            .collect();
        Ok(Self::equal_weighted(particles))
    }

    pub fn size(&self) -> usize {
        self.particles.len()
    }

    pub fn dim(&self) -> usize {
        self.particles[0].len()
    }

    /// Componentwise standard deviation under the particle weights.
    pub fn std(&self) -> DVector<f64> {
        let mean = posterior_mean(self);
        let q = self.dim();
        let mut var = DVector::zeros(q);
        for (p, w) in self.particles.iter().zip(&self.weights) {
            let d = p - &mean;
            for i in 0..q {
                var[i] += w * d[i] * d[i];
            }
        }
        var.map(f64::sqrt)
    }
}

/// Covariance of the artificial noise applied in the prediction step,
/// decayed geometrically per step.
#[derive(Debug, Clone)]
pub struct JitterSpec {
    pub covariance: DMatrix<f64>,
    pub decay_factor: f64,
}

impl JitterSpec {
    pub fn new(covariance: DMatrix<f64>, decay_factor: f64) -> Result<Self> {
        if !(decay_factor > 0.0 && decay_factor <= 1.0) {
            return Err(invalid("jitter decay factor must lie in (0, 1]"));
        }
        if covariance.nrows() != covariance.ncols() {
            return Err(invalid("jitter covariance must be square"));
        }
        Ok(Self {
            covariance,
            decay_factor,
        })
    }

    /// Isotropic jitter with the given per-component standard deviation.
    pub fn isotropic(q: usize, std: f64, decay_factor: f64) -> Result<Self> {
        Self::new(DMatrix::from_diagonal_element(q, q, std * std), decay_factor)
    }

    /// Covariance in effect at step `n`: `covariance * decay_factor^n`.
    pub fn effective_covariance(&self, step_index: usize) -> DMatrix<f64> {
        &self.covariance * self.decay_factor.powi(step_index as i32)
    }

    /// Matrix square root used to draw the noise; zero covariance yields zero.
    pub(crate) fn noise_transform(&self, step_index: usize) -> Result<DMatrix<f64>> {
        psd_sqrt(&self.effective_covariance(step_index))
    }
}

/// PSD square root via symmetric eigendecomposition; tolerates the
/// semidefinite case that plain Cholesky rejects. Zero input yields zero.
pub(crate) fn psd_sqrt(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if cov.iter().all(|&c| c == 0.0) {
        return Ok(cov.clone());
    }
    let eig = cov.clone().symmetric_eigen();
    for &l in eig.eigenvalues.iter() {
        if l < -1e-12 {
            return Err(invalid("covariance is not positive semidefinite"));
        }
    }
    let sqrt_l = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * sqrt_l * eig.eigenvectors.transpose())
}

/// Observation record: `M_{t_n} = X_{t_n} + xi`, `xi ~ N(0, noise_cov)`.
#[derive(Debug, Clone)]
pub struct ObservationSeq {
    pub values: Vec<DVector<f64>>,
    pub noise_cov: DMatrix<f64>,
}

/// Prediction step: inflate every particle with the effective jitter.
pub fn predict(
    cloud: &ParticleCloud,
    jitter: &JitterSpec,
    step_index: usize,
    rng: &mut impl Rng,
) -> Result<ParticleCloud> {
    let q = cloud.dim();
    if jitter.covariance.nrows() != q {
        return Err(invalid("jitter covariance dimension mismatch"));
    }
    let transform = jitter.noise_transform(step_index)?;
    let particles = cloud
        .particles
        .iter()
        .map(|p| {
            let g = crate::sde::brownian_increments(rng, q, 1.0).expect("q >= 1, dt > 0");
            p + &transform * g
        })
        .collect();
    Ok(ParticleCloud {
        particles,
        weights: cloud.weights.clone(),
    })
}

/// Squared spectral norm of a symmetric PSD matrix.
pub(crate) fn spectral_norm_sq(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)] * m[(0, 0)];
    }
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(0.0f64, |acc, &l| acc.max(l * l))
}

/// Log of the pseudo-observation likelihood: the state model pushes the
/// parameter sample one Euler step forward from `x_est` and the squared
/// deviation from the next observation is scaled by the diffusion level and
/// observation noise.
pub fn log_likelihood_weight(
    model: &dyn ControlledModel,
    t_n: f64,
    x_est: &DVector<f64>,
    u_n: &DVector<f64>,
    zeta: &DVector<f64>,
    m_next: &DVector<f64>,
    sigma_obs: &DMatrix<f64>,
    dt: f64,
) -> Result<f64> {
    if !(dt > 0.0) {
        return Err(invalid("likelihood_weight requires dt > 0"));
    }
    let denom = spectral_norm_sq(&model.diffusion(t_n)) * dt + spectral_norm_sq(sigma_obs);
    if denom == 0.0 {
        return Err(invalid(
            "likelihood denominator is zero (noiseless model and observations)",
        ));
    }
    let x_pred = x_est + model.drift(t_n, x_est, u_n, zeta) * dt;
    let dev = m_next - x_pred;
    Ok(-dev.norm_squared() / denom)
}

/// Pseudo-observation likelihood weight, `exp` of [`log_likelihood_weight`].
#[allow(clippy::too_many_arguments)]
pub fn likelihood_weight(
    model: &dyn ControlledModel,
    t_n: f64,
    x_est: &DVector<f64>,
    u_n: &DVector<f64>,
    zeta: &DVector<f64>,
    m_next: &DVector<f64>,
    sigma_obs: &DMatrix<f64>,
    dt: f64,
) -> Result<f64> {
    log_likelihood_weight(model, t_n, x_est, u_n, zeta, m_next, sigma_obs, dt).map(f64::exp)
}

/// Bayesian reweighting: normalizes the raw likelihood values.
pub fn bayes_update(cloud: &ParticleCloud, raw_weights: &[f64]) -> Result<ParticleCloud> {
    if raw_weights.len() != cloud.size() {
        return Err(invalid("raw weight count does not match cloud size"));
    }
    if raw_weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(invalid("raw weights must be finite and nonnegative"));
    }
    let total: f64 = raw_weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateLikelihood);
    }
    Ok(ParticleCloud {
        particles: cloud.particles.clone(),
        weights: raw_weights.iter().map(|w| w / total).collect(),
    })
}

/// Systematic resampling: one uniform offset, `M` stratified positions.
/// Copy counts land in `{floor(M w), ceil(M w)}`.
pub fn systematic_resample(cloud: &ParticleCloud, rng: &mut impl Rng) -> ParticleCloud {
    systematic_resample_n(cloud, cloud.size(), rng)
}

/// Systematic resampling to an explicit output size.
pub fn systematic_resample_n(
    cloud: &ParticleCloud,
    out_size: usize,
    rng: &mut impl Rng,
) -> ParticleCloud {
    let m = out_size;
    let u0: f64 = rng.gen::<f64>() / m as f64;
    let mut particles = Vec::with_capacity(m);
    let mut cum = cloud.weights[0];
    let mut idx = 0usize;
    for k in 0..m {
        let pos = u0 + k as f64 / m as f64;
        while pos > cum && idx + 1 < cloud.size() {
            idx += 1;
            cum += cloud.weights[idx];
        }
        particles.push(cloud.particles[idx].clone());
    }
    ParticleCloud::equal_weighted(particles)
}

/// Weighted mean of the particle cloud.
pub fn posterior_mean(cloud: &ParticleCloud) -> DVector<f64> {
    let mut mean = DVector::zeros(cloud.dim());
    for (p, w) in cloud.particles.iter().zip(&cloud.weights) {
        mean += p * *w;
    }
    mean
}

/// Outcome of one filter step.
#[derive(Debug, Clone)]
pub struct FilterStep {
    pub cloud: ParticleCloud,
    pub estimate: DVector<f64>,
    /// Set when the likelihoods degenerated and the prior cloud was kept
    /// with uniform weights.
    pub degenerate: bool,
}

/// One full prediction-update-resample cycle of the direct filter.
///
/// The likelihoods are combined in log space (max-shifted before
/// exponentiation), which equals the normalized [`likelihood_weight`] /
/// [`bayes_update`] composition whenever that composition does not
/// underflow.
#[allow(clippy::too_many_arguments)]
pub fn df_step(
    cloud: &ParticleCloud,
    model: &dyn ControlledModel,
    t_n: f64,
    x_est: &DVector<f64>,
    u_n: &DVector<f64>,
    m_next: &DVector<f64>,
    sigma_obs: &DMatrix<f64>,
    jitter: &JitterSpec,
    grid: &TemporalGrid,
    rng: &mut impl Rng,
) -> Result<FilterStep> {
    let step_index = (t_n / grid.dt).round() as usize;
    let predicted = predict(cloud, jitter, step_index, rng)?;
    let mut log_w = Vec::with_capacity(predicted.size());
    for zeta in &predicted.particles {
        log_w.push(log_likelihood_weight(
            model, t_n, x_est, u_n, zeta, m_next, sigma_obs, grid.dt,
        )?);
    }
    let max_lw = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (posterior, degenerate) = if max_lw.is_finite() {
        let raw: Vec<f64> = log_w.iter().map(|lw| (lw - max_lw).exp()).collect();
        match bayes_update(&predicted, &raw) {
            Ok(c) => (c, false),
            Err(Error::DegenerateLikelihood) => (predicted.clone(), true),
            Err(e) => return Err(e),
        }
    } else {
        // Every likelihood underflowed even in log space; keep the prior.
        (predicted.clone(), true)
    };
    let resampled = systematic_resample(&posterior, rng);
    let estimate = posterior_mean(&resampled);
    Ok(FilterStep {
        cloud: resampled,
        estimate,
        degenerate,
    })
}
