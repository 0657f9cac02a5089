//! The shifted diffusion process.
//!
//! The forward kernel is `q(z_t | z_{t-1}) = N(sqrt(1 - β_t) z_{t-1} + s_t, β_t Σ)`
//! with shift `s_t = (1 - sqrt(1 - β_t)) μ`, which makes the marginal
//! `q(z_t | z_0) = N(sqrt(ᾱ_t) z_0 + (1 - sqrt(ᾱ_t)) μ, (1 - ᾱ_t) Σ)` and drives
//! `z_T` toward the data-informed Gaussian `N(μ, Σ)` instead of `N(0, I)`.
//! Setting `μ = 0, Σ = I` recovers vanilla DDPM exactly.

use std::sync::Arc;

use thiserror::Error;

use crate::gaussian::{check_dim, kl_diag, DiagGaussian, GaussianError};
use crate::scalar::Real;
use crate::schedule::{Schedule, ScheduleError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProcessError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
    #[error("posterior is degenerate at t = 1; use the reconstruction likelihood")]
    PosteriorAtFirstStep,
    #[error("strided posterior needs t > t_prev >= 1 (got t = {t}, t_prev = {t_prev})")]
    StrideOrder { t: usize, t_prev: usize },
}

/// Scalar coefficients of `q(z_{t-1} | z_t, z_0)`:
/// `ν = γ (z_t - s_t) + η z_0 + τ (1 - sqrt(ᾱ_{t-1})) μ` and `Λ = lambda_scale · Σ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorCoeffs<T> {
    pub gamma: T,
    pub eta: T,
    pub tau: T,
    pub lambda_scale: T,
}

impl<T: Real> PosteriorCoeffs<T> {
    /// Coefficients for a jump from ᾱ_hi down to ᾱ_lo where the effective
    /// per-jump noise is `beta` and `sqrt_keep = sqrt(1 - beta)`.
    fn between(beta: T, sqrt_keep: T, alpha_bar_lo: T, alpha_bar_hi: T) -> Self {
        let denom = T::one() - alpha_bar_hi;
        let keep_lo = T::one() - alpha_bar_lo;
        Self {
            gamma: keep_lo * sqrt_keep / denom,
            eta: beta * alpha_bar_lo.sqrt() / denom,
            tau: beta / denom,
            lambda_scale: keep_lo * beta / denom,
        }
    }

    /// Weight `η² / (2 lambda_scale)` that turns the per-step KL into a
    /// Σ⁻¹-weighted squared error on ẑ₀.
    pub fn elbo_weight(&self) -> T {
        self.eta * self.eta / (T::lit(2.0) * self.lambda_scale)
    }
}

/// `1 - sqrt(1 - beta)` without cancellation for small beta.
fn shift_scale<T: Real>(beta: T) -> T {
    beta / (T::one() + (T::one() - beta).sqrt())
}

/// A schedule bound to an initial Gaussian `N(μ, Σ)`.
#[derive(Debug, Clone)]
pub struct ShiftedProcess<T> {
    schedule: Arc<Schedule<T>>,
    init: DiagGaussian<T>,
    kappa: T,
}

impl<T: Real> ShiftedProcess<T> {
    /// Binds `init` as `N(μ, Σ)`. Σ is taken as given (any κ scaling is
    /// already applied); `kappa` is kept for bookkeeping.
    pub fn new(schedule: Arc<Schedule<T>>, init: DiagGaussian<T>, kappa: T) -> Self {
        Self {
            schedule,
            init,
            kappa,
        }
    }

    /// Vanilla diffusion: `μ = 0`, `Σ = I`.
    pub fn vanilla(schedule: Arc<Schedule<T>>, dim: usize) -> Self {
        Self::new(schedule, DiagGaussian::standard(dim), T::one())
    }

    /// Builds `Σ_jj = (κ σ_j)²` from data statistics.
    pub fn from_stats(
        schedule: Arc<Schedule<T>>,
        mu: Vec<T>,
        sigma: &[T],
        kappa: T,
    ) -> Result<Self, ProcessError> {
        let var = sigma
            .iter()
            .map(|&s| (kappa * s).powi(2).max(T::VAR_FLOOR))
            .collect();
        Ok(Self::new(schedule, DiagGaussian::new(mu, var)?, kappa))
    }

    pub fn schedule(&self) -> &Schedule<T> {
        &self.schedule
    }

    pub fn init(&self) -> &DiagGaussian<T> {
        &self.init
    }

    pub fn mu(&self) -> &[T] {
        self.init.mean()
    }

    pub fn var(&self) -> &[T] {
        self.init.var()
    }

    pub fn kappa(&self) -> T {
        self.kappa
    }

    pub fn dim(&self) -> usize {
        self.init.dim()
    }

    /// `s_t = (1 - sqrt(1 - β_t)) μ`.
    pub fn shift_term(&self, t: usize) -> Result<Vec<T>, ProcessError> {
        self.schedule.check(t)?;
        let scale = shift_scale(self.schedule.beta(t));
        Ok(self.mu().iter().map(|&m| scale * m).collect())
    }

    /// `q(z_t | z_{t-1})`.
    pub fn forward_step(&self, z_prev: &[T], t: usize) -> Result<DiagGaussian<T>, ProcessError> {
        self.schedule.check(t)?;
        check_dim(self.dim(), z_prev.len())?;
        let beta = self.schedule.beta(t);
        let keep = self.schedule.alpha(t).sqrt();
        let scale = shift_scale(beta);
        let mean = z_prev
            .iter()
            .zip(self.mu())
            .map(|(&z, &m)| keep * z + scale * m)
            .collect();
        let var = self.var().iter().map(|&v| beta * v).collect();
        Ok(DiagGaussian::new(mean, var)?)
    }

    /// `q(z_t | z_0)` in closed form.
    pub fn forward_marginal(&self, z0: &[T], t: usize) -> Result<DiagGaussian<T>, ProcessError> {
        self.schedule.check(t)?;
        check_dim(self.dim(), z0.len())?;
        let ab = self.schedule.alpha_bar(t);
        let root = ab.sqrt();
        let mean = z0
            .iter()
            .zip(self.mu())
            .map(|(&z, &m)| root * z + (T::one() - root) * m)
            .collect();
        let var = self.var().iter().map(|&v| (T::one() - ab) * v).collect();
        Ok(DiagGaussian::new(mean, var)?)
    }

    pub fn posterior_coeffs(&self, t: usize) -> Result<PosteriorCoeffs<T>, ProcessError> {
        self.schedule.check(t)?;
        if t == 1 {
            return Err(ProcessError::PosteriorAtFirstStep);
        }
        let s = &self.schedule;
        Ok(PosteriorCoeffs::between(
            s.beta(t),
            s.alpha(t).sqrt(),
            s.alpha_bar(t - 1),
            s.alpha_bar(t),
        ))
    }

    /// `q(z_{t-1} | z_t, z_0)` for `2 <= t <= T`.
    pub fn posterior(&self, z_t: &[T], z0: &[T], t: usize) -> Result<DiagGaussian<T>, ProcessError> {
        let coeffs = self.posterior_coeffs(t)?;
        let shift = shift_scale(self.schedule.beta(t));
        self.posterior_from(&coeffs, shift, self.schedule.alpha_bar(t - 1), z_t, z0)
    }

    /// Exact `q(z_{t_prev} | z_t, z_0)` for a non-adjacent jump, treating the
    /// composed kernel `q(z_t | z_{t_prev})` as a single step with
    /// `β' = 1 - ᾱ_t / ᾱ_{t_prev}`.
    pub fn strided_posterior(
        &self,
        z_t: &[T],
        z0: &[T],
        t: usize,
        t_prev: usize,
    ) -> Result<DiagGaussian<T>, ProcessError> {
        self.schedule.check(t)?;
        if t_prev == 0 || t_prev >= t {
            return Err(ProcessError::StrideOrder { t, t_prev });
        }
        if t_prev + 1 == t {
            return self.posterior(z_t, z0, t);
        }
        let ab_lo = self.schedule.alpha_bar(t_prev);
        let ab_hi = self.schedule.alpha_bar(t);
        let keep_sq = ab_hi / ab_lo;
        let beta = T::one() - keep_sq;
        let coeffs = PosteriorCoeffs::between(beta, keep_sq.sqrt(), ab_lo, ab_hi);
        self.posterior_from(&coeffs, shift_scale(beta), ab_lo, z_t, z0)
    }

    fn posterior_from(
        &self,
        c: &PosteriorCoeffs<T>,
        shift: T,
        alpha_bar_lo: T,
        z_t: &[T],
        z0: &[T],
    ) -> Result<DiagGaussian<T>, ProcessError> {
        check_dim(self.dim(), z_t.len())?;
        check_dim(self.dim(), z0.len())?;
        let pull = c.tau * (T::one() - alpha_bar_lo.sqrt());
        let mean = z_t
            .iter()
            .zip(z0)
            .zip(self.mu())
            .map(|((&zt, &z0), &m)| c.gamma * (zt - shift * m) + c.eta * z0 + pull * m)
            .collect();
        let var = self.var().iter().map(|&v| c.lambda_scale * v).collect();
        Ok(DiagGaussian::new(mean, var)?)
    }

    /// `KL(q(z_T | z_0) || N(μ, Σ))`. Independent of the model; logged only.
    pub fn kl_terminal(&self, z0: &[T]) -> Result<T, ProcessError> {
        let last = self.forward_marginal(z0, self.schedule.timesteps())?;
        Ok(kl_diag(&last, &self.init)?)
    }
}
