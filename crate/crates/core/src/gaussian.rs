//! Diagonal-covariance Gaussians over embedding space.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaussianError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("variance at index {index} is not strictly positive ({value})")]
    NonPositiveVariance { index: usize, value: f64 },
    #[error("gaussian must have at least one dimension")]
    Empty,
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<(), GaussianError> {
    if expected != got {
        return Err(GaussianError::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// `N(mean, diag(var))`. Variances are stored directly and are always at
/// least [`Real::VAR_FLOOR`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian<T> {
    mean: Vec<T>,
    var: Vec<T>,
}

impl<T: Real> DiagGaussian<T> {
    pub fn new(mean: Vec<T>, mut var: Vec<T>) -> Result<Self, GaussianError> {
        if mean.is_empty() {
            return Err(GaussianError::Empty);
        }
        check_dim(mean.len(), var.len())?;
        for (index, v) in var.iter_mut().enumerate() {
            if !(*v > T::zero()) || !v.is_finite() {
                return Err(GaussianError::NonPositiveVariance {
                    index,
                    value: v.as_f64(),
                });
            }
            if *v < T::VAR_FLOOR {
                *v = T::VAR_FLOOR;
            }
        }
        Ok(Self { mean, var })
    }

    /// Isotropic `N(mean, scale * I)`.
    pub fn isotropic(mean: Vec<T>, scale: T) -> Result<Self, GaussianError> {
        let var = vec![scale; mean.len()];
        Self::new(mean, var)
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![T::zero(); dim],
            var: vec![T::one(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn var(&self) -> &[T] {
        &self.var
    }

    pub(crate) fn mean_mut(&mut self) -> &mut [T] {
        &mut self.mean
    }

    pub(crate) fn set_var_unchecked(&mut self, j: usize, v: T) {
        self.var[j] = v.max(T::VAR_FLOOR);
    }

    /// Reparameterized draw `mean + sqrt(var) * noise`.
    pub fn sample(&self, noise: &[T]) -> Result<Vec<T>, GaussianError> {
        check_dim(self.dim(), noise.len())?;
        Ok(self
            .mean
            .iter()
            .zip(&self.var)
            .zip(noise)
            .map(|((&m, &v), &e)| m + v.sqrt() * e)
            .collect())
    }

    /// Negative log-density at `x`.
    pub fn nll(&self, x: &[T]) -> Result<T, GaussianError> {
        nll_diag(self, x)
    }
}

/// `KL(p || q)` for diagonal Gaussians.
pub fn kl_diag<T: Real>(p: &DiagGaussian<T>, q: &DiagGaussian<T>) -> Result<T, GaussianError> {
    check_dim(p.dim(), q.dim())?;
    let half = T::lit(0.5);
    let mut total = T::zero();
    for j in 0..p.dim() {
        let (pv, qv) = (p.var[j], q.var[j]);
        let dm = p.mean[j] - q.mean[j];
        total += half * ((qv / pv).ln() + pv / qv + dm * dm / qv - T::one());
    }
    // Rounding can leave a tiny negative residue when p == q.
    Ok(total.max(T::zero()))
}

/// Exact Gaussian negative log-likelihood of `x`.
pub fn nll_diag<T: Real>(g: &DiagGaussian<T>, x: &[T]) -> Result<T, GaussianError> {
    check_dim(g.dim(), x.len())?;
    let half = T::lit(0.5);
    let two_pi = T::lit(2.0) * T::PI();
    Ok(g.mean
        .iter()
        .zip(&g.var)
        .zip(x)
        .map(|((&m, &v), &xi)| {
            let r = xi - m;
            half * ((two_pi * v).ln() + r * r / v)
        })
        .sum())
}
