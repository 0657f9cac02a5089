//! Noise schedules.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("schedule needs at least one timestep")]
    NoTimesteps,
    #[error("beta range must satisfy 0 < start <= end < 1 (got {start}, {end})")]
    BetaRange { start: f64, end: f64 },
    #[error("timestep {t} outside 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
}

/// Parameters that regenerate a [`Schedule`]; this is what gets persisted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearScheduleSpec {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for LinearScheduleSpec {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl LinearScheduleSpec {
    pub fn build<T: Real>(&self) -> Result<Schedule<T>, ScheduleError> {
        make_linear_schedule(self.timesteps, self.beta_start, self.beta_end)
    }
}

/// β₁..β_T with the derived α and cumulative ᾱ. Timesteps are 1-based;
/// `alpha_bar(0)` is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule<T> {
    betas: Vec<T>,
    alphas: Vec<T>,
    alpha_bars: Vec<T>,
}

pub fn make_linear_schedule<T: Real>(
    timesteps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<Schedule<T>, ScheduleError> {
    if timesteps == 0 {
        return Err(ScheduleError::NoTimesteps);
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(ScheduleError::BetaRange {
            start: beta_start,
            end: beta_end,
        });
    }
    let betas = (0..timesteps)
        .map(|i| {
            if timesteps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
            }
        })
        .map(T::lit)
        .collect();
    Schedule::from_betas(betas)
}

impl<T: Real> Schedule<T> {
    pub fn from_betas(betas: Vec<T>) -> Result<Self, ScheduleError> {
        if betas.is_empty() {
            return Err(ScheduleError::NoTimesteps);
        }
        if let Some(&b) = betas.iter().find(|&&b| !(b > T::zero() && b < T::one())) {
            return Err(ScheduleError::BetaRange {
                start: b.as_f64(),
                end: b.as_f64(),
            });
        }
        let alphas: Vec<T> = betas.iter().map(|&b| T::one() - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(T::one(), |acc, &a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn check(&self, t: usize) -> Result<(), ScheduleError> {
        if t == 0 || t > self.timesteps() {
            return Err(ScheduleError::TimestepOutOfRange {
                t,
                max: self.timesteps(),
            });
        }
        Ok(())
    }

    /// β_t, `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> T {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> T {
        self.alphas[t - 1]
    }

    /// ᾱ_t with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> T {
        if t == 0 {
            T::one()
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[T] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[T] {
        &self.alpha_bars
    }
}
