//! Inference: pick a bank entry for the condition, start from it, and walk a
//! strided timestep schedule back to ẑ₀ with optional classifier-free guidance.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{AssignMode, ClusterError};
use crate::denoiser::{DenoiserError, DenoiserParams};
use crate::process::{ProcessError, ShiftedProcess};
use crate::scalar::{cosine, norm, Real};
use crate::trainer::TrainState;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("steps must lie in 1..={timesteps}, got {steps}")]
    Steps { steps: usize, timesteps: usize },
    #[error("invalid sampling config: {0}")]
    Config(String),
    #[error("condition has dimension {got}, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Process(#[from] ProcessError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub steps: usize,
    /// Guidance weight; 1 disables the unconditional branch.
    pub guidance_w: f64,
    /// Rescale ẑ₀ so its norm never exceeds this bound.
    pub clamp_z0: Option<f64>,
    pub assign_mode: AssignMode,
    pub mc_samples: usize,
    /// Deterministic (noise-free) stepping instead of ancestral draws.
    pub deterministic: bool,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 64,
            guidance_w: 1.0,
            clamp_z0: None,
            assign_mode: AssignMode::Top1,
            mc_samples: 64,
            deterministic: false,
            seed: 0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self, timesteps: usize) -> Result<(), SampleError> {
        if self.steps == 0 || self.steps > timesteps {
            return Err(SampleError::Steps {
                steps: self.steps,
                timesteps,
            });
        }
        if !(self.guidance_w >= 0.0 && self.guidance_w.is_finite()) {
            return Err(SampleError::Config("guidance_w must be a finite value >= 0".into()));
        }
        if self.clamp_z0.is_some_and(|c| !(c > 0.0)) {
            return Err(SampleError::Config("clamp_z0 must be positive".into()));
        }
        if self.assign_mode == AssignMode::Mc && self.mc_samples == 0 {
            return Err(SampleError::Config("mc_samples must be positive".into()));
        }
        Ok(())
    }
}

/// Evenly spaced timesteps `round(T - i T / steps)` for `i < steps`, with the
/// last entry forced to 1. Strictly decreasing, starts at `T`.
pub fn stride_schedule(timesteps: usize, steps: usize) -> Result<Vec<usize>, SampleError> {
    if steps == 0 || steps > timesteps {
        return Err(SampleError::Steps { steps, timesteps });
    }
    let stride = timesteps as f64 / steps as f64;
    let mut out: Vec<usize> = (0..steps)
        .map(|i| (timesteps as f64 - i as f64 * stride).round() as usize)
        .collect();
    if steps > 1 {
        *out.last_mut().unwrap() = 1;
    }
    Ok(out)
}

/// Final prediction plus the visited states: `(t, z_t)` for every strided
/// timestep, then `(0, ẑ₀)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub z0_hat: Vec<T>,
    pub cluster: usize,
    pub trajectory: Vec<(usize, Vec<T>)>,
}

fn guided<T: Real>(
    params: &DenoiserParams<T>,
    z_t: &[T],
    t: usize,
    cond: &[T],
    cluster: usize,
    cfg: &SampleConfig,
) -> Result<Vec<T>, SampleError> {
    let mut cond_pred = params.predict_z0(z_t, t, cond, Some(cluster), false)?;
    if cfg.guidance_w != 1.0 {
        let uncond = params.predict_z0(z_t, t, cond, None, true)?;
        let w = T::lit(cfg.guidance_w);
        for (c, &u) in cond_pred.iter_mut().zip(&uncond) {
            *c = u + w * (*c - u);
        }
    }
    if let Some(bound) = cfg.clamp_z0 {
        let n = norm(&cond_pred);
        let bound = T::lit(bound);
        if n > bound {
            let s = bound / n;
            cond_pred.iter_mut().for_each(|x| *x *= s);
        }
    }
    Ok(cond_pred)
}

/// Noise-free jump: keep the implied noise direction and move to `t_prev`'s
/// marginal around ẑ₀.
fn deterministic_step<T: Real>(proc: &ShiftedProcess<T>, z_t: &[T], z0_hat: &[T], t: usize, t_prev: usize) -> Vec<T> {
    let s = proc.schedule();
    let (ab, ab_prev) = (s.alpha_bar(t), s.alpha_bar(t_prev));
    let (r, r_prev) = (ab.sqrt(), ab_prev.sqrt());
    let ratio = ((T::one() - ab_prev) / (T::one() - ab)).sqrt();
    z_t.iter()
        .zip(z0_hat)
        .zip(proc.mu())
        .map(|((&z, &h), &m)| {
            let mean = r * h + (T::one() - r) * m;
            let mean_prev = r_prev * h + (T::one() - r_prev) * m;
            mean_prev + ratio * (z - mean)
        })
        .collect()
}

/// Draws one embedding for `cond` from a trained (or freshly initialized) state.
pub fn sample_prior<T: Real, R: Rng>(
    state: &TrainState<T>,
    cond: &[T],
    cfg: &SampleConfig,
    rng: &mut R,
) -> Result<Sample<T>, SampleError> {
    let timesteps = state.schedule.timesteps();
    cfg.validate(timesteps)?;
    let d = state.dim();
    if cond.len() != d {
        return Err(SampleError::DimensionMismatch {
            expected: d,
            got: cond.len(),
        });
    }
    let ts = stride_schedule(timesteps, cfg.steps)?;
    let mc_seed = rng.next_u64();
    let cluster = state.bank.assign(cond, cfg.assign_mode, cfg.mc_samples, mc_seed)?.index;
    let proc = ShiftedProcess::new(
        state.schedule.clone(),
        state.bank.gaussian(cluster).clone(),
        T::lit(state.config.kappa),
    );
    let mut noise = || -> Vec<T> { (0..d).map(|_| T::lit(rng.sample(StandardNormal))).collect() };

    let mut z = proc.init().sample(&noise()).map_err(ProcessError::from)?;
    let mut trajectory = Vec::with_capacity(ts.len() + 1);
    trajectory.push((ts[0], z.clone()));
    for pair in ts.windows(2) {
        let (t, t_prev) = (pair[0], pair[1]);
        let z0_hat = guided(&state.params, &z, t, cond, cluster, cfg)?;
        z = if cfg.deterministic {
            deterministic_step(&proc, &z, &z0_hat, t, t_prev)
        } else {
            let post = proc.strided_posterior(&z, &z0_hat, t, t_prev)?;
            post.sample(&noise()).map_err(ProcessError::from)?
        };
        trajectory.push((t_prev, z.clone()));
    }
    let z0_hat = guided(&state.params, &z, *ts.last().unwrap(), cond, cluster, cfg)?;
    trajectory.push((0, z0_hat.clone()));
    Ok(Sample {
        z0_hat,
        cluster,
        trajectory,
    })
}

/// Cosine of each trajectory entry against the reference; `None` where
/// either vector has zero norm.
pub fn trajectory_similarity<T: Real>(trajectory: &[(usize, Vec<T>)], z0_true: &[T]) -> Vec<(usize, Option<T>)> {
    trajectory
        .iter()
        .map(|(t, z)| (*t, cosine(z, z0_true)))
        .collect()
}
