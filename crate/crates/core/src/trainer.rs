//! Training: per-item loss, condition dropout, AdamW on the denoiser, and an
//! optional separate update of a learnable cluster bank.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{fit_kmeans, AssignMode, ClusterBank, ClusterError, LpNoise};
use crate::data::{data_stats, DataError, EmbeddingDataset};
use crate::denoiser::{DenoiserConfig, DenoiserError, DenoiserParams, ForwardCache};
use crate::gaussian::{nll_diag, DiagGaussian};
use crate::optim::{AdamW, AdamWConfig, OptimError};
use crate::process::{ProcessError, ShiftedProcess};
use crate::scalar::{convert, Real};
use crate::schedule::{make_linear_schedule, Schedule, ScheduleError};

/// Variance of the t = 1 reconstruction likelihood, relative to Σ.
pub const RECON_VAR_SCALE: f64 = 1e-4;

pub const LOG_HEADER: &str = "step,loss,kl_terminal,lp_loss,wall_ms";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("dataset has dimension {got}, state expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Process(#[from] ProcessError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("writing training log: {0}")]
    Log(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// The exact per-timestep variational bound term.
    #[default]
    Elbo,
    /// Unweighted mean squared error on ẑ₀.
    Simple,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = DenoiserConfig::new(1, 1);
        Self {
            hidden: d.hidden,
            depth: d.depth,
            time_embed_dim: d.time_embed_dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub batch: usize,
    pub steps: u64,
    pub lr: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub drop_prob: f64,
    pub loss_mode: LossMode,
    /// Number of initial Gaussians in the bank.
    pub k: usize,
    pub learnable_bank: bool,
    pub xi: f64,
    pub kappa: f64,
    /// Forces `μ = 0, Σ = I, k = 1` (vanilla diffusion) on the same code path.
    pub baseline: bool,
    pub assign_mode: AssignMode,
    pub mc_samples: usize,
    pub kmeans_iters: usize,
    pub model: ModelConfig,
    /// Training-log cadence in steps; the final step is always logged.
    pub log_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            batch: 128,
            steps: 20_000,
            lr: adam.lr,
            adam_betas: (adam.beta1, adam.beta2),
            adam_eps: adam.eps,
            weight_decay: adam.weight_decay,
            drop_prob: 0.1,
            loss_mode: LossMode::Elbo,
            k: 8,
            learnable_bank: false,
            xi: 0.1,
            kappa: 1.0,
            baseline: false,
            assign_mode: AssignMode::Top1,
            mc_samples: 64,
            kmeans_iters: 100,
            model: ModelConfig::default(),
            log_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.drop_prob) {
            return fail("drop_prob must lie in [0, 1)");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if self.batch == 0 || self.timesteps == 0 || self.k == 0 {
            return fail("batch, timesteps and k must be positive");
        }
        if self.assign_mode == AssignMode::Mc && self.mc_samples == 0 {
            return fail("mc_samples must be positive");
        }
        if !(self.kappa > 0.0) || !(self.xi >= 0.0) {
            return fail("kappa must be positive and xi non-negative");
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return fail("adam_betas must lie in [0, 1)");
        }
        if self.log_every == 0 {
            return fail("log_every must be positive");
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.adam_betas.0,
            beta2: self.adam_betas.1,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Bank size after applying the baseline override.
    pub fn effective_k(&self) -> usize {
        if self.baseline {
            1
        } else {
            self.k
        }
    }

    pub fn denoiser_config(&self, dim: usize) -> DenoiserConfig {
        DenoiserConfig {
            dim,
            hidden: self.model.hidden,
            depth: self.model.depth,
            time_embed_dim: self.model.time_embed_dim,
            clusters: self.effective_k(),
        }
    }

    pub fn schedule<T: Real>(&self) -> Result<Schedule<T>, ScheduleError> {
        make_linear_schedule(self.timesteps, self.beta_start, self.beta_end)
    }
}

/// Value and gradient of one item's loss with respect to ẑ₀.
pub struct ItemLoss<T> {
    pub loss: T,
    pub d_z0_hat: Vec<T>,
    pub z0_hat: Vec<T>,
    pub cache: ForwardCache<T>,
}

/// Per-timestep bound term given a prediction. For `t >= 2` this is the KL
/// between the true and model posteriors, which share Λ and so reduce to
/// `½ Σ_j η² (z0_j - ẑ0_j)² / Λ_j`; for `t = 1` it is the negative
/// log-likelihood of `z0` under `N(ẑ0, 1e-4 Σ)`.
pub fn elbo_term<T: Real>(
    proc: &ShiftedProcess<T>,
    z0: &[T],
    z0_hat: &[T],
    t: usize,
) -> Result<(T, Vec<T>), ProcessError> {
    proc.schedule().check(t)?;
    crate::gaussian::check_dim(proc.dim(), z0.len())?;
    crate::gaussian::check_dim(proc.dim(), z0_hat.len())?;
    if t == 1 {
        let scale = T::lit(RECON_VAR_SCALE);
        let var: Vec<T> = proc.var().iter().map(|&v| scale * v).collect();
        let grad = z0_hat
            .iter()
            .zip(z0)
            .zip(&var)
            .map(|((&h, &z), &v)| (h - z) / v)
            .collect();
        let g = DiagGaussian::new(z0_hat.to_vec(), var)?;
        return Ok((nll_diag(&g, z0)?, grad));
    }
    let w = proc.posterior_coeffs(t)?.elbo_weight();
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(z0.len());
    for ((&h, &z), &v) in z0_hat.iter().zip(z0).zip(proc.var()) {
        let diff = h - z;
        loss += w * diff * diff / v;
        grad.push(T::lit(2.0) * w * diff / v);
    }
    Ok((loss, grad))
}

/// Mean squared error over dimensions and its gradient `2(ẑ0 - z0)/d`.
pub fn loss_simple<T: Real>(z0: &[T], z0_hat: &[T]) -> (T, Vec<T>) {
    assert_eq!(z0.len(), z0_hat.len(), "loss_simple: shape mismatch");
    let inv = T::one() / T::lit(z0.len() as f64);
    let mut loss = T::zero();
    let grad = z0_hat
        .iter()
        .zip(z0)
        .map(|(&h, &z)| {
            let diff = h - z;
            loss += diff * diff * inv;
            T::lit(2.0) * diff * inv
        })
        .collect();
    (loss, grad)
}

/// `z_t = mean + sqrt(var) ⊙ noise` under `q(z_t | z_0)`.
pub fn diffuse<T: Real>(proc: &ShiftedProcess<T>, z0: &[T], t: usize, noise: &[T]) -> Result<Vec<T>, ProcessError> {
    Ok(proc.forward_marginal(z0, t)?.sample(noise)?)
}

/// Diffuses `z0` to step `t`, predicts ẑ₀ and evaluates the bound term.
#[allow(clippy::too_many_arguments)]
pub fn loss_elbo<T: Real>(
    proc: &ShiftedProcess<T>,
    params: &DenoiserParams<T>,
    z0: &[T],
    cond: &[T],
    c_idx: usize,
    t: usize,
    noise: &[T],
    dropped: bool,
) -> Result<ItemLoss<T>, TrainError> {
    item_loss(LossMode::Elbo, proc, params, z0, cond, c_idx, t, noise, dropped)
}

#[allow(clippy::too_many_arguments)]
fn item_loss<T: Real>(
    mode: LossMode,
    proc: &ShiftedProcess<T>,
    params: &DenoiserParams<T>,
    z0: &[T],
    cond: &[T],
    c_idx: usize,
    t: usize,
    noise: &[T],
    dropped: bool,
) -> Result<ItemLoss<T>, TrainError> {
    let z_t = diffuse(proc, z0, t, noise)?;
    let (z0_hat, cache) = params.forward(&z_t, t, cond, Some(c_idx), dropped)?;
    let (loss, d_z0_hat) = match mode {
        LossMode::Elbo => elbo_term(proc, z0, &z0_hat, t)?,
        LossMode::Simple => loss_simple(z0, &z0_hat),
    };
    Ok(ItemLoss {
        loss,
        d_z0_hat,
        z0_hat,
        cache,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub kl_terminal: f64,
    /// `None` when the bank is fixed.
    pub lp_loss: Option<f64>,
}

/// Random choices for one batch item.
#[derive(Debug, Clone)]
pub struct ItemDraw<T> {
    pub t: usize,
    pub dropped: bool,
    pub noise: Vec<T>,
    pub mc_seed: u64,
}

/// Outcome of the θ half of a step, before any parameter changes.
pub struct ThetaGradients<T> {
    pub grads: DenoiserParams<T>,
    pub loss: T,
    pub kl_terminal: T,
    /// Cluster chosen for each item.
    pub clusters: Vec<usize>,
}

/// Everything needed to continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub config: TrainConfig,
    pub params: DenoiserParams<T>,
    pub opt: AdamW<T>,
    pub bank: ClusterBank<T>,
    pub bank_opt: Option<AdamW<T>>,
    pub schedule: Arc<Schedule<T>>,
    /// Per-dimension mean and standard deviation of the training targets.
    pub data_mean: Vec<T>,
    pub data_std: Vec<T>,
    pub step: u64,
}

impl<T: Real> TrainState<T> {
    /// Fits the bank from the training targets (or uses `N(0, I)` for the
    /// baseline) and initializes a fresh denoiser.
    pub fn init(config: TrainConfig, data: &EmbeddingDataset) -> Result<Self, TrainError> {
        config.validate()?;
        let bank = if config.baseline {
            ClusterBank::standard(data.dim())
        } else {
            let rows: Vec<Vec<T>> = data.images.rows().map(convert).collect();
            fit_kmeans(
                &rows,
                config.k,
                config.kmeans_iters,
                config.seed,
                T::lit(config.kappa),
                T::lit(config.xi),
            )?
        };
        Self::with_bank(config, data, bank)
    }

    /// Uses a precomputed bank. The baseline override still wins.
    pub fn with_bank(config: TrainConfig, data: &EmbeddingDataset, bank: ClusterBank<T>) -> Result<Self, TrainError> {
        config.validate()?;
        let mut bank = if config.baseline {
            ClusterBank::standard(data.dim())
        } else {
            bank
        };
        if bank.dim() != data.dim() {
            return Err(TrainError::DimensionMismatch {
                expected: bank.dim(),
                got: data.dim(),
            });
        }
        if !config.baseline && bank.k() != config.k {
            return Err(TrainError::Config(format!(
                "bank has {} clusters, config asks for {}",
                bank.k(),
                config.k
            )));
        }
        bank.set_xi(T::lit(config.xi));
        let learnable = config.learnable_bank && !config.baseline;
        if learnable {
            bank.make_learnable();
        }
        let (mean, std) = data_stats(&data.images)?;
        let params = DenoiserParams::init(config.denoiser_config(data.dim()), config.seed)?;
        Ok(Self {
            config,
            params,
            opt: AdamW::new(config.adamw()),
            bank,
            bank_opt: learnable.then(|| AdamW::new(config.adamw())),
            schedule: Arc::new(config.schedule()?),
            data_mean: convert(&mean),
            data_std: convert(&std),
            step: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.params.config.dim
    }

    /// One process per bank entry, sharing the schedule.
    pub fn processes(&self) -> Vec<ShiftedProcess<T>> {
        self.bank
            .gaussians()
            .iter()
            .map(|g| ShiftedProcess::new(self.schedule.clone(), g.clone(), T::lit(self.config.kappa)))
            .collect()
    }

    /// Random stream for step `step`: a function of the seed and the step
    /// alone, so resuming from a checkpoint replays the same draws.
    pub fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step);
        rng
    }

    fn draw_item<R: Rng>(&self, rng: &mut R) -> ItemDraw<T> {
        let t = rng.random_range(1..=self.config.timesteps);
        let dropped = rng.random::<f64>() < self.config.drop_prob;
        let noise = (0..self.dim())
            .map(|_| T::lit(rng.sample(StandardNormal)))
            .collect();
        ItemDraw {
            t,
            dropped,
            noise,
            mc_seed: rng.next_u64(),
        }
    }

    /// Loss gradients for θ on a batch of `(z0, cond)` pairs. The bank is read
    /// but never differentiated.
    pub fn theta_gradients<V: AsRef<[T]>>(
        &self,
        batch: &[(V, V)],
        draws: &[ItemDraw<T>],
    ) -> Result<ThetaGradients<T>, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let procs = self.processes();
        let inv_b = T::one() / T::lit(batch.len() as f64);
        let mut grads = self.params.zeros_like();
        let mut loss = T::zero();
        let mut kl = T::zero();
        let mut clusters = Vec::with_capacity(batch.len());
        for ((z0, cond), draw) in batch.iter().zip(draws) {
            let (z0, cond) = (z0.as_ref(), cond.as_ref());
            if z0.len() != self.dim() || cond.len() != self.dim() {
                return Err(TrainError::DimensionMismatch {
                    expected: self.dim(),
                    got: z0.len().max(cond.len()),
                });
            }
            let c = self
                .bank
                .assign(cond, self.config.assign_mode, self.config.mc_samples, draw.mc_seed)?
                .index;
            let proc = &procs[c];
            let item = item_loss(
                self.config.loss_mode,
                proc,
                &self.params,
                z0,
                cond,
                c,
                draw.t,
                &draw.noise,
                draw.dropped,
            )?;
            let d_out: Vec<T> = item.d_z0_hat.iter().map(|&g| g * inv_b).collect();
            self.params.accumulate_backward(&item.cache, &d_out, &mut grads)?;
            loss += item.loss * inv_b;
            kl += proc.kl_terminal(z0)? * inv_b;
            clusters.push(c);
        }
        Ok(ThetaGradients {
            grads,
            loss,
            kl_terminal: kl,
            clusters,
        })
    }

    /// One optimization step: the θ update, then (for a learnable bank) a
    /// separate `L_p` update of the bank on the same batch.
    pub fn train_step<V: AsRef<[T]>, R: Rng>(
        &mut self,
        batch: &[(V, V)],
        rng: &mut R,
    ) -> Result<StepMetrics, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let draws: Vec<ItemDraw<T>> = batch.iter().map(|_| self.draw_item(rng)).collect();
        let theta = self.theta_gradients(batch, &draws)?;
        {
            let grads = theta.grads.slices();
            self.opt.step(&mut self.params.slices_mut(), &grads)?;
        }

        let mut lp_loss = None;
        if let Some(bank_opt) = self.bank_opt.as_mut() {
            let noise = LpNoise::draw(rng, batch.len(), self.bank.k(), self.bank.dim());
            let pairs: Vec<(&[T], usize)> = batch
                .iter()
                .zip(&theta.clusters)
                .map(|((z0, _), &c)| (z0.as_ref(), c))
                .collect();
            let lp = self.bank.lp_loss(&pairs, &noise)?;
            let mut result = Ok(());
            self.bank.update_with(|slices| result = bank_opt.step(slices, &lp.grads()))?;
            result?;
            lp_loss = Some(lp.loss.as_f64());
        }

        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            loss: theta.loss.as_f64(),
            kl_terminal: theta.kl_terminal.as_f64(),
            lp_loss,
        })
    }

    /// Samples a batch (with replacement) from `data` and takes one step,
    /// using the stream for the current step counter.
    pub fn train_step_on(&mut self, data: &EmbeddingDataset) -> Result<StepMetrics, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        if data.dim() != self.dim() {
            return Err(TrainError::DimensionMismatch {
                expected: self.dim(),
                got: data.dim(),
            });
        }
        let mut rng = self.step_rng(self.step);
        let batch: Vec<(Vec<T>, Vec<T>)> = (0..self.config.batch)
            .map(|_| {
                let i = rng.random_range(0..data.len());
                (convert(data.images.row(i)), convert(data.conds.row(i)))
            })
            .collect();
        self.train_step(&batch, &mut rng)
    }

    /// Runs until `step == target`, writing `step,loss,kl_terminal,lp_loss,wall_ms`
    /// rows to `log` (if given) every `log_every` steps and at the end.
    /// Returns the metrics of each logged step.
    pub fn train_until(
        &mut self,
        data: &EmbeddingDataset,
        target: u64,
        mut log: Option<&mut dyn Write>,
    ) -> Result<Vec<StepMetrics>, TrainError> {
        let start = Instant::now();
        let mut logged = Vec::new();
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{LOG_HEADER}")?;
        }
        while self.step < target {
            let m = self.train_step_on(data)?;
            if m.step % self.config.log_every == 0 || m.step == target {
                if let Some(w) = log.as_deref_mut() {
                    let lp = m.lp_loss.map_or_else(|| "NaN".to_string(), |v| v.to_string());
                    writeln!(
                        w,
                        "{},{},{},{},{}",
                        m.step,
                        m.loss,
                        m.kl_terminal,
                        lp,
                        start.elapsed().as_millis()
                    )?;
                }
                logged.push(m);
            }
        }
        Ok(logged)
    }
}
