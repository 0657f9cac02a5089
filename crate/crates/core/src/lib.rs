//! Shifted diffusion over embedding spaces.
//!
//! Numerical types are generic over [`Real`] (`f32` or `f64`). The aliases
//! below fix the scalar to `f64`, which is what the pipeline and the CLI use.

pub mod checkpoint;
pub mod cluster;
pub mod data;
pub mod denoiser;
pub mod experiment;
pub mod gaussian;
pub mod optim;
pub mod process;
pub mod sampler;
pub mod scalar;
pub mod schedule;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use cluster::{
    fit_kmeans, kmeans, AssignMode, Assignment, ClusterBank, ClusterError, KMeans, LpLoss, LpNoise,
};
pub use data::{
    data_stats, gen_synthetic, read_emb, write_emb, EmbeddingDataset, Embeddings, PairingManifest,
    SyntheticSpec,
};
pub use denoiser::{DenoiserConfig, DenoiserError, DenoiserParams, ForwardCache, Tensor};
pub use experiment::{
    cluster_freq, compare, eval_similarity, step_trace, sweep_k, ClusterFreq, Comparison, DataSource,
    EvalReport, ExperimentConfig, ExperimentError, SweepCell,
};
pub use gaussian::{kl_diag, nll_diag, DiagGaussian, GaussianError};
pub use optim::{AdamW, AdamWConfig, OptimError};
pub use process::{PosteriorCoeffs, ProcessError, ShiftedProcess};
pub use sampler::{sample_prior, stride_schedule, trajectory_similarity, Sample, SampleConfig, SampleError};
pub use scalar::{cosine, Real};
pub use schedule::{make_linear_schedule, LinearScheduleSpec, Schedule, ScheduleError};
pub use trainer::{
    elbo_term, loss_elbo, loss_simple, LossMode, ModelConfig, StepMetrics, TrainConfig, TrainError, TrainState,
};

pub type Gaussian64 = DiagGaussian<f64>;
pub type Schedule64 = Schedule<f64>;
pub type Process64 = ShiftedProcess<f64>;
pub type Bank64 = ClusterBank<f64>;
pub type Denoiser64 = DenoiserParams<f64>;
pub type State64 = TrainState<f64>;
pub type Sample64 = Sample<f64>;

pub type Gaussian32 = DiagGaussian<f32>;
pub type State32 = TrainState<f32>;
