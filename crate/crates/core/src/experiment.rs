//! Experiment plumbing shared by the command line and the acceptance suite:
//! config documents, paired shifted/baseline comparisons, similarity reports,
//! timestep traces, k-sweeps and cluster-selection histograms.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::ClusterBank;
use crate::data::{gen_synthetic, DataError, EmbeddingDataset, PairingManifest, SyntheticSpec};
use crate::sampler::{sample_prior, stride_schedule, Sample, SampleConfig, SampleError};
use crate::scalar::cosine;
use crate::trainer::{TrainConfig, TrainError, TrainState};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("empty evaluation set")]
    EmptyEval,
    #[error("evaluation data has dimension {got}, checkpoint expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Sample(#[from] SampleError),
}

/// Where the paired embeddings come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// Path to a pairing manifest, relative to the config file.
    Manifest(PathBuf),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub k_list: Vec<usize>,
    pub learnable: Vec<bool>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            k_list: vec![1, 8],
            learnable: vec![false, true],
        }
    }
}

/// A complete experiment description. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub eval_fraction: f64,
    /// Evaluate on at most this many held-out pairs.
    pub eval_limit: Option<usize>,
    pub split_seed: u64,
    /// Seeds for repeated paired runs; each sets the training and sampling seed.
    pub seeds: Vec<u64>,
    pub sweep: SweepConfig,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            eval_fraction: 0.1,
            eval_limit: None,
            split_seed: 0,
            seeds: vec![0],
            sweep: SweepConfig::default(),
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(ExperimentError::Config("eval_fraction must lie in (0, 1)".into()));
        }
        if self.eval_limit == Some(0) {
            return Err(ExperimentError::Config("eval_limit must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(ExperimentError::Config("seeds must not be empty".into()));
        }
        self.train.validate()?;
        self.sample.validate(self.train.timesteps)?;
        Ok(())
    }

    /// Sets the training and sampling seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        out.train.seed = seed;
        out.sample.seed = seed;
        out
    }

    /// Loads or generates the pairs and splits them into (train, eval).
    /// `base` resolves a relative manifest path.
    pub fn prepare_data(&self, base: &Path) -> Result<(EmbeddingDataset, EmbeddingDataset), ExperimentError> {
        let all = match &self.data {
            DataSource::Synthetic(spec) => gen_synthetic(spec)?.0,
            DataSource::Manifest(p) => PairingManifest::load_dataset(&base.join(p))?,
        };
        let (train, mut eval) = all.split(self.eval_fraction, self.split_seed);
        if let Some(limit) = self.eval_limit.filter(|&l| l < eval.len()) {
            eval = eval.select(&(0..limit).collect::<Vec<_>>());
        }
        Ok((train, eval))
    }
}

/// Trains from scratch to `cfg.steps`, fitting the bank unless one is given.
pub fn train_model(
    cfg: TrainConfig,
    train: &EmbeddingDataset,
    bank: Option<ClusterBank<f64>>,
    log: Option<&mut dyn std::io::Write>,
) -> Result<TrainState<f64>, ExperimentError> {
    let mut state = match bank {
        Some(b) => TrainState::with_bank(cfg, train, b)?,
        None => TrainState::init(cfg, train)?,
    };
    state.train_until(train, cfg.steps, log)?;
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                count: 0,
                mean: f64::NAN,
                median: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self {
            count: n,
            mean,
            median,
            std,
        }
    }
}

/// Similarity of sampled embeddings to the held-out ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `cos(ẑ0, z0)` per evaluation pair; a zero-norm sample counts as 0.
    pub cosines: Vec<f64>,
    /// Number of samples whose cosine was undefined.
    pub undefined: usize,
    pub summary: Summary,
    /// Bank index chosen for each pair.
    pub clusters: Vec<usize>,
    /// Selection count per bank index.
    pub cluster_counts: Vec<usize>,
    /// Mean `cos(z_t, z0)` at each strided timestep, in sampling order.
    pub trace: Vec<(usize, f64)>,
}

impl EvalReport {
    pub fn samples_csv(&self) -> String {
        let mut out = String::from("index,cosine,cluster\n");
        for (i, (c, k)) in self.cosines.iter().zip(&self.clusters).enumerate() {
            writeln!(out, "{i},{c},{k}").unwrap();
        }
        out
    }

    pub fn trace_csv(&self) -> String {
        trace_csv(&self.trace)
    }
}

pub fn trace_csv(trace: &[(usize, f64)]) -> String {
    let mut out = String::from("t,cos\n");
    for (t, c) in trace {
        writeln!(out, "{t},{c}").unwrap();
    }
    out
}

fn check_eval(state: &TrainState<f64>, data: &EmbeddingDataset) -> Result<(), ExperimentError> {
    if data.is_empty() {
        return Err(ExperimentError::EmptyEval);
    }
    if data.dim() != state.dim() {
        return Err(ExperimentError::DimensionMismatch {
            expected: state.dim(),
            got: data.dim(),
        });
    }
    Ok(())
}

/// Random stream for evaluation pair `i`: two models sampled with the same
/// config see identical draws.
pub fn pair_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

/// One sample per condition of `data`, pair `i` drawn from [`pair_rng`].
pub fn sample_set(
    state: &TrainState<f64>,
    data: &EmbeddingDataset,
    cfg: &SampleConfig,
) -> Result<Vec<Sample<f64>>, ExperimentError> {
    check_eval(state, data)?;
    (0..data.len())
        .map(|i| Ok(sample_prior(state, data.conds.row(i), cfg, &mut pair_rng(cfg.seed, i))?))
        .collect()
}

/// Samples one embedding per held-out condition and scores it against the
/// paired ground truth.
pub fn eval_similarity(
    state: &TrainState<f64>,
    data: &EmbeddingDataset,
    cfg: &SampleConfig,
) -> Result<EvalReport, ExperimentError> {
    check_eval(state, data)?;
    let steps = stride_schedule(state.schedule.timesteps(), cfg.steps)?;
    let mut trace_sum = vec![0.0; steps.len()];
    let mut cosines = Vec::with_capacity(data.len());
    let mut clusters = Vec::with_capacity(data.len());
    let mut cluster_counts = vec![0; state.bank.k()];
    let mut undefined = 0;
    for i in 0..data.len() {
        let truth = data.images.row(i);
        let s = sample_prior(state, data.conds.row(i), cfg, &mut pair_rng(cfg.seed, i))?;
        for (acc, (_, z)) in trace_sum.iter_mut().zip(&s.trajectory) {
            *acc += cosine(z, truth).unwrap_or(0.0);
        }
        let c = cosine(&s.z0_hat, truth);
        undefined += usize::from(c.is_none());
        cosines.push(c.unwrap_or(0.0).clamp(-1.0, 1.0));
        clusters.push(s.cluster);
        cluster_counts[s.cluster] += 1;
    }
    let n = data.len() as f64;
    Ok(EvalReport {
        summary: Summary::of(&cosines),
        cosines,
        undefined,
        clusters,
        cluster_counts,
        trace: steps.into_iter().zip(trace_sum).map(|(t, s)| (t, s / n)).collect(),
    })
}

/// Mean similarity at each strided timestep, averaged over the eval set.
pub fn step_trace(
    state: &TrainState<f64>,
    data: &EmbeddingDataset,
    cfg: &SampleConfig,
) -> Result<Vec<(usize, f64)>, ExperimentError> {
    Ok(eval_similarity(state, data, cfg)?.trace)
}

/// Top-1 selection histogram of the bank over the eval conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterFreq {
    /// Count per bank index.
    pub counts: Vec<usize>,
    /// `(index, count)` sorted by count descending, ties by index.
    pub ranked: Vec<(usize, usize)>,
}

impl ClusterFreq {
    pub fn zero_bins(&self) -> usize {
        self.counts.iter().filter(|&&c| c == 0).count()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `rank,index,count` rows, most selected first.
    pub fn ranked_csv(&self) -> String {
        let mut out = String::from("rank,index,count\n");
        for (r, (i, c)) in self.ranked.iter().enumerate() {
            writeln!(out, "{},{i},{c}", r + 1).unwrap();
        }
        out
    }

    /// `index,count` rows in index order.
    pub fn counts_csv(&self) -> String {
        let mut out = String::from("index,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(out, "{i},{c}").unwrap();
        }
        out
    }
}

pub fn cluster_freq(bank: &ClusterBank<f64>, data: &EmbeddingDataset) -> Result<ClusterFreq, ExperimentError> {
    if data.is_empty() {
        return Err(ExperimentError::EmptyEval);
    }
    if data.dim() != bank.dim() {
        return Err(ExperimentError::DimensionMismatch {
            expected: bank.dim(),
            got: data.dim(),
        });
    }
    let mut counts = vec![0; bank.k()];
    for cond in data.conds.rows() {
        let a = bank.assign_top1(cond).map_err(TrainError::from)?;
        counts[a.index] += 1;
    }
    let mut ranked: Vec<(usize, usize)> = counts.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ClusterFreq { counts, ranked })
}

/// Shifted and baseline runs trained and evaluated under one seed, one split
/// and one timestep schedule.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub seed: u64,
    pub shifted: EvalReport,
    pub baseline: EvalReport,
    pub shifted_state: TrainState<f64>,
    pub baseline_state: TrainState<f64>,
}

impl Comparison {
    pub fn final_gap(&self) -> f64 {
        self.shifted.summary.mean - self.baseline.summary.mean
    }

    pub fn init_gap(&self) -> f64 {
        self.shifted.trace[0].1 - self.baseline.trace[0].1
    }
}

/// Trains the configured model and its baseline twin (`μ = 0, Σ = I, k = 1`,
/// everything else identical) and evaluates both on the same pairs.
pub fn compare(
    exp: &ExperimentConfig,
    seed: u64,
    train: &EmbeddingDataset,
    eval: &EmbeddingDataset,
) -> Result<Comparison, ExperimentError> {
    let cfg = exp.with_seed(seed);
    let shifted_state = train_model(TrainConfig { baseline: false, ..cfg.train }, train, None, None)?;
    let baseline_state = train_model(TrainConfig { baseline: true, ..cfg.train }, train, None, None)?;
    Ok(Comparison {
        seed,
        shifted: eval_similarity(&shifted_state, eval, &cfg.sample)?,
        baseline: eval_similarity(&baseline_state, eval, &cfg.sample)?,
        shifted_state,
        baseline_state,
    })
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub k: usize,
    pub learnable: bool,
    pub seed: u64,
    /// Mean final similarity, or the error that stopped this cell.
    pub result: Result<f64, String>,
}

/// One training run per `(k, learnable, seed)` with an otherwise identical
/// budget. A failing cell is recorded and the sweep moves on.
pub fn sweep_k(
    exp: &ExperimentConfig,
    k_list: &[usize],
    learnable: &[bool],
    train: &EmbeddingDataset,
    eval: &EmbeddingDataset,
) -> Vec<SweepCell> {
    let mut cells = Vec::new();
    for &k in k_list {
        for &l in learnable {
            for &seed in &exp.seeds {
                let cfg = exp.with_seed(seed);
                let tc = TrainConfig {
                    k,
                    learnable_bank: l,
                    baseline: false,
                    ..cfg.train
                };
                let result = train_model(tc, train, None, None)
                    .and_then(|s| eval_similarity(&s, eval, &cfg.sample))
                    .map(|r| r.summary.mean)
                    .map_err(|e| e.to_string());
                cells.push(SweepCell {
                    k,
                    learnable: l,
                    seed,
                    result,
                });
            }
        }
    }
    cells
}

/// `k,learnable,seed,mean_cosine,error`; failed cells carry an empty
/// similarity and the error text.
pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from("k,learnable,seed,mean_cosine,error\n");
    for c in cells {
        let (sim, err) = match &c.result {
            Ok(v) => (v.to_string(), String::new()),
            Err(e) => (String::new(), e.replace([',', '\n'], ";")),
        };
        writeln!(out, "{},{},{},{sim},{err}", c.k, c.learnable, c.seed).unwrap();
    }
    out
}

/// Seed-averaged similarity of the successful cells matching `(k, learnable)`.
pub fn sweep_mean(cells: &[SweepCell], k: usize, learnable: bool) -> Option<f64> {
    let vals: Vec<f64> = cells
        .iter()
        .filter(|c| c.k == k && c.learnable == learnable)
        .filter_map(|c| c.result.as_ref().ok().copied())
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Embeddings;
    use crate::gaussian::DiagGaussian;
    use crate::trainer::ModelConfig;

    fn small_exp() -> ExperimentConfig {
        ExperimentConfig {
            data: DataSource::Synthetic(SyntheticSpec {
                dim: 4,
                concepts: 3,
                pairs: 300,
                seed: 1,
                ..Default::default()
            }),
            train: TrainConfig {
                timesteps: 50,
                batch: 8,
                steps: 10,
                k: 3,
                kmeans_iters: 10,
                model: ModelConfig {
                    hidden: 8,
                    depth: 1,
                    time_embed_dim: 4,
                },
                ..Default::default()
            },
            sample: SampleConfig {
                steps: 5,
                ..Default::default()
            },
            eval_limit: Some(20),
            ..Default::default()
        }
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentConfig::from_json("{}").is_ok());
        assert!(ExperimentConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"train": {"bogus": 1}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"eval_fraction": 1.5}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"sample": {"steps": 5000}}"#).is_err());
        let c = ExperimentConfig::from_json(r#"{"data": {"manifest": "m.json"}, "seeds": [1, 2]}"#).unwrap();
        assert_eq!(c.data, DataSource::Manifest("m.json".into()));
        let echo = serde_json::to_string(&small_exp()).unwrap();
        assert_eq!(ExperimentConfig::from_json(&echo).unwrap(), small_exp());
    }

    #[test]
    fn summary_values() {
        let s = Summary::of(&[1.0, 3.0, 2.0, 4.0]);
        assert_eq!((s.count, s.mean, s.median), (4, 2.5, 2.5));
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(Summary::of(&[0.5]).std, 0.0);
    }

    #[test]
    fn report_is_structurally_sound() {
        let exp = small_exp();
        let (train, eval) = exp.prepare_data(Path::new(".")).unwrap();
        assert_eq!(eval.len(), 20);
        let state = train_model(exp.train, &train, None, None).unwrap();
        let r = eval_similarity(&state, &eval, &exp.sample).unwrap();
        assert_eq!(r.cosines.len(), 20);
        assert_eq!(r.cluster_counts.iter().sum::<usize>(), 20);
        assert!(r.cosines.iter().all(|c| (-1.0..=1.0).contains(c)));
        assert!((-1.0..=1.0).contains(&r.summary.mean));
        assert_eq!(r.trace.len(), exp.sample.steps);
        assert!(r.trace.windows(2).all(|w| w[0].0 > w[1].0));
        assert_eq!(r.samples_csv().lines().count(), 21);
        let one = SampleConfig { steps: 1, ..exp.sample };
        let t = step_trace(&state, &eval, &one).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].0, 50);
    }

    #[test]
    fn oracle_identity_model_scores_one() {
        // Zero network with a zero-variance, z0-centred bank: the sampler
        // starts at and returns the truth whenever the bank entry equals it.
        let exp = small_exp();
        let rows = [[0.6, 0.8, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
        let data = EmbeddingDataset::new(
            Embeddings::from_rows(4, &rows).unwrap(),
            Embeddings::from_rows(4, &rows).unwrap(),
            None,
        )
        .unwrap();
        let bank = ClusterBank::new(
            rows.iter()
                .map(|r| DiagGaussian::new(r.to_vec(), vec![1e-12; 4]).unwrap())
                .collect(),
            0.0,
        );
        let mut state = TrainState::with_bank(TrainConfig { k: 2, ..exp.train }, &data, bank).unwrap();
        // Identity network: ẑ0 = z_t.
        let cfg = state.params.config;
        state.params.in_proj.weight.data.iter_mut().for_each(|x| *x = 0.0);
        state.params.time_proj.weight.data.iter_mut().for_each(|x| *x = 0.0);
        state.params.cond_proj.weight.data.iter_mut().for_each(|x| *x = 0.0);
        state.params.cluster_embed.data.iter_mut().for_each(|x| *x = 0.0);
        state.params.blocks.clear();
        state.params.config.depth = 0;
        for j in 0..cfg.dim {
            state.params.in_proj.weight.data[j * cfg.dim + j] = 1.0;
            state.params.head.weight.data[j * cfg.hidden + j] = 1.0;
        }
        let r = eval_similarity(&state, &data, &exp.sample).unwrap();
        assert!(r.cosines.iter().all(|&c| (c - 1.0).abs() < 1e-9), "{:?}", r.cosines);
    }

    #[test]
    fn cluster_freq_counts_and_ranking() {
        let exp = small_exp();
        let (train, eval) = exp.prepare_data(Path::new(".")).unwrap();
        let single = ClusterBank::new(vec![DiagGaussian::standard(4)], 0.0);
        let f = cluster_freq(&single, &eval).unwrap();
        assert_eq!(f.counts, vec![eval.len()]);
        let state = train_model(TrainConfig { steps: 0, ..exp.train }, &train, None, None).unwrap();
        let f = cluster_freq(&state.bank, &eval).unwrap();
        assert_eq!(f.total(), eval.len());
        assert!(f.ranked.windows(2).all(|w| w[0].1 >= w[1].1));
        assert_eq!(f.ranked_csv().lines().next(), Some("rank,index,count"));
        let empty = eval.select(&[]);
        assert!(matches!(cluster_freq(&state.bank, &empty), Err(ExperimentError::EmptyEval)));
    }

    #[test]
    fn sweep_is_deterministic_and_records_failures() {
        let exp = small_exp();
        let (train, eval) = exp.prepare_data(Path::new(".")).unwrap();
        let a = sweep_k(&exp, &[1], &[false], &train, &eval);
        assert_eq!(a.len(), 1);
        let b = sweep_k(&exp, &[1, 1], &[false], &train, &eval);
        assert_eq!(b[0].result, b[1].result);
        assert_eq!(a[0].result, b[0].result);
        // k larger than the training set cannot be fitted; the sweep goes on.
        let c = sweep_k(&exp, &[100_000, 2], &[false], &train, &eval);
        assert!(c[0].result.is_err() && c[1].result.is_ok());
        let csv = sweep_csv(&c);
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(sweep_mean(&c, 2, false), c[1].result.clone().ok());
    }

    #[test]
    fn comparison_shares_schedule_and_pairs() {
        let exp = small_exp();
        let (train, eval) = exp.prepare_data(Path::new(".")).unwrap();
        let cmp = compare(&exp, 3, &train, &eval).unwrap();
        assert_eq!(cmp.shifted.cosines.len(), cmp.baseline.cosines.len());
        let ts = |r: &EvalReport| r.trace.iter().map(|x| x.0).collect::<Vec<_>>();
        assert_eq!(ts(&cmp.shifted), ts(&cmp.baseline));
        assert_eq!(cmp.baseline_state.bank.k(), 1);
        assert_eq!(cmp.shifted_state.bank.k(), 3);
        assert_eq!(cmp.shifted_state.config.seed, 3);
    }
}
