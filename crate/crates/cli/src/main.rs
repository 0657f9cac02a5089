//! `shiftdiff`: generate data, fit banks, train, sample and evaluate shifted
//! diffusion priors. Exit codes: 0 success, 1 usage error, 2 runtime error.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use shiftdiff::checkpoint::{load_checkpoint, save_checkpoint};
use shiftdiff::cluster::{fit_kmeans, ClusterBank};
use shiftdiff::data::{gen_synthetic, write_atomic, write_emb, EmbeddingDataset, Embeddings, PairingManifest};
use shiftdiff::experiment::{
    cluster_freq, eval_similarity, sample_set, sweep_csv, sweep_k, train_model, DataSource,
    ExperimentConfig,
};
use shiftdiff::{DiagGaussian, TrainState};

use manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "shiftdiff", version, about = "Shifted diffusion priors over embedding spaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired embedding set (EMB1 files plus manifest).
    GenData(Common),
    /// Fit the k-means cluster bank on the training targets.
    FitClusters(Common),
    /// Train a denoiser and write a checkpoint plus training log.
    Train(Common),
    /// Draw one embedding per held-out condition.
    Sample(Common),
    /// Similarity of samples to held-out ground truth.
    Eval(Common),
    /// Mean similarity at each sampling timestep.
    Trace(Common),
    /// Train and evaluate one model per (k, learnable, seed) cell.
    SweepK(Common),
    /// How often each bank entry is selected on held-out conditions.
    ClusterFreq(Common),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (JSON). Defaults are used when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Seed for training and sampling (for gen-data: the data seed).
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Training steps for train/sweep-k; sampling steps for sample/eval/trace.
    #[arg(long, value_name = "N")]
    steps: Option<u64>,
    /// Classifier-free guidance weight.
    #[arg(long, value_name = "W")]
    guidance: Option<f64>,
    /// Number of clusters.
    #[arg(long, value_name = "N")]
    k: Option<usize>,
    /// Train the cluster bank jointly (true/false).
    #[arg(long, value_name = "BOOL")]
    learnable: Option<bool>,
    /// Vanilla diffusion: forces mu = 0, Sigma = I, k = 1.
    #[arg(long)]
    baseline: bool,
    /// Pairing manifest to use instead of the config's data source.
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    /// Checkpoint to read (default: OUT/checkpoint.sdckpt).
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Cluster bank written by fit-clusters (train only).
    #[arg(long, value_name = "PATH")]
    clusters: Option<PathBuf>,
}

/// Errors the user can fix by changing the invocation exit with 1.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

/// Cluster bank file written by `fit-clusters`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankFile {
    xi: f64,
    kappa: f64,
    gaussians: Vec<DiagGaussian<f64>>,
}

impl BankFile {
    fn into_bank(self) -> anyhow::Result<ClusterBank<f64>> {
        if self.gaussians.is_empty() {
            bail!("cluster file has no gaussians");
        }
        let d = self.gaussians[0].dim();
        if self.gaussians.iter().any(|g| g.dim() != d) {
            bail!("cluster file mixes dimensions");
        }
        Ok(ClusterBank::new(self.gaussians, self.xi))
    }
}

struct Ctx {
    name: &'static str,
    args: Common,
    exp: ExperimentConfig,
    /// Directory relative paths in the config resolve against.
    base: PathBuf,
    manifest: RunManifest,
}

impl Ctx {
    fn new(name: &'static str, args: Common) -> Result<Self, Failure> {
        let mut manifest = RunManifest::new(name);
        let (mut exp, base) = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
                let exp = ExperimentConfig::from_json(&text)
                    .map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))?;
                manifest.add_input(path, text.as_bytes());
                let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
                (exp, base)
            }
            None => (ExperimentConfig::default(), PathBuf::new()),
        };
        if let Some(seed) = args.seed {
            exp = exp.with_seed(seed);
            exp.seeds = vec![seed];
        }
        if let Some(w) = args.guidance {
            exp.sample.guidance_w = w;
        }
        if let Some(k) = args.k {
            exp.train.k = k;
            exp.sweep.k_list = vec![k];
        }
        if let Some(l) = args.learnable {
            exp.train.learnable_bank = l;
            exp.sweep.learnable = vec![l];
        }
        if args.baseline {
            exp.train.baseline = true;
        }
        if let Some(steps) = args.steps {
            match name {
                "train" | "sweep-k" => exp.train.steps = steps,
                _ => exp.sample.steps = steps as usize,
            }
        }
        if let Some(p) = &args.data {
            exp.data = DataSource::Manifest(std::path::absolute(p).unwrap_or_else(|_| p.clone()));
        }
        exp.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        Ok(Self {
            name,
            args,
            exp,
            base,
            manifest,
        })
    }

    fn out(&self, file: &str) -> PathBuf {
        self.args.out.join(file)
    }

    fn write(&mut self, file: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let path = self.out(file);
        write_atomic(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.manifest.outputs.push(file.to_string());
        Ok(())
    }

    fn track(&mut self, path: &Path) -> anyhow::Result<()> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.manifest.add_input(path, &bytes);
        Ok(())
    }

    fn data(&mut self) -> anyhow::Result<(EmbeddingDataset, EmbeddingDataset)> {
        if let DataSource::Manifest(p) = &self.exp.data {
            let p = self.base.join(p);
            self.track(&p)?;
        }
        Ok(self.exp.prepare_data(&self.base)?)
    }

    fn checkpoint(&mut self) -> anyhow::Result<TrainState<f64>> {
        let path = self
            .args
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out("checkpoint.sdckpt"));
        self.track(&path)?;
        let mut state =
            load_checkpoint::<f64>(&path).with_context(|| format!("loading {}", path.display()))?;
        state.config.assign_mode = self.exp.sample.assign_mode;
        Ok(state)
    }

    fn finish(mut self, started: Instant) -> anyhow::Result<()> {
        self.manifest.config = serde_json::to_value(&self.exp)?;
        self.manifest.wall_ms = started.elapsed().as_millis() as u64;
        let json = self.manifest.finish()?;
        let name = format!("{}.manifest.json", self.name);
        let path = self.out(&name);
        write_atomic(&path, &json).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

fn json_bytes<S: Serialize>(v: &S) -> anyhow::Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v)?;
    out.push(b'\n');
    Ok(out)
}

fn gen_data(ctx: &mut Ctx) -> anyhow::Result<()> {
    let DataSource::Synthetic(mut spec) = ctx.exp.data.clone() else {
        bail!("gen-data needs a synthetic data source");
    };
    if let Some(seed) = ctx.args.seed {
        spec.seed = seed;
    }
    let (data, _) = gen_synthetic(&spec)?;
    let dir = ctx.out("data");
    PairingManifest::save_dataset(&dir, &data)?;
    for f in ["images.emb", "conds.emb", "labels.json", "manifest.json"] {
        ctx.manifest.outputs.push(format!("data/{f}"));
    }
    println!("wrote {} pairs of dimension {} to {}", data.len(), data.dim(), dir.display());
    Ok(())
}

fn fit_clusters(ctx: &mut Ctx) -> anyhow::Result<()> {
    let (train, _) = ctx.data()?;
    let t = &ctx.exp.train;
    let bank = if t.baseline {
        ClusterBank::standard(train.dim())
    } else {
        let rows: Vec<&[f64]> = train.images.rows().collect();
        fit_kmeans(&rows, t.k, t.kmeans_iters, t.seed, t.kappa, t.xi)?
    };
    let file = BankFile {
        xi: t.xi,
        kappa: t.kappa,
        gaussians: bank.gaussians().to_vec(),
    };
    ctx.write("clusters.json", &json_bytes(&file)?)?;
    println!("fitted {} clusters on {} rows", bank.k(), train.len());
    Ok(())
}

fn train(ctx: &mut Ctx) -> anyhow::Result<()> {
    let (train, _) = ctx.data()?;
    let bank = match ctx.args.clusters.clone() {
        Some(p) => {
            let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            ctx.manifest.add_input(&p, text.as_bytes());
            let file: BankFile =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            Some(file.into_bank()?)
        }
        None => None,
    };
    let mut log = Vec::new();
    let state = train_model(ctx.exp.train, &train, bank, Some(&mut log))?;
    ctx.write("train_log.csv", &log)?;
    let path = ctx.out("checkpoint.sdckpt");
    save_checkpoint(&state, &path)?;
    ctx.manifest.outputs.push("checkpoint.sdckpt".into());
    println!("trained {} steps; checkpoint at {}", state.step, path.display());
    Ok(())
}

fn sample(ctx: &mut Ctx) -> anyhow::Result<()> {
    let state = ctx.checkpoint()?;
    let (_, eval) = ctx.data()?;
    let mut samples = Embeddings::new(state.dim());
    let mut csv = String::from("index,cluster\n");
    for (i, s) in sample_set(&state, &eval, &ctx.exp.sample)?.iter().enumerate() {
        samples.push(&s.z0_hat)?;
        csv.push_str(&format!("{i},{}\n", s.cluster));
    }
    let path = ctx.out("samples.emb");
    write_emb(&path, &samples)?;
    ctx.manifest.outputs.push("samples.emb".into());
    ctx.write("sample_clusters.csv", csv.as_bytes())?;
    println!("wrote {} samples to {}", samples.len(), path.display());
    Ok(())
}

fn eval(ctx: &mut Ctx) -> anyhow::Result<()> {
    let state = ctx.checkpoint()?;
    let (_, eval) = ctx.data()?;
    let report = eval_similarity(&state, &eval, &ctx.exp.sample)?;
    ctx.write("eval_samples.csv", report.samples_csv().as_bytes())?;
    ctx.write("eval_trace.csv", report.trace_csv().as_bytes())?;
    #[derive(Serialize)]
    struct Out<'a> {
        summary: &'a shiftdiff::experiment::Summary,
        undefined: usize,
        cluster_counts: &'a [usize],
        trace: &'a [(usize, f64)],
    }
    let out = Out {
        summary: &report.summary,
        undefined: report.undefined,
        cluster_counts: &report.cluster_counts,
        trace: &report.trace,
    };
    ctx.write("eval_report.json", &json_bytes(&out)?)?;
    let s = &report.summary;
    println!(
        "n={} mean={:.4} median={:.4} std={:.4}",
        s.count, s.mean, s.median, s.std
    );
    Ok(())
}

fn trace(ctx: &mut Ctx) -> anyhow::Result<()> {
    let state = ctx.checkpoint()?;
    let (_, eval) = ctx.data()?;
    let report = eval_similarity(&state, &eval, &ctx.exp.sample)?;
    ctx.write("trace.csv", report.trace_csv().as_bytes())?;
    if let (Some(first), Some(last)) = (report.trace.first(), report.trace.last()) {
        println!("t={} cos={:.4} ... t={} cos={:.4}", first.0, first.1, last.0, last.1);
    }
    Ok(())
}

fn sweep(ctx: &mut Ctx) -> anyhow::Result<()> {
    let (train, eval) = ctx.data()?;
    let cells = sweep_k(&ctx.exp, &ctx.exp.sweep.k_list, &ctx.exp.sweep.learnable, &train, &eval);
    ctx.write("sweep.csv", sweep_csv(&cells).as_bytes())?;
    for c in &cells {
        match &c.result {
            Ok(v) => println!("k={} learnable={} seed={} mean={v:.4}", c.k, c.learnable, c.seed),
            Err(e) => eprintln!("k={} learnable={} seed={} failed: {e}", c.k, c.learnable, c.seed),
        }
    }
    Ok(())
}

fn freq(ctx: &mut Ctx) -> anyhow::Result<()> {
    let state = ctx.checkpoint()?;
    let (_, eval) = ctx.data()?;
    let f = cluster_freq(&state.bank, &eval)?;
    ctx.write("cluster_freq.csv", f.ranked_csv().as_bytes())?;
    ctx.write("cluster_counts.csv", f.counts_csv().as_bytes())?;
    println!("{} conditions over {} clusters; {} never selected", f.total(), f.counts.len(), f.zero_bins());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let started = Instant::now();
    let (name, args, body): (&'static str, Common, fn(&mut Ctx) -> anyhow::Result<()>) = match cli.command {
        Command::GenData(a) => ("gen-data", a, gen_data),
        Command::FitClusters(a) => ("fit-clusters", a, fit_clusters),
        Command::Train(a) => ("train", a, train),
        Command::Sample(a) => ("sample", a, sample),
        Command::Eval(a) => ("eval", a, eval),
        Command::Trace(a) => ("trace", a, trace),
        Command::SweepK(a) => ("sweep-k", a, sweep),
        Command::ClusterFreq(a) => ("cluster-freq", a, freq),
    };
    let mut ctx = Ctx::new(name, args)?;
    fs::create_dir_all(&ctx.args.out)
        .with_context(|| format!("creating {}", ctx.args.out.display()))?;
    body(&mut ctx)?;
    ctx.finish(started)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
