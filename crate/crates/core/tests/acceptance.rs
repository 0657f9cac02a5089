//! Acceptance suite. Prints one line per criterion and exits non-zero when
//! any criterion fails.
//!
//! Set `SHIFTDIFF_SKIP_EXPERIMENTS=1` to skip the training experiments
//! (A6 to A9), which take roughly half an hour on one core.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use shiftdiff::checkpoint::{decode_checkpoint, encode_checkpoint};
use shiftdiff::data::{decode_emb, encode_emb};
use shiftdiff::experiment::{sweep_csv, train_model, trace_csv, Comparison, Summary};
use shiftdiff::trainer::RECON_VAR_SCALE;
use shiftdiff::{
    cluster_freq, compare, fit_kmeans, loss_elbo, make_linear_schedule, read_emb, sample_prior, sweep_k,
    write_emb, ClusterBank, DenoiserConfig, DenoiserParams, DiagGaussian, EmbeddingDataset, Embeddings,
    ExperimentConfig, LpNoise, ModelConfig, SampleConfig, Schedule, ShiftedProcess, SweepCell, TrainConfig,
    TrainState,
};

const REFERENCE: &str = include_str!("../../../configs/reference.json");
const OVERPROVISIONED: &str = include_str!("../../../configs/overprovisioned.json");

const A1_TOL: f64 = 1e-12;
const A1_INSTANCES: usize = 1000;
const A1_SAMPLER_RUNS: usize = 20;
const A1_SECONDS: f64 = 1.0;
const A2_TOL: f64 = 1e-9;
const A2_SCHEDULES: usize = 100;
const A2_MAX_T: usize = 50;
const A2_SECONDS: f64 = 5.0;
const A3_TOL: f64 = 1e-9;
const A4_TOL: f64 = 1e-9;
const A4_INSTANCES: usize = 1000;
const A5_TOL: f64 = 1e-4;
const A5_STEP: f64 = 1e-5;
const A5_INSTANCES: usize = 20;
const A5_SECONDS: f64 = 30.0;
const A6_MIN_GAP: f64 = 0.05;
/// "About 15 minutes" for the six A6 runs, with 10% slack.
const A6_SECONDS: f64 = 15.0 * 60.0 * 1.1;
const A7_MIN_GAP: f64 = 0.2;
const A8_LEARNABLE_SLACK: f64 = 0.01;

struct Line {
    id: &'static str,
    /// `None` marks a criterion that was skipped.
    pass: Option<bool>,
    detail: String,
}

impl Line {
    fn new(id: &'static str, pass: bool, detail: String) -> Self {
        Self {
            id,
            pass: Some(pass),
            detail,
        }
    }

    fn print(&self) {
        let tag = match self.pass {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "SKIP",
        };
        println!("{} {tag} {}", self.id, self.detail);
    }
}

fn normals(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn default_schedule() -> Arc<Schedule<f64>> {
    Arc::new(make_linear_schedule(1000, 1e-4, 0.02).unwrap())
}

fn randomize(params: &mut DenoiserParams<f64>, rng: &mut impl Rng, scale: f64) {
    for s in params.slices_mut() {
        for x in s.iter_mut() {
            *x = scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn random_dataset(rng: &mut impl Rng, n: usize, d: usize) -> EmbeddingDataset {
    let rows = |rng: &mut _| -> Vec<Vec<f64>> { (0..n).map(|_| normals(rng, d)).collect() };
    let images = Embeddings::from_rows(d, &rows(rng)).unwrap();
    let conds = Embeddings::from_rows(d, &rows(rng)).unwrap();
    EmbeddingDataset::new(images, conds, None).unwrap()
}

fn tiny_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch: 8,
        k: 3,
        seed,
        model: ModelConfig {
            hidden: 8,
            depth: 1,
            time_embed_dim: 4,
        },
        ..TrainConfig::default()
    }
}

/// Textbook DDPM quantities under `μ = 0, Σ = I`, written from scratch.
struct Ddpm<'a> {
    s: &'a Schedule<f64>,
}

impl Ddpm<'_> {
    fn ab(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.s.betas()[..t].iter().map(|b| 1.0 - b).product()
        }
    }

    /// `q(x_s | x_t, x_0)` for `s < t`, as (mean coefficient on x0, on x_t, variance).
    fn posterior(&self, t: usize, s: usize) -> (f64, f64, f64) {
        let (ab_t, ab_s) = (self.ab(t), self.ab(s));
        let a = ab_t / ab_s;
        let b = 1.0 - a;
        (
            ab_s.sqrt() * b / (1.0 - ab_t),
            a.sqrt() * (1.0 - ab_s) / (1.0 - ab_t),
            (1.0 - ab_s) / (1.0 - ab_t) * b,
        )
    }
}

fn a1_vanilla() -> Line {
    let started = Instant::now();
    let sched = default_schedule();
    let ddpm = Ddpm { s: &sched };
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut worst_loss: f64 = 0.0;

    for _ in 0..A1_INSTANCES {
        let d = rng.random_range(1..=8);
        let t = rng.random_range(1..=1000);
        let proc = ShiftedProcess::vanilla(sched.clone(), d);
        let (z_prev, z0, zt) = (normals(&mut rng, d), normals(&mut rng, d), normals(&mut rng, d));
        let beta = sched.betas()[t - 1];

        let step = proc.forward_step(&z_prev, t).unwrap();
        let want: Vec<f64> = z_prev.iter().map(|z| (1.0 - beta).sqrt() * z).collect();
        worst = worst.max(max_abs_diff(step.mean(), &want));
        worst = worst.max(max_abs_diff(step.var(), &vec![beta; d]));

        let ab = ddpm.ab(t);
        let marg = proc.forward_marginal(&z0, t).unwrap();
        let want: Vec<f64> = z0.iter().map(|z| ab.sqrt() * z).collect();
        worst = worst.max(max_abs_diff(marg.mean(), &want));
        worst = worst.max(max_abs_diff(marg.var(), &vec![1.0 - ab; d]));

        if t >= 2 {
            let (c0, ct, v) = ddpm.posterior(t, t - 1);
            let post = proc.posterior(&zt, &z0, t).unwrap();
            let want: Vec<f64> = z0.iter().zip(&zt).map(|(a, b)| c0 * a + ct * b).collect();
            worst = worst.max(max_abs_diff(post.mean(), &want));
            worst = worst.max(max_abs_diff(post.var(), &vec![v; d]));

            let s = rng.random_range(1..t);
            let (c0, ct, v) = ddpm.posterior(t, s);
            let post = proc.strided_posterior(&zt, &z0, t, s).unwrap();
            let want: Vec<f64> = z0.iter().zip(&zt).map(|(a, b)| c0 * a + ct * b).collect();
            worst = worst.max(max_abs_diff(post.mean(), &want));
            worst = worst.max(max_abs_diff(post.var(), &vec![v; d]));
        }

        // Loss term against a randomly weighted network.
        let cfg = DenoiserConfig {
            dim: d,
            hidden: 6,
            depth: 1,
            time_embed_dim: 4,
            clusters: 1,
        };
        let mut params = DenoiserParams::init(cfg, 0).unwrap();
        randomize(&mut params, &mut rng, 0.3);
        let cond = normals(&mut rng, d);
        let eps = normals(&mut rng, d);
        let item = loss_elbo(&proc, &params, &z0, &cond, 0, t, &eps, false).unwrap();
        let xt: Vec<f64> = z0.iter().zip(&eps).map(|(z, e)| ab.sqrt() * z + (1.0 - ab).sqrt() * e).collect();
        let xhat = params.predict_z0(&xt, t, &cond, Some(0), false).unwrap();
        worst = worst.max(max_abs_diff(&item.z0_hat, &xhat));
        let sq: f64 = z0.iter().zip(&xhat).map(|(a, b)| (a - b).powi(2)).sum();
        let want = if t == 1 {
            let v = RECON_VAR_SCALE;
            0.5 * (sq / v + d as f64 * (2.0 * std::f64::consts::PI * v).ln())
        } else {
            let (c0, _, v) = ddpm.posterior(t, t - 1);
            c0 * c0 * sq / (2.0 * v)
        };
        // Bound terms reach 1e4 at small t, so compare relative to max(1, |value|).
        worst_loss = worst_loss.max((item.loss - want).abs() / want.abs().max(1.0));
    }

    // Full sampler runs replayed draw by draw.
    let d = 4;
    let data = random_dataset(&mut rng, 32, d);
    let mut state = TrainState::<f64>::init(
        TrainConfig {
            baseline: true,
            ..tiny_train_config(5)
        },
        &data,
    )
    .unwrap();
    randomize(&mut state.params, &mut rng, 0.3);
    let mut worst_sampler: f64 = 0.0;
    for run in 0..A1_SAMPLER_RUNS {
        let steps = [1, 7, 16, 64][run % 4];
        let w = if run % 2 == 0 { 1.0 } else { 2.5 };
        let cfg = SampleConfig {
            steps,
            guidance_w: w,
            seed: run as u64,
            ..SampleConfig::default()
        };
        let cond = normals(&mut rng, d);
        let got = sample_prior(&state, &cond, &cfg, &mut ChaCha8Rng::seed_from_u64(run as u64)).unwrap();

        let mut r = ChaCha8Rng::seed_from_u64(run as u64);
        r.next_u64();
        let ts: Vec<usize> = (0..steps)
            .map(|i| {
                if i > 0 && i + 1 == steps {
                    1
                } else {
                    (1000.0 - i as f64 * 1000.0 / steps as f64).round() as usize
                }
            })
            .collect();
        let predict = |x: &[f64], t: usize| -> Vec<f64> {
            let c = state.params.predict_z0(x, t, &cond, Some(0), false).unwrap();
            if w == 1.0 {
                return c;
            }
            let u = state.params.predict_z0(x, t, &cond, None, true).unwrap();
            c.iter().zip(&u).map(|(c, u)| u + w * (c - u)).collect()
        };
        let mut x = normals(&mut r, d);
        let mut want = vec![x.clone()];
        for pair in ts.windows(2) {
            let (t, s) = (pair[0], pair[1]);
            let xhat = predict(&x, t);
            let (c0, ct, v) = ddpm.posterior(t, s);
            let e = normals(&mut r, d);
            x = (0..d).map(|j| c0 * xhat[j] + ct * x[j] + v.sqrt() * e[j]).collect();
            want.push(x.clone());
        }
        want.push(predict(&x, *ts.last().unwrap()));
        assert_eq!(got.trajectory.len(), want.len());
        for ((_, g), w) in got.trajectory.iter().zip(&want) {
            worst_sampler = worst_sampler.max(max_abs_diff(g, w));
        }
        worst_sampler = worst_sampler.max(max_abs_diff(&got.z0_hat, want.last().unwrap()));
    }

    let secs = started.elapsed().as_secs_f64();
    let pass = worst <= A1_TOL && worst_loss <= A1_TOL && worst_sampler <= A1_TOL && secs < A1_SECONDS;
    Line::new(
        "A1",
        pass,
        format!(
            "vanilla reduction: max err formulas {worst:.1e}, loss {worst_loss:.1e} (relative), sampler {worst_sampler:.1e} \
             (tol {A1_TOL:.0e}, {A1_INSTANCES} instances + {A1_SAMPLER_RUNS} sampler runs) in {secs:.2}s (< {A1_SECONDS}s)"
        ),
    )
}

fn a2_marginal() -> Line {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for _ in 0..A2_SCHEDULES {
        let betas: Vec<f64> = (0..A2_MAX_T).map(|_| rng.random_range(1e-4..0.3)).collect();
        let d = rng.random_range(1..=8);
        let mu: Vec<f64> = normals(&mut rng, d).iter().map(|x| 2.0 * x).collect();
        let var: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..2.0)).collect();
        let proc = ShiftedProcess::new(
            Arc::new(Schedule::from_betas(betas.clone()).unwrap()),
            DiagGaussian::new(mu.clone(), var.clone()).unwrap(),
            1.0,
        );
        let z0 = normals(&mut rng, d);
        // Compose the one-step kernels exactly: mean and variance recursions.
        let mut m = z0.clone();
        let mut v = vec![0.0; d];
        for (i, &b) in betas.iter().enumerate() {
            let keep = (1.0 - b).sqrt();
            for j in 0..d {
                m[j] = keep * m[j] + (1.0 - keep) * mu[j];
                v[j] = (1.0 - b) * v[j] + b * var[j];
            }
            let got = proc.forward_marginal(&z0, i + 1).unwrap();
            worst = worst.max(max_abs_diff(got.mean(), &m)).max(max_abs_diff(got.var(), &v));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Line::new(
        "A2",
        worst <= A2_TOL && secs < A2_SECONDS,
        format!(
            "closed-form marginal vs {A2_MAX_T}-fold composition on {A2_SCHEDULES} schedules: max err {worst:.1e} \
             (tol {A2_TOL:.0e}) in {secs:.2}s (< {A2_SECONDS}s)"
        ),
    )
}

fn a3_telescoping() -> Line {
    let sched = default_schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let d = 8;
    let mu = normals(&mut rng, d);
    let proc = ShiftedProcess::new(sched.clone(), DiagGaussian::new(mu.clone(), vec![1.0; d]).unwrap(), 1.0);
    let shifts: Vec<Vec<f64>> = (1..=1000).map(|i| proc.shift_term(i).unwrap()).collect();
    let mut worst: f64 = 0.0;
    for t in 1..=1000 {
        let ab_t = sched.alpha_bar(t);
        let mut sum = vec![0.0; d];
        for i in 1..=t {
            let w = (ab_t / sched.alpha_bar(i)).sqrt();
            for j in 0..d {
                sum[j] += shifts[i - 1][j] * w;
            }
        }
        let want: Vec<f64> = mu.iter().map(|m| (1.0 - ab_t.sqrt()) * m).collect();
        worst = worst.max(max_abs_diff(&sum, &want));
    }
    Line::new(
        "A3",
        worst <= A3_TOL,
        format!("telescoping shift sum, t = 1..1000: max |err| {worst:.1e} (tol {A3_TOL:.0e})"),
    )
}

/// Product of two 1-D Gaussian densities in `x`: returns (mean, variance).
fn gaussian_product(m1: f64, v1: f64, m2: f64, v2: f64) -> (f64, f64) {
    let prec = 1.0 / v1 + 1.0 / v2;
    ((m1 / v1 + m2 / v2) / prec, 1.0 / prec)
}

fn a4_posterior() -> Line {
    let sched = default_schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst: f64 = 0.0;
    let mut worst_consistency: f64 = 0.0;
    for _ in 0..A4_INSTANCES {
        let mu = 2.0 * rng.sample::<f64, _>(StandardNormal);
        let sigma = rng.random_range(0.01..3.0);
        let proc = ShiftedProcess::new(sched.clone(), DiagGaussian::new(vec![mu], vec![sigma]).unwrap(), 1.0);
        let t = rng.random_range(2..=1000);
        let s = if rng.random_bool(0.5) { t - 1 } else { rng.random_range(1..t) };
        let (z0, zt): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));

        // Prior q(z_s | z0) and likelihood q(z_t | z_s), the latter as a density in z_s.
        let (ab_s, ab_t) = (sched.alpha_bar(s), sched.alpha_bar(t));
        let prior_m = ab_s.sqrt() * z0 + (1.0 - ab_s.sqrt()) * mu;
        let prior_v = (1.0 - ab_s) * sigma;
        let a = ab_t / ab_s;
        let lik_m = (zt - (1.0 - a.sqrt()) * mu) / a.sqrt();
        let lik_v = (1.0 - a) * sigma / a;
        let (m, v) = gaussian_product(prior_m, prior_v, lik_m, lik_v);

        let post = if s + 1 == t {
            proc.posterior(&[zt], &[z0], t).unwrap()
        } else {
            proc.strided_posterior(&[zt], &[z0], t, s).unwrap()
        };
        worst = worst.max((post.mean()[0] - m).abs()).max((post.var()[0] - v).abs());

        // Averaging the posterior mean over z_t recovers the marginal mean at t - 1.
        let zt_mean = proc.forward_marginal(&[z0], t).unwrap().mean()[0];
        let back = proc.posterior(&[zt_mean], &[z0], t).unwrap().mean()[0];
        let want = proc.forward_marginal(&[z0], t - 1).unwrap().mean()[0];
        worst_consistency = worst_consistency.max((back - want).abs());
    }
    Line::new(
        "A4",
        worst <= A4_TOL && worst_consistency <= A4_TOL,
        format!(
            "posterior vs Gaussian-product oracle on {A4_INSTANCES} instances: max err {worst:.1e}, \
             mean consistency {worst_consistency:.1e} (tol {A4_TOL:.0e})"
        ),
    )
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn a5_gradients() -> Line {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let h = A5_STEP;

    let mut worst_net: f64 = 0.0;
    for _ in 0..A5_INSTANCES {
        let cfg = DenoiserConfig {
            dim: rng.random_range(2..=5),
            hidden: rng.random_range(3..=8),
            depth: rng.random_range(0..=3),
            time_embed_dim: 2 * rng.random_range(1..=3),
            clusters: rng.random_range(1..=3),
        };
        let mut p = DenoiserParams::init(cfg, 0).unwrap();
        randomize(&mut p, &mut rng, 0.5);
        let (z, cond, w) = (normals(&mut rng, cfg.dim), normals(&mut rng, cfg.dim), normals(&mut rng, cfg.dim));
        let t = rng.random_range(1..=1000);
        let dropped = rng.random_bool(0.3);
        let cluster = rng.random_bool(0.8).then(|| rng.random_range(0..cfg.clusters));
        let objective = |q: &DenoiserParams<f64>| -> f64 {
            let out = q.predict_z0(&z, t, &cond, cluster, dropped).unwrap();
            out.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = p.forward(&z, t, &cond, cluster, dropped).unwrap();
        let analytic = p.backward(&cache, &w).unwrap().slices().concat();
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut q = p.clone();
        for ti in 0..q.slices().len() {
            for i in 0..q.slices()[ti].len() {
                let orig = q.slices()[ti][i];
                q.slices_mut()[ti][i] = orig + h;
                let fp = objective(&q);
                q.slices_mut()[ti][i] = orig - h;
                let fm = objective(&q);
                q.slices_mut()[ti][i] = orig;
                numeric.push((fp - fm) / (2.0 * h));
            }
        }
        worst_net = worst_net.max(rel_err(&analytic, &numeric));
    }

    let mut worst_lp: f64 = 0.0;
    for _ in 0..A5_INSTANCES {
        let k = rng.random_range(1..=4);
        let d = rng.random_range(2..=5);
        let gaussians = (0..k)
            .map(|_| {
                let var = (0..d).map(|_| rng.random_range(0.05..1.0)).collect();
                DiagGaussian::new(normals(&mut rng, d), var).unwrap()
            })
            .collect();
        let mut bank = ClusterBank::new(gaussians, rng.random_range(0.0..1.0));
        bank.make_learnable();
        let n = rng.random_range(1..=6);
        let batch: Vec<(Vec<f64>, usize)> = (0..n).map(|_| (normals(&mut rng, d), rng.random_range(0..k))).collect();
        let noise = LpNoise::draw(&mut rng, n, k, d);
        let lp = bank.lp_loss(&batch, &noise).unwrap();
        let analytic = lp.grads().concat();
        let mut numeric = Vec::with_capacity(analytic.len());
        for slot in 0..2 * k {
            for j in 0..d {
                let at = |delta: f64| -> f64 {
                    let mut b = bank.clone();
                    b.update_with(|p| p[slot][j] += delta).unwrap();
                    b.lp_loss(&batch, &noise).unwrap().loss
                };
                numeric.push((at(h) - at(-h)) / (2.0 * h));
            }
        }
        worst_lp = worst_lp.max(rel_err(&analytic, &numeric));
    }

    let secs = started.elapsed().as_secs_f64();
    Line::new(
        "A5",
        worst_net <= A5_TOL && worst_lp <= A5_TOL && secs < A5_SECONDS,
        format!(
            "central differences (step {A5_STEP:.0e}), {A5_INSTANCES} instances each: denoiser rel err {worst_net:.1e}, \
             L_p rel err {worst_lp:.1e} (tol {A5_TOL:.0e}) in {secs:.2}s (< {A5_SECONDS}s)"
        ),
    )
}

fn a10_persistence() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let data = random_dataset(&mut rng, 64, 5);
    let mut failures = Vec::new();

    for learnable in [false, true] {
        let cfg = TrainConfig {
            learnable_bank: learnable,
            ..tiny_train_config(9)
        };
        let run = |steps: u64| {
            let mut s = TrainState::<f64>::init(cfg, &data).unwrap();
            s.train_until(&data, steps, None).unwrap();
            s
        };
        let (a, b) = (run(40), run(40));
        if a != b || encode_checkpoint(&a) != encode_checkpoint(&b) {
            failures.push(format!("same-seed runs differ (learnable={learnable})"));
        }

        let half = run(20);
        let bytes = encode_checkpoint(&half);
        let mut resumed = decode_checkpoint::<f64>(&bytes).unwrap();
        if resumed != half || encode_checkpoint(&resumed) != bytes {
            failures.push(format!("checkpoint round trip (learnable={learnable})"));
        }
        resumed.train_until(&data, 40, None).unwrap();
        if resumed != a {
            failures.push(format!("resume differs from uninterrupted (learnable={learnable})"));
        }
    }

    let dir = tempfile::tempdir().unwrap();
    // EMB1 stores f32, so every f32-representable value must survive exactly.
    let mut rows: Vec<Vec<f64>> = (0..10)
        .map(|_| normals(&mut rng, 3).iter().map(|&x| x as f32 as f64).collect())
        .collect();
    rows.push(vec![-0.0, (f32::MIN_POSITIVE / 3.0) as f64, f32::MAX as f64]);
    rows.push(vec![f32::EPSILON as f64, -(f32::MIN_POSITIVE as f64), (1.0f32 / 3.0) as f64]);
    let emb = Embeddings::from_rows(3, &rows).unwrap();
    let bits = |e: &Embeddings| e.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let encoded = encode_emb(&emb).unwrap();
    let decoded = decode_emb(&encoded).unwrap();
    let path = dir.path().join("x.emb");
    write_emb(&path, &emb).unwrap();
    let from_file = read_emb(&path).unwrap();
    if bits(&decoded) != bits(&emb)
        || decoded.dim() != emb.dim()
        || encode_emb(&decoded).unwrap() != encoded
        || bits(&from_file) != bits(&emb)
        || fs::read(&path).unwrap() != encoded
    {
        failures.push("EMB1 round trip".into());
    }

    let pass = failures.is_empty();
    let detail = if pass {
        "same-seed training bit-identical, resume equals uninterrupted, SDCKPT1 and EMB1 round-trip exactly".into()
    } else {
        failures.join("; ")
    };
    Line::new("A10", pass, detail)
}

fn artifact_dir() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn fmt_list(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| format!("{v:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn experiments(out: &Path) -> Vec<Line> {
    let exp = ExperimentConfig::from_json(REFERENCE).unwrap();
    let (train, eval) = exp.prepare_data(Path::new(".")).unwrap();

    let started = Instant::now();
    let runs: Vec<Comparison> = exp.seeds.iter().map(|&s| compare(&exp, s, &train, &eval).unwrap()).collect();
    let a6_secs = started.elapsed().as_secs_f64();

    let mut summary = String::from("seed,shifted_mean,baseline_mean,final_gap,shifted_init,baseline_init,init_gap\n");
    for c in &runs {
        let tag = format!("seed{}", c.seed);
        fs::write(out.join(format!("shifted_samples_{tag}.csv")), c.shifted.samples_csv()).unwrap();
        fs::write(out.join(format!("baseline_samples_{tag}.csv")), c.baseline.samples_csv()).unwrap();
        fs::write(out.join(format!("shifted_trace_{tag}.csv")), trace_csv(&c.shifted.trace)).unwrap();
        fs::write(out.join(format!("baseline_trace_{tag}.csv")), trace_csv(&c.baseline.trace)).unwrap();
        writeln!(
            summary,
            "{},{},{},{},{},{},{}",
            c.seed,
            c.shifted.summary.mean,
            c.baseline.summary.mean,
            c.final_gap(),
            c.shifted.trace[0].1,
            c.baseline.trace[0].1,
            c.init_gap()
        )
        .unwrap();
    }
    fs::write(out.join("comparison.csv"), summary).unwrap();

    let shifted: Vec<f64> = runs.iter().map(|c| c.shifted.summary.mean).collect();
    let baseline: Vec<f64> = runs.iter().map(|c| c.baseline.summary.mean).collect();
    let gaps: Vec<f64> = runs.iter().map(Comparison::final_gap).collect();
    let init_gaps: Vec<f64> = runs.iter().map(Comparison::init_gap).collect();
    let a6 = Line::new(
        "A6",
        gaps.iter().all(|&g| g >= A6_MIN_GAP) && a6_secs <= A6_SECONDS,
        format!(
            "final similarity gap per seed {} (need >= {A6_MIN_GAP} each); shifted {} baseline {}; {:.0}s for {} runs",
            fmt_list(&gaps),
            fmt_list(&shifted),
            fmt_list(&baseline),
            a6_secs,
            2 * runs.len()
        ),
    );
    let a7 = Line::new(
        "A7",
        init_gaps.iter().all(|&g| g >= A7_MIN_GAP),
        format!(
            "t = T similarity gap per seed {} (need >= {A7_MIN_GAP} each); shifted {} baseline {}",
            fmt_list(&init_gaps),
            fmt_list(&runs.iter().map(|c| c.shifted.trace[0].1).collect::<Vec<_>>()),
            fmt_list(&runs.iter().map(|c| c.baseline.trace[0].1).collect::<Vec<_>>()),
        ),
    );

    // k = 8 fixed cells come from the shifted arm of the A6 runs.
    let mut cells: Vec<SweepCell> = runs
        .iter()
        .map(|c| SweepCell {
            k: exp.train.k,
            learnable: false,
            seed: c.seed,
            result: Ok(c.shifted.summary.mean),
        })
        .collect();
    cells.extend(sweep_k(&exp, &[1], &[false], &train, &eval));
    cells.extend(sweep_k(&exp, &[exp.train.k], &[true], &train, &eval));
    fs::write(out.join("sweep.csv"), sweep_csv(&cells)).unwrap();
    let cell_mean = |k: usize, l: bool| -> Option<f64> {
        let v: Result<Vec<f64>, _> = cells
            .iter()
            .filter(|c| c.k == k && c.learnable == l)
            .map(|c| c.result.clone())
            .collect();
        v.ok().map(|v| mean(&v))
    };
    let a8 = match (cell_mean(1, false), cell_mean(exp.train.k, false), cell_mean(exp.train.k, true)) {
        (Some(k1), Some(k8), Some(k8l)) => Line::new(
            "A8",
            k8 >= k1 && k8l >= k8 - A8_LEARNABLE_SLACK,
            format!(
                "seed-averaged similarity k=1 fixed {k1:.4}, k={k} fixed {k8:.4}, k={k} learnable {k8l:.4} \
                 (need k={k} fixed >= k=1 fixed, learnable >= fixed - {A8_LEARNABLE_SLACK})",
                k = exp.train.k
            ),
        ),
        _ => Line::new("A8", false, format!("a sweep cell failed: {}", sweep_csv(&cells).replace('\n', " | "))),
    };

    vec![a6, a7, a8, a9_cluster_freq(out, &train, &eval)]
}

fn a9_cluster_freq(out: &Path, train: &EmbeddingDataset, eval: &EmbeddingDataset) -> Line {
    let exp = ExperimentConfig::from_json(OVERPROVISIONED).unwrap();
    let tc = exp.with_seed(exp.seeds[0]).train;
    let rows: Vec<&[f64]> = train.images.rows().collect();
    let fixed_bank = fit_kmeans(&rows, tc.k, tc.kmeans_iters, tc.seed, tc.kappa, tc.xi).unwrap();
    let fixed = cluster_freq(&fixed_bank, eval).unwrap();
    fs::write(out.join("cluster_freq_fixed.csv"), fixed.ranked_csv()).unwrap();

    let learned = train_model(
        TrainConfig {
            learnable_bank: true,
            ..tc
        },
        train,
        None,
        None,
    )
    .unwrap();
    let learnable = cluster_freq(&learned.bank, eval).unwrap();
    fs::write(out.join("cluster_freq_learnable.csv"), learnable.ranked_csv()).unwrap();

    let sums_ok = fixed.total() == eval.len() && learnable.total() == eval.len();
    let top = |f: &shiftdiff::ClusterFreq| Summary::of(&f.counts.iter().map(|&c| c as f64).collect::<Vec<_>>()).std;
    Line::new(
        "A9",
        sums_ok && fixed.zero_bins() >= 1,
        format!(
            "k={} on {} eval conditions: fixed bank {} zero-count bins (need >= 1), learnable bank {} zero-count bins \
             (reported); counts sum to eval size: {sums_ok}; count std fixed {:.1} learnable {:.1}",
            tc.k,
            eval.len(),
            fixed.zero_bins(),
            learnable.zero_bins(),
            top(&fixed),
            top(&learnable),
        ),
    )
}

fn main() -> ExitCode {
    let mut lines = vec![a1_vanilla(), a2_marginal(), a3_telescoping(), a4_posterior(), a5_gradients()];
    for l in &lines {
        l.print();
    }
    let skip = std::env::var("SHIFTDIFF_SKIP_EXPERIMENTS").is_ok_and(|v| v == "1");
    let tail: Vec<Line> = if skip {
        ["A6", "A7", "A8", "A9"]
            .into_iter()
            .map(|id| Line {
                id,
                pass: None,
                detail: "skipped (SHIFTDIFF_SKIP_EXPERIMENTS=1)".into(),
            })
            .collect()
    } else {
        let out = artifact_dir();
        let lines = experiments(&out);
        println!("   experiment artifacts in {}", out.display());
        lines
    };
    let a10 = a10_persistence();
    for l in tail.iter().chain([&a10]) {
        l.print();
    }
    lines.extend(tail);
    lines.push(a10);

    let failed: Vec<&str> = lines.iter().filter(|l| l.pass == Some(false)).map(|l| l.id).collect();
    if failed.is_empty() {
        println!("acceptance: all criteria met");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
