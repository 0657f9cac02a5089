//! Residual MLP that predicts the clean embedding `ẑ₀` from
//! `(z_t, t, condition, cluster index)`.
//!
//! Conditioning enters additively in the first hidden layer: a projection of
//! `z_t`, a projection of a sinusoidal embedding of `t`, a projection of the
//! condition vector, and a learned row of the cluster-index table. Row `k` of
//! that table is the null slot used whenever the condition is dropped.
//! Blocks are pre-norm: `h += W₂ gelu(W₁ LN(h) + b₁) + b₂`.
//!
//! Gradients are computed by hand for this fixed architecture.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

const LN_EPS: f64 = 1e-5;
const TIME_BASE: f64 = 10_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DenoiserError {
    #[error("{what}: expected length {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("cluster index {index} out of range for k = {k}")]
    BadCluster { index: usize, k: usize },
    #[error("forward cache does not belong to this parameter set")]
    CacheMismatch,
    #[error("invalid denoiser config: {0}")]
    Config(String),
    #[error("tensor {name}: {problem}")]
    Tensor { name: String, problem: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    /// Number of real clusters; the table holds one extra null row.
    pub clusters: usize,
}

impl DenoiserConfig {
    pub fn new(dim: usize, clusters: usize) -> Self {
        Self {
            dim,
            hidden: 256,
            depth: 4,
            time_embed_dim: 64,
            clusters,
        }
    }

    pub fn validate(&self) -> Result<(), DenoiserError> {
        let bad = |m: &str| Err(DenoiserError::Config(m.to_string()));
        if self.dim == 0 || self.hidden == 0 {
            return bad("dim and hidden must be positive");
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return bad("time_embed_dim must be positive and even");
        }
        if self.clusters == 0 {
            return bad("need at least one cluster");
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (d, h, e, k) = (self.dim, self.hidden, self.time_embed_dim, self.clusters);
        let linear = |i: usize, o: usize| i * o + o;
        linear(d, h) + linear(e, h) + linear(d, h) + (k + 1) * h
            + self.depth * (2 * h + 2 * linear(h, h))
            + linear(h, d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n)
                .map(|_| T::lit(rng.random_range(-bound..bound)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
        }
    }

    fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::uniform(&[output, input], 1.0 / (input as f64).sqrt(), rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    fn inputs(&self) -> usize {
        self.weight.shape[1]
    }

    fn forward_add(&self, x: &[T], out: &mut [T]) {
        let n = self.inputs();
        for ((o, row), &b) in out
            .iter_mut()
            .zip(self.weight.data.chunks_exact(n))
            .zip(&self.bias.data)
        {
            *o += dot4(row, x) + b;
        }
    }

    /// Accumulates parameter gradients into `grad` and returns `Wᵀ dy` added to `dx`.
    fn backward_add(&self, x: &[T], dy: &[T], grad: &mut Linear<T>, dx: Option<&mut [T]>) {
        let n = self.inputs();
        for ((gw, &g), gb) in grad
            .weight
            .data
            .chunks_exact_mut(n)
            .zip(dy)
            .zip(grad.bias.data.iter_mut())
        {
            *gb += g;
            axpy(g, x, gw);
        }
        if let Some(dx) = dx {
            for (row, &g) in self.weight.data.chunks_exact(n).zip(dy) {
                axpy(g, row, dx);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln_gain: Tensor<T>,
    pub ln_bias: Tensor<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

/// All learnable tensors of the denoiser. The same type doubles as a
/// gradient accumulator and as optimizer moment storage.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams<T> {
    pub config: DenoiserConfig,
    pub in_proj: Linear<T>,
    pub time_proj: Linear<T>,
    pub cond_proj: Linear<T>,
    pub cluster_embed: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub head: Linear<T>,
}

#[inline]
fn dot4<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let th = u.tanh();
    let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    T::lit(0.5) * (T::one() + th) + T::lit(0.5) * x * (T::one() - th * th) * du
}

/// Sinusoidal embedding of an integer timestep.
pub fn time_embedding<T: Real>(t: usize, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(TIME_BASE.ln()) * i as f64 / half as f64).exp();
        let angle = t as f64 * freq;
        out[i] = T::lit(angle.sin());
        out[half + i] = T::lit(angle.cos());
    }
    out
}

struct BlockCache<T> {
    xhat: Vec<T>,
    rstd: T,
    normed: Vec<T>,
    pre: Vec<T>,
    act: Vec<T>,
}

/// Intermediate values of one forward pass, consumed by
/// [`DenoiserParams::backward`].
pub struct ForwardCache<T> {
    config: DenoiserConfig,
    z_t: Vec<T>,
    temb: Vec<T>,
    cond: Vec<T>,
    slot: usize,
    blocks: Vec<BlockCache<T>>,
    last_hidden: Vec<T>,
}

impl<T: Real> ForwardCache<T> {
    /// The embedding-table row this pass read.
    pub fn cluster_slot(&self) -> usize {
        self.slot
    }
}

impl<T: Real> DenoiserParams<T> {
    /// Fan-in scaled uniform weights, zero biases, unit layer-norm gains and a
    /// zero output head, so the initial prediction is exactly zero.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self, DenoiserError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, e, k) = (config.dim, config.hidden, config.time_embed_dim, config.clusters);
        let in_proj = Linear::init(d, h, &mut rng);
        let time_proj = Linear::init(e, h, &mut rng);
        let cond_proj = Linear::init(d, h, &mut rng);
        let cluster_embed = Tensor::uniform(&[k + 1, h], 0.5, &mut rng);
        let blocks = (0..config.depth)
            .map(|_| Block {
                ln_gain: Tensor {
                    shape: vec![h],
                    data: vec![T::one(); h],
                },
                ln_bias: Tensor::zeros(&[h]),
                fc1: Linear::init(h, h, &mut rng),
                fc2: Linear::init(h, h, &mut rng),
            })
            .collect();
        Ok(Self {
            config,
            in_proj,
            time_proj,
            cond_proj,
            cluster_embed,
            blocks,
            head: Linear::zeros(h, d),
        })
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = T::zero());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.data.len()).sum()
    }

    /// Every tensor with its dotted name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("in_proj.weight".to_string(), &self.in_proj.weight),
            ("in_proj.bias".to_string(), &self.in_proj.bias),
            ("time_proj.weight".to_string(), &self.time_proj.weight),
            ("time_proj.bias".to_string(), &self.time_proj.bias),
            ("cond_proj.weight".to_string(), &self.cond_proj.weight),
            ("cond_proj.bias".to_string(), &self.cond_proj.bias),
            ("cluster_embed".to_string(), &self.cluster_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend([
                (format!("blocks.{i}.ln.gain"), &b.ln_gain),
                (format!("blocks.{i}.ln.bias"), &b.ln_bias),
                (format!("blocks.{i}.fc1.weight"), &b.fc1.weight),
                (format!("blocks.{i}.fc1.bias"), &b.fc1.bias),
                (format!("blocks.{i}.fc2.weight"), &b.fc2.weight),
                (format!("blocks.{i}.fc2.bias"), &b.fc2.bias),
            ]);
        }
        out.push(("head.weight".to_string(), &self.head.weight));
        out.push(("head.bias".to_string(), &self.head.bias));
        out
    }

    /// Mutable tensors in the same order as [`named`](Self::named).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let Self {
            in_proj,
            time_proj,
            cond_proj,
            cluster_embed,
            blocks,
            head,
            ..
        } = self;
        let mut out = vec![
            &mut in_proj.weight,
            &mut in_proj.bias,
            &mut time_proj.weight,
            &mut time_proj.bias,
            &mut cond_proj.weight,
            &mut cond_proj.bias,
            cluster_embed,
        ];
        for b in blocks.iter_mut() {
            out.extend([
                &mut b.ln_gain,
                &mut b.ln_bias,
                &mut b.fc1.weight,
                &mut b.fc1.bias,
                &mut b.fc2.weight,
                &mut b.fc2.bias,
            ]);
        }
        out.push(&mut head.weight);
        out.push(&mut head.bias);
        out
    }

    pub fn names(&self) -> Vec<String> {
        self.named().into_iter().map(|(n, _)| n).collect()
    }

    pub fn slices(&self) -> Vec<&[T]> {
        self.named().into_iter().map(|(_, t)| t.data.as_slice()).collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [T]> {
        self.tensors_mut()
            .into_iter()
            .map(|t| t.data.as_mut_slice())
            .collect()
    }

    /// Replaces the tensor called `name`, checking its shape.
    pub fn set_tensor(&mut self, name: &str, shape: &[usize], data: Vec<T>) -> Result<(), DenoiserError> {
        let err = |problem: String| DenoiserError::Tensor {
            name: name.to_string(),
            problem,
        };
        let index = self
            .names()
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| err("unknown tensor".to_string()))?;
        let mut tensors = self.tensors_mut();
        let t = &mut tensors[index];
        if t.shape != shape {
            return Err(err(format!("shape {:?} does not match {:?}", shape, t.shape)));
        }
        if data.len() != t.data.len() {
            return Err(err("length does not match shape".to_string()));
        }
        t.data = data;
        Ok(())
    }

    fn check_inputs(
        &self,
        z_t: &[T],
        cond: &[T],
        cluster: Option<usize>,
    ) -> Result<(), DenoiserError> {
        let d = self.config.dim;
        if z_t.len() != d {
            return Err(DenoiserError::Shape {
                what: "z_t",
                expected: d,
                got: z_t.len(),
            });
        }
        if cond.len() != d {
            return Err(DenoiserError::Shape {
                what: "condition",
                expected: d,
                got: cond.len(),
            });
        }
        if let Some(index) = cluster {
            if index >= self.config.clusters {
                return Err(DenoiserError::BadCluster {
                    index,
                    k: self.config.clusters,
                });
            }
        }
        Ok(())
    }

    /// Forward pass keeping what [`backward`](Self::backward) needs. When
    /// `dropped` is set the condition is replaced by zeros and the cluster
    /// index by the null slot.
    pub fn forward(
        &self,
        z_t: &[T],
        t: usize,
        cond: &[T],
        cluster: Option<usize>,
        dropped: bool,
    ) -> Result<(Vec<T>, ForwardCache<T>), DenoiserError> {
        self.check_inputs(z_t, cond, cluster)?;
        let cfg = self.config;
        let h = cfg.hidden;
        let null = cfg.clusters;
        let (cond, slot) = if dropped {
            (vec![T::zero(); cfg.dim], null)
        } else {
            (cond.to_vec(), cluster.unwrap_or(null))
        };
        let temb = time_embedding::<T>(t, cfg.time_embed_dim);

        let mut hidden = self.cluster_embed.data[slot * h..(slot + 1) * h].to_vec();
        self.in_proj.forward_add(z_t, &mut hidden);
        self.time_proj.forward_add(&temb, &mut hidden);
        self.cond_proj.forward_add(&cond, &mut hidden);

        let mut caches = Vec::with_capacity(self.blocks.len());
        let inv_h = T::one() / T::lit(h as f64);
        for b in &self.blocks {
            let mean = hidden.iter().copied().sum::<T>() * inv_h;
            let var = hidden.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() * inv_h;
            let rstd = T::one() / (var + T::lit(LN_EPS)).sqrt();
            let xhat: Vec<T> = hidden.iter().map(|&x| (x - mean) * rstd).collect();
            let normed: Vec<T> = xhat
                .iter()
                .zip(&b.ln_gain.data)
                .zip(&b.ln_bias.data)
                .map(|((&x, &g), &bb)| x * g + bb)
                .collect();
            let mut pre = vec![T::zero(); h];
            b.fc1.forward_add(&normed, &mut pre);
            let act: Vec<T> = pre.iter().map(|&x| gelu(x)).collect();
            b.fc2.forward_add(&act, &mut hidden);
            caches.push(BlockCache {
                xhat,
                rstd,
                normed,
                pre,
                act,
            });
        }

        let mut out = vec![T::zero(); cfg.dim];
        self.head.forward_add(&hidden, &mut out);
        Ok((
            out,
            ForwardCache {
                config: cfg,
                z_t: z_t.to_vec(),
                temb,
                cond,
                slot,
                blocks: caches,
                last_hidden: hidden,
            },
        ))
    }

    /// `ẑ₀` prediction.
    pub fn predict_z0(
        &self,
        z_t: &[T],
        t: usize,
        cond: &[T],
        cluster: Option<usize>,
        dropped: bool,
    ) -> Result<Vec<T>, DenoiserError> {
        self.forward(z_t, t, cond, cluster, dropped).map(|(out, _)| out)
    }

    /// Adds the gradient of `<output, d_out>` with respect to every tensor into `grads`.
    pub fn accumulate_backward(
        &self,
        cache: &ForwardCache<T>,
        d_out: &[T],
        grads: &mut DenoiserParams<T>,
    ) -> Result<(), DenoiserError> {
        if cache.config != self.config || grads.config != self.config {
            return Err(DenoiserError::CacheMismatch);
        }
        if d_out.len() != self.config.dim {
            return Err(DenoiserError::Shape {
                what: "d_out",
                expected: self.config.dim,
                got: d_out.len(),
            });
        }
        let h = self.config.hidden;
        let inv_h = T::one() / T::lit(h as f64);

        let mut dh = vec![T::zero(); h];
        self.head
            .backward_add(&cache.last_hidden, d_out, &mut grads.head, Some(&mut dh));

        for ((b, bc), gb) in self
            .blocks
            .iter()
            .zip(&cache.blocks)
            .zip(grads.blocks.iter_mut())
            .rev()
        {
            let mut d_act = vec![T::zero(); h];
            b.fc2.backward_add(&bc.act, &dh, &mut gb.fc2, Some(&mut d_act));
            let d_pre: Vec<T> = d_act
                .iter()
                .zip(&bc.pre)
                .map(|(&g, &x)| g * gelu_grad(x))
                .collect();
            let mut d_normed = vec![T::zero(); h];
            b.fc1.backward_add(&bc.normed, &d_pre, &mut gb.fc1, Some(&mut d_normed));

            let mut d_xhat = vec![T::zero(); h];
            for j in 0..h {
                gb.ln_gain.data[j] += d_normed[j] * bc.xhat[j];
                gb.ln_bias.data[j] += d_normed[j];
                d_xhat[j] = d_normed[j] * b.ln_gain.data[j];
            }
            let mean_d = d_xhat.iter().copied().sum::<T>() * inv_h;
            let mean_dx = d_xhat
                .iter()
                .zip(&bc.xhat)
                .map(|(&a, &x)| a * x)
                .sum::<T>()
                * inv_h;
            for j in 0..h {
                dh[j] += bc.rstd * (d_xhat[j] - mean_d - bc.xhat[j] * mean_dx);
            }
        }

        self.in_proj.backward_add(&cache.z_t, &dh, &mut grads.in_proj, None);
        self.time_proj
            .backward_add(&cache.temb, &dh, &mut grads.time_proj, None);
        self.cond_proj
            .backward_add(&cache.cond, &dh, &mut grads.cond_proj, None);
        let row = &mut grads.cluster_embed.data[cache.slot * h..(cache.slot + 1) * h];
        row.iter_mut().zip(&dh).for_each(|(g, &d)| *g += d);
        Ok(())
    }

    /// Fresh gradients of `<output, d_out>`.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        d_out: &[T],
    ) -> Result<DenoiserParams<T>, DenoiserError> {
        let mut grads = self.zeros_like();
        self.accumulate_backward(cache, d_out, &mut grads)?;
        Ok(grads)
    }
}
