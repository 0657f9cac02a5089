//! The bank of candidate initial Gaussians `{N(μ_i, Σ_i)}`.
//!
//! Banks are estimated with k-means on training embeddings, queried by
//! cosine similarity against the condition embedding, and optionally trained
//! with the alignment/repulsion loss `L_p`. Only `L_p` ever touches the bank;
//! the denoiser loss treats it as a constant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian::{DiagGaussian, GaussianError};
use crate::scalar::{cosine, cosine_grad_a, Real};

/// Floor applied to within-cluster variances after fitting.
pub const CLUSTER_VAR_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("no embeddings to cluster")]
    Empty,
    #[error("k must be at least 1")]
    ZeroClusters,
    #[error("need at least k = {k} rows, got {n}")]
    TooFewRows { n: usize, k: usize },
    #[error("row {row} has dimension {got}, expected {expected}")]
    Ragged { row: usize, expected: usize, got: usize },
    #[error("condition embedding has zero norm")]
    ZeroNormCondition,
    #[error("condition has dimension {got}, bank has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("bank parameters are fixed; make it learnable first")]
    NotLearnable,
    #[error("empty batch")]
    EmptyBatch,
    #[error("cluster index {index} out of range for k = {k}")]
    BadIndex { index: usize, k: usize },
    #[error("monte-carlo assignment needs at least one sample")]
    NoSamples,
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
}

/// How a condition picks its Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AssignMode {
    /// Highest cosine similarity between `μ_i` and the condition.
    #[default]
    Top1,
    /// Highest Monte-Carlo estimate of `E[cos(ε_i, cond)]`, `ε_i ~ p_i`.
    Mc,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment<T> {
    pub index: usize,
    /// Winning cosine; `-inf` when every mean in the bank has zero norm.
    pub similarity: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterBank<T> {
    gaussians: Vec<DiagGaussian<T>>,
    log_std: Option<Vec<Vec<T>>>,
    xi: T,
}

/// Outcome of Lloyd iterations.
#[derive(Debug, Clone)]
pub struct KMeans<T> {
    pub centroids: Vec<Vec<T>>,
    pub labels: Vec<usize>,
    /// Within-cluster sum of squares after every completed iteration.
    pub sse_history: Vec<T>,
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}

fn nearest<T: Real>(row: &[T], centroids: &[Vec<T>]) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(row, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn check_rows<T: Real, R: AsRef<[T]>>(rows: &[R], k: usize) -> Result<usize, ClusterError> {
    if rows.is_empty() {
        return Err(ClusterError::Empty);
    }
    if k == 0 {
        return Err(ClusterError::ZeroClusters);
    }
    if rows.len() < k {
        return Err(ClusterError::TooFewRows { n: rows.len(), k });
    }
    let d = rows[0].as_ref().len();
    for (row, r) in rows.iter().enumerate() {
        if r.as_ref().len() != d {
            return Err(ClusterError::Ragged {
                row,
                expected: d,
                got: r.as_ref().len(),
            });
        }
    }
    Ok(d)
}

/// k-means with k-means++ seeding. Deterministic given `seed`.
pub fn kmeans<T: Real, R: AsRef<[T]>>(
    rows: &[R],
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<KMeans<T>, ClusterError> {
    let d = check_rows(rows, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rows.len();

    let mut centroids: Vec<Vec<T>> = vec![rows[rng.random_range(0..n)].as_ref().to_vec()];
    let mut closest: Vec<f64> = rows
        .iter()
        .map(|r| sq_dist(r.as_ref(), &centroids[0]).as_f64())
        .collect();
    while centroids.len() < k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            closest
                .iter()
                .position(|&w| {
                    acc += w;
                    acc > target
                })
                .unwrap_or(n - 1)
        } else {
            // Every row coincides with a chosen centroid already.
            rng.random_range(0..n)
        };
        let c = rows[pick].as_ref().to_vec();
        for (w, r) in closest.iter_mut().zip(rows) {
            *w = w.min(sq_dist(r.as_ref(), &c).as_f64());
        }
        centroids.push(c);
    }

    let mut labels: Vec<usize> = rows.iter().map(|r| nearest(r.as_ref(), &centroids).0).collect();
    let mut sse_history = Vec::new();
    for _ in 0..iters.max(1) {
        let mut sums = vec![vec![T::zero(); d]; k];
        let mut counts = vec![0usize; k];
        for (r, &l) in rows.iter().zip(&labels) {
            counts[l] += 1;
            for (s, &x) in sums[l].iter_mut().zip(r.as_ref()) {
                *s += x;
            }
        }
        for ((c, s), &cnt) in centroids.iter_mut().zip(sums).zip(&counts) {
            // Empty clusters keep their previous centroid.
            if cnt > 0 {
                let inv = T::one() / T::lit(cnt as f64);
                *c = s.into_iter().map(|x| x * inv).collect();
            }
        }
        let mut changed = false;
        let mut sse = T::zero();
        for (r, l) in rows.iter().zip(labels.iter_mut()) {
            let (best, dist) = nearest(r.as_ref(), &centroids);
            // Keep the current label on exact ties so the objective cannot rise.
            let cur = sq_dist(r.as_ref(), &centroids[*l]);
            if dist < cur {
                *l = best;
                changed = true;
                sse += dist;
            } else {
                sse += cur;
            }
        }
        sse_history.push(sse);
        if !changed {
            break;
        }
    }
    Ok(KMeans {
        centroids,
        labels,
        sse_history,
    })
}

/// Fits a fixed bank: `μ_i` are k-means centroids and `Σ_i` the per-dimension
/// within-cluster sample variance scaled by `κ²`, floored at
/// [`CLUSTER_VAR_FLOOR`].
pub fn fit_kmeans<T: Real, R: AsRef<[T]>>(
    rows: &[R],
    k: usize,
    iters: usize,
    seed: u64,
    kappa: T,
    xi: T,
) -> Result<ClusterBank<T>, ClusterError> {
    let km = kmeans(rows, k, iters, seed)?;
    let d = km.centroids[0].len();
    let mut sq = vec![vec![T::zero(); d]; k];
    let mut counts = vec![0usize; k];
    for (r, &l) in rows.iter().zip(&km.labels) {
        counts[l] += 1;
        for ((s, &x), &m) in sq[l].iter_mut().zip(r.as_ref()).zip(&km.centroids[l]) {
            *s += (x - m) * (x - m);
        }
    }
    let floor = T::lit(CLUSTER_VAR_FLOOR);
    let k2 = kappa * kappa;
    let gaussians = km
        .centroids
        .into_iter()
        .zip(sq)
        .zip(counts)
        .map(|((mean, s), cnt)| {
            let var = s
                .into_iter()
                .map(|v| {
                    if cnt > 1 {
                        (k2 * v / T::lit((cnt - 1) as f64)).max(floor)
                    } else {
                        floor
                    }
                })
                .collect();
            DiagGaussian::new(mean, var)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ClusterBank::new(gaussians, xi))
}

/// Per-term standard-normal draws for [`ClusterBank::lp_loss`].
#[derive(Debug, Clone)]
pub struct LpNoise<T> {
    /// One draw per batch item, for its assigned cluster.
    pub items: Vec<Vec<T>>,
    /// One draw per cluster, for the repulsion term.
    pub clusters: Vec<Vec<T>>,
}

impl<T: Real> LpNoise<T> {
    pub fn draw<R: Rng>(rng: &mut R, batch: usize, k: usize, d: usize) -> Self {
        let mut gen = |n: usize| -> Vec<Vec<T>> {
            (0..n)
                .map(|_| (0..d).map(|_| T::lit(rng.sample(StandardNormal))).collect())
                .collect()
        };
        let items = gen(batch);
        let clusters = gen(k);
        Self { items, clusters }
    }
}

/// Value and exact gradients of the sampled `L_p` estimator.
#[derive(Debug, Clone)]
pub struct LpLoss<T> {
    pub loss: T,
    pub alignment: T,
    pub repulsion: T,
    pub d_mean: Vec<Vec<T>>,
    pub d_log_std: Vec<Vec<T>>,
}

impl<T: Real> LpLoss<T> {
    /// Gradients in the order of [`ClusterBank::update_with`]'s slices.
    pub fn grads(&self) -> Vec<&[T]> {
        self.d_mean
            .iter()
            .chain(&self.d_log_std)
            .map(Vec::as_slice)
            .collect()
    }
}

impl<T: Real> ClusterBank<T> {
    pub fn new(gaussians: Vec<DiagGaussian<T>>, xi: T) -> Self {
        assert!(!gaussians.is_empty(), "a cluster bank needs at least one gaussian");
        let d = gaussians[0].dim();
        assert!(gaussians.iter().all(|g| g.dim() == d), "ragged cluster bank");
        Self {
            gaussians,
            log_std: None,
            xi,
        }
    }

    /// The single standard Gaussian used by vanilla diffusion.
    pub fn standard(dim: usize) -> Self {
        Self::new(vec![DiagGaussian::standard(dim)], T::zero())
    }

    pub(crate) fn from_parts(
        gaussians: Vec<DiagGaussian<T>>,
        log_std: Option<Vec<Vec<T>>>,
        xi: T,
    ) -> Self {
        let mut bank = Self::new(gaussians, xi);
        bank.log_std = log_std;
        bank
    }

    pub fn k(&self) -> usize {
        self.gaussians.len()
    }

    pub fn dim(&self) -> usize {
        self.gaussians[0].dim()
    }

    pub fn xi(&self) -> T {
        self.xi
    }

    pub fn set_xi(&mut self, xi: T) {
        self.xi = xi;
    }

    pub fn gaussian(&self, i: usize) -> &DiagGaussian<T> {
        &self.gaussians[i]
    }

    pub fn gaussians(&self) -> &[DiagGaussian<T>] {
        &self.gaussians
    }

    pub fn is_learnable(&self) -> bool {
        self.log_std.is_some()
    }

    pub fn log_std(&self) -> Option<&[Vec<T>]> {
        self.log_std.as_deref()
    }

    /// Switches to learnable parameters `(μ_i, log σ_i)` with `Σ_i = exp(2 log σ_i)`.
    pub fn make_learnable(&mut self) {
        if self.log_std.is_none() {
            let half = T::lit(0.5);
            self.log_std = Some(
                self.gaussians
                    .iter()
                    .map(|g| g.var().iter().map(|&v| half * v.ln()).collect())
                    .collect(),
            );
        }
    }

    /// Hands `[μ_0, .., μ_{k-1}, log σ_0, .., log σ_{k-1}]` to `f` and then
    /// refreshes the variances.
    pub fn update_with<F: FnOnce(&mut [&mut [T]])>(&mut self, f: F) -> Result<(), ClusterError> {
        let log_std = self.log_std.as_mut().ok_or(ClusterError::NotLearnable)?;
        let mut slices: Vec<&mut [T]> = self
            .gaussians
            .iter_mut()
            .map(|g| g.mean_mut())
            .chain(log_std.iter_mut().map(Vec::as_mut_slice))
            .collect();
        f(&mut slices);
        let two = T::lit(2.0);
        for (g, ls) in self.gaussians.iter_mut().zip(log_std.iter()) {
            for (j, &l) in ls.iter().enumerate() {
                g.set_var_unchecked(j, (two * l).exp());
            }
        }
        Ok(())
    }

    fn check_cond(&self, cond: &[T]) -> Result<(), ClusterError> {
        if cond.len() != self.dim() {
            return Err(ClusterError::DimensionMismatch {
                expected: self.dim(),
                got: cond.len(),
            });
        }
        if cond.iter().all(|&x| x == T::zero()) {
            return Err(ClusterError::ZeroNormCondition);
        }
        Ok(())
    }

    fn argmax(scores: impl Iterator<Item = T>) -> Assignment<T> {
        let mut best = Assignment {
            index: 0,
            similarity: T::neg_infinity(),
        };
        for (index, s) in scores.enumerate() {
            if s > best.similarity {
                best = Assignment {
                    index,
                    similarity: s,
                };
            }
        }
        best
    }

    /// `argmax_i cos(μ_i, cond)`, ties to the lowest index. Zero-norm means
    /// score `-inf`.
    pub fn assign_top1(&self, cond: &[T]) -> Result<Assignment<T>, ClusterError> {
        self.check_cond(cond)?;
        Ok(Self::argmax(
            self.gaussians
                .iter()
                .map(|g| cosine(g.mean(), cond).unwrap_or(T::neg_infinity())),
        ))
    }

    /// `argmax_i (1/M) Σ_m cos(ε_i^(m), cond)` with `ε_i^(m) ~ N(μ_i, Σ_i)`.
    pub fn assign_mc(
        &self,
        cond: &[T],
        samples: usize,
        seed: u64,
    ) -> Result<Assignment<T>, ClusterError> {
        self.check_cond(cond)?;
        if samples == 0 {
            return Err(ClusterError::NoSamples);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.dim();
        let mut noise = vec![T::zero(); d];
        let mut draw = vec![T::zero(); d];
        let mut totals = vec![T::zero(); self.k()];
        for _ in 0..samples {
            for (g, total) in self.gaussians.iter().zip(totals.iter_mut()) {
                noise
                    .iter_mut()
                    .for_each(|e| *e = T::lit(rng.sample(StandardNormal)));
                for j in 0..d {
                    draw[j] = g.mean()[j] + g.var()[j].sqrt() * noise[j];
                }
                *total += cosine(&draw, cond).unwrap_or(-T::one());
            }
        }
        let inv = T::one() / T::lit(samples as f64);
        Ok(Self::argmax(totals.into_iter().map(|t| t * inv)))
    }

    pub fn assign(
        &self,
        cond: &[T],
        mode: AssignMode,
        mc_samples: usize,
        seed: u64,
    ) -> Result<Assignment<T>, ClusterError> {
        if self.k() == 1 {
            self.check_cond(cond)?;
            let similarity = cosine(self.gaussians[0].mean(), cond).unwrap_or(T::neg_infinity());
            return Ok(Assignment {
                index: 0,
                similarity,
            });
        }
        match mode {
            AssignMode::Top1 => self.assign_top1(cond),
            AssignMode::Mc => self.assign_mc(cond, mc_samples, seed),
        }
    }

    /// Sampled `L_p`: `-mean_b cos(z_T^b, z0_b) + ξ/(k(k-1)) Σ_{i≠j} cos(w_i, w_j)`
    /// where `z_T^b = μ_c + σ_c ⊙ ε_b` and `w_i = μ_i + σ_i ⊙ ε'_i`.
    pub fn lp_loss<V: AsRef<[T]>>(
        &self,
        batch: &[(V, usize)],
        noise: &LpNoise<T>,
    ) -> Result<LpLoss<T>, ClusterError> {
        let log_std = self.log_std.as_ref().ok_or(ClusterError::NotLearnable)?;
        if batch.is_empty() {
            return Err(ClusterError::EmptyBatch);
        }
        let (k, d) = (self.k(), self.dim());
        let std: Vec<Vec<T>> = log_std
            .iter()
            .map(|ls| ls.iter().map(|l| l.exp()).collect())
            .collect();
        let draw = |c: usize, eps: &[T]| -> Vec<T> {
            let mu = self.gaussians[c].mean();
            (0..d).map(|j| mu[j] + std[c][j] * eps[j]).collect()
        };
        let mut d_mean = vec![vec![T::zero(); d]; k];
        let mut d_log_std = vec![vec![T::zero(); d]; k];
        let mut accumulate = |c: usize, eps: &[T], dz: &[T], scale: T| {
            for j in 0..d {
                d_mean[c][j] += scale * dz[j];
                d_log_std[c][j] += scale * dz[j] * std[c][j] * eps[j];
            }
        };

        let inv_b = T::one() / T::lit(batch.len() as f64);
        let mut alignment = T::zero();
        for ((z0, c), eps) in batch.iter().zip(&noise.items) {
            let (c, z0) = (*c, z0.as_ref());
            if c >= k {
                return Err(ClusterError::BadIndex { index: c, k });
            }
            if z0.len() != d {
                return Err(ClusterError::DimensionMismatch {
                    expected: d,
                    got: z0.len(),
                });
            }
            let z = draw(c, eps);
            if cosine(&z, z0).is_none() {
                continue;
            }
            let (cos, g) = cosine_grad_a(&z, z0);
            alignment -= cos * inv_b;
            accumulate(c, eps, &g, -inv_b);
        }

        let mut repulsion = T::zero();
        if k > 1 && self.xi != T::zero() {
            let coef = self.xi / T::lit((k * (k - 1)) as f64);
            let draws: Vec<Vec<T>> = (0..k).map(|i| draw(i, &noise.clusters[i])).collect();
            for i in 0..k {
                for j in 0..k {
                    if i == j || cosine(&draws[i], &draws[j]).is_none() {
                        continue;
                    }
                    // The (i, j) term contributes to w_i here and to w_j when the
                    // loop visits (j, i); cosine is symmetric.
                    let (cos, g) = cosine_grad_a(&draws[i], &draws[j]);
                    repulsion += coef * cos;
                    accumulate(i, &noise.clusters[i], &g, T::lit(2.0) * coef);
                }
            }
        }

        Ok(LpLoss {
            loss: alignment + repulsion,
            alignment,
            repulsion,
            d_mean,
            d_log_std,
        })
    }
}
