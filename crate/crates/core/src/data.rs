//! Embedding datasets: a synthetic generator that mimics a contrastive
//! encoder's narrow output cone plus a constant image/text offset, per-dimension
//! statistics, and the `EMB1` binary matrix format for precomputed embeddings.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::normalize_f64;

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";
pub const EMB_VERSION: u32 = 1;
const EMB_HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("row has dimension {got}, expected {expected}")]
    Ragged { expected: usize, got: usize },
    #[error("not an EMB1 file (bad magic)")]
    BadMagic,
    #[error("unsupported EMB1 version {0}")]
    UnsupportedVersion(u32),
    #[error("matrix of {n} x {d} does not fit")]
    DimensionOverflow { n: u64, d: u64 },
    #[error("file truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{found} unexpected trailing bytes")]
    TrailingBytes { found: usize },
    #[error("image and condition files disagree: {0}")]
    Mismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Row-major `n × d` matrix of embeddings.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Embeddings {
    dim: usize,
    data: Vec<f64>,
}

impl Embeddings {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(dim: usize, rows: &[R]) -> Result<Self, DataError> {
        let mut out = Self::new(dim);
        for r in rows {
            out.push(r.as_ref())?;
        }
        Ok(out)
    }

    pub fn push(&mut self, row: &[f64]) -> Result<(), DataError> {
        if row.len() != self.dim {
            return Err(DataError::Ragged {
                expected: self.dim,
                got: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut out = Self::new(self.dim);
        for &i in indices {
            out.data.extend_from_slice(self.row(i));
        }
        out
    }
}

/// Paired image-side targets and condition-side inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    pub images: Embeddings,
    pub conds: Embeddings,
    pub labels: Option<Vec<u32>>,
}

impl EmbeddingDataset {
    pub fn new(images: Embeddings, conds: Embeddings, labels: Option<Vec<u32>>) -> Result<Self, DataError> {
        if images.dim() != conds.dim() || images.len() != conds.len() {
            return Err(DataError::Mismatch(format!(
                "{}x{} images vs {}x{} conditions",
                images.len(),
                images.dim(),
                conds.len(),
                conds.dim()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != images.len() {
                return Err(DataError::Mismatch(format!(
                    "{} labels for {} rows",
                    l.len(),
                    images.len()
                )));
            }
        }
        Ok(Self {
            images,
            conds,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.images.dim()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select(indices),
            conds: self.conds.select(indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Seeded shuffle, then the last `ceil(eval_fraction · n)` rows (at least
    /// one when `eval_fraction > 0`) become the evaluation split.
    pub fn split(&self, eval_fraction: f64, seed: u64) -> (Self, Self) {
        let n = self.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_eval = if eval_fraction > 0.0 {
            ((eval_fraction * n as f64).ceil() as usize).clamp(1, n)
        } else {
            0
        };
        let (train, eval) = idx.split_at(n - n_eval);
        (self.select(train), self.select(eval))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub dim: usize,
    /// Number of concept directions.
    pub concepts: usize,
    pub pairs: usize,
    pub sigma_img: f64,
    pub sigma_txt: f64,
    /// Length of the constant offset added on the condition side.
    pub gap: f64,
    /// Angular radius of the cap holding the concepts, in degrees.
    pub cap_degrees: f64,
    /// Concepts are redrawn until pairwise angles reach this many degrees;
    /// when that is infeasible the most separated candidate is kept.
    pub min_separation_degrees: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dim: 16,
            concepts: 8,
            pairs: 10_000,
            sigma_img: 0.1,
            sigma_txt: 0.1,
            gap: 0.5,
            cap_degrees: 30.0,
            min_separation_degrees: 35.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.to_string()));
        if self.dim < 2 {
            return bad("dim must be at least 2");
        }
        if self.concepts == 0 || self.pairs == 0 {
            return bad("concepts and pairs must be positive");
        }
        if !(self.sigma_img >= 0.0 && self.sigma_txt >= 0.0 && self.gap >= 0.0) {
            return bad("noise scales and gap must be non-negative");
        }
        if !(self.cap_degrees > 0.0 && self.cap_degrees < 90.0) {
            return bad("cap_degrees must lie in (0, 90)");
        }
        Ok(())
    }
}

/// Everything the generator drew besides the pairs themselves.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub axis: Vec<f64>,
    pub gap_direction: Vec<f64>,
    pub concepts: Vec<Vec<f64>>,
}

const SEPARATION_ATTEMPTS: usize = 2000;

fn normal_vec<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

/// Unit vector orthogonal to `axis` (which must be unit norm).
fn orthogonal_unit<R: Rng>(rng: &mut R, axis: &[f64]) -> Vec<f64> {
    loop {
        let mut v = normal_vec(rng, axis.len());
        let p: f64 = v.iter().zip(axis).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(axis).for_each(|(x, a)| *x -= p * a);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            return v;
        }
    }
}

/// Direction drawn uniformly (by surface area) from the cap of angular
/// radius `max_angle` around `axis`.
fn cap_direction<R: Rng>(rng: &mut R, axis: &[f64], max_angle: f64) -> Vec<f64> {
    let power = (axis.len() - 2) as i32;
    let top = max_angle.sin().powi(power);
    let angle = loop {
        let a = rng.random::<f64>() * max_angle;
        if rng.random::<f64>() * top <= a.sin().powi(power) {
            break a;
        }
    };
    let tangent = orthogonal_unit(rng, axis);
    axis.iter()
        .zip(&tangent)
        .map(|(a, t)| angle.cos() * a + angle.sin() * t)
        .collect()
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(EmbeddingDataset, SyntheticWorld), DataError> {
    spec.validate()?;
    let d = spec.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut axis = normal_vec(&mut rng, d);
    normalize_f64(&mut axis);
    let max_angle = spec.cap_degrees.to_radians();
    let min_cos = spec.min_separation_degrees.to_radians().cos();
    let mut concepts: Vec<Vec<f64>> = Vec::with_capacity(spec.concepts);
    for _ in 0..spec.concepts {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..SEPARATION_ATTEMPTS {
            let cand = cap_direction(&mut rng, &axis, max_angle);
            let worst = concepts
                .iter()
                .map(|c| c.iter().zip(&cand).map(|(a, b)| a * b).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max);
            let done = worst <= min_cos;
            if best.as_ref().is_none_or(|(w, _)| worst < *w) {
                best = Some((worst, cand));
            }
            if done {
                break;
            }
        }
        concepts.push(best.expect("at least one attempt").1);
    }
    let gap_direction = orthogonal_unit(&mut rng, &axis);

    let mut images = Embeddings::new(d);
    let mut conds = Embeddings::new(d);
    let mut labels = Vec::with_capacity(spec.pairs);
    for _ in 0..spec.pairs {
        let c = rng.random_range(0..spec.concepts);
        let concept = &concepts[c];
        let mut z0: Vec<f64> = concept
            .iter()
            .map(|&x| x + spec.sigma_img * rng.sample::<f64, _>(StandardNormal))
            .collect();
        normalize_f64(&mut z0);
        let mut cond: Vec<f64> = concept
            .iter()
            .zip(&gap_direction)
            .map(|(&x, &g)| x + spec.gap * g + spec.sigma_txt * rng.sample::<f64, _>(StandardNormal))
            .collect();
        normalize_f64(&mut cond);
        images.push(&z0)?;
        conds.push(&cond)?;
        labels.push(c as u32);
    }
    Ok((
        EmbeddingDataset::new(images, conds, Some(labels))?,
        SyntheticWorld {
            axis,
            gap_direction,
            concepts,
        },
    ))
}

/// Per-dimension mean and sample standard deviation (`n - 1` denominator).
pub fn data_stats(emb: &Embeddings) -> Result<(Vec<f64>, Vec<f64>), DataError> {
    let n = emb.len();
    if n < 2 {
        return Err(DataError::TooFewRows { needed: 2, got: n });
    }
    let d = emb.dim();
    let mut mean = vec![0.0; d];
    for r in emb.rows() {
        mean.iter_mut().zip(r).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut ss = vec![0.0; d];
    for r in emb.rows() {
        for ((s, x), m) in ss.iter_mut().zip(r).zip(&mean) {
            *s += (x - m) * (x - m);
        }
    }
    let sigma = ss.into_iter().map(|s| (s / (n - 1) as f64).sqrt()).collect();
    Ok((mean, sigma))
}

/// Serializes to `EMB1`: magic, `u32` version, `u32` n, `u32` d, then n·d
/// little-endian `f32` in row-major order.
pub fn encode_emb(emb: &Embeddings) -> Result<Vec<u8>, DataError> {
    let (n, d) = (emb.len(), emb.dim());
    if n > u32::MAX as usize || d > u32::MAX as usize {
        return Err(DataError::DimensionOverflow {
            n: n as u64,
            d: d as u64,
        });
    }
    let mut out = Vec::with_capacity(EMB_HEADER_LEN + 4 * n * d);
    out.extend_from_slice(EMB_MAGIC);
    out.extend_from_slice(&EMB_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for &x in emb.as_slice() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_emb(bytes: &[u8]) -> Result<Embeddings, DataError> {
    if bytes.len() < 4 || &bytes[..4] != EMB_MAGIC {
        return Err(DataError::BadMagic);
    }
    if bytes.len() < EMB_HEADER_LEN {
        return Err(DataError::Truncated {
            expected: EMB_HEADER_LEN,
            found: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != EMB_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let (n, d) = (word(8) as usize, word(12) as usize);
    let payload = n
        .checked_mul(d)
        .and_then(|x| x.checked_mul(4))
        .and_then(|x| x.checked_add(EMB_HEADER_LEN))
        .ok_or(DataError::DimensionOverflow {
            n: n as u64,
            d: d as u64,
        })?;
    if bytes.len() < payload {
        return Err(DataError::Truncated {
            expected: payload,
            found: bytes.len(),
        });
    }
    if bytes.len() > payload {
        return Err(DataError::TrailingBytes {
            found: bytes.len() - payload,
        });
    }
    let data = bytes[EMB_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Embeddings { dim: d, data })
}

/// Writes via a temporary sibling and a rename so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn write_emb(path: &Path, emb: &Embeddings) -> Result<(), DataError> {
    write_atomic(path, &encode_emb(emb)?)
}

pub fn read_emb(path: &Path) -> Result<Embeddings, DataError> {
    decode_emb(&fs::read(path).map_err(io_err(path))?)
}

/// Pairs an image-embedding file with a condition-embedding file. Paths are
/// relative to the manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairingManifest {
    pub image_file: PathBuf,
    pub cond_file: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_file: Option<PathBuf>,
}

impl PairingManifest {
    pub fn load_dataset(manifest_path: &Path) -> Result<EmbeddingDataset, DataError> {
        let text = fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
        let manifest: PairingManifest = serde_json::from_str(&text).map_err(|source| DataError::Json {
            path: manifest_path.to_path_buf(),
            source,
        })?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let images = read_emb(&base.join(&manifest.image_file))?;
        let conds = read_emb(&base.join(&manifest.cond_file))?;
        let labels = match &manifest.labels_file {
            Some(p) => {
                let p = base.join(p);
                let text = fs::read_to_string(&p).map_err(io_err(&p))?;
                Some(serde_json::from_str(&text).map_err(|source| DataError::Json { path: p, source })?)
            }
            None => None,
        };
        EmbeddingDataset::new(images, conds, labels)
    }

    /// Writes `images.emb`, `conds.emb`, optional `labels.json` and
    /// `manifest.json` into `dir`; returns the manifest path.
    pub fn save_dataset(dir: &Path, data: &EmbeddingDataset) -> Result<PathBuf, DataError> {
        let manifest = PairingManifest {
            image_file: "images.emb".into(),
            cond_file: "conds.emb".into(),
            labels_file: data.labels.as_ref().map(|_| "labels.json".into()),
        };
        write_emb(&dir.join(&manifest.image_file), &data.images)?;
        write_emb(&dir.join(&manifest.cond_file), &data.conds)?;
        if let Some(labels) = &data.labels {
            let json = serde_json::to_vec(labels).expect("labels serialize");
            write_atomic(&dir.join("labels.json"), &json)?;
        }
        let path = dir.join("manifest.json");
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        write_atomic(&path, &json)?;
        Ok(path)
    }
}
