//! `SDCKPT1` checkpoints: magic, `u32` version, `u32` header length, a UTF-8
//! JSON header, then little-endian `f64` tensor blobs in header order.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::ClusterBank;
use crate::data::{write_atomic, DataError};
use crate::denoiser::{DenoiserConfig, DenoiserError, DenoiserParams};
use crate::gaussian::{DiagGaussian, GaussianError};
use crate::optim::AdamW;
use crate::scalar::{convert, Real};
use crate::schedule::ScheduleError;
use crate::trainer::{TrainConfig, TrainState};

pub const CKPT_MAGIC: &[u8; 7] = b"SDCKPT1";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {CKPT_VERSION})")]
    Version { found: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Write(#[from] DataError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataStatsHeader {
    mean: Vec<f64>,
    std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankHeader {
    k: usize,
    learnable: bool,
    xi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    denoiser: DenoiserConfig,
    step: u64,
    seed: u64,
    theta_adam_steps: u64,
    bank_adam_steps: Option<u64>,
    bank: BankHeader,
    data_stats: DataStatsHeader,
    tensors: Vec<TensorEntry>,
}

fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

/// Serializes the full training state.
pub fn encode_checkpoint<T: Real>(state: &TrainState<T>) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut blobs: Vec<Vec<f64>> = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, data: Vec<f64>| {
        tensors.push(TensorEntry { name, shape });
        blobs.push(data);
    };

    let names = state.params.names();
    for (name, t) in state.params.named() {
        add(format!("denoiser.{name}"), t.shape.clone(), to_f64(&t.data));
    }
    for (kind, moments) in [("m", state.opt.first_moments()), ("v", state.opt.second_moments())] {
        for (name, m) in names.iter().zip(moments) {
            add(format!("adam.{kind}.{name}"), vec![m.len()], to_f64(m));
        }
    }
    let d = state.bank.dim();
    for (i, g) in state.bank.gaussians().iter().enumerate() {
        add(format!("bank.{i}.mean"), vec![d], to_f64(g.mean()));
        add(format!("bank.{i}.var"), vec![d], to_f64(g.var()));
    }
    if let Some(ls) = state.bank.log_std() {
        for (i, l) in ls.iter().enumerate() {
            add(format!("bank.{i}.log_std"), vec![d], to_f64(l));
        }
    }
    if let Some(opt) = &state.bank_opt {
        for (kind, moments) in [("m", opt.first_moments()), ("v", opt.second_moments())] {
            for (j, m) in moments.iter().enumerate() {
                add(format!("bank_adam.{kind}.{j}"), vec![m.len()], to_f64(m));
            }
        }
    }

    let header = Header {
        config: state.config,
        denoiser: state.params.config,
        step: state.step,
        seed: state.config.seed,
        theta_adam_steps: state.opt.steps_taken(),
        bank_adam_steps: state.bank_opt.as_ref().map(AdamW::steps_taken),
        bank: BankHeader {
            k: state.bank.k(),
            learnable: state.bank.is_learnable(),
            xi: state.bank.xi().as_f64(),
        },
        data_stats: DataStatsHeader {
            mean: to_f64(&state.data_mean),
            std: to_f64(&state.data_std),
        },
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let total: usize = blobs.iter().map(Vec::len).sum();
    let mut out = Vec::with_capacity(CKPT_MAGIC.len() + 8 + json.len() + 8 * total);
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for blob in blobs {
        for x in blob {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt(format!("truncated while reading {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint into a state over scalar `T`.
pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<TrainState<T>, CheckpointError> {
    if bytes.len() < CKPT_MAGIC.len() || &bytes[..CKPT_MAGIC.len()] != CKPT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader {
        bytes,
        pos: CKPT_MAGIC.len(),
    };
    let version = r.u32("version")?;
    if version != CKPT_VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let len = r.u32("header length")? as usize;
    let header: Header = serde_json::from_slice(r.take(len, "header")?)
        .map_err(|e| corrupt(format!("header: {e}")))?;

    let mut blobs = std::collections::HashMap::new();
    for entry in &header.tensors {
        let n = entry
            .shape
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .ok_or_else(|| corrupt(format!("tensor {} is too large", entry.name)))?;
        let raw = r.take(
            n.checked_mul(8).ok_or_else(|| corrupt("tensor too large"))?,
            &entry.name,
        )?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if blobs.insert(entry.name.clone(), (entry.shape.clone(), data)).is_some() {
            return Err(corrupt(format!("duplicate tensor {}", entry.name)));
        }
    }
    if r.pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mut take = |name: &str| {
        blobs
            .remove(name)
            .ok_or_else(|| corrupt(format!("missing tensor {name}")))
    };

    let config = header.config;
    let mut params = DenoiserParams::<T>::init(header.denoiser, header.seed)?;
    let names = params.names();
    for name in &names {
        let (shape, data) = take(&format!("denoiser.{name}"))?;
        params.set_tensor(name, &shape, convert(&data))?;
    }
    let moments = |take: &mut dyn FnMut(&str) -> Result<(Vec<usize>, Vec<f64>), CheckpointError>,
                   prefix: &str,
                   keys: &[String]|
     -> Result<Vec<Vec<T>>, CheckpointError> {
        keys.iter()
            .map(|k| take(&format!("{prefix}{k}")).map(|(_, d)| convert(&d)))
            .collect()
    };
    let (m, v) = if header.theta_adam_steps > 0 {
        (moments(&mut take, "adam.m.", &names)?, moments(&mut take, "adam.v.", &names)?)
    } else {
        (Vec::new(), Vec::new())
    };
    let opt = AdamW::from_parts(config.adamw(), header.theta_adam_steps, m, v);

    let k = header.bank.k;
    if k == 0 {
        return Err(corrupt("empty cluster bank"));
    }
    let gaussians = (0..k)
        .map(|i| {
            let (_, mean) = take(&format!("bank.{i}.mean"))?;
            let (_, var) = take(&format!("bank.{i}.var"))?;
            Ok(DiagGaussian::new(convert(&mean), convert(&var))?)
        })
        .collect::<Result<Vec<_>, CheckpointError>>()?;
    let dim = gaussians[0].dim();
    if gaussians.iter().any(|g| g.dim() != dim) || dim != header.denoiser.dim {
        return Err(corrupt("cluster bank dimensions disagree"));
    }
    let log_std = if header.bank.learnable {
        Some(
            (0..k)
                .map(|i| take(&format!("bank.{i}.log_std")).map(|(_, d)| convert(&d)))
                .collect::<Result<Vec<Vec<T>>, _>>()?,
        )
    } else {
        None
    };
    let bank = ClusterBank::from_parts(gaussians, log_std, T::lit(header.bank.xi));
    let bank_opt = match header.bank_adam_steps {
        None => None,
        Some(0) => Some(AdamW::new(config.adamw())),
        Some(steps) => {
            let keys: Vec<String> = (0..2 * k).map(|j| j.to_string()).collect();
            let m = moments(&mut take, "bank_adam.m.", &keys)?;
            let v = moments(&mut take, "bank_adam.v.", &keys)?;
            Some(AdamW::from_parts(config.adamw(), steps, m, v))
        }
    };
    if let Some(name) = blobs.keys().next() {
        return Err(corrupt(format!("unexpected tensor {name}")));
    }
    let stats = &header.data_stats;
    if stats.mean.len() != dim || stats.std.len() != dim {
        return Err(corrupt("data statistics have the wrong dimension"));
    }
    Ok(TrainState {
        config,
        params,
        opt,
        bank,
        bank_opt,
        schedule: Arc::new(config.schedule()?),
        data_mean: convert(&stats.mean),
        data_std: convert(&stats.std),
        step: header.step,
    })
}

pub fn save_checkpoint<T: Real>(state: &TrainState<T>, path: &Path) -> Result<(), CheckpointError> {
    Ok(write_atomic(path, &encode_checkpoint(state))?)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<TrainState<T>, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
