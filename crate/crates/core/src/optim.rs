//! AdamW with decoupled weight decay and bias-corrected moments.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("got {got} gradient tensors for {expected} parameter tensors")]
    TensorCount { expected: usize, got: usize },
    #[error("tensor {index}: parameter length {expected}, gradient length {got}")]
    Shape {
        index: usize,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.96,
            eps: 1e-6,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub(crate) fn from_parts(config: AdamWConfig, step: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) -> Self {
        Self { config, step, m, v }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.v
    }

    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<(), OptimError> {
        if params.len() != grads.len() {
            return Err(OptimError::TensorCount {
                expected: params.len(),
                got: grads.len(),
            });
        }
        for (index, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(OptimError::Shape {
                    index,
                    expected: p.len(),
                    got: g.len(),
                });
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(OptimError::TensorCount {
                expected: self.m.len(),
                got: params.len(),
            });
        }

        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        let decay = T::one() - lr * T::lit(c.weight_decay);
        let bc1 = T::one() - b1.powi(self.step as i32);
        let bc2 = T::one() - b2.powi(self.step as i32);

        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] = p[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
