use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// The usual library defaults: lr 1e-3, betas (0.9, 0.999), eps 1e-8.
    pub fn local_default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::local_default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::local_default()
    }
}

/// Adam moments over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        AdamState {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// One bias-corrected Adam update. `params` and `grads` are visited in
    /// lockstep and must both yield exactly `len()` entries.
    pub fn step<'a, 'b>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut f64>,
        grads: impl IntoIterator<Item = &'b f64>,
    ) -> Result<()> {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let mut params = params.into_iter();
        let mut grads = grads.into_iter();
        for i in 0..self.m.len() {
            let (Some(p), Some(&g)) = (params.next(), grads.next()) else {
                return Err(FedError::Usage(format!(
                    "adam state has {} entries but parameters ran out at {i}",
                    self.m.len()
                )));
            };
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        if params.next().is_some() || grads.next().is_some() {
            return Err(FedError::Usage(format!(
                "adam state has {} entries but more parameters were supplied",
                self.m.len()
            )));
        }
        Ok(())
    }

    /// Convenience for slices.
    pub fn step_slice(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(FedError::Usage(
                "parameter and gradient lengths differ".into(),
            ));
        }
        self.step(params.iter_mut(), grads.iter())
    }

    /// Reorders moment segments; used when heads are permuted.
    /// `segments[i]` is the (offset, len) of block i; `source[i]` names the old
    /// block that new block i inherits from, or `None` to reset it.
    pub fn remap_segments(&mut self, segments: &[(usize, usize)], source: &[Option<usize>]) {
        let old_m = self.m.clone();
        let old_v = self.v.clone();
        for (i, &(off, len)) in segments.iter().enumerate() {
            match source[i] {
                Some(j) => {
                    let (src, _) = segments[j];
                    self.m[off..off + len].copy_from_slice(&old_m[src..src + len]);
                    self.v[off..off + len].copy_from_slice(&old_v[src..src + len]);
                }
                None => {
                    self.m[off..off + len].fill(0.0);
                    self.v[off..off + len].fill(0.0);
                }
            }
        }
    }
}
