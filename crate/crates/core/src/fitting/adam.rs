use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    /// Encoder-training rate.
    pub const FIELD: AdamConfig = AdamConfig { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 };
    /// Per-scene fitting rate.
    pub const FIT: AdamConfig = AdamConfig { learning_rate: 1e-2, ..Self::FIELD };
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::FIELD
    }
}

/// First/second moment estimates for bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(dim: usize, config: AdamConfig) -> Self {
        Self { config, m: vec![0.0; dim], v: vec![0.0; dim], t: 0 }
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    /// Grows the moment vectors with zeros for newly appended parameters.
    pub fn resize(&mut self, dim: usize) {
        self.m.resize(dim, 0.0);
        self.v.resize(dim, 0.0);
    }

    /// One update in place: m ← β₁m + (1−β₁)g, v ← β₂v + (1−β₂)g²,
    /// params −= α·m̂/(√v̂ + ε).
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_dim("adam params", self.m.len(), params.len())?;
        check_dim("adam grads", self.m.len(), grads.len())?;
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(state: &mut AdamState, params: &[f64], grads: &[f64]) -> Result<Vec<f64>> {
    let mut out = params.to_vec();
    state.step(&mut out, grads)?;
    Ok(out)
}
