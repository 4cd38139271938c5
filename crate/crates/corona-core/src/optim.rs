//! Adam optimizer over a flat parameter vector.
//!
//! Both trainable models (subgraph retriever, GCN ranker) flatten their
//! tensors into one contiguous vector for the update step, which also keeps
//! the finite-difference gradient checks trivial to index.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-6, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self { learning_rate, ..Self::default() }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Self { config, step: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    /// One bias-corrected update. `params` and `grad` must match the length
    /// given at construction.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grad.len(), self.m.len(), "gradient count mismatch");
        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bias1;
            let v_hat = self.v[i] / bias2;
            params[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descends_a_quadratic() {
        let mut adam = Adam::new(AdamConfig::with_learning_rate(0.1), 2);
        let mut params = vec![3.0, -2.0];
        for _ in 0..500 {
            let grad: Vec<f64> = params.iter().map(|&p| 2.0 * p).collect();
            adam.step(&mut params, &grad);
        }
        assert!(params[0].abs() < 1e-2);
        assert!(params[1].abs() < 1e-2);
    }

    #[test]
    fn zero_learning_rate_leaves_params_bit_exact() {
        let mut adam = Adam::new(AdamConfig::with_learning_rate(0.0), 3);
        let mut params = vec![0.5, -1.25, 3.75];
        let before = params.clone();
        for _ in 0..10 {
            adam.step(&mut params, &[1.0, -2.0, 0.5]);
        }
        assert_eq!(params, before);
    }

    #[test]
    fn first_step_moves_by_roughly_learning_rate() {
        let mut adam = Adam::new(AdamConfig::with_learning_rate(1e-3), 1);
        let mut params = vec![1.0];
        adam.step(&mut params, &[0.7]);
        // Bias correction makes the first step magnitude ~lr regardless of
        // gradient scale.
        assert!((params[0] - (1.0 - 1e-3)).abs() < 1e-6);
    }
}
