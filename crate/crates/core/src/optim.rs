//! RMSProp.

use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub learning_rate: f64,
    /// Decay of the running mean-square, in (0, 1).
    pub smoothing: f64,
    pub epsilon: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2.5e-4,
            smoothing: 0.99,
            epsilon: 1e-8,
        }
    }
}

/// RMSProp with per-element running mean-square:
///
/// ```text
/// s ← ρ·s + (1 − ρ)·g²
/// θ ← θ − lr·g / (√s + ε)
/// ```
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub config: RmsPropConfig,
    mean_square: Vec<Tensor>,
}

impl RmsProp {
    pub fn new(config: RmsPropConfig) -> Self {
        Self {
            config,
            mean_square: Vec::new(),
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// Applies one update. State is created lazily on the first call and is
    /// matched to parameters by position.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(shape_mismatch("rmsprop_step", &[params.len()], &[grads.len()]));
        }
        if self.mean_square.is_empty() {
            self.mean_square = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        let RmsPropConfig {
            learning_rate: lr,
            smoothing: rho,
            epsilon: eps,
        } = self.config;
        for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut self.mean_square) {
            if p.shape() != g.shape() || p.shape() != s.shape() {
                return Err(shape_mismatch("rmsprop_step", p.shape(), g.shape()));
            }
            for ((pv, &gv), sv) in p.data_mut().iter_mut().zip(g.data()).zip(s.data_mut()) {
                *sv = rho * *sv + (1.0 - rho) * gv * gv;
                *pv -= lr * gv / (sv.sqrt() + eps);
            }
        }
        Ok(())
    }
}
