//! RMSProp without momentum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub lr: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_rho() -> f64 {
    0.9
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig {
            lr: 5e-5,
            rho: default_rho(),
            eps: default_eps(),
        }
    }
}

impl RmsPropConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.rho > 0.0 && self.rho < 1.0) || !(self.eps > 0.0) {
            return Err(Error::Config(format!("invalid RMSProp settings {self:?}")));
        }
        Ok(())
    }
}

/// Per-parameter running mean of squared gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp {
    pub config: RmsPropConfig,
    ms: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(config: RmsPropConfig, params: &ParamStore) -> Self {
        RmsProp {
            config,
            ms: params.tensors().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn mean_square(&self) -> &[Vec<f64>] {
        &self.ms
    }

    /// `ms ← ρ·ms + (1-ρ)·g²; θ ← θ - lr·g/(√ms + ε)`.
    ///
    /// A non-finite gradient aborts the step before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], iteration: usize) -> Result<()> {
        if grads.len() != self.ms.len() {
            return Err(Error::Usage(format!(
                "{} gradients for {} parameter tensors",
                grads.len(),
                self.ms.len()
            )));
        }
        for (k, (g, p)) in grads.iter().zip(params.tensors()).enumerate() {
            if g.shape() != p.shape() {
                return Err(Error::Usage(format!(
                    "gradient {k} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    iteration,
                    what: format!("gradient of parameter tensor {k}"),
                });
            }
        }
        let RmsPropConfig { lr, rho, eps } = self.config;
        for ((p, g), ms) in params.tensors_mut().zip(grads).zip(&mut self.ms) {
            for ((theta, &gv), m) in p.data_mut().iter_mut().zip(g.data()).zip(ms.iter_mut()) {
                *m = rho * *m + (1.0 - rho) * gv * gv;
                *theta -= lr * gv / (m.sqrt() + eps);
            }
        }
        Ok(())
    }
}
