//! AdamW with decoupled weight decay.

use crate::autodiff::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Per-parameter first/second moments plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

/// Why an optimizer step was skipped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SkippedStep {
    NonFiniteGradient { param: String },
}

impl AdamW {
    pub fn new(config: AdamWConfig, param_shapes: &[Vec<usize>]) -> Self {
        AdamW {
            config,
            m: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
        }
    }

    /// One decoupled-weight-decay update. `params` and `grads` are aligned;
    /// the bool marks whether weight decay applies to that tensor. A
    /// non-finite gradient anywhere skips the whole step.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor, bool)],
        grads: &[Tensor],
        lr: f64,
    ) -> Result<(), SkippedStep> {
        assert_eq!(params.len(), grads.len());
        for ((name, p, _), g) in params.iter().zip(grads) {
            assert_eq!(
                p.shape(),
                g.shape(),
                "gradient shape mismatch for {name}"
            );
            if !g.is_finite() {
                return Err(SkippedStep::NonFiniteGradient {
                    param: name.clone(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, ((_, p, decay), g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let pd = p.data_mut();
            let gd = g.data();
            for j in 0..pd.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gd[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gd[j] * gd[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                pd[j] -= lr * mhat / (vhat.sqrt() + c.eps);
                if *decay {
                    pd[j] -= lr * c.weight_decay * pd[j];
                }
            }
        }
        Ok(())
    }
}
