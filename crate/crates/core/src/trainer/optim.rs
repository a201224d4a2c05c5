//! AdamW with a linear learning-rate warm-up.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 20,
        }
    }
}

impl OptimConfig {
    /// Learning rate for 1-based step `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * (t as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// Moments are kept in f64 regardless of the parameter type.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: OptimConfig,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Element>(config: OptimConfig, params: &[&Tensor<T>]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update. A step with zero learning rate leaves every parameter
    /// untouched, bit for bit.
    pub fn step<T: Element>(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer holds {} parameters, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c = &self.config;
        let lr = c.lr_at(self.step);
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.len() != self.m[k].len() {
                return Err(Error::ShapeMismatch {
                    op: "adamw",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, gv) in g.data().iter().enumerate() {
                let gv = gv.as_f64();
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gv;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gv * gv;
            }
            if lr == 0.0 {
                continue;
            }
            let data = p
                .data()
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    let w = w.as_f64();
                    let update = (m[i] / bias1) / ((v[i] / bias2).sqrt() + c.eps) + c.weight_decay * w;
                    T::from_f64(w - lr * update)
                })
                .collect();
            **p = Tensor::new(p.rows(), p.cols(), data)?;
        }
        Ok(())
    }
}
