//! Deterministic small-scale training over HALO layers, optionally through
//! the sharded-gather simulator.

pub mod analysis;
pub mod data;
pub mod model;
pub mod optim;
pub mod rmsnorm;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use analysis::{
    model_gradcheck, numeric_gradient, placement_ablation, sensitivity_report, AblationRow, AblationTarget,
    SensitivityReport, Variant,
};
pub use data::{Batch, Dataset, GlyphConfig, GlyphTask, RegressionConfig, RegressionTask};
pub use model::{loss_and_grad, LossKind, ModelConfig, Targets, ToyModel};
pub use optim::{AdamW, OptimConfig};
pub use rmsnorm::{distributivity_gaps, distributivity_probe, rmsnorm_backward, rmsnorm_forward, RmsNorm};

use crate::error::{Error, Result};
use crate::fsdp::{
    all_reduce_mean, backward_regather, quantized_all_gather, reduce_scatter_grads, shard, CommLedger, ShardedParam,
    WorldConfig,
};
use crate::halo::{HaloScheme, Matmul, QuantCalls, Rotation};
use crate::quantize::{Granularity, QuantizedTensor};
use crate::tensor::Tensor;

/// Evaluation batches are drawn from steps this far past any training step.
pub const EVAL_OFFSET: usize = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FsdpOptions {
    pub world_size: usize,
    /// One backward gather feeds both the recomputed forward and the
    /// backward pass.
    pub checkpointing: bool,
    /// Recompute AbsMax before every backward gather and fail on a mismatch.
    pub check_stale: bool,
}

impl Default for FsdpOptions {
    fn default() -> Self {
        Self {
            world_size: 1,
            checkpointing: false,
            check_stale: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub optim: OptimConfig,
    pub fsdp: Option<FsdpOptions>,
    /// Losses above this, or non-finite, abort the run.
    pub divergence_threshold: f64,
    /// Held-out batches scored after training; 0 skips evaluation.
    pub eval_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            optim: OptimConfig::default(),
            fsdp: None,
            divergence_threshold: 1e6,
            eval_batches: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub calls: QuantCalls,
    pub ledger: Option<CommLedger>,
    /// Mean held-out loss of the trained model under its own scheme.
    pub eval_loss: Option<f64>,
    /// The same with every product at full precision.
    pub eval_loss_full_precision: Option<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

fn global_norm(grads: &[Tensor<f32>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// Mean loss of `model` over held-out batches.
pub fn evaluate(model: &ToyModel<f32>, data: &dyn Dataset, batches: usize) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..batches {
        let b = data.batch(EVAL_OFFSET + i)?;
        let (pred, _) = model.forward(&b.x)?;
        total += loss_and_grad(&pred, &b.targets)?.0;
    }
    Ok(total / batches.max(1) as f64)
}

/// Runs `config.steps` AdamW steps on `model` in place.
pub fn train(model: &mut ToyModel<f32>, data: &dyn Dataset, config: &TrainConfig) -> Result<TrainReport> {
    let mut opt = AdamW::new(config.optim.clone(), &model.params());
    let mut records = Vec::with_capacity(config.steps);
    let mut calls = QuantCalls::default();
    let mut ledger = match config.fsdp {
        Some(f) => {
            WorldConfig::new(f.world_size)?;
            check_fsdp_scheme(model)?;
            Some(CommLedger::new(f.world_size))
        }
        None => None,
    };
    let diverged = |step: usize, loss: f64| Error::Diverged { step, loss };
    for step in 0..config.steps {
        let batch = data.batch(step)?;
        let (loss, grads, step_calls) = match (&config.fsdp, ledger.as_mut()) {
            (Some(f), Some(l)) => sharded_step(model, &batch, f, l),
            _ => local_step(model, &batch),
        }
        .map_err(|e| match e {
            Error::NonFinite { .. } => diverged(step, f64::NAN),
            other => other,
        })?;
        if !loss.is_finite() || loss > config.divergence_threshold {
            return Err(diverged(step, loss));
        }
        calls += step_calls;
        records.push(StepRecord {
            step,
            loss,
            grad_norm: global_norm(&grads),
        });
        opt.step(&mut model.params_mut(), &grads).map_err(|e| match e {
            Error::NonFinite { .. } => diverged(step, loss),
            other => other,
        })?;
    }
    let (eval_loss, eval_loss_full_precision) = if config.eval_batches > 0 {
        let mut exact = model.clone();
        exact.set_scheme(&HaloScheme::full_precision());
        (
            Some(evaluate(model, data, config.eval_batches)?),
            Some(evaluate(&exact, data, config.eval_batches)?),
        )
    } else {
        (None, None)
    };
    Ok(TrainReport {
        records,
        calls,
        ledger,
        eval_loss,
        eval_loss_full_precision,
    })
}

fn local_step(model: &ToyModel<f32>, batch: &Batch<f32>) -> Result<(f64, Vec<Tensor<f32>>, QuantCalls)> {
    let (pred, cache) = model.forward(&batch.x)?;
    let (loss, d) = loss_and_grad(&pred, &batch.targets)?;
    let g = model.backward(&cache, &d)?;
    Ok((loss, g.grads, g.calls))
}

/// The sharded gather delivers weights rotated over their columns only,
/// quantized per tensor, and serves both weight products.
fn check_fsdp_scheme(model: &ToyModel<f32>) -> Result<()> {
    for l in model.linears() {
        let s = &l.scheme;
        if !s.quantizes(Matmul::Forward) {
            return Err(Error::InvalidScheme(
                "sharded training needs a quantized forward product".into(),
            ));
        }
        if s.granularity != Granularity::PerTensor {
            return Err(Error::InvalidScheme(format!(
                "sharded gathers quantize per tensor, scheme uses {}",
                s.granularity
            )));
        }
        let fr = l.forward_weight_rotation();
        if fr.left {
            return Err(Error::InvalidScheme("row rotation of a row-sharded weight".into()));
        }
        if s.quantizes(Matmul::Error) && l.error_weight_rotation() != fr {
            return Err(Error::InvalidScheme(
                "error product needs a different weight rotation than the forward".into(),
            ));
        }
    }
    Ok(())
}

/// One step with every linear weight sharded. All ranks see the same batch,
/// so the averaged gradients, and hence the trajectory, do not depend on the
/// world size.
fn sharded_step(
    model: &ToyModel<f32>,
    batch: &Batch<f32>,
    opts: &FsdpOptions,
    ledger: &mut CommLedger,
) -> Result<(f64, Vec<Tensor<f32>>, QuantCalls)> {
    let world = WorldConfig::new(opts.world_size)?;
    let ranks = world.world_size;
    let mut params: Vec<ShardedParam> = model
        .linears()
        .iter()
        .map(|l| shard(&l.weight, &world, l.scheme.format_w))
        .collect();

    let mut gathered: Vec<(Rotation, QuantizedTensor)> = Vec::with_capacity(params.len());
    for (p, l) in params.iter_mut().zip(model.linears()) {
        let rot = l.forward_weight_rotation();
        let q = quantized_all_gather(p, rot.right, ledger)?;
        gathered.push((rot, p.strip_padding(&q)?));
    }

    let forwards = (0..ranks)
        .into_par_iter()
        .map(|_| {
            let (pred, cache) = model.forward_with(&batch.x, Some(&gathered))?;
            let (loss, d) = loss_and_grad(&pred, &batch.targets)?;
            Ok((loss, cache, d))
        })
        .collect::<Result<Vec<_>>>()?;

    let consumers = if opts.checkpointing { 2 } else { 1 };
    let mut regathered = Vec::with_capacity(params.len());
    for (p, (rot, _)) in params.iter().zip(&gathered) {
        let q = backward_regather(p, p.global_scale(), opts.check_stale, consumers, ledger)?;
        regathered.push((*rot, p.strip_padding(&q)?));
    }

    let results = forwards
        .into_par_iter()
        .map(|(loss, cache, d)| {
            let cache = if opts.checkpointing {
                model.forward_with(&batch.x, Some(&regathered))?.1
            } else {
                cache
            };
            let g = model.backward_with(&cache, &d, Some(&regathered))?;
            Ok((loss, g))
        })
        .collect::<Result<Vec<_>>>()?;

    let loss = results[0].0;
    let calls = results[0].1.calls;
    let names = model.param_names();
    let linear_names = model.linear_names();
    let mut grads = Vec::with_capacity(names.len());
    for (k, name) in names.iter().enumerate() {
        let per_rank: Vec<Tensor<f32>> = results.iter().map(|(_, g)| g.grads[k].clone()).collect();
        match linear_names.iter().position(|n| n == name) {
            Some(li) => {
                let shards = reduce_scatter_grads(&per_rank, &params[li], ledger)?;
                let nonempty: Vec<Tensor<f32>> = shards.into_iter().filter(|s| s.rows() > 0).collect();
                grads.push(Tensor::vstack(&nonempty)?);
            }
            None => grads.push(all_reduce_mean(&per_rank, ledger)?),
        }
    }
    Ok((loss, grads, calls))
}
