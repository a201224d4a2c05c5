//! Gradient-fidelity probes: per-layer cosine against exact gradients,
//! placement sweeps, and finite-difference checks.

use rayon::prelude::*;
use serde::Serialize;

use super::data::Batch;
use super::model::{loss_and_grad, ToyModel};
use crate::error::{Error, Result};
use crate::halo::{HaloScheme, Matmul, Placement};
use crate::quantize::NumericFormat;
use crate::tensor::{cosine_similarity, Tensor};

/// A scheme to compare against full precision, under a short name.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Variant {
    pub name: String,
    pub scheme: HaloScheme,
}

impl Variant {
    pub fn new(name: &str, scheme: HaloScheme) -> Self {
        Self {
            name: name.to_string(),
            scheme,
        }
    }

    /// Forward-only, backward-only, and forward with a middle rotation.
    pub fn standard(format: NumericFormat) -> Result<Vec<Variant>> {
        Ok(vec![
            Variant::new("forward", HaloScheme::parse("F:O;E:-;G:-", format)?),
            Variant::new("backward", HaloScheme::parse("F:-;E:O;G:O", format)?),
            Variant::new("forward_hadamard", HaloScheme::parse("F:M;E:-;G:-", format)?),
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCosine {
    pub layer: String,
    pub variant: String,
    pub cosine: f64,
    pub param_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityReport {
    pub rows: Vec<LayerCosine>,
    /// `(variant, parameter-weighted mean cosine)` in variant order.
    pub weighted: Vec<(String, f64)>,
}

impl SensitivityReport {
    pub fn weighted_of(&self, variant: &str) -> Option<f64> {
        self.weighted.iter().find(|(n, _)| n == variant).map(|(_, c)| *c)
    }
}

/// Exact weight gradients: the model in f64 at full precision.
fn exact_weight_grads(model: &ToyModel<f32>, batch: &Batch<f32>) -> Result<Vec<Tensor<f64>>> {
    let mut m = model.cast::<f64>();
    m.set_scheme(&HaloScheme::full_precision());
    let b = batch.cast::<f64>();
    let (pred, cache) = m.forward(&b.x)?;
    let (_, d) = loss_and_grad(&pred, &b.targets)?;
    let g = m.backward(&cache, &d)?;
    g.weight_grads
        .into_iter()
        .map(|w| w.ok_or(Error::Config("sensitivity needs trainable weights".into())))
        .collect()
}

/// Loss and weight gradients of `model` under `scheme`.
fn scheme_pass(model: &ToyModel<f32>, batch: &Batch<f32>, scheme: &HaloScheme) -> Result<(f64, Vec<Tensor<f64>>)> {
    let mut m = model.clone();
    m.set_scheme(scheme);
    let (pred, cache) = m.forward(&batch.x)?;
    let (loss, d) = loss_and_grad(&pred, &batch.targets)?;
    let g = m.backward(&cache, &d)?;
    let grads = g
        .weight_grads
        .into_iter()
        .map(|w| {
            w.map(|t| t.cast::<f64>())
                .ok_or(Error::Config("sensitivity needs trainable weights".into()))
        })
        .collect::<Result<_>>()?;
    Ok((loss, grads))
}

fn weighted_mean(cosines: &[f64], counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    cosines.iter().zip(counts).map(|(c, &n)| c * n as f64).sum::<f64>() / total as f64
}

/// Cosine between each layer's weight gradient under every variant and the
/// exact gradient, plus the average weighted by parameter count.
pub fn sensitivity_report(
    model: &ToyModel<f32>,
    batch: &Batch<f32>,
    variants: &[Variant],
) -> Result<SensitivityReport> {
    if model.is_peft() {
        return Err(Error::Config("sensitivity needs a model without adapters".into()));
    }
    let exact = exact_weight_grads(model, batch)?;
    let names = model.linear_names();
    let counts: Vec<usize> = model.linears().iter().map(|l| l.weight.len()).collect();
    let mut rows = Vec::new();
    let mut weighted = Vec::new();
    for v in variants {
        let (_, grads) = scheme_pass(model, batch, &v.scheme)?;
        let cos = grads
            .iter()
            .zip(&exact)
            .map(|(g, e)| cosine_similarity(g, e))
            .collect::<Result<Vec<_>>>()?;
        for ((layer, &c), &n) in names.iter().zip(&cos).zip(&counts) {
            rows.push(LayerCosine {
                layer: layer.clone(),
                variant: v.name.clone(),
                cosine: c,
                param_count: n,
            });
        }
        weighted.push((v.name.clone(), weighted_mean(&cos, &counts)));
    }
    Ok(SensitivityReport { rows, weighted })
}

/// Which matmuls a placement sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AblationTarget {
    /// The other two matmuls stay unquantized; 8 rows.
    Single(Matmul),
    /// Every combination; 512 rows.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub placement: String,
    pub loss: f64,
    pub cosine: f64,
}

pub fn ablation_schemes(target: AblationTarget, format: NumericFormat) -> Vec<HaloScheme> {
    match target {
        AblationTarget::Full => HaloScheme::all_modes(format),
        AblationTarget::Single(m) => Placement::all()
            .into_iter()
            .map(|p| {
                let mut mask = [false; 3];
                mask[m as usize] = true;
                let mut s = HaloScheme::new([Placement::NONE; 3], format).with_quantize(mask);
                s.set_placement(m, p);
                s
            })
            .collect(),
    }
}

/// Loss and weighted gradient cosine for every placement in the sweep.
/// Rows run in parallel and come back in sweep order.
pub fn placement_ablation(
    model: &ToyModel<f32>,
    batch: &Batch<f32>,
    target: AblationTarget,
    format: NumericFormat,
) -> Result<Vec<AblationRow>> {
    if model.is_peft() {
        return Err(Error::Config("ablation needs a model without adapters".into()));
    }
    let exact = exact_weight_grads(model, batch)?;
    let counts: Vec<usize> = model.linears().iter().map(|l| l.weight.len()).collect();
    ablation_schemes(target, format)
        .par_iter()
        .map(|s| {
            let (loss, grads) = scheme_pass(model, batch, s)?;
            let cos = grads
                .iter()
                .zip(&exact)
                .map(|(g, e)| cosine_similarity(g, e))
                .collect::<Result<Vec<_>>>()?;
            Ok(AblationRow {
                placement: s.placement_string(),
                loss,
                cosine: weighted_mean(&cos, &counts),
            })
        })
        .collect()
}

/// Central differences of a scalar function, one entry at a time.
pub fn numeric_gradient(f: impl Fn(&Tensor<f64>) -> Result<f64>, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>> {
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let v = x.get(i, j);
            probe.set(i, j, v + h);
            let up = f(&probe)?;
            probe.set(i, j, v - h);
            let down = f(&probe)?;
            probe.set(i, j, v);
            grad.push((up - down) / (2.0 * h));
        }
    }
    Tensor::new(x.rows(), x.cols(), grad)
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn gradient_gap(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> Result<f64> {
    let diff = analytic.sub(numeric)?.frobenius_norm();
    let scale = analytic.frobenius_norm().max(numeric.frobenius_norm());
    Ok(if scale == 0.0 { diff } else { diff / scale })
}

/// Gap between the model's analytic parameter and input gradients and
/// central differences, by name (`"input"` last). Meaningful at full
/// precision, where the loss is smooth.
pub fn model_gradcheck(model: &ToyModel<f64>, batch: &Batch<f64>, h: f64) -> Result<Vec<(String, f64)>> {
    let (pred, cache) = model.forward(&batch.x)?;
    let (_, d) = loss_and_grad(&pred, &batch.targets)?;
    let analytic = model.backward(&cache, &d)?;
    let loss_of = |m: &ToyModel<f64>, x: &Tensor<f64>| -> Result<f64> {
        let (p, _) = m.forward(x)?;
        Ok(loss_and_grad(&p, &batch.targets)?.0)
    };
    let mut out = Vec::new();
    for (k, name) in model.param_names().into_iter().enumerate() {
        let base = model.params()[k].clone();
        let numeric = numeric_gradient(
            |p| {
                let mut m = model.clone();
                *m.params_mut()[k] = p.clone();
                loss_of(&m, &batch.x)
            },
            &base,
            h,
        )?;
        out.push((name, gradient_gap(&analytic.grads[k], &numeric)?));
    }
    let numeric = numeric_gradient(|x| loss_of(model, x), &batch.x, h)?;
    out.push(("input".into(), gradient_gap(&analytic.input, &numeric)?));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::model::{ModelConfig, Targets};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ToyModel<f32>, Batch<f32>) {
        let cfg = ModelConfig {
            dim: 8,
            ffn_dim: 16,
            blocks: 1,
            out_dim: 2,
            norm_gain: true,
            lora_rank: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = ToyModel::init(cfg, HaloScheme::full_precision(), &mut rng).unwrap();
        let x = Tensor::randn(8, 8, 1.0, &mut rng);
        let t = Tensor::randn(8, 2, 1.0, &mut rng);
        (
            m,
            Batch {
                x,
                targets: Targets::Values(t),
            },
        )
    }

    #[test]
    fn identity_variants_are_exact() {
        let (m, b) = setup();
        let id = NumericFormat::Identity;
        let r = sensitivity_report(&m, &b, &Variant::standard(id).unwrap()).unwrap();
        assert_eq!(r.rows.len(), 6);
        for row in &r.rows {
            assert!((row.cosine - 1.0).abs() < 1e-5, "{row:?}");
        }
    }

    #[test]
    fn single_matmul_sweep_has_eight_rows() {
        let (m, b) = setup();
        let rows =
            placement_ablation(&m, &b, AblationTarget::Single(Matmul::Forward), NumericFormat::Identity).unwrap();
        assert_eq!(rows.len(), 8);
        assert_eq!(rows[0].placement, "F:O;E:-;G:-");
        for r in &rows {
            assert!((r.loss - rows[0].loss).abs() <= 1e-4 * rows[0].loss.abs().max(1.0));
        }
    }

    #[test]
    fn numeric_gradient_of_a_quadratic() {
        let x = Tensor::<f64>::from_rows(&[&[1.0, -2.0]]);
        let g = numeric_gradient(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-4).unwrap();
        assert!(gradient_gap(&x.scale(2.0), &g).unwrap() < 1e-9);
    }
}
