//! A small residual stack of `(RMSNorm, linear, SiLU, linear)` blocks over
//! HALO layers, with a working-precision output head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::rmsnorm::RmsNorm;
use crate::error::{Error, Result};
use crate::halo::{HaloLinear, HaloScheme, QuantCalls, Rotation, SavedContext};
use crate::quantize::QuantizedTensor;
use crate::tensor::{Accumulate, Element, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Residual width; rotated by middle placements, so it must be a
    /// supported Hadamard order.
    pub dim: usize,
    pub ffn_dim: usize,
    pub blocks: usize,
    pub out_dim: usize,
    /// Trainable gain after normalization, initialized to `sqrt(dim)`.
    pub norm_gain: bool,
    /// LoRA rank; 0 trains the weights directly.
    pub lora_rank: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            ffn_dim: 128,
            blocks: 4,
            out_dim: 16,
            norm_gain: true,
            lora_rank: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Block<T: Element = f32> {
    pub norm: RmsNorm<T>,
    pub up: HaloLinear<T>,
    pub down: HaloLinear<T>,
}

#[derive(Debug, Clone)]
pub struct ToyModel<T: Element = f32> {
    pub config: ModelConfig,
    pub blocks: Vec<Block<T>>,
    /// `out_dim x dim`, never quantized.
    pub head: Tensor<T>,
}

struct BlockCache<T: Element> {
    x: Tensor<T>,
    z: Tensor<T>,
    up: SavedContext<T>,
    down: SavedContext<T>,
}

/// Activations kept between forward and backward.
pub struct ForwardCache<T: Element> {
    blocks: Vec<BlockCache<T>>,
    h: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ModelGrads<T: Element> {
    /// In [`ToyModel::param_names`] order.
    pub grads: Vec<Tensor<T>>,
    pub input: Tensor<T>,
    /// Per linear layer, in [`ToyModel::linear_names`] order; absent for
    /// frozen weights.
    pub weight_grads: Vec<Option<Tensor<T>>>,
    pub calls: QuantCalls,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu<T: Element>(z: &Tensor<T>) -> Tensor<T> {
    z.map(|v| {
        let x = v.as_f64();
        T::from_f64(x * sigmoid(x))
    })
}

fn silu_grad<T: Element>(z: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let d = z.map(|v| {
        let x = v.as_f64();
        let s = sigmoid(x);
        T::from_f64(s * (1.0 + x * (1.0 - s)))
    });
    d.hadamard_product(upstream)
}

impl<T: Element> ToyModel<T> {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, scheme: HaloScheme, rng: &mut R) -> Result<Self> {
        let ModelConfig {
            dim,
            ffn_dim,
            blocks,
            out_dim,
            ..
        } = config;
        if dim == 0 || ffn_dim == 0 || blocks == 0 || out_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        let mut out = Vec::with_capacity(blocks);
        for _ in 0..blocks {
            let norm = if config.norm_gain {
                RmsNorm::with_gain(dim, (dim as f64).sqrt())
            } else {
                RmsNorm::new(dim)
            };
            let w_up = Tensor::randn(ffn_dim, dim, 1.0 / (dim as f64).sqrt(), rng);
            let w_down = Tensor::randn(dim, ffn_dim, 1.0 / (ffn_dim as f64).sqrt(), rng);
            out.push(Block {
                norm,
                up: HaloLinear::new(w_up, scheme.clone()),
                down: HaloLinear::new(w_down, scheme.clone()),
            });
        }
        let head = Tensor::randn(out_dim, dim, 1.0 / (dim as f64).sqrt(), rng);
        let mut model = Self {
            config,
            blocks: out,
            head,
        };
        if model.config.lora_rank > 0 {
            model.attach_lora(rng)?;
        }
        Ok(model)
    }

    /// Adds rank-`lora_rank` adapters to every linear layer: `U` random,
    /// `V` zero, so the initial function is unchanged.
    pub fn attach_lora<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let r = self.config.lora_rank.max(1);
        self.config.lora_rank = r;
        for layer in self.linears_mut() {
            let (n, m) = layer.weight.shape();
            let u = Tensor::randn(r, m, 1.0 / (m as f64).sqrt(), rng);
            let v = Tensor::zeros(n, r);
            *layer = layer.clone().with_lora(u, v)?;
        }
        Ok(())
    }

    pub fn is_peft(&self) -> bool {
        self.config.lora_rank > 0
    }

    pub fn cast<U: Element>(&self) -> ToyModel<U> {
        let lin = |l: &HaloLinear<T>| HaloLinear {
            weight: l.weight.cast(),
            lora: l.lora.as_ref().map(|a| crate::halo::Lora {
                u: a.u.cast(),
                v: a.v.cast(),
            }),
            scheme: l.scheme.clone(),
            pad_batch: l.pad_batch,
        };
        ToyModel {
            config: self.config.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    norm: RmsNorm {
                        dim: b.norm.dim,
                        gain: b.norm.gain.as_ref().map(|g| g.cast()),
                    },
                    up: lin(&b.up),
                    down: lin(&b.down),
                })
                .collect(),
            head: self.head.cast(),
        }
    }

    pub fn set_scheme(&mut self, scheme: &HaloScheme) {
        for l in self.linears_mut() {
            l.scheme = scheme.clone();
        }
    }

    pub fn linears(&self) -> Vec<&HaloLinear<T>> {
        self.blocks.iter().flat_map(|b| [&b.up, &b.down]).collect()
    }

    pub fn linears_mut(&mut self) -> Vec<&mut HaloLinear<T>> {
        self.blocks.iter_mut().flat_map(|b| [&mut b.up, &mut b.down]).collect()
    }

    pub fn linear_names(&self) -> Vec<String> {
        (0..self.blocks.len())
            .flat_map(|i| [format!("block{i}.up"), format!("block{i}.down")])
            .collect()
    }

    /// Trainable parameters. Under LoRA only the adapters train.
    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            if !self.is_peft() && b.norm.gain.is_some() {
                out.push(format!("block{i}.norm"));
            }
            for part in ["up", "down"] {
                if self.is_peft() {
                    out.push(format!("block{i}.{part}.lora_u"));
                    out.push(format!("block{i}.{part}.lora_v"));
                } else {
                    out.push(format!("block{i}.{part}"));
                }
            }
        }
        if !self.is_peft() {
            out.push("head".into());
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let peft = self.is_peft();
        let mut out = Vec::new();
        for b in &self.blocks {
            if let (false, Some(g)) = (peft, &b.norm.gain) {
                out.push(g);
            }
            for l in [&b.up, &b.down] {
                match (&l.lora, peft) {
                    (Some(a), true) => {
                        out.push(&a.u);
                        out.push(&a.v);
                    }
                    _ => out.push(&l.weight),
                }
            }
        }
        if !peft {
            out.push(&self.head);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let peft = self.is_peft();
        let mut out = Vec::new();
        for b in &mut self.blocks {
            if let (false, Some(g)) = (peft, &mut b.norm.gain) {
                out.push(g);
            }
            for l in [&mut b.up, &mut b.down] {
                match (&mut l.lora, peft) {
                    (Some(a), true) => {
                        out.push(&mut a.u);
                        out.push(&mut a.v);
                    }
                    _ => out.push(&mut l.weight),
                }
            }
        }
        if !peft {
            out.push(&mut self.head);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.forward_with(x, None)
    }

    /// Forward pass; `weights` optionally supplies each linear layer's
    /// quantized weight (in [`Self::linear_names`] order) with its rotation.
    pub fn forward_with(
        &self,
        x: &Tensor<T>,
        weights: Option<&[(Rotation, QuantizedTensor)]>,
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        if x.cols() != self.config.dim {
            return Err(Error::ShapeMismatch {
                op: "model input",
                left: x.shape(),
                right: (x.rows(), self.config.dim),
            });
        }
        let layer_fwd = |l: &HaloLinear<T>, i: usize, input: &Tensor<T>| match weights {
            Some(w) => l.forward_with_weight(input, &w[i].1, w[i].0),
            None => l.forward(input),
        };
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let normed = b.norm.forward(&h)?;
            let (z, up) = layer_fwd(&b.up, 2 * i, &normed)?;
            let a = silu(&z);
            let (d, down) = layer_fwd(&b.down, 2 * i + 1, &a)?;
            let next = h.add(&d)?;
            caches.push(BlockCache { x: h, z, up, down });
            h = next;
        }
        let out = h.matmul(&self.head.transpose(), Accumulate::Single)?;
        Ok((out, ForwardCache { blocks: caches, h }))
    }

    pub fn backward(&self, cache: &ForwardCache<T>, d_out: &Tensor<T>) -> Result<ModelGrads<T>> {
        self.backward_with(cache, d_out, None)
    }

    pub fn backward_with(
        &self,
        cache: &ForwardCache<T>,
        d_out: &Tensor<T>,
        weights: Option<&[(Rotation, QuantizedTensor)]>,
    ) -> Result<ModelGrads<T>> {
        let peft = self.is_peft();
        let layer_bwd = |l: &HaloLinear<T>, i: usize, ctx: &SavedContext<T>, e: &Tensor<T>| match weights {
            Some(w) => l.backward_with_weight(ctx, e, &w[i].1, w[i].0),
            None => l.backward(ctx, e),
        };
        let g_head = d_out.transpose().matmul(&cache.h, Accumulate::Single)?;
        let mut dh = d_out.matmul(&self.head, Accumulate::Single)?;
        let mut calls = QuantCalls::default();
        // Collected back to front, reversed at the end.
        let mut rev: Vec<Tensor<T>> = Vec::new();
        let mut rev_weight: Vec<Option<Tensor<T>>> = Vec::new();
        for (i, (b, c)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let gd = layer_bwd(&b.down, 2 * i + 1, &c.down, &dh)?;
            let dz = silu_grad(&c.z, &gd.e_x)?;
            let gu = layer_bwd(&b.up, 2 * i, &c.up, &dz)?;
            let (dx_norm, g_gain) = b.norm.backward(&c.x, &gu.e_x)?;
            calls += gd.calls;
            calls += gu.calls;
            for g in [&gd, &gu] {
                if peft {
                    rev.push(g.g_v.clone().expect("adapter gradient"));
                    rev.push(g.g_u.clone().expect("adapter gradient"));
                } else {
                    rev.push(g.g_w.clone().expect("weight gradient"));
                }
                rev_weight.push(g.g_w.clone());
            }
            if let (false, Some(gg)) = (peft, g_gain) {
                rev.push(gg);
            }
            dh = dh.add(&dx_norm)?;
        }
        rev.reverse();
        rev_weight.reverse();
        if !peft {
            rev.push(g_head);
        }
        Ok(ModelGrads {
            grads: rev,
            input: dh,
            weight_grads: rev_weight,
            calls,
        })
    }
}

/// Regression targets or class labels.
#[derive(Debug, Clone)]
pub enum Targets<T: Element = f32> {
    Values(Tensor<T>),
    Labels(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean of squared errors over all entries.
    Mse,
    /// Mean over rows of softmax cross-entropy.
    CrossEntropy,
}

/// Loss value and its gradient with respect to the predictions.
pub fn loss_and_grad<T: Element>(pred: &Tensor<T>, targets: &Targets<T>) -> Result<(f64, Tensor<T>)> {
    match targets {
        Targets::Values(t) => {
            if t.shape() != pred.shape() {
                return Err(Error::ShapeMismatch {
                    op: "mse",
                    left: pred.shape(),
                    right: t.shape(),
                });
            }
            let n = pred.len().max(1) as f64;
            let diff: Vec<f64> = pred
                .data()
                .iter()
                .zip(t.data())
                .map(|(p, q)| p.as_f64() - q.as_f64())
                .collect();
            let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
            let grad = Tensor::from_fn(pred.rows(), pred.cols(), |i, j| {
                T::from_f64(2.0 * diff[i * pred.cols() + j] / n)
            });
            Ok((loss, grad))
        }
        Targets::Labels(labels) => {
            if labels.len() != pred.rows() {
                return Err(Error::ShapeMismatch {
                    op: "cross entropy",
                    left: pred.shape(),
                    right: (labels.len(), 1),
                });
            }
            let b = pred.rows().max(1) as f64;
            let mut loss = 0.0;
            let mut grad = Vec::with_capacity(pred.len());
            for (i, &label) in labels.iter().enumerate() {
                if label >= pred.cols() {
                    return Err(Error::IndexOutOfRange {
                        axis: "classes",
                        index: label,
                        len: pred.cols(),
                    });
                }
                let row: Vec<f64> = pred.row(i).iter().map(|v| v.as_f64()).collect();
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                loss += sum.ln() + max - row[label];
                for (j, e) in exps.iter().enumerate() {
                    let onehot = if j == label { 1.0 } else { 0.0 };
                    grad.push(T::from_f64((e / sum - onehot) / b));
                }
            }
            Ok((loss / b, Tensor::new(pred.rows(), pred.cols(), grad)?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::halo::Level;
    use crate::quantize::NumericFormat;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            dim: 8,
            ffn_dim: 16,
            blocks: 2,
            out_dim: 3,
            norm_gain: true,
            lora_rank: 0,
        }
    }

    #[test]
    fn param_lists_line_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = ToyModel::<f32>::init(small(), HaloScheme::full_precision(), &mut rng).unwrap();
        assert_eq!(m.param_names().len(), m.params().len());
        assert_eq!(m.param_names().len(), 2 * 3 + 1);
        let x = Tensor::<f32>::randn(4, 8, 1.0, &mut rng);
        let (y, cache) = m.forward(&x).unwrap();
        assert_eq!(y.shape(), (4, 3));
        let g = m.backward(&cache, &Tensor::filled(4, 3, 1.0)).unwrap();
        for (g, p) in g.grads.iter().zip(m.params()) {
            assert_eq!(g.shape(), p.shape());
        }

        let mut cfg = small();
        cfg.lora_rank = 2;
        let m = ToyModel::<f32>::init(cfg, HaloScheme::preset(Level::HaloPeft, NumericFormat::Int8), &mut rng).unwrap();
        assert_eq!(m.param_names().len(), m.params().len());
        assert_eq!(m.params().len(), 2 * 4);
        let (_, cache) = m.forward(&x).unwrap();
        let g = m.backward(&cache, &Tensor::filled(4, 3, 1.0)).unwrap();
        for (g, p) in g.grads.iter().zip(m.params()) {
            assert_eq!(g.shape(), p.shape());
        }
    }

    #[test]
    fn losses() {
        let p = Tensor::<f64>::from_rows(&[&[1.0, 2.0]]);
        let (l, g) = loss_and_grad(&p, &Targets::Values(Tensor::from_rows(&[&[0.0, 0.0]]))).unwrap();
        assert_eq!(l, 2.5);
        assert_eq!(g.data(), &[1.0, 2.0]);
        let (l, g) = loss_and_grad(&Tensor::<f64>::zeros(1, 2), &Targets::Labels(vec![1])).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g.data(), &[0.5, -0.5]);
        assert!(loss_and_grad(&p, &Targets::Labels(vec![5])).is_err());
    }
}
