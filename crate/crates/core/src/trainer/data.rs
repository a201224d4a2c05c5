//! Synthetic datasets. Every batch is a pure function of `(seed, step)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{LossKind, ModelConfig, Targets, ToyModel};
use crate::error::{Error, Result};
use crate::halo::HaloScheme;
use crate::tensor::{inject_outliers, Axis, Element, OutlierProfile, Tensor};

#[derive(Debug, Clone)]
pub struct Batch<T: Element = f32> {
    pub x: Tensor<T>,
    pub targets: Targets<T>,
}

impl<T: Element> Batch<T> {
    pub fn cast<U: Element>(&self) -> Batch<U> {
        Batch {
            x: self.x.cast(),
            targets: match &self.targets {
                Targets::Values(t) => Targets::Values(t.cast()),
                Targets::Labels(l) => Targets::Labels(l.clone()),
            },
        }
    }
}

pub trait Dataset: Sync {
    fn batch(&self, step: usize) -> Result<Batch<f32>>;
    fn loss(&self) -> LossKind;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
}

/// Per-step RNG; batches never depend on how many were drawn before.
fn step_rng(seed: u64, salt: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(step as u64);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressionConfig {
    pub batch: usize,
    /// Input feature columns magnified in every batch (fixed channels).
    pub outlier_columns: usize,
    pub column_factor: f64,
    /// Token rows magnified per batch (random rows each step); these make
    /// row outliers in the output errors.
    pub outlier_rows: usize,
    pub row_factor: f64,
    /// Input channels of every teacher weight magnified once at creation.
    pub weight_outlier_columns: usize,
    pub weight_factor: f64,
    /// Held-out batches (steps from [`super::EVAL_OFFSET`] on) carry no
    /// outlier tokens, so every token weighs the same in the score.
    pub clean_eval: bool,
    /// Relative noise added to the teacher's weights to form the student.
    pub perturbation: f64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            batch: 64,
            outlier_columns: 2,
            column_factor: 30.0,
            outlier_rows: 2,
            row_factor: 100.0,
            weight_outlier_columns: 2,
            weight_factor: 10.0,
            clean_eval: true,
            perturbation: 0.02,
        }
    }
}

/// Teacher-student regression: targets are a fixed full-precision network
/// applied to inputs with outlier feature channels and outlier tokens.
#[derive(Debug, Clone)]
pub struct RegressionTask {
    pub config: RegressionConfig,
    pub teacher: ToyModel<f32>,
    columns: OutlierProfile,
    seed: u64,
}

const DATA_SALT: u64 = 0x5eed_da7a;

impl RegressionTask {
    pub fn new(model: ModelConfig, config: RegressionConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut plain = model.clone();
        plain.lora_rank = 0;
        let mut teacher = ToyModel::init(plain, HaloScheme::full_precision(), &mut rng)?;
        for layer in teacher.linears_mut() {
            let profile = OutlierProfile::sample(
                Axis::Columns,
                config.weight_outlier_columns,
                layer.weight.cols(),
                config.weight_factor,
                &mut rng,
            )?;
            layer.weight = inject_outliers(&layer.weight, &profile)?;
        }
        let columns = OutlierProfile::sample(
            Axis::Columns,
            config.outlier_columns,
            model.dim,
            config.column_factor,
            &mut rng,
        )?;
        if config.outlier_rows > config.batch {
            return Err(Error::Config("more outlier rows than batch rows".into()));
        }
        let mut task = Self {
            config,
            teacher,
            columns,
            seed,
        };
        // Unit-RMS targets on a held-out batch keep losses comparable
        // across seeds.
        let (y, _) = task.teacher.forward(&task.inputs(usize::MAX)?)?;
        let rms = y.frobenius_norm() / (y.len() as f64).sqrt();
        if rms > 0.0 {
            task.teacher.head = task.teacher.head.scale((1.0 / rms) as f32);
        }
        Ok(task)
    }

    pub fn outlier_columns(&self) -> &[usize] {
        &self.columns.channel_indices
    }

    /// Inputs for one step, before the teacher is applied.
    pub fn inputs(&self, step: usize) -> Result<Tensor<f32>> {
        let mut rng = step_rng(self.seed, DATA_SALT, step);
        let x = Tensor::randn(self.config.batch, self.teacher.config.dim, 1.0, &mut rng);
        let x = inject_outliers(&x, &self.columns)?;
        if self.config.clean_eval && step >= super::EVAL_OFFSET {
            return Ok(x);
        }
        let rows = OutlierProfile::sample(
            Axis::Rows,
            self.config.outlier_rows,
            self.config.batch,
            self.config.row_factor,
            &mut rng,
        )?;
        inject_outliers(&x, &rows)
    }

    /// The teacher with every weight and the head perturbed by
    /// `perturbation · std(W) · N(0, 1)`, under `scheme`. With a LoRA rank in
    /// `model`, adapters are attached to the perturbed weights.
    pub fn student(&self, scheme: &HaloScheme, lora_rank: usize, seed: u64) -> Result<ToyModel<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x057d_0e47);
        let mut s = self.teacher.clone();
        let mut perturb = |w: &Tensor<f32>| -> Result<Tensor<f32>> {
            let std = (w.frobenius_norm().powi(2) / w.len() as f64).sqrt();
            w.add(&Tensor::randn(
                w.rows(),
                w.cols(),
                std * self.config.perturbation,
                &mut rng,
            ))
        };
        for layer in s.linears_mut() {
            layer.weight = perturb(&layer.weight)?;
        }
        s.head = perturb(&s.head)?;
        s.set_scheme(scheme);
        if lora_rank > 0 {
            s.config.lora_rank = lora_rank;
            s.attach_lora(&mut rng)?;
        }
        Ok(s)
    }
}

impl Dataset for RegressionTask {
    fn batch(&self, step: usize) -> Result<Batch<f32>> {
        let x = self.inputs(step)?;
        let (y, _) = self.teacher.forward(&x)?;
        Ok(Batch {
            x,
            targets: Targets::Values(y),
        })
    }

    fn loss(&self) -> LossKind {
        LossKind::Mse
    }

    fn input_dim(&self) -> usize {
        self.teacher.config.dim
    }

    fn output_dim(&self) -> usize {
        self.teacher.config.out_dim
    }
}

/// 5x7 bitmaps of the digits 0-9, one row string per scanline.
const GLYPHS: [[&str; 7]; 10] = [
    [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
    ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
    [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
    ["####.", "....#", "....#", ".###.", "....#", "....#", "####."],
    ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
    ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
    [".###.", "#....", "#....", "####.", "#...#", "#...#", ".###."],
    ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
    [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
    [".###.", "#...#", "#...#", ".####", "....#", "....#", ".###."],
];

pub const GLYPH_CLASSES: usize = 10;
const GLYPH_PIXELS: usize = 35;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlyphConfig {
    pub batch: usize,
    /// Input width; pixels fill the first 35 columns, the rest are noise.
    pub dim: usize,
    pub noise: f64,
    /// Probability of flipping each pixel.
    pub flip: f64,
}

impl Default for GlyphConfig {
    fn default() -> Self {
        Self {
            batch: 64,
            dim: 64,
            noise: 0.3,
            flip: 0.05,
        }
    }
}

/// Noisy digit bitmaps, classified with cross-entropy.
#[derive(Debug, Clone)]
pub struct GlyphTask {
    pub config: GlyphConfig,
    seed: u64,
}

impl GlyphTask {
    pub fn new(config: GlyphConfig, seed: u64) -> Result<Self> {
        if config.dim < GLYPH_PIXELS {
            return Err(Error::Config(format!(
                "glyph input needs at least {GLYPH_PIXELS} columns"
            )));
        }
        Ok(Self { config, seed })
    }

    fn pixel(class: usize, p: usize) -> bool {
        GLYPHS[class][p / 5].as_bytes()[p % 5] == b'#'
    }
}

impl Dataset for GlyphTask {
    fn batch(&self, step: usize) -> Result<Batch<f32>> {
        let mut rng = step_rng(self.seed, DATA_SALT ^ 0x9171, step);
        let c = &self.config;
        let labels: Vec<usize> = (0..c.batch).map(|_| rng.random_range(0..GLYPH_CLASSES)).collect();
        let mut data = Vec::with_capacity(c.batch * c.dim);
        for &label in &labels {
            for j in 0..c.dim {
                let base = if j < GLYPH_PIXELS {
                    let on = Self::pixel(label, j) ^ rng.random_bool(c.flip);
                    if on {
                        1.0
                    } else {
                        -1.0
                    }
                } else {
                    0.0
                };
                let noise: f64 = rng.sample(rand_distr::StandardNormal);
                data.push((base + c.noise * noise) as f32);
            }
        }
        Ok(Batch {
            x: Tensor::new(c.batch, c.dim, data)?,
            targets: Targets::Labels(labels),
        })
    }

    fn loss(&self) -> LossKind {
        LossKind::CrossEntropy
    }

    fn input_dim(&self) -> usize {
        self.config.dim
    }

    fn output_dim(&self) -> usize {
        GLYPH_CLASSES
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            dim: 16,
            ffn_dim: 32,
            blocks: 1,
            out_dim: 4,
            norm_gain: true,
            lora_rank: 0,
        }
    }

    #[test]
    fn batches_are_pure_functions_of_step() {
        let task = RegressionTask::new(
            tiny(),
            RegressionConfig {
                batch: 8,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        let a = task.batch(5).unwrap();
        let b = task.batch(5).unwrap();
        assert!(a.x.bitwise_eq(&b.x));
        assert!(!task.batch(6).unwrap().x.bitwise_eq(&a.x));
        let cols = task.outlier_columns().to_vec();
        let stats = crate::tensor::outlier_stats(&a.x, Axis::Columns);
        assert!(stats.outlier_count > 0);
        assert_eq!(cols.len(), 2);
    }

    #[test]
    fn glyphs_are_distinct() {
        for (a, glyph) in GLYPHS.iter().enumerate() {
            assert!(glyph.iter().all(|row| row.len() == 5));
            for b in 0..a {
                assert!((0..GLYPH_PIXELS).any(|p| GlyphTask::pixel(a, p) != GlyphTask::pixel(b, p)));
            }
        }
        let t = GlyphTask::new(
            GlyphConfig {
                batch: 4,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let b = t.batch(0).unwrap();
        assert_eq!(b.x.shape(), (4, 64));
        assert!(GlyphTask::new(
            GlyphConfig {
                dim: 16,
                ..Default::default()
            },
            1
        )
        .is_err());
    }
}
