//! Run configuration, read from a versioned TOML file.
//!
//! Every key has a default except `version`; unknown keys are rejected so a
//! typo cannot silently fall back to a default.

use std::path::{Path, PathBuf};

use halo::halo::{HaloScheme, Matmul};
use halo::quantize::{Granularity, NumericFormat};
use halo::trainer::analysis::AblationTarget;
use halo::trainer::{GlyphConfig, ModelConfig, RegressionConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::Failure;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Glyph,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    /// First seed; multi-seed commands use `seed .. seed + runs`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub runs: usize,
    #[serde(default = "default_task")]
    pub task: TaskKind,
    /// Level name (`halo0`, `halo1`, `halo2`, `halo-peft`) or a placement
    /// string such as `F:M;E:LR;G:R`.
    #[serde(default = "default_scheme")]
    pub scheme: String,
    #[serde(default = "default_format")]
    pub format: String,
    /// Defaults to the format's natural granularity.
    #[serde(default)]
    pub granularity: Option<String>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Write every trained linear weight as a tensor file.
    #[serde(default)]
    pub save_weights: bool,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub regression: RegressionConfig,
    #[serde(default)]
    pub glyph: GlyphConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub fsdp: FsdpProbe,
    #[serde(default)]
    pub ablate: AblateConfig,
}

/// A single random weight pushed through the sharded collectives.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FsdpProbe {
    pub world_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub hadamard: bool,
    /// Also compare training loss traces against a single rank for this
    /// many steps; 0 skips the comparison.
    pub trace_steps: usize,
    pub checkpointing: bool,
}

impl Default for FsdpProbe {
    fn default() -> Self {
        Self {
            world_size: 4,
            rows: 1024,
            cols: 1024,
            hadamard: true,
            trace_steps: 10,
            checkpointing: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// `F`, `E`, `G` for one matmul (8 rows) or `full` (512 rows).
    pub target: String,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { target: "F".into() }
    }
}

fn one() -> usize {
    1
}

fn default_task() -> TaskKind {
    TaskKind::Regression
}

fn default_scheme() -> String {
    "halo2".into()
}

fn default_format() -> String {
    "int8".into()
}

fn default_output() -> PathBuf {
    PathBuf::from("halo-out")
}

impl Config {
    pub fn load(path: &Path) -> Result<(Self, Vec<u8>), Failure> {
        let bytes = std::fs::read(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
        let text =
            std::str::from_utf8(&bytes).map_err(|e| Failure::Input(format!("{}: not UTF-8: {e}", path.display())))?;
        let cfg = Self::parse(text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
        Ok((cfg, bytes))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: Config = toml::from_str(text).map_err(|e| e.to_string())?;
        if cfg.version != CONFIG_VERSION {
            return Err(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                cfg.version
            ));
        }
        if cfg.runs == 0 {
            return Err("runs must be at least 1".into());
        }
        cfg.numeric_format()?;
        cfg.halo_scheme()?;
        Ok(cfg)
    }

    pub fn numeric_format(&self) -> Result<NumericFormat, String> {
        self.format.parse().map_err(|e: halo::Error| format!("format: {e}"))
    }

    pub fn halo_scheme(&self) -> Result<HaloScheme, String> {
        let format = self.numeric_format()?;
        let mut scheme = HaloScheme::parse(&self.scheme, format).map_err(|e| format!("scheme: {e}"))?;
        if let Some(g) = &self.granularity {
            scheme.granularity = g.parse::<Granularity>().map_err(|e| format!("granularity: {e}"))?;
        }
        Ok(scheme)
    }

    pub fn ablation_target(&self) -> Result<AblationTarget, String> {
        let t = self.ablate.target.trim();
        if t.eq_ignore_ascii_case("full") {
            return Ok(AblationTarget::Full);
        }
        t.parse::<Matmul>()
            .map(AblationTarget::Single)
            .map_err(|e| format!("ablate.target: {e}"))
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.runs as u64).map(|i| self.seed + i).collect()
    }
}
