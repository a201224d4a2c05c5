//! Hadamard placements for the three matmuls of a linear layer, and the
//! named schemes built from them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantize::{Granularity, NumericFormat};

/// Where Hadamard rotations go around one product `A · B` with `A: p x k`
/// and `B: k x q`.
///
/// * left: `H_p (H_pᵀ A)_Q B_Q`
/// * middle: `(A H_k)_Q (H_kᵀ B)_Q`
/// * right: `A_Q (B H_q)_Q H_qᵀ`
///
/// Any subset is valid. Combined placements apply left, then middle, then
/// right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Placement {
    pub left: bool,
    pub middle: bool,
    pub right: bool,
}

impl Placement {
    pub const NONE: Placement = Placement::new(false, false, false);
    pub const LEFT: Placement = Placement::new(true, false, false);
    pub const MIDDLE: Placement = Placement::new(false, true, false);
    pub const RIGHT: Placement = Placement::new(false, false, true);

    pub const fn new(left: bool, middle: bool, right: bool) -> Self {
        Self { left, middle, right }
    }

    /// All eight subsets, in bit order (left = 1, middle = 2, right = 4).
    pub fn all() -> [Placement; 8] {
        std::array::from_fn(|i| Placement::new(i & 1 != 0, i & 2 != 0, i & 4 != 0))
    }

    pub fn is_empty(&self) -> bool {
        !(self.left || self.middle || self.right)
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("O");
        }
        for (on, c) in [(self.left, 'L'), (self.middle, 'M'), (self.right, 'R')] {
            if on {
                write!(f, "{c}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("o") {
            return Ok(Placement::NONE);
        }
        if s.is_empty() {
            return Err(Error::InvalidScheme("empty placement".into()));
        }
        let mut p = Placement::NONE;
        for c in s.chars() {
            let slot = match c.to_ascii_uppercase() {
                'L' => &mut p.left,
                'M' => &mut p.middle,
                'R' => &mut p.right,
                _ => return Err(Error::InvalidScheme(format!("bad placement `{s}`"))),
            };
            if *slot {
                return Err(Error::InvalidScheme(format!("repeated `{c}` in `{s}`")));
            }
            *slot = true;
        }
        Ok(p)
    }
}

/// The three matmuls of a linear layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Matmul {
    /// `Y = X Wᵀ`
    Forward,
    /// `E_X = E_Y W`
    Error,
    /// `G = E_Yᵀ X`
    WeightGrad,
}

impl Matmul {
    pub const ALL: [Matmul; 3] = [Matmul::Forward, Matmul::Error, Matmul::WeightGrad];

    pub fn tag(self) -> char {
        match self {
            Matmul::Forward => 'F',
            Matmul::Error => 'E',
            Matmul::WeightGrad => 'G',
        }
    }
}

impl FromStr for Matmul {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "F" => Ok(Matmul::Forward),
            "E" => Ok(Matmul::Error),
            "G" => Ok(Matmul::WeightGrad),
            other => Err(Error::InvalidScheme(format!("unknown matmul `{other}`"))),
        }
    }
}

/// Named configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    Halo0,
    Halo1,
    Halo2,
    HaloPeft,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::Halo0, Level::Halo1, Level::Halo2, Level::HaloPeft];

    pub fn name(self) -> &'static str {
        match self {
            Level::Halo0 => "halo0",
            Level::Halo1 => "halo1",
            Level::Halo2 => "halo2",
            Level::HaloPeft => "halo-peft",
        }
    }

    pub fn placements(self) -> [Placement; 3] {
        let lr = Placement::new(true, false, true);
        match self {
            Level::Halo0 => [Placement::NONE; 3],
            Level::Halo1 => [Placement::MIDDLE, Placement::RIGHT, Placement::RIGHT],
            Level::Halo2 => [Placement::MIDDLE, lr, Placement::RIGHT],
            Level::HaloPeft => [Placement::MIDDLE, lr, Placement::NONE],
        }
    }
}

/// Placements, formats and per-matmul quantization switches for a layer.
///
/// A matmul whose `quantize` flag is off runs in working precision and its
/// placement is ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HaloScheme {
    pub forward: Placement,
    pub error: Placement,
    pub weight_grad: Placement,
    /// Quantize `[F, E, G]`.
    pub quantize: [bool; 3],
    pub format_x: NumericFormat,
    pub format_w: NumericFormat,
    pub format_e: NumericFormat,
    pub granularity: Granularity,
}

impl HaloScheme {
    pub fn new(placements: [Placement; 3], format: NumericFormat) -> Self {
        Self {
            forward: placements[0],
            error: placements[1],
            weight_grad: placements[2],
            quantize: [true; 3],
            format_x: format,
            format_w: format,
            format_e: format,
            granularity: Granularity::default_for(format),
        }
    }

    pub fn preset(level: Level, format: NumericFormat) -> Self {
        let mut s = Self::new(level.placements(), format);
        if level == Level::HaloPeft {
            // The frozen weight has no gradient product.
            s.quantize[2] = false;
        }
        s
    }

    /// Unquantized, unrotated reference.
    pub fn full_precision() -> Self {
        let mut s = Self::new([Placement::NONE; 3], NumericFormat::Identity);
        s.quantize = [false; 3];
        s
    }

    pub fn with_format(mut self, format: NumericFormat) -> Self {
        self.format_x = format;
        self.format_w = format;
        self.format_e = format;
        self.granularity = Granularity::default_for(format);
        self
    }

    pub fn with_quantize(mut self, mask: [bool; 3]) -> Self {
        self.quantize = mask;
        self
    }

    pub fn placement(&self, m: Matmul) -> Placement {
        match m {
            Matmul::Forward => self.forward,
            Matmul::Error => self.error,
            Matmul::WeightGrad => self.weight_grad,
        }
    }

    pub fn set_placement(&mut self, m: Matmul, p: Placement) {
        match m {
            Matmul::Forward => self.forward = p,
            Matmul::Error => self.error = p,
            Matmul::WeightGrad => self.weight_grad = p,
        }
    }

    pub fn quantizes(&self, m: Matmul) -> bool {
        self.quantize[m as usize]
    }

    /// Placement string, `F:M;E:R;G:R` style. Unquantized matmuls print `-`.
    pub fn placement_string(&self) -> String {
        Matmul::ALL
            .iter()
            .map(|&m| {
                if self.quantizes(m) {
                    format!("{}:{}", m.tag(), self.placement(m))
                } else {
                    format!("{}:-", m.tag())
                }
            })
            .collect::<Vec<_>>()
            .join(";")
    }

    /// Parses a level name or a placement string. Formats default to
    /// `format`; matmuls missing from a placement string get no rotation.
    pub fn parse(s: &str, format: NumericFormat) -> Result<Self> {
        let trimmed = s.trim();
        if let Some(level) = Level::ALL.iter().find(|l| l.name().eq_ignore_ascii_case(trimmed)) {
            return Ok(Self::preset(*level, format));
        }
        let mut scheme = Self::new([Placement::NONE; 3], format);
        let mut seen = [false; 3];
        for part in trimmed.split(';').filter(|p| !p.trim().is_empty()) {
            let (m, p) = part
                .split_once(':')
                .ok_or_else(|| Error::InvalidScheme(format!("expected `X:placement` in `{part}`")))?;
            let m: Matmul = m.parse()?;
            if std::mem::replace(&mut seen[m as usize], true) {
                return Err(Error::InvalidScheme(format!("{} given twice", m.tag())));
            }
            if p.trim() == "-" {
                scheme.quantize[m as usize] = false;
            } else {
                scheme.set_placement(m, p.parse()?);
            }
        }
        if !seen.iter().any(|&s| s) {
            return Err(Error::InvalidScheme(format!("unrecognized scheme `{s}`")));
        }
        Ok(scheme)
    }

    /// Every rotation/quantization configuration across the three matmuls.
    pub fn all_modes(format: NumericFormat) -> Vec<HaloScheme> {
        let mut out = Vec::with_capacity(512);
        for f in Placement::all() {
            for e in Placement::all() {
                for g in Placement::all() {
                    out.push(Self::new([f, e, g], format));
                }
            }
        }
        out
    }
}

impl fmt::Display for HaloScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.placement_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_strings() {
        let s = |l| HaloScheme::preset(l, NumericFormat::Int8).placement_string();
        assert_eq!(s(Level::Halo0), "F:O;E:O;G:O");
        assert_eq!(s(Level::Halo1), "F:M;E:R;G:R");
        assert_eq!(s(Level::Halo2), "F:M;E:LR;G:R");
        assert_eq!(s(Level::HaloPeft), "F:M;E:LR;G:-");
    }

    #[test]
    fn parse_round_trip() {
        for scheme in HaloScheme::all_modes(NumericFormat::Int8) {
            let back = HaloScheme::parse(&scheme.placement_string(), NumericFormat::Int8).unwrap();
            assert_eq!(back, scheme);
        }
        assert_eq!(HaloScheme::all_modes(NumericFormat::Int8).len(), 512);
        let h2 = HaloScheme::parse("HALO2", NumericFormat::Fp8E4M3).unwrap();
        assert_eq!(h2, HaloScheme::preset(Level::Halo2, NumericFormat::Fp8E4M3));
        let partial = HaloScheme::parse("F:M", NumericFormat::Int8).unwrap();
        assert_eq!(partial.placement_string(), "F:M;E:O;G:O");
        let fwd_only = HaloScheme::parse("F:O;E:-;G:-", NumericFormat::Int8).unwrap();
        assert_eq!(fwd_only.quantize, [true, false, false]);
    }

    #[test]
    fn parse_errors() {
        for bad in ["", "halo3", "F:X", "F:MM", "F:M;F:R", "Q:M", "F"] {
            assert!(HaloScheme::parse(bad, NumericFormat::Int8).is_err(), "{bad}");
        }
    }

    #[test]
    fn mx_gets_block_granularity() {
        let s = HaloScheme::preset(Level::Halo1, NumericFormat::Mxfp6E3M2);
        assert_eq!(s.granularity, Granularity::MxBlock);
    }
}
