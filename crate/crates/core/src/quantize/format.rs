//! Scalar numeric formats and their round-to-nearest maps.
//!
//! All rounding is round-half-to-even onto the format's grid, with saturation
//! at the largest finite magnitude. No format ever produces NaN or infinity.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NumericFormat {
    /// Symmetric integers in [-127, 127].
    Int8,
    /// OCP FP8 E4M3 ("FN" variant): bias 7, max 448.
    Fp8E4M3,
    /// FP6 E3M2: bias 3, max 28, subnormals.
    Fp6E3M2,
    /// E3M2 elements sharing a power-of-two scale per 32-element block.
    Mxfp6E3M2,
    /// bfloat16 mantissa rounding, unscaled.
    Bf16Emu,
    /// No quantization at all.
    Identity,
}

/// A small IEEE-style binary float without NaN/Inf encodings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiniFloat {
    pub exp_bits: u32,
    pub man_bits: u32,
    pub bias: i32,
    /// Largest finite magnitude.
    pub max: f64,
}

pub const E4M3: MiniFloat = MiniFloat {
    exp_bits: 4,
    man_bits: 3,
    bias: 7,
    max: 448.0,
};

pub const E3M2: MiniFloat = MiniFloat {
    exp_bits: 3,
    man_bits: 2,
    bias: 3,
    max: 28.0,
};

/// Unbiased exponent of a positive finite normal f64.
#[inline]
pub(crate) fn exponent_of(v: f64) -> i32 {
    debug_assert!(v > 0.0 && v.is_normal());
    ((v.to_bits() >> 52) & 0x7ff) as i32 - 1023
}

impl MiniFloat {
    pub fn min_normal_exp(&self) -> i32 {
        1 - self.bias
    }

    /// Rounds `v` to the nearest representable value, ties to even mantissa.
    pub fn round(&self, v: f64) -> f64 {
        if v == 0.0 {
            return 0.0;
        }
        let a = v.abs();
        let rounded = if a >= self.max {
            self.max
        } else {
            // Below the normal range the spacing is fixed at the subnormal quantum.
            let e = if a.is_normal() {
                exponent_of(a).max(self.min_normal_exp())
            } else {
                self.min_normal_exp()
            };
            let quantum = 2f64.powi(e - self.man_bits as i32);
            let q = (a / quantum).round_ties_even() * quantum;
            q.min(self.max)
        };
        rounded.copysign(v)
    }

    /// Decodes a raw bit pattern (sign in the top bit). Returns `None` for
    /// patterns above the maximum (reserved NaN codes in E4M3).
    pub fn decode(&self, bits: u32) -> Option<f64> {
        let man_mask = (1u32 << self.man_bits) - 1;
        let exp_mask = (1u32 << self.exp_bits) - 1;
        let man = bits & man_mask;
        let exp = (bits >> self.man_bits) & exp_mask;
        let sign = (bits >> (self.man_bits + self.exp_bits)) & 1;
        let frac = man as f64 / (1u32 << self.man_bits) as f64;
        let mag = if exp == 0 {
            frac * 2f64.powi(self.min_normal_exp())
        } else {
            (1.0 + frac) * 2f64.powi(exp as i32 - self.bias)
        };
        if mag > self.max {
            return None;
        }
        Some(if sign == 1 { -mag } else { mag })
    }

    pub fn bit_width(&self) -> u32 {
        1 + self.exp_bits + self.man_bits
    }
}

/// bfloat16 round-to-nearest-even of a finite value, saturating at the
/// largest finite bfloat16. f64 inputs are first narrowed to f32.
pub fn round_bf16(v: f64) -> f64 {
    const BF16_MAX: f32 = f32::from_bits(0x7f7f_0000);
    let x = (v as f32).clamp(-f32::MAX, f32::MAX);
    let bits = x.to_bits();
    let rounding = 0x7fff + ((bits >> 16) & 1);
    let r = f32::from_bits((bits.wrapping_add(rounding)) & 0xffff_0000);
    if r.is_finite() {
        r as f64
    } else {
        BF16_MAX.copysign(x) as f64
    }
}

impl NumericFormat {
    pub const ALL: [NumericFormat; 6] = [
        NumericFormat::Int8,
        NumericFormat::Fp8E4M3,
        NumericFormat::Fp6E3M2,
        NumericFormat::Mxfp6E3M2,
        NumericFormat::Bf16Emu,
        NumericFormat::Identity,
    ];

    /// Largest magnitude on the unscaled grid; `None` for unscaled formats.
    pub fn max_value(self) -> Option<f64> {
        match self {
            NumericFormat::Int8 => Some(127.0),
            NumericFormat::Fp8E4M3 => Some(E4M3.max),
            NumericFormat::Fp6E3M2 | NumericFormat::Mxfp6E3M2 => Some(E3M2.max),
            NumericFormat::Bf16Emu | NumericFormat::Identity => None,
        }
    }

    /// Whether values are divided by a scale before rounding.
    pub fn is_scaled(self) -> bool {
        self.max_value().is_some()
    }

    /// Rounds a value already divided by its scale onto the format grid.
    pub fn round_scalar(self, v: f64) -> f64 {
        match self {
            NumericFormat::Int8 => v.round_ties_even().clamp(-127.0, 127.0),
            NumericFormat::Fp8E4M3 => E4M3.round(v),
            NumericFormat::Fp6E3M2 | NumericFormat::Mxfp6E3M2 => E3M2.round(v),
            NumericFormat::Bf16Emu => round_bf16(v),
            NumericFormat::Identity => v,
        }
    }

    /// Storage bits per element on the wire.
    pub fn bits_per_element(self) -> u32 {
        match self {
            NumericFormat::Int8 | NumericFormat::Fp8E4M3 => 8,
            NumericFormat::Fp6E3M2 | NumericFormat::Mxfp6E3M2 => 6,
            NumericFormat::Bf16Emu | NumericFormat::Identity => 16,
        }
    }

    /// Packed payload size for `elements` values.
    pub fn payload_bytes(self, elements: usize) -> usize {
        match self.bits_per_element() {
            8 => elements,
            // Four 6-bit values pack into three bytes.
            6 => (elements * 3).div_ceil(4),
            _ => elements * 2,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            NumericFormat::Int8 => 0,
            NumericFormat::Fp8E4M3 => 1,
            NumericFormat::Fp6E3M2 => 2,
            NumericFormat::Mxfp6E3M2 => 3,
            NumericFormat::Bf16Emu => 4,
            NumericFormat::Identity => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            NumericFormat::Int8 => "int8",
            NumericFormat::Fp8E4M3 => "fp8",
            NumericFormat::Fp6E3M2 => "fp6",
            NumericFormat::Mxfp6E3M2 => "mxfp6",
            NumericFormat::Bf16Emu => "bf16",
            NumericFormat::Identity => "identity",
        }
    }
}

impl fmt::Display for NumericFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NumericFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "int8" => Ok(NumericFormat::Int8),
            "fp8" | "fp8_e4m3" | "e4m3" => Ok(NumericFormat::Fp8E4M3),
            "fp6" | "fp6_e3m2" | "e3m2" => Ok(NumericFormat::Fp6E3M2),
            "mxfp6" | "mxfp6_e3m2" => Ok(NumericFormat::Mxfp6E3M2),
            "bf16" | "bf16emu" => Ok(NumericFormat::Bf16Emu),
            "identity" | "none" => Ok(NumericFormat::Identity),
            other => Err(Error::Config(format!("unknown numeric format `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    #[allow(clippy::unusual_byte_groupings)] // sign | exponent | mantissa
    fn maxima() {
        assert_eq!(NumericFormat::Int8.max_value(), Some(127.0));
        assert_eq!(NumericFormat::Fp8E4M3.max_value(), Some(448.0));
        assert_eq!(NumericFormat::Fp6E3M2.max_value(), Some(28.0));
        // Largest finite encodings decode to the declared maxima.
        assert_eq!(E4M3.decode(0b0_1111_110), Some(448.0));
        assert_eq!(E4M3.decode(0b0_1111_111), None);
        assert_eq!(E3M2.decode(0b0_111_11), Some(28.0));
    }

    #[test]
    fn rounding_examples() {
        assert_eq!(E4M3.round(250.0), 256.0);
        assert_eq!(E4M3.round(-250.0), -256.0);
        assert_eq!(E4M3.round(1e6), 448.0);
        assert_eq!(E3M2.round(30.0), 28.0);
        assert_eq!(E3M2.round(-30.0), -28.0);
        // Subnormal spacing of E3M2 is 2^-4.
        assert_eq!(E3M2.round(0.0625), 0.0625);
        assert_eq!(E3M2.round(0.03125), 0.0); // tie to even (zero)
        assert_eq!(E3M2.round(0.09375), 0.125); // tie between 1 and 2 quanta -> 2
        assert_eq!(NumericFormat::Int8.round_scalar(63.5), 64.0);
        assert_eq!(NumericFormat::Int8.round_scalar(62.5), 62.0);
        assert_eq!(NumericFormat::Int8.round_scalar(-200.0), -127.0);
    }

    #[test]
    fn bf16_rounding() {
        assert_eq!(round_bf16(1.0), 1.0);
        // 1 + 2^-8 is halfway between 1 and 1 + 2^-7; ties go to the even mantissa.
        assert_eq!(round_bf16(1.0 + 2f64.powi(-8)), 1.0);
        assert_eq!(round_bf16(1.0 + 3.0 * 2f64.powi(-8)), 1.0 + 2f64.powi(-6));
        assert!(round_bf16(f64::MAX).is_finite());
    }

    #[test]
    fn payload_sizes() {
        assert_eq!(NumericFormat::Int8.payload_bytes(16), 16);
        assert_eq!(NumericFormat::Fp6E3M2.payload_bytes(16), 12);
        assert_eq!(NumericFormat::Fp6E3M2.payload_bytes(5), 4);
        assert_eq!(NumericFormat::Bf16Emu.payload_bytes(16), 32);
    }

    #[test]
    fn parse_names() {
        for f in NumericFormat::ALL {
            assert_eq!(f.name().parse::<NumericFormat>().unwrap(), f);
            assert_eq!(NumericFormat::from_code(f.code()), Some(f));
        }
        assert!("fp4".parse::<NumericFormat>().is_err());
    }
}
