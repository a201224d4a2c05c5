//! Symmetric round-to-nearest quantization with per-group scales, and
//! matrix products over quantized operands.

mod format;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Accumulate, Element, Tensor};

pub use format::{round_bf16, MiniFloat, NumericFormat, E3M2, E4M3};

/// Elements per shared scale in the microscaling layout.
pub const MX_BLOCK: usize = 32;

/// How scales are shared across a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Granularity {
    PerTensor,
    PerRow,
    PerColumn,
    /// Rectangular tiles of `rows x cols`, row-major tile order; edge tiles
    /// behave as if zero-padded.
    Block {
        rows: usize,
        cols: usize,
    },
    /// Power-of-two scale per run of [`MX_BLOCK`] consecutive entries of a row.
    MxBlock,
}

impl Granularity {
    /// Default granularity for a format: microscaling formats need their
    /// block layout, everything else is tensor-wise.
    pub fn default_for(format: NumericFormat) -> Self {
        match format {
            NumericFormat::Mxfp6E3M2 => Granularity::MxBlock,
            _ => Granularity::PerTensor,
        }
    }

    pub fn group_count(&self, rows: usize, cols: usize) -> usize {
        match *self {
            Granularity::PerTensor => 1,
            Granularity::PerRow => rows,
            Granularity::PerColumn => cols,
            Granularity::Block { rows: br, cols: bc } => rows.div_ceil(br) * cols.div_ceil(bc),
            Granularity::MxBlock => rows * cols.div_ceil(MX_BLOCK),
        }
    }

    #[inline]
    pub fn group_of(&self, i: usize, j: usize, cols: usize) -> usize {
        match *self {
            Granularity::PerTensor => 0,
            Granularity::PerRow => i,
            Granularity::PerColumn => j,
            Granularity::Block { rows: br, cols: bc } => (i / br) * cols.div_ceil(bc) + j / bc,
            Granularity::MxBlock => i * cols.div_ceil(MX_BLOCK) + j / MX_BLOCK,
        }
    }

    fn validate(&self, format: NumericFormat) -> Result<()> {
        let bad = match *self {
            Granularity::Block { rows, cols } => rows == 0 || cols == 0,
            Granularity::MxBlock => false,
            _ => format == NumericFormat::Mxfp6E3M2,
        };
        if bad {
            return Err(Error::IncompatibleGranularity {
                format: format.to_string(),
                granularity: self.to_string(),
            });
        }
        Ok(())
    }

    /// Granularity of the transposed tensor; `None` when the grouping is
    /// not transpose-stable.
    pub fn transposed(&self) -> Option<Self> {
        match *self {
            Granularity::PerTensor => Some(Granularity::PerTensor),
            Granularity::PerRow => Some(Granularity::PerColumn),
            Granularity::PerColumn => Some(Granularity::PerRow),
            Granularity::Block { rows, cols } => Some(Granularity::Block { rows: cols, cols: rows }),
            Granularity::MxBlock => None,
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Granularity::PerTensor => f.write_str("tensor"),
            Granularity::PerRow => f.write_str("row"),
            Granularity::PerColumn => f.write_str("column"),
            Granularity::Block { rows, cols } => write!(f, "block{rows}x{cols}"),
            Granularity::MxBlock => f.write_str("mx"),
        }
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        match s.as_str() {
            "tensor" | "per_tensor" => return Ok(Granularity::PerTensor),
            "row" | "per_row" => return Ok(Granularity::PerRow),
            "column" | "per_column" => return Ok(Granularity::PerColumn),
            "mx" | "mxblock" => return Ok(Granularity::MxBlock),
            _ => {}
        }
        if let Some(dims) = s.strip_prefix("block") {
            if let Some((r, c)) = dims.split_once('x') {
                if let (Ok(rows), Ok(cols)) = (r.parse(), c.parse()) {
                    if rows > 0 && cols > 0 {
                        return Ok(Granularity::Block { rows, cols });
                    }
                }
            }
        }
        Err(Error::Config(format!("unknown granularity `{s}`")))
    }
}

/// Quantized values: integer codes for INT8, grid-rounded reals otherwise.
#[derive(Debug, Clone, PartialEq)]
pub enum Codes {
    Int8(Vec<i8>),
    Real(Vec<f64>),
}

impl Codes {
    pub fn len(&self) -> usize {
        match self {
            Codes::Int8(c) => c.len(),
            Codes::Real(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn value(&self, idx: usize) -> f64 {
        match self {
            Codes::Int8(c) => c[idx] as f64,
            Codes::Real(c) => c[idx],
        }
    }
}

/// A tensor in quantized form: `value = code * scale[group]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    rows: usize,
    cols: usize,
    codes: Codes,
    scales: Vec<f32>,
    format: NumericFormat,
    granularity: Granularity,
}

impl QuantizedTensor {
    /// Reassembles a quantized tensor from parts, checking the invariants.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        codes: Codes,
        scales: Vec<f32>,
        format: NumericFormat,
        granularity: Granularity,
    ) -> Result<Self> {
        granularity.validate(format)?;
        if codes.len() != rows * cols {
            return Err(Error::LengthMismatch {
                rows,
                cols,
                len: codes.len(),
            });
        }
        let expected = granularity.group_count(rows, cols);
        if scales.len() != expected {
            return Err(Error::ScaleCount {
                expected,
                got: scales.len(),
            });
        }
        check_scales(&scales)?;
        match (&codes, format) {
            (Codes::Int8(c), NumericFormat::Int8) => {
                if c.contains(&i8::MIN) {
                    return Err(Error::BadHeader("INT8 code -128 is outside the symmetric range".into()));
                }
            }
            (Codes::Real(c), f) if f != NumericFormat::Int8 => {
                if let Some(index) = c.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { index, value: c[index] });
                }
            }
            _ => return Err(Error::BadHeader(format!("code storage does not match format {format}"))),
        }
        Ok(Self {
            rows,
            cols,
            codes,
            scales,
            format,
            granularity,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn codes(&self) -> &Codes {
        &self.codes
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn format(&self) -> NumericFormat {
        self.format
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    #[inline]
    fn scale_at(&self, i: usize, j: usize) -> f64 {
        self.scales[self.granularity.group_of(i, j, self.cols)] as f64
    }

    /// Transposes codes and scales; `None` for groupings that do not survive
    /// transposition (microscaling blocks).
    pub fn transpose(&self) -> Option<Self> {
        let granularity = self.granularity.transposed()?;
        let (r, c) = (self.rows, self.cols);
        let codes = match &self.codes {
            Codes::Int8(v) => Codes::Int8(transpose_vec(v, r, c)),
            Codes::Real(v) => Codes::Real(transpose_vec(v, r, c)),
        };
        let scales = match self.granularity {
            Granularity::Block { rows: br, cols: bc } => transpose_vec(&self.scales, r.div_ceil(br), c.div_ceil(bc)),
            _ => self.scales.clone(),
        };
        Some(Self {
            rows: c,
            cols: r,
            codes,
            scales,
            format: self.format,
            granularity,
        })
    }

    /// Keeps the first `rows` rows. Supported for row-local groupings.
    pub fn truncate_rows(&self, rows: usize) -> Result<Self> {
        assert!(rows <= self.rows);
        let scales = match self.granularity {
            Granularity::PerTensor | Granularity::PerColumn => self.scales.clone(),
            Granularity::PerRow => self.scales[..rows].to_vec(),
            Granularity::MxBlock => self.scales[..rows * self.cols.div_ceil(MX_BLOCK)].to_vec(),
            Granularity::Block { .. } => {
                return Err(Error::IncompatibleGranularity {
                    format: self.format.to_string(),
                    granularity: self.granularity.to_string(),
                })
            }
        };
        let n = rows * self.cols;
        let codes = match &self.codes {
            Codes::Int8(v) => Codes::Int8(v[..n].to_vec()),
            Codes::Real(v) => Codes::Real(v[..n].to_vec()),
        };
        Ok(Self {
            rows,
            cols: self.cols,
            codes,
            scales,
            format: self.format,
            granularity: self.granularity,
        })
    }

    /// Same shape, format, scales and code bit patterns.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        let codes_eq = match (&self.codes, &other.codes) {
            (Codes::Int8(a), Codes::Int8(b)) => a == b,
            (Codes::Real(a), Codes::Real(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        };
        codes_eq
            && self.shape() == other.shape()
            && self.format == other.format
            && self.granularity == other.granularity
            && self.scales.len() == other.scales.len()
            && self
                .scales
                .iter()
                .zip(&other.scales)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Bytes on the wire: packed codes plus four bytes per scaled group.
    pub fn wire_bytes(&self) -> usize {
        let scale_bytes = if self.format.is_scaled() {
            4 * self.scales.len()
        } else {
            0
        };
        self.format.payload_bytes(self.rows * self.cols) + scale_bytes
    }
}

fn transpose_vec<V: Copy>(v: &[V], rows: usize, cols: usize) -> Vec<V> {
    let mut out = Vec::with_capacity(v.len());
    for j in 0..cols {
        for i in 0..rows {
            out.push(v[i * cols + j]);
        }
    }
    out
}

fn check_scales(scales: &[f32]) -> Result<()> {
    for (group, &value) in scales.iter().enumerate() {
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::InvalidScale { group, value });
        }
    }
    Ok(())
}

/// Smallest power of two `s` with `absmax / s <= format_max`.
fn pow2_scale(absmax: f64, format_max: f64) -> f32 {
    let ratio = absmax / format_max;
    let k = if ratio.is_normal() {
        let e = format::exponent_of(ratio);
        // Exact powers of two need no rounding up.
        if ratio == 2f64.powi(e) {
            e
        } else {
            e + 1
        }
    } else {
        -126
    };
    2f32.powi(k.clamp(-126, 127))
}

/// Per-group absolute maxima.
pub fn group_absmax<T: Element>(a: &Tensor<T>, granularity: Granularity) -> Vec<f64> {
    let (rows, cols) = a.shape();
    let mut out = vec![0.0f64; granularity.group_count(rows, cols)];
    for i in 0..rows {
        for (j, v) in a.row(i).iter().enumerate() {
            let g = granularity.group_of(i, j, cols);
            out[g] = out[g].max(v.as_f64().abs());
        }
    }
    out
}

/// Scale for one group given its absolute maximum.
pub fn scale_from_absmax(absmax: f64, format: NumericFormat, granularity: Granularity) -> f32 {
    let Some(qmax) = format.max_value() else {
        return 1.0;
    };
    if absmax == 0.0 {
        return 1.0;
    }
    if granularity == Granularity::MxBlock {
        return pow2_scale(absmax, qmax);
    }
    let s = (absmax / qmax) as f32;
    if s > 0.0 {
        s
    } else {
        f32::from_bits(1)
    }
}

/// AbsMax scales, one per group. All-zero groups get scale 1.
pub fn compute_scale<T: Element>(a: &Tensor<T>, format: NumericFormat, granularity: Granularity) -> Result<Vec<f32>> {
    granularity.validate(format)?;
    Ok(group_absmax(a, granularity)
        .into_iter()
        .map(|m| scale_from_absmax(m, format, granularity))
        .collect())
}

/// Symmetric round-to-nearest quantization. Externally supplied scales are
/// used verbatim.
pub fn quantize<T: Element>(
    a: &Tensor<T>,
    format: NumericFormat,
    granularity: Granularity,
    scales: Option<&[f32]>,
) -> Result<QuantizedTensor> {
    granularity.validate(format)?;
    let (rows, cols) = a.shape();
    let scales = match scales {
        Some(s) => {
            let expected = granularity.group_count(rows, cols);
            if s.len() != expected {
                return Err(Error::ScaleCount { expected, got: s.len() });
            }
            check_scales(s)?;
            s.to_vec()
        }
        None => compute_scale(a, format, granularity)?,
    };
    let rounded = |i: usize, j: usize, v: T| -> f64 {
        let s = scales[granularity.group_of(i, j, cols)] as f64;
        let x = v.as_f64();
        if format.is_scaled() {
            format.round_scalar(x / s)
        } else {
            format.round_scalar(x)
        }
    };
    let codes = if format == NumericFormat::Int8 {
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for (j, &v) in a.row(i).iter().enumerate() {
                out.push(rounded(i, j, v) as i8);
            }
        }
        Codes::Int8(out)
    } else {
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for (j, &v) in a.row(i).iter().enumerate() {
                out.push(rounded(i, j, v));
            }
        }
        Codes::Real(out)
    };
    Ok(QuantizedTensor {
        rows,
        cols,
        codes,
        scales,
        format,
        granularity,
    })
}

pub fn dequantize<T: Element>(q: &QuantizedTensor) -> Tensor<T> {
    let scaled = q.format.is_scaled();
    Tensor::from_fn(q.rows, q.cols, |i, j| {
        let c = q.codes.value(i * q.cols + j);
        if scaled {
            T::from_f64(c * q.scale_at(i, j))
        } else {
            T::from_f64(c)
        }
    })
}

/// `a · b` (or `a · bᵀ`) over quantized operands.
///
/// Two tensor-wise INT8 operands take the integer path: exact integer
/// accumulation, then one multiplication by `scale_a · scale_b` in f64.
/// Everything else is dequantized and multiplied in the working precision.
pub fn qmatmul<T: Element>(a: &QuantizedTensor, b: &QuantizedTensor, transpose_b: bool) -> Result<Tensor<T>> {
    let (m, k) = a.shape();
    let (kb, n) = if transpose_b {
        (b.cols, b.rows)
    } else {
        (b.rows, b.cols)
    };
    if k != kb {
        return Err(Error::ShapeMismatch {
            op: "qmatmul",
            left: a.shape(),
            right: (kb, n),
        });
    }
    if let (Codes::Int8(ca), Codes::Int8(cb), Granularity::PerTensor, Granularity::PerTensor) =
        (&a.codes, &b.codes, a.granularity, b.granularity)
    {
        let factor = a.scales[0] as f64 * b.scales[0] as f64;
        let mut out = Vec::with_capacity(m * n);
        let mut acc = vec![0i64; n];
        for i in 0..m {
            acc.iter_mut().for_each(|v| *v = 0);
            let arow = &ca[i * k..(i + 1) * k];
            if transpose_b {
                for (j, slot) in acc.iter_mut().enumerate() {
                    let brow = &cb[j * k..(j + 1) * k];
                    *slot = arow.iter().zip(brow).map(|(&x, &y)| x as i64 * y as i64).sum();
                }
            } else {
                for (p, &x) in arow.iter().enumerate() {
                    if x == 0 {
                        continue;
                    }
                    let brow = &cb[p * n..(p + 1) * n];
                    for (slot, &y) in acc.iter_mut().zip(brow) {
                        *slot += x as i64 * y as i64;
                    }
                }
            }
            out.extend(acc.iter().map(|&v| T::from_f64(v as f64 * factor)));
        }
        return Tensor::new(m, n, out);
    }
    let da: Tensor<T> = dequantize(a);
    let db: Tensor<T> = dequantize(b);
    let db = if transpose_b { db.transpose() } else { db };
    da.matmul(&db, Accumulate::Single)
}

/// Reconstruction error of a quantize/dequantize round trip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorReport {
    pub mse: f64,
    pub max_abs_err: f64,
    /// Signal-to-noise ratio in dB; infinite when the error is zero.
    pub snr_db: f64,
}

pub fn quantization_error_report<T: Element>(
    a: &Tensor<T>,
    format: NumericFormat,
    granularity: Granularity,
) -> Result<ErrorReport> {
    let q = quantize(a, format, granularity, None)?;
    let back: Tensor<T> = dequantize(&q);
    let (mut se, mut max_err, mut power) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(back.data()) {
        let (x, y) = (x.as_f64(), y.as_f64());
        let e = x - y;
        se += e * e;
        power += x * x;
        max_err = max_err.max(e.abs());
    }
    let n = a.len().max(1) as f64;
    let snr_db = if se == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (power / se).log10()
    };
    Ok(ErrorReport {
        mse: se / n,
        max_abs_err: max_err,
        snr_db,
    })
}
