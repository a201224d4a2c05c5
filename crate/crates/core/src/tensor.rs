//! Dense row-major matrices and the handful of operations the rest of the
//! crate is built from.
//!
//! `Tensor<f32>` is the working precision for training; `Tensor<f64>` is the
//! oracle precision used by finite-difference checks. Every constructor
//! rejects NaN and infinities.

use std::fmt;

use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// On-disk element type code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Scalar types a [`Tensor`] can hold.
pub trait Element: Float + Default + Send + Sync + fmt::Debug + fmt::Display + 'static {
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    /// Raw bit pattern widened to 64 bits, for bitwise comparisons.
    fn bits(self) -> u64;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }
    fn bits(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }
    fn bits(self) -> u64 {
        self.to_bits()
    }
}

/// Accumulator precision for [`Tensor::matmul`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Accumulate {
    /// Accumulate in the element type.
    #[default]
    Single,
    /// Accumulate in f64 and round once per output entry.
    Double,
}

/// Which slices a per-slice statistic or outlier profile refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Rows,
    Columns,
}

/// Dense 2-D row-major matrix with finite entries.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Element = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{:?}>({}x{})", T::DTYPE, self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Element> Tensor<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some((index, v)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                index,
                value: v.as_f64(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a tensor from nested rows. Panics on ragged input or non-finite
    /// values; intended for literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        let data = rows
            .iter()
            .flat_map(|row| row.iter().map(|&v| T::from_f64(v)))
            .collect();
        Self::new(r, c, data).expect("finite literal")
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        assert!(value.is_finite());
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let v = f(i, j);
                assert!(v.is_finite(), "from_fn produced non-finite value");
                data.push(v);
            }
        }
        Self { rows, cols, data }
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::from_f64(z * std)
            })
            .collect();
        Self { rows, cols, data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    /// Overwrites one entry. Panics if `value` is not finite.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: T) {
        assert!(value.is_finite());
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                out.push(self.data[i * self.cols + j]);
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    pub fn matmul(&self, rhs: &Self, acc: Accumulate) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![T::zero(); m * n];
        match acc {
            Accumulate::Single => {
                for i in 0..m {
                    let out_row = &mut out[i * n..(i + 1) * n];
                    for p in 0..k {
                        let a = self.data[i * k + p];
                        if a == T::zero() {
                            continue;
                        }
                        let b_row = &rhs.data[p * n..(p + 1) * n];
                        for (o, &b) in out_row.iter_mut().zip(b_row) {
                            *o = *o + a * b;
                        }
                    }
                }
            }
            Accumulate::Double => {
                let mut row = vec![0.0f64; n];
                for i in 0..m {
                    row.iter_mut().for_each(|v| *v = 0.0);
                    for p in 0..k {
                        let a = self.data[i * k + p].as_f64();
                        let b_row = &rhs.data[p * n..(p + 1) * n];
                        for (o, &b) in row.iter_mut().zip(b_row) {
                            *o += a * b.as_f64();
                        }
                    }
                    for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&row) {
                        *o = T::from_f64(v);
                    }
                }
            }
        }
        Self::new(m, n, out)
    }

    fn zip_with(&self, rhs: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect();
        Self::new(self.rows, self.cols, data)
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn hadamard_product(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, "hadamard_product", |a, b| a * b)
    }

    pub fn scale(&self, factor: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * factor).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| f(self.get(i, j)))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs()))
    }

    pub fn mean_abs(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v.as_f64().abs()).sum::<f64>() / self.data.len() as f64
    }

    /// Appends zero rows until the tensor has `rows` rows.
    pub fn pad_rows(&self, rows: usize) -> Self {
        assert!(rows >= self.rows);
        let mut data = self.data.clone();
        data.resize(rows * self.cols, T::zero());
        Self {
            rows,
            cols: self.cols,
            data,
        }
    }

    /// Keeps the first `rows` rows.
    pub fn truncate_rows(&self, rows: usize) -> Self {
        assert!(rows <= self.rows);
        Self {
            rows,
            cols: self.cols,
            data: self.data[..rows * self.cols].to_vec(),
        }
    }

    /// Rows `start..end` as a new tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        assert!(start <= end && end <= self.rows);
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Stacks tensors with equal column counts vertically.
    pub fn vstack(parts: &[Self]) -> Result<Self> {
        let cols = parts.first().map_or(0, |p| p.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::ShapeMismatch {
                    op: "vstack",
                    left: (rows, cols),
                    right: p.shape(),
                });
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Ok(Self { rows, cols, data })
    }

    /// True when both tensors have the same shape and identical bit patterns.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape() == other.shape() && self.data.iter().zip(&other.data).all(|(a, b)| a.bits() == b.bits())
    }
}

/// Cosine of the angle between two same-shape tensors, flattened.
pub fn cosine_similarity<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "cosine_similarity",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x.as_f64(), y.as_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 {
        return Err(Error::ZeroNorm("left operand"));
    }
    if nb == 0.0 {
        return Err(Error::ZeroNorm("right operand"));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Relative Frobenius distance `‖a − b‖ / ‖b‖` (absolute when `b` is zero).
pub fn relative_error<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = b.frobenius_norm();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

/// Default outlier threshold: entries at least this many times the mean |x|.
pub const OUTLIER_MULTIPLIER: f64 = 10.0;

/// Per-slice maxima and outlier counts.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierStats {
    pub axis: Axis,
    pub max_abs: Vec<f64>,
    pub outliers_per_slice: Vec<usize>,
    pub outlier_count: usize,
    pub threshold: f64,
}

impl OutlierStats {
    pub const CSV_HEADER: &'static str = "slice_index,max_abs,outlier_count";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for (i, (m, c)) in self.max_abs.iter().zip(&self.outliers_per_slice).enumerate() {
            s.push_str(&format!("{i},{m},{c}\n"));
        }
        s
    }
}

pub fn outlier_stats<T: Element>(a: &Tensor<T>, axis: Axis) -> OutlierStats {
    outlier_stats_with(a, axis, OUTLIER_MULTIPLIER)
}

pub fn outlier_stats_with<T: Element>(a: &Tensor<T>, axis: Axis, multiplier: f64) -> OutlierStats {
    let slices = match axis {
        Axis::Rows => a.rows(),
        Axis::Columns => a.cols(),
    };
    let mean = a.mean_abs();
    let threshold = multiplier * mean;
    let mut max_abs = vec![0.0f64; slices];
    let mut per_slice = vec![0usize; slices];
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            let v = a.get(i, j).as_f64().abs();
            let s = match axis {
                Axis::Rows => i,
                Axis::Columns => j,
            };
            max_abs[s] = max_abs[s].max(v);
            // A zero tensor has a zero threshold; nothing in it is an outlier.
            if mean > 0.0 && v >= threshold {
                per_slice[s] += 1;
            }
        }
    }
    OutlierStats {
        axis,
        outlier_count: per_slice.iter().sum(),
        max_abs,
        outliers_per_slice: per_slice,
        threshold,
    }
}

/// Channels to magnify and by how much.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierProfile {
    pub channel_indices: Vec<usize>,
    pub magnification: f64,
    pub axis: Axis,
}

impl OutlierProfile {
    pub fn new(axis: Axis, channel_indices: Vec<usize>, magnification: f64) -> Result<Self> {
        if !(magnification.is_finite() && magnification >= 1.0) {
            return Err(Error::InvalidProfile(format!(
                "magnification {magnification} must be finite and >= 1"
            )));
        }
        Ok(Self {
            channel_indices,
            magnification,
            axis,
        })
    }

    /// Picks `count` distinct channels out of `len` from a seeded RNG.
    pub fn sample<R: Rng + ?Sized>(
        axis: Axis,
        count: usize,
        len: usize,
        magnification: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if count > len {
            return Err(Error::InvalidProfile(format!(
                "cannot pick {count} channels out of {len}"
            )));
        }
        let mut picked = rand::seq::index::sample(rng, len, count).into_vec();
        picked.sort_unstable();
        Self::new(axis, picked, magnification)
    }
}

/// Multiplies the profile's rows or columns by its magnification.
pub fn inject_outliers<T: Element>(a: &Tensor<T>, profile: &OutlierProfile) -> Result<Tensor<T>> {
    if !(profile.magnification.is_finite() && profile.magnification >= 1.0) {
        return Err(Error::InvalidProfile(format!(
            "magnification {} must be finite and >= 1",
            profile.magnification
        )));
    }
    let len = match profile.axis {
        Axis::Rows => a.rows(),
        Axis::Columns => a.cols(),
    };
    let mut hit = vec![false; len];
    for &idx in &profile.channel_indices {
        if idx >= len {
            return Err(Error::IndexOutOfRange {
                axis: match profile.axis {
                    Axis::Rows => "rows",
                    Axis::Columns => "columns",
                },
                index: idx,
                len,
            });
        }
        hit[idx] = true;
    }
    let factor = T::from_f64(profile.magnification);
    let out = Tensor::from_fn(a.rows(), a.cols(), |i, j| {
        let s = match profile.axis {
            Axis::Rows => i,
            Axis::Columns => j,
        };
        if hit[s] {
            a.get(i, j) * factor
        } else {
            a.get(i, j)
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            Tensor::<f32>::new(1, 2, vec![1.0, f32::NAN]),
            Err(Error::NonFinite { index: 1, .. })
        ));
        assert!(Tensor::<f64>::new(1, 1, vec![f64::INFINITY]).is_err());
        assert!(Tensor::<f32>::new(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn matmul_examples() {
        let a = Tensor::<f32>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let i2 = Tensor::<f32>::eye(2);
        assert_eq!(i2.matmul(&a, Accumulate::Single).unwrap(), a);
        assert_eq!(a.matmul(&i2, Accumulate::Double).unwrap(), a);
        let row = Tensor::<f32>::from_rows(&[&[1.0, 2.0]]);
        let col = Tensor::<f32>::from_rows(&[&[3.0], &[4.0]]);
        let p = row.matmul(&col, Accumulate::Single).unwrap();
        assert_eq!(p.data(), &[11.0]);
        assert!(matches!(
            row.matmul(&row, Accumulate::Single),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn cosine_examples() {
        let v = Tensor::<f64>::from_rows(&[&[1.0, -2.0, 3.0]]);
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        let e1 = Tensor::<f64>::from_rows(&[&[1.0, 0.0]]);
        let e2 = Tensor::<f64>::from_rows(&[&[0.0, 1.0]]);
        assert_eq!(cosine_similarity(&e1, &e2).unwrap(), 0.0);
        let a = Tensor::<f64>::from_rows(&[&[1.0, 1.0]]);
        assert!((cosine_similarity(&a, &e1).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-8);
        let z = Tensor::<f64>::zeros(1, 2);
        assert!(matches!(cosine_similarity(&z, &a), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn outlier_stats_examples() {
        let ones = Tensor::<f32>::filled(8, 8, 1.0);
        let s = outlier_stats(&ones, Axis::Columns);
        assert!(s.max_abs.iter().all(|&m| m == 1.0));
        assert_eq!(s.outlier_count, 0);

        let mut spike = ones.clone();
        spike.set(0, 3, 100.0);
        let s = outlier_stats(&spike, Axis::Columns);
        assert_eq!(s.max_abs[3], 100.0);
        assert_eq!(s.outlier_count, 1);
        assert!((s.threshold - 10.0 * 163.0 / 64.0).abs() < 1e-12);

        let zero = Tensor::<f32>::zeros(4, 4);
        let s = outlier_stats(&zero, Axis::Rows);
        assert!(s.max_abs.iter().all(|&m| m == 0.0));
        assert_eq!(s.outlier_count, 0);
        assert!(s.to_csv().starts_with("slice_index,max_abs,outlier_count\n0,0,0\n"));
    }

    #[test]
    fn inject_examples() {
        let ones = Tensor::<f32>::filled(4, 4, 1.0);
        let unit = OutlierProfile::new(Axis::Columns, vec![0, 2], 1.0).unwrap();
        assert_eq!(inject_outliers(&ones, &unit).unwrap(), ones);

        let p = OutlierProfile::new(Axis::Columns, vec![0], 10.0).unwrap();
        let out = inject_outliers(&ones, &p).unwrap();
        for i in 0..4 {
            assert_eq!(out.get(i, 0), 10.0);
            assert_eq!(out.get(i, 1), 1.0);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Tensor::<f32>::randn(64, 64, 1.0, &mut rng);
        assert_eq!(outlier_stats(&g, Axis::Columns).outlier_count, 0);
        let p = OutlierProfile::sample(Axis::Columns, 2, 64, 30.0, &mut rng).unwrap();
        let out = inject_outliers(&g, &p).unwrap();
        assert!(outlier_stats(&out, Axis::Columns).outlier_count > 0);

        let bad = OutlierProfile {
            channel_indices: vec![4],
            magnification: 2.0,
            axis: Axis::Rows,
        };
        assert!(matches!(
            inject_outliers(&ones, &bad),
            Err(Error::IndexOutOfRange { index: 4, .. })
        ));
        assert!(OutlierProfile::new(Axis::Rows, vec![], 0.5).is_err());
    }

    #[test]
    fn pad_and_truncate() {
        let a = Tensor::<f32>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let p = a.pad_rows(4);
        assert_eq!(p.row(3), &[0.0, 0.0]);
        assert_eq!(p.truncate_rows(3), a);
        let parts = [a.slice_rows(0, 1), a.slice_rows(1, 3)];
        assert_eq!(Tensor::vstack(&parts).unwrap(), a);
    }
}
