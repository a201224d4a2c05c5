//! Normalized Hadamard matrices of order `2^n * m`, `m in {1, 12, 20}`, and
//! fast transforms applying them from either side.
//!
//! `H_d = H_{2^n} ⊗ H_m` with Sylvester `H_{2^n}` and a symmetric base
//! matrix of order `m` from the Paley II construction. Both factors are
//! symmetric, so every `H_d` here is symmetric as well as orthogonal after
//! the single `1/sqrt(d)` normalization. Rotating twice is the identity.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

// Paley II, q = 5.
#[rustfmt::skip]
const H12: [[i8; 12]; 12] = [
    [ 1, -1,  1,  1,  1,  1,  1,  1,  1,  1,  1,  1],
    [-1, -1,  1, -1,  1, -1,  1, -1,  1, -1,  1, -1],
    [ 1,  1,  1, -1,  1,  1, -1, -1, -1, -1,  1,  1],
    [ 1, -1, -1, -1,  1, -1, -1,  1, -1,  1,  1, -1],
    [ 1,  1,  1,  1,  1, -1,  1,  1, -1, -1, -1, -1],
    [ 1, -1,  1, -1, -1, -1,  1, -1, -1,  1, -1,  1],
    [ 1,  1, -1, -1,  1,  1,  1, -1,  1,  1, -1, -1],
    [ 1, -1, -1,  1,  1, -1, -1, -1,  1, -1, -1,  1],
    [ 1,  1, -1, -1, -1, -1,  1,  1,  1, -1,  1,  1],
    [ 1, -1, -1,  1, -1,  1,  1, -1, -1, -1,  1, -1],
    [ 1,  1,  1,  1, -1, -1, -1, -1,  1,  1,  1, -1],
    [ 1, -1,  1, -1, -1,  1, -1,  1,  1, -1, -1, -1],
];

// Paley II, q = 9 (GF(9) = GF(3)[i] / (i^2 + 1)).
#[rustfmt::skip]
const H20: [[i8; 20]; 20] = [
    [ 1, -1,  1,  1,  1,  1,  1,  1,  1,  1,  1,  1,  1,  1,  1,  1,  1,  1,  1,  1],
    [-1, -1,  1, -1,  1, -1,  1, -1,  1, -1,  1, -1,  1, -1,  1, -1,  1, -1,  1, -1],
    [ 1,  1,  1, -1,  1,  1,  1,  1,  1,  1, -1, -1, -1, -1,  1,  1, -1, -1, -1, -1],
    [ 1, -1, -1, -1,  1, -1,  1, -1,  1, -1, -1,  1, -1,  1,  1, -1, -1,  1, -1,  1],
    [ 1,  1,  1,  1,  1, -1,  1,  1, -1, -1,  1,  1, -1, -1, -1, -1,  1,  1, -1, -1],
    [ 1, -1,  1, -1, -1, -1,  1, -1, -1,  1,  1, -1, -1,  1, -1,  1,  1, -1, -1,  1],
    [ 1,  1,  1,  1,  1,  1,  1, -1, -1, -1, -1, -1,  1,  1, -1, -1, -1, -1,  1,  1],
    [ 1, -1,  1, -1,  1, -1, -1, -1, -1,  1, -1,  1,  1, -1, -1,  1, -1,  1,  1, -1],
    [ 1,  1,  1,  1, -1, -1, -1, -1,  1, -1,  1,  1,  1,  1,  1,  1, -1, -1, -1, -1],
    [ 1, -1,  1, -1, -1,  1, -1,  1, -1, -1,  1, -1,  1, -1,  1, -1, -1,  1, -1,  1],
    [ 1,  1, -1, -1,  1,  1, -1, -1,  1,  1,  1, -1,  1,  1, -1, -1,  1,  1, -1, -1],
    [ 1, -1, -1,  1,  1, -1, -1,  1,  1, -1, -1, -1,  1, -1, -1,  1,  1, -1, -1,  1],
    [ 1,  1, -1, -1, -1, -1,  1,  1,  1,  1,  1,  1,  1, -1, -1, -1, -1, -1,  1,  1],
    [ 1, -1, -1,  1, -1,  1,  1, -1,  1, -1,  1, -1, -1, -1, -1,  1, -1,  1,  1, -1],
    [ 1,  1,  1,  1, -1, -1, -1, -1,  1,  1, -1, -1, -1, -1,  1, -1,  1,  1,  1,  1],
    [ 1, -1,  1, -1, -1,  1, -1,  1,  1, -1, -1,  1, -1,  1, -1, -1,  1, -1,  1, -1],
    [ 1,  1, -1, -1,  1,  1, -1, -1, -1, -1,  1,  1, -1, -1,  1,  1,  1, -1,  1,  1],
    [ 1, -1, -1,  1,  1, -1, -1,  1, -1,  1,  1, -1, -1,  1,  1, -1, -1, -1,  1, -1],
    [ 1,  1, -1, -1, -1, -1,  1,  1, -1, -1, -1, -1,  1,  1,  1,  1,  1,  1,  1, -1],
    [ 1, -1, -1,  1, -1,  1,  1, -1, -1,  1, -1,  1,  1, -1,  1, -1,  1, -1, -1, -1],
];

/// Factorization `dim = 2^pow2_exponent * base_dim` plus the base matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HadamardSpec {
    dim: usize,
    pow2_exponent: u32,
    base_dim: usize,
    /// Row-major ±1 entries; `[1]` when `base_dim == 1`.
    base_matrix: Vec<i8>,
}

impl HadamardSpec {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pow2_exponent(&self) -> u32 {
        self.pow2_exponent
    }

    pub fn base_dim(&self) -> usize {
        self.base_dim
    }

    pub fn base_matrix(&self) -> &[i8] {
        &self.base_matrix
    }

    pub fn norm_factor(&self) -> f64 {
        1.0 / (self.dim as f64).sqrt()
    }
}

fn factor(d: usize) -> Option<(u32, usize)> {
    if d == 0 {
        return None;
    }
    let n = d.trailing_zeros();
    match d >> n {
        1 => Some((n, 1)),
        // 12 = 4 * 3 and 20 = 4 * 5
        odd @ (3 | 5) if n >= 2 => Some((n - 2, 4 * odd)),
        _ => None,
    }
}

pub fn is_supported(d: usize) -> bool {
    factor(d).is_some()
}

/// Smallest supported order `>= d`.
pub fn next_supported(d: usize) -> usize {
    (d.max(1)..).find(|&k| is_supported(k)).unwrap()
}

pub fn build_spec(d: usize) -> Result<HadamardSpec> {
    let (n, m) = factor(d).ok_or(Error::UnsupportedDim(d))?;
    let base_matrix = match m {
        1 => vec![1],
        12 => H12.iter().flatten().copied().collect(),
        20 => H20.iter().flatten().copied().collect(),
        _ => unreachable!(),
    };
    Ok(HadamardSpec {
        dim: d,
        pow2_exponent: n,
        base_dim: m,
        base_matrix,
    })
}

/// Unnormalized `x · (H_{2^n} ⊗ H_m)` in place; `scratch` holds `m` values.
fn rotate_row(x: &mut [f64], spec: &HadamardSpec, scratch: &mut [f64]) {
    let m = spec.base_dim;
    if m > 1 {
        for block in x.chunks_exact_mut(m) {
            scratch.copy_from_slice(block);
            for (j, out) in block.iter_mut().enumerate() {
                *out = scratch
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v * spec.base_matrix[i * m + j] as f64)
                    .sum();
            }
        }
    }
    // Sylvester butterflies over the block index.
    let blocks = 1usize << spec.pow2_exponent;
    let mut h = 1;
    while h < blocks {
        for start in (0..blocks).step_by(2 * h) {
            for b in start..start + h {
                let (lo, hi) = (b * m, (b + h) * m);
                for k in 0..m {
                    let (u, v) = (x[lo + k], x[hi + k]);
                    x[lo + k] = u + v;
                    x[hi + k] = u - v;
                }
            }
        }
        h *= 2;
    }
}

/// `A · H_d`, rotating each row.
pub fn transform_right<T: Element>(a: &Tensor<T>, spec: &HadamardSpec) -> Result<Tensor<T>> {
    if a.cols() != spec.dim {
        return Err(Error::ShapeMismatch {
            op: "transform_right",
            left: a.shape(),
            right: (spec.dim, spec.dim),
        });
    }
    let norm = spec.norm_factor();
    let mut row = vec![0.0f64; spec.dim];
    let mut scratch = vec![0.0f64; spec.base_dim];
    let mut out = Vec::with_capacity(a.len());
    for i in 0..a.rows() {
        for (dst, &src) in row.iter_mut().zip(a.row(i)) {
            *dst = src.as_f64();
        }
        rotate_row(&mut row, spec, &mut scratch);
        out.extend(row.iter().map(|&v| T::from_f64(v * norm)));
    }
    Tensor::new(a.rows(), a.cols(), out)
}

/// `H_dᵀ · A`, computed as the transpose of the right transform of `Aᵀ`.
pub fn transform_left<T: Element>(a: &Tensor<T>, spec: &HadamardSpec) -> Result<Tensor<T>> {
    if a.rows() != spec.dim {
        return Err(Error::ShapeMismatch {
            op: "transform_left",
            left: a.shape(),
            right: (spec.dim, spec.dim),
        });
    }
    Ok(transform_right(&a.transpose(), spec)?.transpose())
}

/// Explicit normalized `H_d`, built entry by entry from the Kronecker
/// definition. Meant as an oracle for small orders.
pub fn dense_matrix<T: Element>(spec: &HadamardSpec) -> Tensor<T> {
    let m = spec.base_dim;
    let norm = spec.norm_factor();
    Tensor::from_fn(spec.dim, spec.dim, |i, j| {
        let (i1, i2, j1, j2) = (i / m, i % m, j / m, j % m);
        let sylvester = if (i1 & j1).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
        T::from_f64(sylvester * spec.base_matrix[i2 * m + j2] as f64 * norm)
    })
}
