//! Row-wise normalization `f(x) = x / ‖x‖` with an optional gain, and its
//! exact backward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hadamard::{build_spec, dense_matrix};
use crate::tensor::{Accumulate, Element, Tensor};

fn norm<T: Element>(x: &[T]) -> Result<f64> {
    let n = x.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
    if n == 0.0 {
        Err(Error::ZeroNorm("rmsnorm input row"))
    } else {
        Ok(n)
    }
}

/// `x / ‖x‖`.
pub fn rmsnorm_forward<T: Element>(x: &[T]) -> Result<Vec<T>> {
    let n = norm(x)?;
    Ok(x.iter().map(|&v| T::from_f64(v.as_f64() / n)).collect())
}

/// Vector-Jacobian product `(1/‖x‖)(I − x xᵀ/‖x‖²) e`.
pub fn rmsnorm_backward<T: Element>(x: &[T], e: &[T]) -> Result<Vec<T>> {
    assert_eq!(x.len(), e.len());
    let n = norm(x)?;
    let dot: f64 = x.iter().zip(e).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
    let radial = dot / (n * n);
    Ok(x.iter()
        .zip(e)
        .map(|(&xi, &ei)| T::from_f64((ei.as_f64() - radial * xi.as_f64()) / n))
        .collect())
}

/// Normalization layer over rows of width `dim`.
#[derive(Debug, Clone)]
pub struct RmsNorm<T: Element = f32> {
    pub dim: usize,
    /// Elementwise gain applied after normalization, stored as `1 x dim`.
    pub gain: Option<Tensor<T>>,
}

impl<T: Element> RmsNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self { dim, gain: None }
    }

    pub fn with_gain(dim: usize, value: f64) -> Self {
        Self {
            dim,
            gain: Some(Tensor::filled(1, dim, T::from_f64(value))),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let mut data = Vec::with_capacity(x.len());
        for i in 0..x.rows() {
            let mut row = rmsnorm_forward(x.row(i))?;
            if let Some(g) = &self.gain {
                row.iter_mut().zip(g.data()).for_each(|(v, &gv)| *v = *v * gv);
            }
            data.extend(row);
        }
        Tensor::new(x.rows(), x.cols(), data)
    }

    /// Input gradient and, when a gain is present, its gradient.
    pub fn backward(&self, x: &Tensor<T>, e: &Tensor<T>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        self.check(x)?;
        if e.shape() != x.shape() {
            return Err(Error::ShapeMismatch {
                op: "rmsnorm backward",
                left: x.shape(),
                right: e.shape(),
            });
        }
        let mut data = Vec::with_capacity(x.len());
        let mut g_gain = self.gain.as_ref().map(|_| vec![0.0f64; self.dim]);
        for i in 0..x.rows() {
            let upstream: Vec<T> = match &self.gain {
                Some(g) => e.row(i).iter().zip(g.data()).map(|(&a, &b)| a * b).collect(),
                None => e.row(i).to_vec(),
            };
            if let Some(gg) = g_gain.as_mut() {
                let f = rmsnorm_forward(x.row(i))?;
                for ((acc, fv), ev) in gg.iter_mut().zip(f).zip(e.row(i)) {
                    *acc += fv.as_f64() * ev.as_f64();
                }
            }
            data.extend(rmsnorm_backward(x.row(i), &upstream)?);
        }
        let g_gain = g_gain.map(|g| Tensor::from_fn(1, self.dim, |_, j| T::from_f64(g[j])));
        Ok((Tensor::new(x.rows(), x.cols(), data)?, g_gain))
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.cols() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "rmsnorm",
                left: x.shape(),
                right: (1, self.dim),
            });
        }
        Ok(())
    }
}

/// How far normalization is from commuting with an orthogonal `Q`
/// (row-vector convention).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DistributivityGaps {
    /// `‖f(xQ) − f(x)Q‖`
    pub forward_gap: f64,
    /// `‖J(xQ)·e − (J(x)·e)Q‖`: the derivative evaluated at the rotated
    /// point against the rotated derivative, for an upstream error that is
    /// not itself rotated.
    pub backward_gap: f64,
    /// `‖J(xQ)·(eQ) − (J(x)·e)Q‖`: with the error rotated as well the
    /// Jacobian is equivariant, so this stays at rounding level.
    pub equivariance_gap: f64,
}

fn l2_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.sub(b).map(|d| d.frobenius_norm()).unwrap_or(f64::INFINITY)
}

/// Gaps for one row `x`, error `e` and orthogonal `q`.
pub fn distributivity_gaps(x: &Tensor<f64>, e: &Tensor<f64>, q: &Tensor<f64>) -> Result<DistributivityGaps> {
    let mm = |a: &Tensor<f64>| a.matmul(q, Accumulate::Double);
    let row = |v: Vec<f64>| Tensor::new(1, v.len(), v);
    let xq = mm(x)?;
    let eq = mm(e)?;
    let forward_gap = l2_diff(
        &row(rmsnorm_forward(xq.data())?)?,
        &mm(&row(rmsnorm_forward(x.data())?)?)?,
    );
    let rotated_after = mm(&row(rmsnorm_backward(x.data(), e.data())?)?)?;
    let backward_gap = l2_diff(&row(rmsnorm_backward(xq.data(), e.data())?)?, &rotated_after);
    let equivariance_gap = l2_diff(&row(rmsnorm_backward(xq.data(), eq.data())?)?, &rotated_after);
    Ok(DistributivityGaps {
        forward_gap,
        backward_gap,
        equivariance_gap,
    })
}

/// Gaps for a random row and error of width 64 under the normalized
/// Hadamard rotation.
pub fn distributivity_probe(seed: u64) -> Result<DistributivityGaps> {
    const DIM: usize = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::<f64>::randn(1, DIM, 1.0, &mut rng);
    let e = Tensor::<f64>::randn(1, DIM, 1.0, &mut rng);
    let q = dense_matrix::<f64>(&build_spec(DIM)?);
    distributivity_gaps(&x, &e, &q)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_examples() {
        assert_eq!(rmsnorm_forward(&[3.0f64, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(rmsnorm_forward(&[0.6f64, 0.8]).unwrap(), vec![0.6, 0.8]);
        let f = rmsnorm_forward(&[3.0f64 * 7.5, 4.0 * 7.5]).unwrap();
        assert!((f[0] - 0.6).abs() < 1e-15 && (f[1] - 0.8).abs() < 1e-15);
        assert!(matches!(rmsnorm_forward(&[0.0f32, 0.0]), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn backward_examples() {
        let g = rmsnorm_backward(&[3.0f64, 4.0], &[1.0, 0.0]).unwrap();
        assert!((g[0] - 0.128).abs() < 1e-15 && (g[1] + 0.096).abs() < 1e-15);
        let g = rmsnorm_backward(&[3.0f64, 4.0], &[3.0, 4.0]).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
        assert!(rmsnorm_backward(&[0.0f64; 3], &[1.0; 3]).is_err());
    }

    #[test]
    fn identity_rotation_has_no_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::randn(1, 8, 1.0, &mut rng);
        let e = Tensor::<f64>::randn(1, 8, 1.0, &mut rng);
        let gaps = distributivity_gaps(&x, &e, &Tensor::eye(8)).unwrap();
        assert_eq!(gaps.forward_gap, 0.0);
        assert_eq!(gaps.backward_gap, 0.0);
        assert_eq!(gaps.equivariance_gap, 0.0);
    }

    #[test]
    fn layer_rows_and_gain() {
        let x = Tensor::<f64>::from_rows(&[&[3.0, 4.0], &[0.0, 2.0]]);
        let plain = RmsNorm::<f64>::new(2).forward(&x).unwrap();
        assert_eq!(plain.data(), &[0.6, 0.8, 0.0, 1.0]);
        let scaled = RmsNorm::<f64>::with_gain(2, 2.0).forward(&x).unwrap();
        assert_eq!(scaled.data(), &[1.2, 1.6, 0.0, 2.0]);
        assert!(RmsNorm::<f64>::new(3).forward(&x).is_err());
    }
}
