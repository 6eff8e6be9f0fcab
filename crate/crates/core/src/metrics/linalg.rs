//! Dense symmetric eigendecomposition by cyclic Jacobi rotations.

use crate::error::{Error, Result};

pub const JACOBI_TOL: f64 = 1e-10;
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Square row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        Self {
            n,
            data: (0..n * n).map(|k| f(k / n, k % n)).collect(),
        }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len());
        for (i, v) in values.iter().enumerate() {
            m.data[i * values.len() + i] = *v;
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        let n = self.n;
        let mut out = Matrix::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out.data[i * n + j] += a * other.data[k * n + j];
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.n, |i, j| self.get(j, i))
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn symmetrized(&self) -> Matrix {
        Matrix::from_fn(self.n, |i, j| 0.5 * (self.get(i, j) + self.get(j, i)))
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for j in i + 1..self.n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    fn off_diagonal_norm(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                if i != j {
                    s += self.get(i, j) * self.get(i, j);
                }
            }
        }
        s.sqrt()
    }
}

/// Eigenvalues and column eigenvectors of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    /// Column `k` is the eigenvector of `values[k]`.
    pub vectors: Matrix,
    pub sweeps: usize,
}

/// Cyclic Jacobi. Stops once the off-diagonal Frobenius norm drops below
/// `JACOBI_TOL · max(1, ‖A‖_F)`.
pub fn jacobi_eigen(a: &Matrix) -> Result<SymEigen> {
    let n = a.n;
    let mut m = a.symmetrized();
    let mut v = Matrix::identity(n);
    let tol = JACOBI_TOL * a.frobenius().max(1.0);
    for sweep in 0..=JACOBI_MAX_SWEEPS {
        if m.off_diagonal_norm() < tol {
            let values = (0..n).map(|i| m.get(i, i)).collect();
            return Ok(SymEigen {
                values,
                vectors: v,
                sweeps: sweep,
            });
        }
        if sweep == JACOBI_MAX_SWEEPS {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (m.get(p, p), m.get(q, q));
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m.get(k, p), m.get(k, q));
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let (mpk, mqk) = (m.get(p, k), m.get(q, k));
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                m.set(p, q, 0.0);
                m.set(q, p, 0.0);
                for k in 0..n {
                    let (vkp, vkq) = (v.get(k, p), v.get(k, q));
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    Err(Error::Numerical(format!(
        "Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} sweeps"
    )))
}

/// Eigenvalues below this are treated as a broken (non-PSD) input.
pub const NEGATIVE_EIGEN_TOL: f64 = -1e-6;

fn clamp_eigen(values: &[f64]) -> Result<Vec<f64>> {
    values
        .iter()
        .map(|&l| {
            if l < NEGATIVE_EIGEN_TOL {
                Err(Error::Numerical(format!("eigenvalue {l:e} of a PSD matrix")))
            } else {
                Ok(l.max(0.0))
            }
        })
        .collect()
}

/// Principal square root of a symmetric PSD matrix.
pub fn sqrtm_psd(a: &Matrix) -> Result<Matrix> {
    let eig = jacobi_eigen(a)?;
    let roots: Vec<f64> = clamp_eigen(&eig.values)?.into_iter().map(f64::sqrt).collect();
    let n = a.n;
    let mut out = Matrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            out.data[i * n + j] = (0..n)
                .map(|k| eig.vectors.get(i, k) * roots[k] * eig.vectors.get(j, k))
                .sum();
        }
    }
    Ok(out)
}

/// `Tr(A^{1/2})` for symmetric PSD `A`.
pub fn trace_sqrt_psd(a: &Matrix) -> Result<f64> {
    let eig = jacobi_eigen(a)?;
    Ok(clamp_eigen(&eig.values)?.into_iter().map(f64::sqrt).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_spd(n: usize, seed: &[f64]) -> Matrix {
        let b = Matrix::from_fn(n, |i, j| seed[(i * 31 + j * 7) % seed.len()] + if i == j { 0.3 } else { 0.0 });
        let mut m = b.matmul(&b.transpose());
        for i in 0..n {
            m.data[i * n + i] += 1e-3;
        }
        m
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn sqrt_squares_back(n in 1usize..24, seed in proptest::collection::vec(-1.0f64..1.0, 64)) {
            let m = random_spd(n, &seed);
            let r = sqrtm_psd(&m).unwrap();
            let back = r.matmul(&r);
            let diff = Matrix { n, data: back.data.iter().zip(&m.data).map(|(a, b)| a - b).collect() };
            prop_assert!(diff.frobenius() / m.frobenius() < 1e-6);
        }
    }

    #[test]
    fn eigen_decomposes_known_matrix() {
        let m = Matrix::from_fn(2, |i, j| if i == j { 2.0 } else { 1.0 });
        let mut ev = jacobi_eigen(&m).unwrap().values;
        ev.sort_by(f64::total_cmp);
        assert!((ev[0] - 1.0).abs() < 1e-12 && (ev[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn severe_negative_eigenvalue_is_an_error() {
        let m = Matrix::diag(&[1.0, -0.5]);
        assert!(matches!(sqrtm_psd(&m), Err(Error::Numerical(_))));
        let tiny = Matrix::diag(&[1.0, -1e-9]);
        let r = sqrtm_psd(&tiny).unwrap();
        assert_eq!(r.get(1, 1), 0.0);
    }
}
