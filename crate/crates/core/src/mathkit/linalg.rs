use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalues below this fraction of the largest are treated as zero.
pub const PINV_RELATIVE_THRESHOLD: f64 = 1e-10;

/// Dense symmetric matrix stored as its packed lower triangle (row-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetricMatrix {
    dim: usize,
    packed: Vec<f64>,
}

impl SymmetricMatrix {
    /// Accepts a square matrix whose asymmetry is below 1e-12 (relative to
    /// its largest entry) and symmetrizes it.
    pub fn from_dense(m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::InvalidArgument(format!(
                "symmetric matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let dim = m.nrows();
        let scale = m.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
        let mut packed = Vec::with_capacity(dim * (dim + 1) / 2);
        for i in 0..dim {
            for j in 0..=i {
                let (a, b) = (m[(i, j)], m[(j, i)]);
                if !a.is_finite() || !b.is_finite() {
                    return Err(Error::InvalidArgument("non-finite matrix entry".into()));
                }
                if (a - b).abs() > 1e-12 * scale {
                    return Err(Error::InvalidArgument(format!(
                        "matrix not symmetric at ({i}, {j}): {a} vs {b}"
                    )));
                }
                packed.push(0.5 * (a + b));
            }
        }
        Ok(Self { dim, packed })
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_dense(&DMatrix::identity(dim, dim)).expect("identity is symmetric")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        self.packed[r * (r + 1) / 2 + c]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| self.get(i, j))
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim)
            .map(|i| (0..self.dim).map(|j| self.get(i, j)).collect())
            .collect()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            dim: self.dim,
            packed: self.packed.iter().map(|v| v * factor).collect(),
        }
    }
}

/// Result of a symmetric solve or inversion.
#[derive(Debug, Clone)]
pub struct SpdSolution<T> {
    pub value: T,
    /// Numerical rank used; equals the dimension on the Cholesky path.
    pub rank: usize,
    /// True when the eigen-thresholded pseudo-inverse was needed.
    pub pseudo_inverse: bool,
}

fn eigen_checked(a: &SymmetricMatrix) -> Result<(DVector<f64>, DMatrix<f64>, f64)> {
    let eig = a.to_dense().symmetric_eigen();
    let max_abs = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let tol = PINV_RELATIVE_THRESHOLD * max_abs;
    if let Some(neg) = eig.eigenvalues.iter().find(|&&v| v < -tol.max(1e-300)) {
        return Err(Error::Singular(format!(
            "matrix is indefinite (eigenvalue {neg:e})"
        )));
    }
    Ok((eig.eigenvalues, eig.eigenvectors, tol))
}

/// Moore-Penrose inverse of a positive semidefinite matrix, dropping
/// eigenvalues below 1e-10 of the largest.
pub fn pseudo_inverse(a: &SymmetricMatrix) -> Result<SpdSolution<DMatrix<f64>>> {
    let (values, vectors, tol) = eigen_checked(a)?;
    let n = a.dim();
    let mut out = DMatrix::zeros(n, n);
    let mut rank = 0;
    for (k, &lambda) in values.iter().enumerate() {
        if lambda > tol && lambda > 0.0 {
            rank += 1;
            let v = vectors.column(k);
            out += (v * v.transpose()) / lambda;
        }
    }
    Ok(SpdSolution {
        value: out,
        rank,
        pseudo_inverse: true,
    })
}

/// Solves A x = b: Cholesky when A is positive definite, otherwise the
/// thresholded pseudo-inverse.
pub fn solve_spd(a: &SymmetricMatrix, b: &DVector<f64>) -> Result<SpdSolution<DVector<f64>>> {
    if b.len() != a.dim() {
        return Err(Error::InvalidArgument(format!(
            "right-hand side has length {}, matrix is {}x{}",
            b.len(),
            a.dim(),
            a.dim()
        )));
    }
    if let Some(inv) = spd_inverse(a) {
        return Ok(SpdSolution {
            value: &inv * b,
            rank: a.dim(),
            pseudo_inverse: false,
        });
    }
    let pinv = pseudo_inverse(a)?;
    Ok(SpdSolution {
        value: &pinv.value * b,
        rank: pinv.rank,
        pseudo_inverse: true,
    })
}

/// Inverse via Cholesky, or `None` when the matrix is not numerically
/// positive definite (smallest eigenvalue below the pseudo-inverse cutoff).
pub fn spd_inverse(a: &SymmetricMatrix) -> Option<DMatrix<f64>> {
    let dense = a.to_dense();
    let eig = dense.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    if !(max > 0.0) || min <= PINV_RELATIVE_THRESHOLD * max {
        return None;
    }
    dense.cholesky().map(|c| c.inverse())
}

/// Population-form covariance of the columns of an n x K matrix (divisor n).
pub fn empirical_covariance(m: &DMatrix<f64>) -> Result<SymmetricMatrix> {
    let n = m.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "empirical covariance needs at least 2 rows, got {n}"
        )));
    }
    let k = m.ncols();
    let means: Vec<f64> = (0..k).map(|j| m.column(j).sum() / n as f64).collect();
    let mut out = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in 0..=a {
            let ca = m.column(a);
            let cb = m.column(b);
            let s: f64 = ca
                .iter()
                .zip(cb.iter())
                .map(|(x, y)| (x - means[a]) * (y - means[b]))
                .sum();
            out[(a, b)] = s / n as f64;
            out[(b, a)] = out[(a, b)];
        }
    }
    SymmetricMatrix::from_dense(&out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_solve() {
        let b = DVector::from_vec(vec![3.0, -1.0, 2.5]);
        let x = solve_spd(&SymmetricMatrix::identity(3), &b).unwrap();
        assert_eq!(x.value, b);
        assert!(!x.pseudo_inverse);
    }

    #[test]
    fn diagonal_solve() {
        let a = SymmetricMatrix::from_dense(&DMatrix::from_diagonal(&DVector::from_vec(vec![
            2.0, 8.0,
        ])))
        .unwrap();
        let x = solve_spd(&a, &DVector::from_vec(vec![2.0, 8.0])).unwrap();
        assert!((x.value[0] - 1.0).abs() < 1e-15 && (x.value[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn singular_goes_through_pinv() {
        let a = SymmetricMatrix::from_dense(&DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]))
            .unwrap();
        let x = solve_spd(&a, &DVector::from_vec(vec![2.0, 2.0])).unwrap();
        assert!(x.pseudo_inverse);
        assert_eq!(x.rank, 1);
        assert!((x.value[0] - 1.0).abs() < 1e-12 && (x.value[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn indefinite_rejected() {
        let a = SymmetricMatrix::from_dense(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]))
            .unwrap();
        assert!(matches!(
            solve_spd(&a, &DVector::from_vec(vec![1.0, 1.0])),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn asymmetry_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(SymmetricMatrix::from_dense(&m).is_err());
    }

    #[test]
    fn covariance_of_constant_and_duplicate_columns() {
        let m = DMatrix::from_row_slice(3, 2, &[4.0, 4.0, 4.0, 4.0, 4.0, 4.0]);
        let c = empirical_covariance(&m).unwrap();
        assert!(c.to_dense().iter().all(|v| *v == 0.0));

        let m = DMatrix::from_row_slice(4, 2, &[1.0, 1.0, 2.0, 2.0, 5.0, 5.0, -1.0, -1.0]);
        let c = empirical_covariance(&m).unwrap();
        let v = c.get(0, 0);
        assert!(v > 0.0);
        assert_eq!(c.get(0, 1), v);
        assert_eq!(c.get(1, 1), v);
        assert!(empirical_covariance(&DMatrix::zeros(1, 2)).is_err());
    }
}
