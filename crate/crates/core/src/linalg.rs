//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector};

/// Relative pivot threshold below which a Gram matrix is declared rank deficient.
pub const PIVOT_TOLERANCE: f64 = 1e-10;

/// Diagonally pivoted Cholesky factorization of a symmetric positive
/// semidefinite matrix, `P^T A P = R^T R`.
#[derive(Debug, Clone)]
pub struct PivotedCholesky {
    factor: DMatrix<f64>,
    perm: Vec<usize>,
}

/// Error value carrying the position (in pivot order) of the first pivot that
/// fell below `PIVOT_TOLERANCE * largest pivot`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankDeficient {
    pub pivot: usize,
    pub size: usize,
}

impl PivotedCholesky {
    pub fn new(a: &DMatrix<f64>) -> Result<Self, RankDeficient> {
        let n = a.nrows();
        debug_assert_eq!(n, a.ncols());
        let mut work = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut r = DMatrix::<f64>::zeros(n, n);
        let mut largest = 0.0_f64;

        for k in 0..n {
            // pick the largest remaining diagonal
            let mut best = k;
            for j in (k + 1)..n {
                if work[(j, j)] > work[(best, best)] {
                    best = j;
                }
            }
            if best != k {
                work.swap_rows(k, best);
                work.swap_columns(k, best);
                r.swap_columns(k, best);
                perm.swap(k, best);
            }
            let pivot = work[(k, k)];
            if k == 0 {
                largest = pivot;
            }
            if !(pivot > PIVOT_TOLERANCE * largest) || largest <= 0.0 {
                return Err(RankDeficient { pivot: k, size: n });
            }
            let rkk = pivot.sqrt();
            r[(k, k)] = rkk;
            for j in (k + 1)..n {
                r[(k, j)] = work[(k, j)] / rkk;
            }
            for i in (k + 1)..n {
                for j in i..n {
                    let v = work[(i, j)] - r[(k, i)] * r[(k, j)];
                    work[(i, j)] = v;
                    work[(j, i)] = v;
                }
            }
        }
        Ok(Self { factor: r, perm })
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        let r = &self.factor;
        // y = P^T b
        let mut y: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        // R^T z = y (forward)
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= r[(k, i)] * y[k];
            }
            y[i] = s / r[(i, i)];
        }
        // R w = z (backward)
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= r[(i, k)] * y[k];
            }
            y[i] = s / r[(i, i)];
        }
        let mut x = DVector::zeros(n);
        for (k, &p) in self.perm.iter().enumerate() {
            x[p] = y[k];
        }
        x
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut inv = DMatrix::zeros(n, n);
        let mut e = DVector::zeros(n);
        for j in 0..n {
            e.fill(0.0);
            e[j] = 1.0;
            inv.set_column(j, &self.solve(&e));
        }
        symmetrize(&inv)
    }
}

/// `(A + A^T) / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Projects a symmetric matrix onto the correlation matrices by clipping
/// eigenvalues at `floor` and rescaling back to a unit diagonal.
pub fn nearest_correlation(a: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = symmetrize(a).symmetric_eigen();
    let clipped = eig.eigenvalues.map(|v| v.max(floor));
    let q = &eig.eigenvectors;
    let mut out = q * DMatrix::from_diagonal(&clipped) * q.transpose();
    let d: Vec<f64> = (0..out.nrows()).map(|i| out[(i, i)].sqrt()).collect();
    for i in 0..out.nrows() {
        for j in 0..out.ncols() {
            out[(i, j)] /= d[i] * d[j];
        }
    }
    symmetrize(&out)
}
