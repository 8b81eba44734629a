//! Cholesky factorization and the SPD solves built on it.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Pivots at or below this fraction of the largest diagonal entry are treated as
/// singular, so numerically rank-deficient PSD matrices fail instead of producing
/// huge, meaningless solves.
const PIVOT_RTOL: f64 = 1e-12;

/// Lower-triangular factor `L` with `A = L·Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    pub fn factor(a: &Matrix) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(Error::Shape(format!(
                "cholesky of non-square {}x{}",
                a.rows(),
                a.cols()
            )));
        }
        let max_diag = a.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = PIVOT_RTOL * max_diag;
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let lj = l.row(j);
            let mut d = a[(j, j)] - lj[..j].iter().map(|v| v * v).sum::<f64>();
            if !(d > floor) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    dim: n,
                    index: j,
                    pivot: d,
                });
            }
            d = d.sqrt();
            l[(j, j)] = d;
            for i in j + 1..n {
                let s: f64 = l.row(i)[..j]
                    .iter()
                    .zip(&l.row(j)[..j])
                    .map(|(x, y)| x * y)
                    .sum();
                l[(i, j)] = (a[(i, j)] - s) / d;
            }
        }
        Ok(Self { l })
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    pub fn lower(&self) -> &Matrix {
        &self.l
    }

    /// Solves `A·x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        debug_assert_eq!(b.len(), n);
        let l = &self.l;
        let mut y = b.to_vec();
        for i in 0..n {
            let s: f64 = l.row(i)[..i].iter().zip(&y[..i]).map(|(a, b)| a * b).sum();
            y[i] = (y[i] - s) / l[(i, i)];
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| l[(k, i)] * y[k]).sum();
            y[i] = (y[i] - s) / l[(i, i)];
        }
        y
    }

    pub fn inverse(&self) -> Matrix {
        let n = self.dim();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e);
            for (i, v) in col.into_iter().enumerate() {
                inv[(i, j)] = v;
            }
        }
        // symmetrize away roundoff
        for i in 0..n {
            for j in i + 1..n {
                let v = 0.5 * (inv[(i, j)] + inv[(j, i)]);
                inv[(i, j)] = v;
                inv[(j, i)] = v;
            }
        }
        inv
    }
}

pub fn spd_inverse(a: &Matrix) -> Result<Matrix> {
    Ok(Cholesky::factor(a)?.inverse())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_and_solve_2x2() {
        let a = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let c = Cholesky::factor(&a).unwrap();
        assert_eq!(c.lower().as_slice(), &[2.0, 0.0, 1.0, 2.0f64.sqrt()]);
        let x = c.solve(&[2.0, 1.0]);
        let ax = a.mul_vec(&x);
        assert!((ax[0] - 2.0).abs() < 1e-14 && (ax[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn inverse_times_matrix_is_identity() {
        let a = Matrix::from_rows(&[
            vec![5.0, 1.0, 0.5],
            vec![1.0, 4.0, 1.0],
            vec![0.5, 1.0, 3.0],
        ])
        .unwrap();
        let prod = a.matmul(&spd_inverse(&a).unwrap()).unwrap();
        assert!(prod.sub(&Matrix::identity(3)).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn rejects_singular_and_indefinite() {
        let singular = Matrix::from_rows(&[vec![2.0, 2.0], vec![2.0, 2.0]]).unwrap();
        assert!(matches!(
            Cholesky::factor(&singular),
            Err(Error::NotPositiveDefinite { index: 1, .. })
        ));
        let indefinite = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, -1.0]]).unwrap();
        assert!(Cholesky::factor(&indefinite).is_err());
    }
}
