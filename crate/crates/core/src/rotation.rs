//! Randomized Hadamard rotations applied to the input-channel axis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Orthogonality tolerance for user-supplied rotations.
pub const USER_ROTATION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationKind {
    #[default]
    None,
    Hadamard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RotationSpec {
    pub kind: RotationKind,
    pub seed: u64,
    pub dim: usize,
}

/// Sylvester construction of the unnormalized ±1 Hadamard matrix.
fn sylvester(dim: usize) -> Matrix {
    Matrix::from_fn(dim, dim, |i, j| {
        if (i & j).count_ones() % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    })
}

/// `diag(signs) · H_n / √n`.
pub fn hadamard_with_signs(signs: &[f64]) -> Result<Matrix> {
    let dim = signs.len();
    if dim == 0 || !dim.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "hadamard rotation needs a power-of-two dimension, got {dim}"
        )));
    }
    let norm = 1.0 / (dim as f64).sqrt();
    let h = sylvester(dim);
    Ok(Matrix::from_fn(dim, dim, |i, j| signs[i] * h[(i, j)] * norm))
}

pub fn build_rotation(spec: &RotationSpec) -> Result<Matrix> {
    match spec.kind {
        RotationKind::None => Ok(Matrix::identity(spec.dim)),
        RotationKind::Hadamard => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let signs: Vec<f64> = (0..spec.dim)
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect();
            hadamard_with_signs(&signs)
        }
    }
}

/// Max-norm deviation of `QᵀQ` from the identity.
pub fn orthogonality_error(q: &Matrix) -> f64 {
    let qtq = q.transpose().matmul(q).expect("square");
    qtq.sub(&Matrix::identity(q.rows())).expect("same shape").max_abs()
}

pub fn validate_orthogonal(q: &Matrix, tol: f64) -> Result<()> {
    if q.rows() != q.cols() {
        return Err(Error::Shape(format!(
            "rotation must be square, got {}x{}",
            q.rows(),
            q.cols()
        )));
    }
    let err = orthogonality_error(q);
    if err > tol {
        return Err(Error::InvalidArgument(format!(
            "rotation is not orthogonal: max |QᵀQ − I| = {err:e} > {tol:e}"
        )));
    }
    Ok(())
}

/// Returns `(W·Q, Qᵀ·X)`; their product equals `W·X`.
pub fn rotate_pair(w: &Matrix, x: &Matrix, q: &Matrix) -> Result<(Matrix, Matrix)> {
    if q.rows() != q.cols() || w.cols() != q.rows() || x.rows() != q.rows() {
        return Err(Error::Shape(format!(
            "rotation {}x{} incompatible with weights {}x{} and activations {}x{}",
            q.rows(),
            q.cols(),
            w.rows(),
            w.cols(),
            x.rows(),
            x.cols()
        )));
    }
    Ok((w.matmul(q)?, q.transpose().matmul(x)?))
}
