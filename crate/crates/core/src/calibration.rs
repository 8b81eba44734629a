//! Hessian proxy `H = 2XXᵀ + λI` and activation statistics from calibration data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{spd_inverse, Cholesky};
use crate::matrix::Matrix;

pub const DEFAULT_DAMP_RATIO: f64 = 0.01;
const MAX_DAMP_RETRIES: usize = 10;
/// Starting damping (relative to the mean diagonal) when `damp_ratio = 0` fails.
const ESCALATION_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Hessian {
    h: Matrix,
    damp_lambda: f64,
    source_samples: usize,
}

impl Hessian {
    /// Wraps an existing matrix, checking symmetry and positive definiteness.
    pub fn new(h: Matrix, damp_lambda: f64, source_samples: usize) -> Result<Self> {
        let n = h.rows();
        if h.cols() != n {
            return Err(Error::Shape(format!("hessian is {}x{}", h.rows(), h.cols())));
        }
        let scale = h.max_abs().max(f64::MIN_POSITIVE);
        for i in 0..n {
            for j in i + 1..n {
                if (h[(i, j)] - h[(j, i)]).abs() > 1e-10 * scale {
                    return Err(Error::InvalidArgument(format!(
                        "hessian not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Cholesky::factor(&h)?;
        Ok(Self {
            h,
            damp_lambda,
            source_samples,
        })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.h
    }

    pub fn dim(&self) -> usize {
        self.h.rows()
    }

    pub fn damp_lambda(&self) -> f64 {
        self.damp_lambda
    }

    pub fn source_samples(&self) -> usize {
        self.source_samples
    }

    pub fn inverse(&self) -> Result<Matrix> {
        spd_inverse(&self.h)
    }

    /// Row objective `½·Δw·H·Δwᵀ`.
    pub fn objective(&self, delta: &[f64]) -> f64 {
        0.5 * self.h.quadratic_form(delta)
    }
}

/// `H = 2XXᵀ + λI` with `λ = damp_ratio · mean(diag(2XXᵀ))`; doubles λ until Cholesky succeeds.
pub fn build_hessian(x: &Matrix, damp_ratio: f64) -> Result<Hessian> {
    if x.cols() == 0 {
        return Err(Error::InvalidArgument(
            "calibration data needs at least one sample".into(),
        ));
    }
    if !(damp_ratio >= 0.0) || !damp_ratio.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "damp_ratio must be finite and >= 0, got {damp_ratio}"
        )));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("calibration activations".into()));
    }
    let n = x.rows();
    let g = x.gram().scale(2.0);
    let mean_diag = if n == 0 {
        0.0
    } else {
        g.diagonal().iter().sum::<f64>() / n as f64
    };
    let unit = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let mut lambda = damp_ratio * unit;

    let mut last_err = None;
    for attempt in 0..=MAX_DAMP_RETRIES {
        let mut h = g.clone();
        for i in 0..n {
            h[(i, i)] += lambda;
        }
        match Cholesky::factor(&h) {
            Ok(_) => {
                if attempt > 0 {
                    log::debug!("hessian damping escalated to {lambda:e} after {attempt} retries");
                }
                return Ok(Hessian {
                    h,
                    damp_lambda: lambda,
                    source_samples: x.cols(),
                });
            }
            Err(e) => {
                last_err = Some(e);
                lambda = if lambda > 0.0 {
                    2.0 * lambda
                } else {
                    ESCALATION_FLOOR * unit
                };
            }
        }
    }
    Err(last_err.expect("at least one attempt"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStats {
    pub column_norms: Vec<f64>,
}

/// Euclidean norm of each input channel across all samples.
pub fn activation_stats(x: &Matrix) -> Result<ActivationStats> {
    if !x.is_finite() {
        return Err(Error::NonFinite("calibration activations".into()));
    }
    Ok(ActivationStats {
        column_norms: x
            .iter_rows()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect(),
    })
}

/// Synthetic calibration data: `samples` columns from `N(0, (1−ρ)I + ρ·11ᵀ)`.
pub fn gen_calibration(c_in: usize, samples: usize, correlation: f64, seed: u64) -> Result<Matrix> {
    if c_in == 0 || samples == 0 {
        return Err(Error::InvalidArgument(
            "c_in and samples must be at least 1".into(),
        ));
    }
    if !(0.0..1.0).contains(&correlation) {
        return Err(Error::InvalidArgument(format!(
            "correlation must lie in [0, 1), got {correlation}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let own = (1.0 - correlation).sqrt();
    let shared = correlation.sqrt();
    let mut x = Matrix::zeros(c_in, samples);
    for l in 0..samples {
        let common: f64 = StandardNormal.sample(&mut rng);
        for j in 0..c_in {
            let z: f64 = StandardNormal.sample(&mut rng);
            x[(j, l)] = own * z + shared * common;
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_activations() {
        let h = build_hessian(&Matrix::identity(2), 0.0).unwrap();
        assert_eq!(h.matrix().as_slice(), &[2.0, 0.0, 0.0, 2.0]);
        assert_eq!(h.damp_lambda(), 0.0);
    }

    #[test]
    fn damped_single_sample() {
        let x = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let h = build_hessian(&x, 0.01).unwrap();
        assert!((h.damp_lambda() - 0.02).abs() < 1e-15);
        let want = [2.02, 2.0, 2.0, 2.02];
        for (a, b) in h.matrix().as_slice().iter().zip(want) {
            assert!((a - b).abs() < 1e-14);
        }
        Cholesky::factor(h.matrix()).unwrap();
    }

    #[test]
    fn rank_deficient_escalates() {
        let mut x = gen_calibration(4, 16, 0.3, 9).unwrap();
        let dup = x.row(0).to_vec();
        x.row_mut(1).copy_from_slice(&dup);
        let h = build_hessian(&x, 0.0).unwrap();
        assert!(h.damp_lambda() > 0.0);
        Cholesky::factor(h.matrix()).unwrap();
    }

    #[test]
    fn zero_activations_use_absolute_damping() {
        let h = build_hessian(&Matrix::zeros(3, 5), 0.5).unwrap();
        assert_eq!(h.damp_lambda(), 0.5);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(build_hessian(&Matrix::zeros(2, 0), 0.01).is_err());
        assert!(build_hessian(&Matrix::identity(2), -1.0).is_err());
        assert!(gen_calibration(4, 4, 1.0, 0).is_err());
    }

    #[test]
    fn stats_examples() {
        let s = activation_stats(&Matrix::identity(3)).unwrap();
        assert_eq!(s.column_norms, vec![1.0, 1.0, 1.0]);
        let x = Matrix::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(activation_stats(&x).unwrap().column_norms, vec![5.0, 0.0]);
    }

    #[test]
    fn stats_match_gram_diagonal() {
        let x = gen_calibration(12, 40, 0.5, 4).unwrap();
        let g = x.gram();
        let s = activation_stats(&x).unwrap();
        for (j, n) in s.column_norms.iter().enumerate() {
            assert!((n * n - g[(j, j)]).abs() <= 1e-12 * g[(j, j)]);
        }
    }

    fn sample_correlations(x: &Matrix) -> Vec<f64> {
        let c = x.rows();
        let l = x.cols() as f64;
        let means: Vec<f64> = x.iter_rows().map(|r| r.iter().sum::<f64>() / l).collect();
        let cov = Matrix::from_fn(c, c, |i, j| {
            x.row(i)
                .iter()
                .zip(x.row(j))
                .map(|(a, b)| (a - means[i]) * (b - means[j]))
                .sum::<f64>()
                / (l - 1.0)
        });
        let mut out = Vec::new();
        for i in 0..c {
            for j in i + 1..c {
                out.push(cov[(i, j)] / (cov[(i, i)] * cov[(j, j)]).sqrt());
            }
        }
        out
    }

    #[test]
    fn uncorrelated_generation() {
        let x = gen_calibration(4, 1000, 0.0, 17).unwrap();
        assert!(sample_correlations(&x).iter().all(|c| c.abs() < 0.1));
    }

    #[test]
    fn correlated_generation() {
        let x = gen_calibration(4, 1000, 0.8, 17).unwrap();
        let c = sample_correlations(&x);
        let mean = c.iter().sum::<f64>() / c.len() as f64;
        assert!((0.7..=0.9).contains(&mean), "mean correlation {mean}");
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(
            gen_calibration(8, 33, 0.4, 5).unwrap(),
            gen_calibration(8, 33, 0.4, 5).unwrap()
        );
        assert_ne!(
            gen_calibration(8, 33, 0.4, 5).unwrap(),
            gen_calibration(8, 33, 0.4, 6).unwrap()
        );
    }
}
