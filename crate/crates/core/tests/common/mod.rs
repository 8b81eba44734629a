//! Test-only helpers: random instances and an independent least-squares oracle
//! for the row compensation problem.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use obr::calibration::{build_hessian, gen_calibration, Hessian};
use obr::compensation::RowPartition;
use obr::Matrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut r = rng(seed);
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut r))
}

pub fn gaussian_vec(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(r)).collect()
}

/// Random disjoint partition of `0..dim` with both sides nonempty.
pub fn random_partition(dim: usize, r: &mut ChaCha8Rng) -> RowPartition {
    let mut idx: Vec<usize> = (0..dim).collect();
    idx.shuffle(r);
    let n_retain = r.random_range(1..dim);
    let mut retain = idx[..n_retain].to_vec();
    let mut evict = idx[n_retain..].to_vec();
    retain.sort_unstable();
    evict.sort_unstable();
    RowPartition { retain, evict }
}

pub struct Instance {
    pub x: Matrix,
    pub hessian: Hessian,
}

/// `H = 2XXᵀ + λI` from correlated synthetic activations.
pub fn instance(dim: usize, samples: usize, rho: f64, damp: f64, seed: u64) -> Instance {
    let x = gen_calibration(dim, samples, rho, seed).unwrap();
    let hessian = build_hessian(&x, damp).unwrap();
    Instance { x, hessian }
}

/// Minimizes `½·v·H·vᵀ` over `v_R` with `v_E = e` by dense least squares (SVD), never
/// forming `H`: `H = 2·X̃X̃ᵀ` with `X̃ = [X | √(λ/2)·I]`, so the objective is `‖v·X̃‖²`.
///
/// Returns `(v_R, objective)`.
pub fn lstsq_oracle(x: &Matrix, lambda: f64, part: &RowPartition, e: &[f64]) -> (Vec<f64>, f64) {
    let (dim, samples) = x.shape();
    let cols = samples + dim;
    let xt = |j: usize, l: usize| -> f64 {
        if l < samples {
            x[(j, l)]
        } else if l - samples == j {
            (lambda / 2.0).sqrt()
        } else {
            0.0
        }
    };
    // ‖v X̃‖² = Σ_l (Σ_j v_j X̃_jl)² → A z ≈ b with A_{l,r} = X̃_{R[r], l}, b_l = −Σ_E e X̃_{E, l}
    let a = DMatrix::from_fn(cols, part.retain.len(), |l, r| xt(part.retain[r], l));
    let b = DVector::from_fn(cols, |l, _| {
        -part
            .evict
            .iter()
            .zip(e)
            .map(|(&j, &ej)| ej * xt(j, l))
            .sum::<f64>()
    });
    let z = a.clone().svd(true, true).solve(&b, 1e-14).unwrap();
    let resid = &a * &z - &b;
    (z.iter().copied().collect(), resid.norm_squared())
}

/// `½·eᵀ(H_EE − H_ER·H_RR⁻¹·H_RE)·e` through an LU inverse.
pub fn schur_objective(h: &Matrix, part: &RowPartition, e: &[f64]) -> f64 {
    let sel = |rows: &[usize], cols: &[usize]| {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| h[(rows[i], cols[j])])
    };
    let h_rr = sel(&part.retain, &part.retain);
    let h_re = sel(&part.retain, &part.evict);
    let h_ee = sel(&part.evict, &part.evict);
    let inv = h_rr.lu().try_inverse().unwrap();
    let s = &h_ee - h_re.transpose() * inv * &h_re;
    let ev = DVector::from_column_slice(e);
    0.5 * (ev.transpose() * s * ev)[(0, 0)]
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
