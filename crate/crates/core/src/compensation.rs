//! Closed-form group error compensation on a single weight row.
//!
//! For a row perturbation split into a retain set `R` and an eviction set `E`
//! whose error `e_E` is fixed, the quadratic `½·[Δw_R e_E]·H·[Δw_R e_E]ᵀ` is
//! minimized by `Δw_R = −H_RR⁻¹·H_RE·e_E`.
//!
//! `e_E` is always the perturbation actually applied to the evicted entries
//! (compressed minus original): `−w_E` for pruning, `quant(w̄_E) − w̄_E` for quantization.

use crate::calibration::Hessian;
use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::quantizer::{quant_error_row, QuantizerSpec};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RowPartition {
    pub retain: Vec<usize>,
    pub evict: Vec<usize>,
}

impl RowPartition {
    /// Retain = kept columns, evict = pruned columns.
    pub fn from_mask(mask_row: &[f64]) -> Self {
        let (retain, evict) = (0..mask_row.len()).partition(|&j| mask_row[j] != 0.0);
        Self { retain, evict }
    }

    /// First `floor(α·|R1|)` retained columns are evicted, the rest retained.
    pub fn split_retained(retained: &[usize], alpha: f64) -> Self {
        let t = ((alpha * retained.len() as f64) + 1e-9).floor() as usize;
        let t = t.min(retained.len());
        Self {
            evict: retained[..t].to_vec(),
            retain: retained[t..].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowCompensation {
    /// Full-length row update; nonzero only on the retain set.
    pub delta: Vec<f64>,
    /// Objective with `Δw_R = 0`.
    pub objective_before: f64,
    /// Objective at the optimal `Δw_R`.
    pub objective_after: f64,
    /// `‖H_RR·Δw_R + H_RE·e_E‖_∞`.
    pub stationarity_residual: f64,
}

impl RowCompensation {
    fn zero(dim: usize, objective: f64) -> Self {
        Self {
            delta: vec![0.0; dim],
            objective_before: objective,
            objective_after: objective,
            stationarity_residual: 0.0,
        }
    }
}

fn check_partition(dim: usize, part: &RowPartition, e_len: usize) -> Result<()> {
    if e_len != part.evict.len() {
        return Err(Error::Shape(format!(
            "{e_len} eviction errors for {} evicted indices",
            part.evict.len()
        )));
    }
    let mut seen = vec![false; dim];
    for &j in part.retain.iter().chain(&part.evict) {
        if j >= dim || std::mem::replace(&mut seen[j], true) {
            return Err(Error::InvalidArgument(format!(
                "partition index {j} out of range or repeated (dim {dim})"
            )));
        }
    }
    Ok(())
}

pub fn solve_compensation(
    hessian: &Hessian,
    part: &RowPartition,
    e_evict: &[f64],
) -> Result<RowCompensation> {
    let dim = hessian.dim();
    check_partition(dim, part, e_evict.len())?;
    let h = hessian.matrix();

    let mut perturbation = vec![0.0; dim];
    for (&j, &e) in part.evict.iter().zip(e_evict) {
        perturbation[j] = e;
    }
    let before = hessian.objective(&perturbation);
    if part.evict.is_empty() || part.retain.is_empty() || e_evict.iter().all(|&e| e == 0.0) {
        return Ok(RowCompensation::zero(dim, before));
    }

    // b = H_RE · e_E
    let b: Vec<f64> = part
        .retain
        .iter()
        .map(|&r| {
            part.evict
                .iter()
                .zip(e_evict)
                .map(|(&c, &e)| h[(r, c)] * e)
                .sum()
        })
        .collect();
    let h_rr = h.select(&part.retain, &part.retain);
    let chol = Cholesky::factor(&h_rr)?;
    let dw: Vec<f64> = chol.solve(&b).into_iter().map(|v| -v).collect();

    let residual = h_rr
        .mul_vec(&dw)
        .iter()
        .zip(&b)
        .fold(0.0f64, |m, (a, b)| m.max((a + b).abs()));

    let mut delta = vec![0.0; dim];
    for (&r, &d) in part.retain.iter().zip(&dw) {
        delta[r] = d;
        perturbation[r] = d;
    }
    Ok(RowCompensation {
        delta,
        objective_before: before,
        objective_after: hessian.objective(&perturbation),
        stationarity_residual: residual,
    })
}

/// Moves the pruned entries' loss onto the kept entries.
///
/// Returns the compensation and the compensated sparse row
/// `w̄ = [w_R + Δw_R, 0 on E]`.
pub fn prune_compensation(
    w_row: &[f64],
    mask_row: &[f64],
    hessian: &Hessian,
) -> Result<(RowCompensation, Vec<f64>)> {
    if w_row.len() != hessian.dim() || mask_row.len() != w_row.len() {
        return Err(Error::Shape(format!(
            "row of {} weights, mask of {}, hessian of dim {}",
            w_row.len(),
            mask_row.len(),
            hessian.dim()
        )));
    }
    let part = RowPartition::from_mask(mask_row);
    let e: Vec<f64> = part.evict.iter().map(|&j| -w_row[j]).collect();
    let comp = solve_compensation(hessian, &part, &e)?;
    let w_bar = w_row
        .iter()
        .zip(mask_row)
        .zip(&comp.delta)
        .map(|((&w, &m), &d)| if m != 0.0 { w + d } else { 0.0 })
        .collect();
    Ok((comp, w_bar))
}

/// Moves the RTN error of the first `α` share of the retained entries onto the rest.
///
/// The RTN grid comes from the whole compensated row, so it is the same grid the
/// final quantization sees for `w̄`.
pub fn quant_compensation(
    w_bar_row: &[f64],
    retained: &[usize],
    alpha: f64,
    hessian: &Hessian,
    spec: &QuantizerSpec,
) -> Result<RowCompensation> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    if w_bar_row.len() != hessian.dim() {
        return Err(Error::Shape(format!(
            "row of {} weights, hessian of dim {}",
            w_bar_row.len(),
            hessian.dim()
        )));
    }
    if retained.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::InvalidArgument(
            "retained indices must be strictly ascending".into(),
        ));
    }
    spec.validate()?;
    let part = RowPartition::split_retained(retained, alpha);
    let err = quant_error_row(w_bar_row, spec);
    let e: Vec<f64> = part.evict.iter().map(|&j| -err[j]).collect();
    solve_compensation(hessian, &part, &e)
}
