//! Reconstruction error, sparsity audits and baseline comparisons.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::masking::Pattern;
use crate::matrix::Matrix;
use crate::pipeline::{compress_matrix, naive_prune_quant, Mode, PipelineConfig};
use crate::quantizer::{QuantizedMatrix, QuantizerKind};

const EPS: f64 = 1e-30;

/// Field order is the serialized key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rel_recon_error: f64,
    pub frob_output_error: f64,
    pub achieved_sparsity: f64,
    pub pattern_valid: bool,
    pub natural_zero_fraction: f64,
    pub per_row_objectives: Vec<f64>,
    pub baseline_deltas: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// `‖(Ŵ − W)·X‖_F / ‖W·X‖_F`.
pub fn reconstruction_error(w_ref: &Matrix, w_hat: &Matrix, x: &Matrix) -> Result<f64> {
    let diff = w_hat.sub(w_ref)?.matmul(x)?.frobenius_norm();
    let base = w_ref.matmul(x)?.frobenius_norm();
    Ok(diff / base.max(EPS))
}

pub fn output_error(w_ref: &Matrix, w_hat: &Matrix, x: &Matrix) -> Result<f64> {
    Ok(w_hat.sub(w_ref)?.matmul(x)?.frobenius_norm())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityAudit {
    pub achieved_sparsity: f64,
    /// Unstructured: every row has at least the requested zeros.
    /// N:M: every aligned group has at least `n` zeros.
    pub pattern_valid: bool,
    /// Units (rows or groups) holding exactly the requested zero count.
    pub exact_units: usize,
    pub total_units: usize,
}

pub fn sparsity_audit(w: &Matrix, pattern: Pattern) -> SparsityAudit {
    let zeros = |s: &[f64]| s.iter().filter(|&&v| v == 0.0).count();
    let total = w.rows() * w.cols();
    let achieved_sparsity = if total == 0 {
        0.0
    } else {
        zeros(w.as_slice()) as f64 / total as f64
    };
    let (mut valid, mut exact, mut units) = (true, 0, 0);
    match pattern {
        Pattern::Unstructured(_) => {
            let need = pattern.zeros_per_row(w.cols());
            for r in w.iter_rows() {
                let z = zeros(r);
                valid &= z >= need;
                exact += (z == need) as usize;
                units += 1;
            }
        }
        Pattern::Nm { n, m } => {
            if !w.cols().is_multiple_of(m) {
                valid = false;
            } else {
                for r in w.iter_rows() {
                    for g in r.chunks(m) {
                        let z = zeros(g);
                        valid &= z >= n;
                        exact += (z == n) as usize;
                        units += 1;
                    }
                }
            }
        }
    }
    SparsityAudit {
        achieved_sparsity,
        pattern_valid: valid,
        exact_units: exact,
        total_units: units,
    }
}

/// Fraction of integer codes equal to zero.
pub fn natural_sparsity(q: &QuantizedMatrix) -> f64 {
    if q.codes.is_empty() {
        return 0.0;
    }
    q.codes.iter().filter(|&&c| c == 0).count() as f64 / q.codes.len() as f64
}

pub const BASELINE_NONE: &str = "no_compensation";
pub const BASELINE_OBR_RTN: &str = "obr_rtn";
pub const BASELINE_OBR_GPTQ: &str = "obr_gptq";

/// Runs uncompensated prune+RTN, OBR with RTN and OBR with GPTQ on the same inputs.
///
/// The returned report describes the OBR run using the configured quantizer;
/// `baseline_deltas` holds each run's error relative to the uncompensated one.
pub fn compare_baselines(w: &Matrix, x: &Matrix, config: &PipelineConfig) -> Result<EvalReport> {
    let mut cfg = config.clone();
    cfg.mode = Mode::Joint;

    let mut rtn = cfg.clone();
    rtn.quantizer.kind = QuantizerKind::Rtn;
    let mut gptq = cfg.clone();
    gptq.quantizer.kind = QuantizerKind::Gptq;

    let naive = naive_prune_quant(w, x, &rtn)?;
    let obr_rtn = compress_matrix(w, x, &rtn)?;
    let obr_gptq = compress_matrix(w, x, &gptq)?;

    let base = naive.report.rel_recon_error.max(EPS);
    let mut report = match cfg.quantizer.kind {
        QuantizerKind::Rtn => obr_rtn.report.clone(),
        QuantizerKind::Gptq => obr_gptq.report.clone(),
    };
    report.baseline_deltas = BTreeMap::from([
        (BASELINE_NONE.to_string(), naive.report.rel_recon_error / base),
        (BASELINE_OBR_RTN.to_string(), obr_rtn.report.rel_recon_error / base),
        (BASELINE_OBR_GPTQ.to_string(), obr_gptq.report.rel_recon_error / base),
    ]);
    Ok(report)
}
