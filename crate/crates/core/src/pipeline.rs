//! End-to-end compression: rotate → mask → prune compensation → quant compensation → quantize.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{activation_stats, build_hessian, Hessian, DEFAULT_DAMP_RATIO};
use crate::compensation::{prune_compensation, quant_compensation, RowCompensation};
use crate::error::{Error, Result};
use crate::evaluation::{natural_sparsity, output_error, reconstruction_error, sparsity_audit, EvalReport};
use crate::masking::{build_mask, prune_scores, MaskMetric, Pattern, PruneMask};
use crate::matrix::Matrix;
use crate::quantizer::{quantize, QuantizedMatrix, QuantizerSpec};
use crate::rotation::{build_rotation, rotate_pair, RotationKind, RotationSpec};
use crate::tensor_store::{Tensor, TensorContainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Joint,
    PruneOnly,
    QuantOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Propagate {
    #[default]
    Compressed,
    Original,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RotationConfig {
    #[serde(default)]
    pub kind: RotationKind,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    #[serde(default)]
    pub metric: MaskMetric,
    #[serde(default)]
    pub pattern: Pattern,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub rotation: RotationConfig,
    #[serde(default)]
    pub mask: MaskConfig,
    #[serde(default)]
    pub quantizer: QuantizerSpec,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_damp")]
    pub damp_ratio: f64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub propagate: Propagate,
    /// Seed for the random mask metric.
    #[serde(default)]
    pub seed: u64,
}

fn default_alpha() -> f64 {
    0.5
}

fn default_damp() -> f64 {
    DEFAULT_DAMP_RATIO
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            rotation: RotationConfig::default(),
            mask: MaskConfig::default(),
            quantizer: QuantizerSpec::default(),
            alpha: default_alpha(),
            damp_ratio: default_damp(),
            mode: Mode::default(),
            propagate: Propagate::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.damp_ratio >= 0.0) || !self.damp_ratio.is_finite() {
            return Err(Error::Config(format!(
                "damp_ratio must be finite and >= 0, got {}",
                self.damp_ratio
            )));
        }
        self.mask.pattern.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.quantizer.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RowObjectives {
    pub prune_before: f64,
    pub prune_after: f64,
    pub quant_before: f64,
    pub quant_after: f64,
    /// `½·Δw·H·Δwᵀ` of the final weights against the rotated reference.
    pub final_objective: f64,
}

#[derive(Debug, Clone)]
pub struct CompressionResult {
    /// Integer codes and scales; `None` for pruning-only runs.
    pub w_hat: Option<QuantizedMatrix>,
    /// Final weights as reals (dequantized codes, or the sparse weights when pruning only). Rotated basis.
    pub weights: Matrix,
    pub mask: Option<PruneMask>,
    pub rotation: Matrix,
    pub delta_prune: Matrix,
    pub delta_quant: Matrix,
    pub delta_obr: Matrix,
    pub objectives: Vec<RowObjectives>,
    pub report: EvalReport,
    /// Error of `weights·Qᵀ` against the original weights on the original activations.
    pub unrotated_recon_error: f64,
    pub damp_lambda: f64,
}

impl CompressionResult {
    /// Final weights mapped back to the unrotated input basis.
    pub fn unrotated_weights(&self) -> Result<Matrix> {
        self.weights.matmul(&self.rotation.transpose())
    }

    pub fn to_container(&self) -> Result<TensorContainer> {
        let (rows, cols) = self.weights.shape();
        let mut c = TensorContainer::new();
        match &self.w_hat {
            Some(q) => {
                c.push(Tensor::from_i8("codes", vec![rows, cols], &q.codes)?)?;
                c.push(Tensor::from_f64("scales", vec![rows], &q.scales)?)?;
            }
            None => c.push_matrix("weights", &self.weights)?,
        }
        if let Some(m) = &self.mask {
            c.push(Tensor::from_i8("mask", vec![rows, cols], &m.to_i8())?)?;
        }
        c.push_matrix("delta_prune", &self.delta_prune)?;
        c.push_matrix("delta_quant", &self.delta_quant)?;
        c.push_matrix("rotation", &self.rotation)?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Compensation {
    Obr,
    Off,
}

struct RowOutcome {
    prune: RowCompensation,
    quant: RowCompensation,
    w_quant: Vec<f64>,
}

pub fn compress_matrix(w: &Matrix, x: &Matrix, config: &PipelineConfig) -> Result<CompressionResult> {
    let q = rotation_for(config, w.cols())?;
    compress_matrix_with_rotation(w, x, &q, config)
}

/// Like [`compress_matrix`] but with an explicit orthogonal rotation in place of `config.rotation`.
pub fn compress_matrix_with_rotation(
    w: &Matrix,
    x: &Matrix,
    q: &Matrix,
    config: &PipelineConfig,
) -> Result<CompressionResult> {
    run(w, x, q, config, Compensation::Obr)
}

pub fn compress_prune_only(w: &Matrix, x: &Matrix, config: &PipelineConfig) -> Result<CompressionResult> {
    let mut cfg = config.clone();
    cfg.mode = Mode::PruneOnly;
    compress_matrix(w, x, &cfg)
}

pub fn compress_quant_only(w: &Matrix, x: &Matrix, config: &PipelineConfig) -> Result<CompressionResult> {
    let mut cfg = config.clone();
    cfg.mode = Mode::QuantOnly;
    compress_matrix(w, x, &cfg)
}

/// Same stages with every compensation set to zero: mask, then quantize.
pub fn naive_prune_quant(w: &Matrix, x: &Matrix, config: &PipelineConfig) -> Result<CompressionResult> {
    let q = rotation_for(config, w.cols())?;
    run(w, x, &q, config, Compensation::Off)
}

fn rotation_for(config: &PipelineConfig, dim: usize) -> Result<Matrix> {
    build_rotation(&RotationSpec {
        kind: config.rotation.kind,
        seed: config.rotation.seed,
        dim,
    })
    .map_err(|e| e.at_stage("rotate", None))
}

fn run(
    w: &Matrix,
    x: &Matrix,
    q: &Matrix,
    config: &PipelineConfig,
    compensation: Compensation,
) -> Result<CompressionResult> {
    config.validate()?;
    if w.cols() != x.rows() {
        return Err(Error::Shape(format!(
            "weights have {} input channels but calibration data has {}",
            w.cols(),
            x.rows()
        )));
    }
    if !w.is_finite() {
        return Err(Error::NonFinite("weights".into()));
    }
    let (rows, cols) = w.shape();
    let (w_rot, x_rot) = rotate_pair(w, x, q).map_err(|e| e.at_stage("rotate", None))?;
    let hessian = build_hessian(&x_rot, config.damp_ratio).map_err(|e| e.at_stage("hessian", None))?;

    let mask = match config.mode {
        Mode::QuantOnly => None,
        Mode::Joint | Mode::PruneOnly => Some(build_prune_mask(&w_rot, &x_rot, &hessian, config)?),
    };

    let outcomes: Vec<RowOutcome> = (0..rows)
        .into_par_iter()
        .map(|i| compensate_row(i, w_rot.row(i), mask.as_ref(), &hessian, config, compensation))
        .collect::<Result<_>>()?;

    let mut delta_prune = Matrix::zeros(rows, cols);
    let mut delta_quant = Matrix::zeros(rows, cols);
    let mut w_quant = Matrix::zeros(rows, cols);
    for (i, o) in outcomes.iter().enumerate() {
        delta_prune.row_mut(i).copy_from_slice(&o.prune.delta);
        delta_quant.row_mut(i).copy_from_slice(&o.quant.delta);
        w_quant.row_mut(i).copy_from_slice(&o.w_quant);
    }
    let delta_obr = delta_prune.add(&delta_quant)?;

    let (w_hat, weights) = match config.mode {
        Mode::PruneOnly => (None, w_quant),
        Mode::Joint | Mode::QuantOnly => {
            let qm = quantize(&w_quant, &hessian, &config.quantizer, mask.as_ref())
                .map_err(|e| e.at_stage("quantize", None))?;
            let dq = qm.dequant();
            (Some(qm), dq)
        }
    };

    let objectives: Vec<RowObjectives> = outcomes
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let dw: Vec<f64> = weights.row(i).iter().zip(w_rot.row(i)).map(|(a, b)| a - b).collect();
            RowObjectives {
                prune_before: o.prune.objective_before,
                prune_after: o.prune.objective_after,
                quant_before: o.quant.objective_before,
                quant_after: o.quant.objective_after,
                final_objective: hessian.objective(&dw),
            }
        })
        .collect();

    let pattern = mask.as_ref().map_or(Pattern::Unstructured(0.0), |m| m.pattern);
    let audit = sparsity_audit(&weights, pattern);
    let natural_zero_fraction = match &w_hat {
        Some(qm) => natural_sparsity(qm),
        None => audit.achieved_sparsity,
    };
    let report = EvalReport {
        rel_recon_error: reconstruction_error(&w_rot, &weights, &x_rot)?,
        frob_output_error: output_error(&w_rot, &weights, &x_rot)?,
        achieved_sparsity: audit.achieved_sparsity,
        pattern_valid: audit.pattern_valid,
        natural_zero_fraction,
        per_row_objectives: objectives.iter().map(|o| o.final_objective).collect(),
        baseline_deltas: BTreeMap::new(),
    };
    let unrotated_recon_error = reconstruction_error(w, &weights.matmul(&q.transpose())?, x)?;

    Ok(CompressionResult {
        w_hat,
        weights,
        mask,
        rotation: q.clone(),
        delta_prune,
        delta_quant,
        delta_obr,
        objectives,
        report,
        unrotated_recon_error,
        damp_lambda: hessian.damp_lambda(),
    })
}

fn build_prune_mask(
    w_rot: &Matrix,
    x_rot: &Matrix,
    hessian: &Hessian,
    config: &PipelineConfig,
) -> Result<PruneMask> {
    let stats = activation_stats(x_rot).map_err(|e| e.at_stage("score", None))?;
    let scores = prune_scores(w_rot, Some(hessian), Some(&stats), config.mask.metric, config.seed)
        .map_err(|e| e.at_stage("score", None))?;
    build_mask(&scores, config.mask.pattern, config.mask.metric)
        .map_err(|e| e.at_stage("mask", None))
}

fn compensate_row(
    i: usize,
    w_row: &[f64],
    mask: Option<&PruneMask>,
    hessian: &Hessian,
    config: &PipelineConfig,
    compensation: Compensation,
) -> Result<RowOutcome> {
    let cols = w_row.len();
    let ones = vec![1.0; cols];
    let mask_row = mask.map_or(ones.as_slice(), |m| m.row(i));

    let (prune, w_bar) = match compensation {
        Compensation::Obr => prune_compensation(w_row, mask_row, hessian)
            .map_err(|e| e.at_stage("prune_compensation", Some(i)))?,
        Compensation::Off => {
            let pruned: Vec<f64> = w_row
                .iter()
                .zip(mask_row)
                .map(|(&w, &m)| if m != 0.0 { 0.0 } else { w })
                .collect();
            let obj = hessian.objective(&pruned);
            let w_bar = w_row
                .iter()
                .zip(mask_row)
                .map(|(&w, &m)| if m != 0.0 { w } else { 0.0 })
                .collect();
            (zero_comp(cols, obj), w_bar)
        }
    };

    let retained: Vec<usize> = (0..cols).filter(|&j| mask_row[j] != 0.0).collect();
    if retained.is_empty() && cols > 0 {
        log::debug!("row {i}: every entry pruned, no compensation");
    }

    let quant = match (config.mode, compensation) {
        (Mode::PruneOnly, _) | (_, Compensation::Off) => zero_comp(cols, 0.0),
        _ => {
            let c = quant_compensation(&w_bar, &retained, config.alpha, hessian, &config.quantizer)
                .map_err(|e| e.at_stage("quant_compensation", Some(i)))?;
            if !retained.is_empty() && c.delta.iter().all(|&d| d == 0.0) && config.alpha > 0.0 {
                log::trace!("row {i}: zero quantization compensation");
            }
            c
        }
    };

    let w_quant = w_bar.iter().zip(&quant.delta).map(|(a, d)| a + d).collect();
    Ok(RowOutcome { prune, quant, w_quant })
}

fn zero_comp(cols: usize, objective: f64) -> RowCompensation {
    RowCompensation {
        delta: vec![0.0; cols],
        objective_before: objective,
        objective_after: objective,
        stationarity_residual: 0.0,
    }
}

/// Compresses a chain of linear layers, calibrating each on the previous layer's output.
pub fn compress_stack(layers: &[Matrix], x0: &Matrix, config: &PipelineConfig) -> Result<Vec<CompressionResult>> {
    compress_stack_with(layers, x0, config, compress_matrix)
}

/// [`compress_stack`] with a caller-chosen per-layer compressor.
///
/// Layer `i` uses rotation seed `config.rotation.seed + i`.
pub fn compress_stack_with<F>(
    layers: &[Matrix],
    x0: &Matrix,
    config: &PipelineConfig,
    compress: F,
) -> Result<Vec<CompressionResult>>
where
    F: Fn(&Matrix, &Matrix, &PipelineConfig) -> Result<CompressionResult>,
{
    for (i, pair) in layers.windows(2).enumerate() {
        if pair[1].cols() != pair[0].rows() {
            return Err(Error::Shape(format!(
                "layer {} expects {} inputs but layer {i} produces {}",
                i + 1,
                pair[1].cols(),
                pair[0].rows()
            )));
        }
    }
    let mut x = x0.clone();
    let mut results = Vec::with_capacity(layers.len());
    for (i, w) in layers.iter().enumerate() {
        let mut cfg = config.clone();
        cfg.rotation.seed = config.rotation.seed.wrapping_add(i as u64);
        let r = compress(w, &x, &cfg).map_err(|e| e.at_stage("layer", Some(i)))?;
        if i + 1 < layers.len() {
            x = match config.propagate {
                Propagate::Compressed => r.unrotated_weights()?.matmul(&x)?,
                Propagate::Original => w.matmul(&x)?,
            };
        }
        results.push(r);
    }
    Ok(results)
}
