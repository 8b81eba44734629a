//! Symmetric per-row integer quantizers: round-to-nearest and GPTQ.

use serde::{Deserialize, Serialize};

use crate::calibration::Hessian;
use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::masking::PruneMask;
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizerKind {
    #[default]
    Rtn,
    Gptq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    pub bits: u32,
    pub kind: QuantizerKind,
    #[serde(default = "symmetric_default")]
    pub symmetric: bool,
}

fn symmetric_default() -> bool {
    true
}

impl Default for QuantizerSpec {
    fn default() -> Self {
        Self {
            bits: 4,
            kind: QuantizerKind::Rtn,
            symmetric: true,
        }
    }
}

impl QuantizerSpec {
    pub fn new(bits: u32, kind: QuantizerKind) -> Self {
        Self {
            bits,
            kind,
            symmetric: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits) {
            return Err(Error::InvalidArgument(format!(
                "bits must lie in 2..=8, got {}",
                self.bits
            )));
        }
        if !self.symmetric {
            return Err(Error::InvalidArgument(
                "only symmetric quantization is supported".into(),
            ));
        }
        Ok(())
    }

    /// Largest code magnitude, `2^(bits−1) − 1`.
    pub fn qmax(&self) -> i32 {
        (1 << (self.bits - 1)) - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    pub rows: usize,
    pub cols: usize,
    pub codes: Vec<i8>,
    pub scales: Vec<f64>,
}

impl QuantizedMatrix {
    pub fn code(&self, i: usize, j: usize) -> i8 {
        self.codes[i * self.cols + j]
    }

    pub fn dequant(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| {
            self.codes[i * self.cols + j] as f64 * self.scales[i]
        })
    }
}

/// Per-row scale `max|w| / qmax`, or 1 for an all-zero row.
pub fn row_scale(row: &[f64], qmax: i32) -> f64 {
    let m = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m > 0.0 {
        m / qmax as f64
    } else {
        1.0
    }
}

/// Nearest grid code, ties away from zero, clamped to `±qmax`.
#[inline]
pub fn quantize_value(v: f64, scale: f64, qmax: i32) -> i8 {
    let q = (v / scale).round().clamp(-(qmax as f64), qmax as f64);
    q as i8
}

pub fn rtn_quantize(w: &Matrix, spec: &QuantizerSpec) -> Result<QuantizedMatrix> {
    spec.validate()?;
    if !w.is_finite() {
        return Err(Error::NonFinite("weights to quantize".into()));
    }
    let qmax = spec.qmax();
    let mut codes = Vec::with_capacity(w.rows() * w.cols());
    let mut scales = Vec::with_capacity(w.rows());
    for row in w.iter_rows() {
        let s = row_scale(row, qmax);
        scales.push(s);
        codes.extend(row.iter().map(|&v| quantize_value(v, s, qmax)));
    }
    Ok(QuantizedMatrix {
        rows: w.rows(),
        cols: w.cols(),
        codes,
        scales,
    })
}

/// RTN error of a single row, `row − dequant(rtn(row))`.
pub fn quant_error_row(row: &[f64], spec: &QuantizerSpec) -> Vec<f64> {
    let qmax = spec.qmax();
    let s = row_scale(row, qmax);
    row.iter()
        .map(|&v| v - quantize_value(v, s, qmax) as f64 * s)
        .collect()
}

/// `w − dequant(rtn_quantize(w))`. Always measured on the RTN grid, whatever `spec.kind` says.
pub fn quant_error(w: &Matrix, spec: &QuantizerSpec) -> Result<Matrix> {
    let q = rtn_quantize(w, spec)?;
    w.sub(&q.dequant())
}

/// GPTQ in natural column order with unblocked updates.
///
/// Scales are fixed from `w` before any update. The running inverse Hessian over
/// the not-yet-quantized columns is read off the upper Cholesky factor `U` of `H⁻¹`
/// (`H⁻¹ = UᵀU`), so column `j`'s error is divided by `U[j,j]` and spread with `U[j,k]`.
///
/// Entries zeroed in `frozen` are forced to code 0; whatever value they accumulated
/// is treated as their error and propagated like any other column error.
pub fn gptq_quantize(
    w: &Matrix,
    hessian: &Hessian,
    spec: &QuantizerSpec,
    frozen: Option<&PruneMask>,
) -> Result<QuantizedMatrix> {
    spec.validate()?;
    let (rows, cols) = w.shape();
    if hessian.dim() != cols {
        return Err(Error::Shape(format!(
            "hessian of dim {} for {cols} input channels",
            hessian.dim()
        )));
    }
    if let Some(m) = frozen {
        if m.m.shape() != w.shape() {
            return Err(Error::Shape("frozen mask does not match weights".into()));
        }
    }
    if !w.is_finite() {
        return Err(Error::NonFinite("weights to quantize".into()));
    }
    let qmax = spec.qmax();
    let hinv = hessian.inverse()?;
    let l = Cholesky::factor(&hinv)?;
    let u = l.lower().transpose();

    let scales: Vec<f64> = w.iter_rows().map(|r| row_scale(r, qmax)).collect();
    let mut work = w.clone();
    let mut codes = vec![0i8; rows * cols];
    let mut err = vec![0.0; rows];

    for j in 0..cols {
        let d = u[(j, j)];
        for i in 0..rows {
            let v = work[(i, j)];
            let (code, dq) = if frozen.is_some_and(|m| !m.keep(i, j)) {
                (0, 0.0)
            } else {
                let c = quantize_value(v, scales[i], qmax);
                (c, c as f64 * scales[i])
            };
            codes[i * cols + j] = code;
            err[i] = (v - dq) / d;
        }
        let u_row = &u.row(j)[j + 1..];
        for (i, &e) in err.iter().enumerate() {
            if e == 0.0 {
                continue;
            }
            for (wk, &ujk) in work.row_mut(i)[j + 1..].iter_mut().zip(u_row) {
                *wk -= e * ujk;
            }
        }
    }
    Ok(QuantizedMatrix {
        rows,
        cols,
        codes,
        scales,
    })
}

pub fn quantize(
    w: &Matrix,
    hessian: &Hessian,
    spec: &QuantizerSpec,
    frozen: Option<&PruneMask>,
) -> Result<QuantizedMatrix> {
    match spec.kind {
        QuantizerKind::Rtn => rtn_quantize(w, spec),
        QuantizerKind::Gptq => gptq_quantize(w, hessian, spec, frozen),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{build_hessian, gen_calibration};
    use crate::masking::{build_mask, MaskMetric, Pattern};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    const RTN4: QuantizerSpec = QuantizerSpec {
        bits: 4,
        kind: QuantizerKind::Rtn,
        symmetric: true,
    };

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    fn row(v: &[f64]) -> Matrix {
        Matrix::from_rows(&[v.to_vec()]).unwrap()
    }

    #[test]
    fn on_grid_row() {
        let q = rtn_quantize(&row(&[7.0, -7.0, 1.0]), &RTN4).unwrap();
        assert_eq!(q.scales, vec![1.0]);
        assert_eq!(q.codes, vec![7, -7, 1]);
        assert_eq!(quant_error(&row(&[7.0, -7.0, 1.0]), &RTN4).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn half_rounds_away_from_zero() {
        let q = rtn_quantize(&row(&[1.0, 0.5, 0.0]), &RTN4).unwrap();
        assert_eq!(q.scales, vec![1.0 / 7.0]);
        assert_eq!(q.codes, vec![7, 4, 0]);
        let e = quant_error(&row(&[1.0, 0.5, 0.0]), &RTN4).unwrap();
        assert!(e[(0, 0)].abs() < 1e-15);
        assert!((e[(0, 1)] - (0.5 - 4.0 / 7.0)).abs() < 1e-15);
        assert_eq!(e[(0, 2)], 0.0);
    }

    #[test]
    fn zero_row() {
        let q = rtn_quantize(&Matrix::zeros(1, 5), &RTN4).unwrap();
        assert_eq!(q.scales, vec![1.0]);
        assert!(q.codes.iter().all(|&c| c == 0));
        assert_eq!(q.dequant(), Matrix::zeros(1, 5));
    }

    #[test]
    fn rejects_bad_bits() {
        assert!(rtn_quantize(&row(&[1.0]), &QuantizerSpec::new(1, QuantizerKind::Rtn)).is_err());
        assert!(rtn_quantize(&row(&[1.0]), &QuantizerSpec::new(9, QuantizerKind::Rtn)).is_err());
    }

    #[test]
    fn error_bounded_by_half_scale() {
        for bits in 2..=8 {
            let spec = QuantizerSpec::new(bits, QuantizerKind::Rtn);
            let w = random(16, 40, bits as u64);
            let q = rtn_quantize(&w, &spec).unwrap();
            let e = quant_error(&w, &spec).unwrap();
            for i in 0..16 {
                assert!(e.row(i).iter().all(|v| v.abs() <= q.scales[i] / 2.0 + 1e-15));
            }
        }
    }

    #[test]
    fn gptq_diagonal_hessian_equals_rtn() {
        let w = random(8, 16, 1);
        let h = Hessian::new(Matrix::diag(&(1..=16).map(|v| v as f64).collect::<Vec<_>>()), 0.0, 1).unwrap();
        let spec = QuantizerSpec::new(4, QuantizerKind::Gptq);
        assert_eq!(gptq_quantize(&w, &h, &spec, None).unwrap(), rtn_quantize(&w, &spec).unwrap());
        let id = Hessian::new(Matrix::identity(16), 0.0, 1).unwrap();
        assert_eq!(gptq_quantize(&w, &id, &spec, None).unwrap(), rtn_quantize(&w, &spec).unwrap());
    }

    fn total_objective(h: &Hessian, w: &Matrix, dq: &Matrix) -> Vec<f64> {
        let d = dq.sub(w).unwrap();
        d.iter_rows().map(|r| h.objective(r)).collect()
    }

    #[test]
    fn gptq_beats_rtn_on_correlated_instances() {
        let spec = QuantizerSpec::new(4, QuantizerKind::Gptq);
        let mut wins = 0;
        let mut ratios = Vec::new();
        for seed in 0..50 {
            let w = random(8, 8, 1000 + seed);
            let x = gen_calibration(8, 64, 0.5, 2000 + seed).unwrap();
            let h = build_hessian(&x, 0.01).unwrap();
            let g = total_objective(&h, &w, &gptq_quantize(&w, &h, &spec, None).unwrap().dequant());
            let r = total_objective(&h, &w, &rtn_quantize(&w, &spec).unwrap().dequant());
            let (gs, rs): (f64, f64) = (g.iter().sum(), r.iter().sum());
            wins += (gs <= rs) as usize;
            ratios.push(gs / rs);
        }
        ratios.sort_by(f64::total_cmp);
        assert!(wins >= 40, "gptq won {wins}/50");
        assert!(ratios[25] <= 1.0);
    }

    #[test]
    fn gptq_respects_frozen_zeros() {
        let x = gen_calibration(16, 64, 0.6, 3).unwrap();
        let h = build_hessian(&x, 0.01).unwrap();
        let w0 = random(6, 16, 4);
        let mut mask = build_mask(&w0.map(f64::abs), Pattern::Nm { n: 2, m: 4 }, MaskMetric::Magnitude).unwrap();
        for i in 0..6 {
            mask.m[(i, 5)] = 0.0;
        }
        let w = mask.apply(&w0).unwrap();
        let q = gptq_quantize(&w, &h, &QuantizerSpec::new(4, QuantizerKind::Gptq), Some(&mask)).unwrap();
        for i in 0..6 {
            assert_eq!(q.code(i, 5), 0);
            for j in 0..16 {
                if !mask.keep(i, j) {
                    assert_eq!(q.code(i, j), 0);
                }
                assert!(q.code(i, j).abs() <= 7);
            }
        }
    }

    proptest! {
        #[test]
        fn scale_equivariance(vals in prop::collection::vec(-100.0f64..100.0, 24), c in 0.01f64..100.0) {
            let w = Matrix::from_vec(3, 8, vals).unwrap();
            let a = rtn_quantize(&w, &RTN4).unwrap();
            let b = rtn_quantize(&w.scale(c), &RTN4).unwrap();
            prop_assert_eq!(&a.codes, &b.codes);
            for (sa, sb) in a.scales.iter().zip(&b.scales) {
                prop_assert!((sa * c - sb).abs() <= 1e-12 * sb.abs());
            }
        }

        #[test]
        fn dequant_on_row_grid(vals in prop::collection::vec(-5.0f64..5.0, 30), bits in 2u32..=8) {
            let spec = QuantizerSpec::new(bits, QuantizerKind::Rtn);
            let w = Matrix::from_vec(3, 10, vals).unwrap();
            let q = rtn_quantize(&w, &spec).unwrap();
            let dq = q.dequant();
            for i in 0..3 {
                for j in 0..10 {
                    let k = dq[(i, j)] / q.scales[i];
                    prop_assert!((k - k.round()).abs() < 1e-9);
                    prop_assert!(k.round().abs() <= spec.qmax() as f64);
                }
            }
        }
    }
}
