//! Pruning scores and binary masks (unstructured and N:M).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{ActivationStats, Hessian};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMetric {
    Magnitude,
    #[default]
    Wanda,
    #[serde(rename = "sparsegpt")]
    SparseGpt,
    Random,
}

impl FromStr for MaskMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "magnitude" => Ok(Self::Magnitude),
            "wanda" => Ok(Self::Wanda),
            "sparsegpt" => Ok(Self::SparseGpt),
            "random" => Ok(Self::Random),
            other => Err(Error::InvalidArgument(format!("unknown mask metric '{other}'"))),
        }
    }
}

/// Sparsity pattern. `Nm { n, m }` means exactly `n` zeros in every aligned group of `m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Pattern {
    Unstructured(f64),
    Nm { n: usize, m: usize },
}

impl Default for Pattern {
    fn default() -> Self {
        Pattern::Unstructured(0.5)
    }
}

impl Pattern {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Pattern::Unstructured(r) if !(0.0..=1.0).contains(&r) => Err(Error::InvalidArgument(
                format!("unstructured ratio must lie in [0, 1], got {r}"),
            )),
            Pattern::Nm { n, m } if m == 0 || n > m => Err(Error::InvalidArgument(format!(
                "invalid N:M pattern {n}:{m}"
            ))),
            _ => Ok(()),
        }
    }

    /// Zeros required per row of `cols` entries.
    pub fn zeros_per_row(&self, cols: usize) -> usize {
        match *self {
            // the epsilon keeps e.g. 0.3 × 10 from flooring to 2
            Pattern::Unstructured(r) => ((r * cols as f64) + 1e-9).floor() as usize,
            Pattern::Nm { n, m } => cols / m * n,
        }
    }

    pub fn check_cols(&self, cols: usize) -> Result<()> {
        self.validate()?;
        if let Pattern::Nm { n, m } = *self {
            if !cols.is_multiple_of(m) {
                return Err(Error::Pattern(format!(
                    "C_in = {cols} is not divisible by the group size {m} of pattern {n}:{m}"
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pattern::Unstructured(r) => write!(f, "unstructured:{r}"),
            Pattern::Nm { n, m } => write!(f, "{n}:{m}"),
        }
    }
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("cannot parse pattern '{s}'"));
        let p = if let Some(r) = s.strip_prefix("unstructured:") {
            Pattern::Unstructured(r.parse().map_err(|_| bad())?)
        } else {
            let (n, m) = s.split_once(':').ok_or_else(bad)?;
            Pattern::Nm {
                n: n.parse().map_err(|_| bad())?,
                m: m.parse().map_err(|_| bad())?,
            }
        };
        p.validate()?;
        Ok(p)
    }
}

impl TryFrom<String> for Pattern {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Pattern> for String {
    fn from(p: Pattern) -> String {
        p.to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    /// 1.0 = keep, 0.0 = pruned.
    pub m: Matrix,
    pub pattern: Pattern,
    pub metric: MaskMetric,
}

impl PruneMask {
    pub fn dense(rows: usize, cols: usize, metric: MaskMetric) -> Self {
        Self {
            m: Matrix::from_fn(rows, cols, |_, _| 1.0),
            pattern: Pattern::Unstructured(0.0),
            metric,
        }
    }

    pub fn keep(&self, i: usize, j: usize) -> bool {
        self.m[(i, j)] != 0.0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.m.row(i)
    }

    pub fn apply(&self, w: &Matrix) -> Result<Matrix> {
        w.hadamard(&self.m)
    }

    pub fn to_i8(&self) -> Vec<i8> {
        self.m.as_slice().iter().map(|&v| (v != 0.0) as i8).collect()
    }
}

/// Keep-scores; larger means more important.
pub fn prune_scores(
    w: &Matrix,
    hessian: Option<&Hessian>,
    stats: Option<&ActivationStats>,
    metric: MaskMetric,
    seed: u64,
) -> Result<Matrix> {
    match metric {
        MaskMetric::Magnitude => Ok(w.map(f64::abs)),
        MaskMetric::Wanda => {
            let stats = stats.ok_or_else(|| {
                Error::InvalidArgument("wanda scores need activation statistics".into())
            })?;
            if stats.column_norms.len() != w.cols() {
                return Err(Error::Shape(format!(
                    "{} activation norms for {} input channels",
                    stats.column_norms.len(),
                    w.cols()
                )));
            }
            Ok(Matrix::from_fn(w.rows(), w.cols(), |i, j| {
                w[(i, j)].abs() * stats.column_norms[j]
            }))
        }
        MaskMetric::SparseGpt => {
            let hessian = hessian.ok_or_else(|| {
                Error::InvalidArgument("sparsegpt scores need a hessian".into())
            })?;
            if hessian.dim() != w.cols() {
                return Err(Error::Shape(format!(
                    "hessian of dim {} for {} input channels",
                    hessian.dim(),
                    w.cols()
                )));
            }
            let d = hessian.inverse()?.diagonal();
            Ok(Matrix::from_fn(w.rows(), w.cols(), |i, j| {
                w[(i, j)] * w[(i, j)] / d[j]
            }))
        }
        MaskMetric::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(Matrix::from_fn(w.rows(), w.cols(), |_, _| rng.random::<f64>()))
        }
    }
}

/// Marks the `drop` lowest-scoring entries of `scores` (ties: higher index dropped first).
fn drop_lowest(scores: &[f64], drop: usize, out: &mut [f64]) {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    out.iter_mut().for_each(|v| *v = 1.0);
    for &j in &order[scores.len() - drop..] {
        out[j] = 0.0;
    }
}

pub fn build_mask(scores: &Matrix, pattern: Pattern, metric: MaskMetric) -> Result<PruneMask> {
    let cols = scores.cols();
    pattern.check_cols(cols)?;
    let mut m = Matrix::zeros(scores.rows(), cols);
    for i in 0..scores.rows() {
        let s = scores.row(i);
        let out = m.row_mut(i);
        match pattern {
            Pattern::Unstructured(_) => drop_lowest(s, pattern.zeros_per_row(cols), out),
            Pattern::Nm { n, m: group } => {
                for (sg, og) in s.chunks(group).zip(out.chunks_mut(group)) {
                    drop_lowest(sg, n, og);
                }
            }
        }
    }
    Ok(PruneMask { m, pattern, metric })
}
