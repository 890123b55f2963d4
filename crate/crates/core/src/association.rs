//! Gaussian mutual information between blocks of FPC scores.

use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::covariance::BlockStructure;
use crate::linalg::{LinalgError, Matrix};
use crate::posterior::{Interval, RotatedDraw};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssociationError {
    #[error("correlation sub-matrix for blocks {blocks:?} is singular")]
    SingularSubmatrix { blocks: Vec<usize> },
    #[error("mutual information must be non-negative, got {0}")]
    NegativeMI(f64),
    #[error("invalid block pair ({0}, {1})")]
    InvalidPair(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AssociationKind {
    Marginal,
    Conditional,
}

impl AssociationKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::Marginal => "marginal",
            Self::Conditional => "conditional",
        }
    }
}

/// Numerical slack for values that are zero in exact arithmetic.
const ZERO_TOL: f64 = 1e-12;

fn log_det_blocks<T: Scalar>(r: &Matrix<T>, structure: &BlockStructure, blocks: &[usize]) -> Result<f64, AssociationError> {
    if blocks.is_empty() {
        return Ok(0.0);
    }
    let idx = structure.indices_of(blocks);
    let sub = r.select(&idx, &idx).cast::<f64>();
    match sub.cholesky() {
        Ok(l) => Ok(2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()),
        Err(LinalgError::NotPositiveDefinite { value, .. }) if value > -1e-10 => {
            // Numerically singular but not indefinite: the log-determinant is -inf.
            Ok(f64::NEG_INFINITY)
        }
        Err(_) => Err(AssociationError::SingularSubmatrix { blocks: blocks.to_vec() }),
    }
}

fn check_pair(structure: &BlockStructure, p1: usize, p2: usize) -> Result<(), AssociationError> {
    if p1 == p2 || p1 >= structure.n_blocks() || p2 >= structure.n_blocks() {
        return Err(AssociationError::InvalidPair(p1, p2));
    }
    Ok(())
}

fn finite_or_singular(v: f64, blocks: Vec<usize>) -> Result<f64, AssociationError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(AssociationError::SingularSubmatrix { blocks })
    }
}

/// Marginal MI (nats) between the scores of blocks `p1` and `p2`:
/// `-½ log det R_{p1,p2}`.
pub fn marginal_mi<T: Scalar>(r: &Matrix<T>, structure: &BlockStructure, p1: usize, p2: usize) -> Result<f64, AssociationError> {
    check_pair(structure, p1, p2)?;
    let mut pair = [p1, p2];
    pair.sort_unstable();
    let ld = log_det_blocks(r, structure, &pair)?;
    finite_or_singular(-0.5 * ld, pair.to_vec())
}

/// Conditional MI (nats) of blocks `p1`, `p2` given all other blocks:
/// `½ [log det R_{\p1} + log det R_{\p2} − log det R_{\{p1,p2}} − log det R]`.
pub fn conditional_mi<T: Scalar>(
    r: &Matrix<T>,
    structure: &BlockStructure,
    p1: usize,
    p2: usize,
) -> Result<f64, AssociationError> {
    check_pair(structure, p1, p2)?;
    let all: Vec<usize> = (0..structure.n_blocks()).collect();
    let without = |ex: &[usize]| -> Vec<usize> { all.iter().copied().filter(|b| !ex.contains(b)).collect() };
    let ld_all = log_det_blocks(r, structure, &all)?;
    let ld_no1 = log_det_blocks(r, structure, &without(&[p1]))?;
    let ld_no2 = log_det_blocks(r, structure, &without(&[p2]))?;
    let ld_rest = log_det_blocks(r, structure, &without(&[p1, p2]))?;
    finite_or_singular(0.5 * (ld_no1 + ld_no2 - ld_rest - ld_all), all)
}

/// Maps MI in nats to `[0, 1)` via `sqrt(1 − exp(−2 mi))`.
pub fn normalize(mi: f64) -> Result<f64, AssociationError> {
    if mi.is_nan() || mi < -ZERO_TOL {
        return Err(AssociationError::NegativeMI(mi));
    }
    let mi = mi.max(0.0);
    Ok((-(-2.0 * mi).exp_m1()).sqrt())
}

pub fn mi<T: Scalar>(
    kind: AssociationKind,
    r: &Matrix<T>,
    structure: &BlockStructure,
    p1: usize,
    p2: usize,
) -> Result<f64, AssociationError> {
    match kind {
        AssociationKind::Marginal => marginal_mi(r, structure, p1, p2),
        AssociationKind::Conditional => conditional_mi(r, structure, p1, p2),
    }
}

/// Normalized MI or CMI for one block pair straight from a correlation matrix.
pub fn normalized<T: Scalar>(
    kind: AssociationKind,
    r: &Matrix<T>,
    structure: &BlockStructure,
    p1: usize,
    p2: usize,
) -> Result<f64, AssociationError> {
    normalize(mi(kind, r, structure, p1, p2)?)
}

/// All unordered block pairs `(p1, p2)` with `p1 < p2`.
pub fn all_pairs(n_blocks: usize) -> Vec<(usize, usize)> {
    (0..n_blocks).flat_map(|a| (a + 1..n_blocks).map(move |b| (a, b))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssociationEstimate {
    pub pair: (usize, usize),
    pub kind: AssociationKind,
    /// Normalized value for every draw, in draw order.
    pub values: Vec<f64>,
    pub summary: Interval,
}

/// Per-draw normalized MI/CMI summarized by median and equal-tailed 95% interval.
pub fn posterior_association<T: Scalar>(
    draws: &[RotatedDraw<T>],
    structure: &BlockStructure,
    pairs: &[(usize, usize)],
    kind: AssociationKind,
) -> Result<Vec<AssociationEstimate>, AssociationError> {
    pairs
        .iter()
        .map(|&(p1, p2)| {
            let values: Vec<f64> = draws
                .par_iter()
                .map(|d| normalized(kind, &d.score_cov.corr, structure, p1, p2))
                .collect::<Result<_, _>>()?;
            let summary = Interval::from_samples(values.clone());
            Ok(AssociationEstimate { pair: (p1, p2), kind, values, summary })
        })
        .collect()
}

/// Writes `pair,kind,median,lo,hi` rows; pairs are labelled `name1-name2`.
pub fn write_association_csv<W: Write>(
    estimates: &[AssociationEstimate],
    block_names: &[String],
    out: W,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["pair", "kind", "median", "lo", "hi"])?;
    for e in estimates {
        let (a, b) = e.pair;
        let name = |p: usize| block_names.get(p).cloned().unwrap_or_else(|| (p + 1).to_string());
        w.write_record([
            format!("{}-{}", name(a), name(b)),
            e.kind.label().to_string(),
            e.summary.median.to_string(),
            e.summary.lo.to_string(),
            e.summary.hi.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
