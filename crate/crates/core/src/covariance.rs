//! Constrained Cholesky parameterization of the FPC score covariance.
//!
//! The score covariance `Σ = L Lᵀ` must be diagonal inside every block while
//! cross-block entries are free. `L` is assembled from an unconstrained
//! vector:
//!
//! * diagonal entries `L_jj = exp(scale · o_j + shift)` (defaults 0.5 and 2),
//! * cross-block entries of the lower triangle copied verbatim,
//! * within-block off-diagonal entries solved by the Crout update against a
//!   zero target, `L_ij = −(Σ_{k<j} L_ik L_jk) / L_jj`, which zeroes `Σ_ij`.
//!
//! Free parameters are ordered diagonal first (block order, then component),
//! then the cross-block entries row-major over the lower triangle.

use thiserror::Error;

use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CovarianceError {
    #[error("block structure needs at least one block with K_p >= 1")]
    EmptyBlock,
    #[error("expected {expected} unconstrained parameters, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// Number of components per block.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BlockStructure {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
}

impl BlockStructure {
    pub fn new(sizes: Vec<usize>) -> Result<Self, CovarianceError> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(CovarianceError::EmptyBlock);
        }
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        let mut acc = 0;
        for &k in &sizes {
            offsets.push(acc);
            acc += k;
        }
        offsets.push(acc);
        Ok(Self { sizes, offsets })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn n_blocks(&self) -> usize {
        self.sizes.len()
    }

    /// Total number of components `K = Σ K_p`.
    pub fn total(&self) -> usize {
        self.offsets[self.sizes.len()]
    }

    pub fn offset(&self, block: usize) -> usize {
        self.offsets[block]
    }

    /// Component indices belonging to `block`.
    pub fn range(&self, block: usize) -> std::ops::Range<usize> {
        self.offsets[block]..self.offsets[block + 1]
    }

    pub fn block_of(&self, index: usize) -> usize {
        debug_assert!(index < self.total());
        self.offsets.partition_point(|&o| o <= index) - 1
    }

    /// Component indices of the listed blocks, in block order.
    pub fn indices_of(&self, blocks: &[usize]) -> Vec<usize> {
        let mut sorted = blocks.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        sorted.into_iter().flat_map(|b| self.range(b)).collect()
    }

    /// Lower-triangular `(row, col)` pairs whose column lies in an earlier block.
    pub fn cross_entries(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.total() {
            for j in 0..self.offset(self.block_of(i)) {
                out.push((i, j));
            }
        }
        out
    }
}

/// `K + Σ_M K_M · (Σ_{m<M} K_m)`.
pub fn count_unconstrained(structure: &BlockStructure) -> usize {
    let k = structure.total();
    k + (0..structure.n_blocks()).map(|b| structure.sizes()[b] * structure.offset(b)).sum::<usize>()
}

/// Constants of the diagonal map `exp(scale · o + shift)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactorConfig {
    pub scale: f64,
    pub shift: f64,
}

impl Default for FactorConfig {
    fn default() -> Self {
        Self { scale: 0.5, shift: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedCholesky<T> {
    structure: BlockStructure,
    factor: Matrix<T>,
    config: FactorConfig,
}

pub fn build_factor<T: Scalar>(
    unconstrained: &[T],
    structure: &BlockStructure,
    config: FactorConfig,
) -> Result<ConstrainedCholesky<T>, CovarianceError> {
    let expected = count_unconstrained(structure);
    if unconstrained.len() != expected {
        return Err(CovarianceError::DimensionMismatch { expected, found: unconstrained.len() });
    }
    let k = structure.total();
    let (scale, shift) = (T::lit(config.scale), T::lit(config.shift));
    let mut l = Matrix::zeros(k, k);
    for j in 0..k {
        l[(j, j)] = (scale * unconstrained[j] + shift).exp();
    }
    for (&(i, j), &v) in structure.cross_entries().iter().zip(&unconstrained[k..]) {
        l[(i, j)] = v;
    }
    for i in 0..k {
        let start = structure.offset(structure.block_of(i));
        for j in start..i {
            let mut s = T::zero();
            for c in 0..j {
                s += l[(i, c)] * l[(j, c)];
            }
            l[(i, j)] = -s / l[(j, j)];
        }
    }
    Ok(ConstrainedCholesky { structure: structure.clone(), factor: l, config })
}

impl<T: Scalar> ConstrainedCholesky<T> {
    pub fn structure(&self) -> &BlockStructure {
        &self.structure
    }

    /// The lower triangular factor `L`.
    pub fn factor(&self) -> &Matrix<T> {
        &self.factor
    }

    pub fn unconstrained_dim(&self) -> usize {
        count_unconstrained(&self.structure)
    }

    /// Reverse-mode pass: given `∂f/∂L` (only the lower triangle is read),
    /// adds `∂f/∂v` to `grad_v` for the unconstrained vector `v`.
    ///
    /// `grad_l` is consumed as scratch space.
    pub fn backprop(&self, mut grad_l: Matrix<T>, grad_v: &mut [T]) {
        let k = self.structure.total();
        let l = &self.factor;
        debug_assert_eq!(grad_v.len(), self.unconstrained_dim());
        // Undo the Crout updates in reverse computation order.
        for i in (0..k).rev() {
            let start = self.structure.offset(self.structure.block_of(i));
            for j in (start..i).rev() {
                let g = grad_l[(i, j)];
                if g == T::zero() {
                    continue;
                }
                let ljj = l[(j, j)];
                for c in 0..j {
                    let gic = -g * l[(j, c)] / ljj;
                    let gjc = -g * l[(i, c)] / ljj;
                    grad_l[(i, c)] += gic;
                    grad_l[(j, c)] += gjc;
                }
                grad_l[(j, j)] -= g * l[(i, j)] / ljj;
            }
        }
        let scale = T::lit(self.config.scale);
        for j in 0..k {
            grad_v[j] += grad_l[(j, j)] * scale * l[(j, j)];
        }
        for (&(i, j), gv) in self.structure.cross_entries().iter().zip(&mut grad_v[k..]) {
            *gv += grad_l[(i, j)];
        }
    }
}

/// `Σ = S R S` with `S` the diagonal of standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreCovariance<T> {
    pub sigma: Matrix<T>,
    pub sd: Vec<T>,
    pub corr: Matrix<T>,
}

impl<T: Scalar> ScoreCovariance<T> {
    /// Splits an arbitrary symmetric positive definite matrix into sd and correlation.
    pub fn from_sigma(sigma: Matrix<T>) -> Self {
        let sd: Vec<T> = sigma.diagonal().into_iter().map(|v| v.sqrt()).collect();
        let k = sd.len();
        let corr = Matrix::from_fn(k, k, |i, j| if i == j { T::one() } else { sigma[(i, j)] / (sd[i] * sd[j]) });
        Self { sigma, sd, corr }
    }

    /// Rebuilds `Σ` from standard deviations and a correlation matrix.
    pub fn from_parts(sd: Vec<T>, corr: Matrix<T>) -> Self {
        let k = sd.len();
        let sigma = Matrix::from_fn(k, k, |i, j| sd[i] * corr[(i, j)] * sd[j]);
        Self { sigma, sd, corr }
    }
}

pub fn assemble<T: Scalar>(factor: &ConstrainedCholesky<T>) -> ScoreCovariance<T> {
    let l = factor.factor();
    ScoreCovariance::from_sigma(l.matmul(&l.transpose()))
}
