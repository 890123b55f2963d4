//! Cubic B-spline bases on `[0, 1]` and their orthonormalized versions.
//!
//! The raw basis lives on a clamped knot vector with equally spaced (or
//! user-supplied) interior knots. Orthonormalization is a thin QR of the
//! basis evaluated on a uniform quadrature grid, so that under the discrete
//! inner product `(1/G) Σ_g f(t_g) h(t_g)` the transformed functions satisfy
//! `⟨b_j, b_l⟩ = δ_jl`.

use thiserror::Error;

use crate::linalg::{invert_upper, LinalgError, Matrix};
use crate::scalar::Scalar;

pub const DEGREE: usize = 3;
pub const DEFAULT_GRID_SIZE: usize = 1001;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BasisError {
    #[error("a cubic basis needs at least 4 functions, got {0}")]
    TooFewFunctions(usize),
    #[error("expected {expected} interior knots, got {found}")]
    KnotCount { expected: usize, found: usize },
    #[error("interior knots must be strictly increasing inside (0, 1)")]
    InvalidKnots,
    #[error("time {0} is outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("quadrature grid of {grid} points is too coarse for {n_basis} functions (need >= {})", 10 * n_basis)]
    GridTooSmall { grid: usize, n_basis: usize },
    #[error("basis is rank deficient on the quadrature grid: {0}")]
    RankDeficientBasis(LinalgError),
}

/// Cubic spline basis definition.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasisSpec<T> {
    n_basis: usize,
    interior_knots: Vec<T>,
}

impl<T: Scalar> SplineBasisSpec<T> {
    /// `n_basis` functions with equally spaced interior knots.
    pub fn uniform(n_basis: usize) -> Result<Self, BasisError> {
        if n_basis < 4 {
            return Err(BasisError::TooFewFunctions(n_basis));
        }
        let m = n_basis - 3;
        let knots = (1..m).map(|j| T::lit(j as f64 / m as f64)).collect();
        Self::with_knots(n_basis, knots)
    }

    pub fn with_knots(n_basis: usize, interior_knots: Vec<T>) -> Result<Self, BasisError> {
        if n_basis < 4 {
            return Err(BasisError::TooFewFunctions(n_basis));
        }
        if interior_knots.len() != n_basis - 4 {
            return Err(BasisError::KnotCount { expected: n_basis - 4, found: interior_knots.len() });
        }
        let inside = interior_knots.iter().all(|&k| k > T::zero() && k < T::one());
        let increasing = interior_knots.windows(2).all(|w| w[0] < w[1]);
        if !inside || !increasing {
            return Err(BasisError::InvalidKnots);
        }
        Ok(Self { n_basis, interior_knots })
    }

    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    pub fn interior_knots(&self) -> &[T] {
        &self.interior_knots
    }

    /// Full clamped knot vector (`n_basis + 4` entries).
    pub fn knot_vector(&self) -> Vec<T> {
        let mut u = vec![T::zero(); DEGREE + 1];
        u.extend_from_slice(&self.interior_knots);
        u.extend(std::iter::repeat(T::one()).take(DEGREE + 1));
        u
    }

    /// Writes the `n_basis` raw B-spline values at `t` into `out`.
    fn eval_into(&self, knots: &[T], t: T, out: &mut [T]) -> Result<(), BasisError> {
        if !(t >= T::zero() && t <= T::one()) {
            return Err(BasisError::TimeOutOfRange(t.as_f64()));
        }
        // Knot span s with knots[s] <= t < knots[s + 1]; t = 1 uses the last span.
        let last = self.n_basis - 1;
        let mut span = DEGREE;
        while span < last && t >= knots[span + 1] {
            span += 1;
        }
        let mut n = [T::zero(); DEGREE + 1];
        let mut left = [T::zero(); DEGREE + 1];
        let mut right = [T::zero(); DEGREE + 1];
        n[0] = T::one();
        for j in 1..=DEGREE {
            left[j] = t - knots[span + 1 - j];
            right[j] = knots[span + j] - t;
            let mut saved = T::zero();
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        out.iter_mut().for_each(|x| *x = T::zero());
        for (r, &v) in n.iter().enumerate() {
            out[span - DEGREE + r] = v;
        }
        Ok(())
    }
}

/// Raw cubic B-spline design matrix: row `i` holds the basis values at `times[i]`.
pub fn bspline_matrix<T: Scalar>(times: &[T], spec: &SplineBasisSpec<T>) -> Result<Matrix<T>, BasisError> {
    let q = spec.n_basis();
    let knots = spec.knot_vector();
    let mut m = Matrix::zeros(times.len(), q);
    for (i, &t) in times.iter().enumerate() {
        spec.eval_into(&knots, t, m.row_mut(i))?;
    }
    Ok(m)
}

/// Uniform grid of `n` points covering `[0, 1]` inclusive.
pub fn uniform_grid<T: Scalar>(n: usize) -> Vec<T> {
    match n {
        0 => Vec::new(),
        1 => vec![T::zero()],
        _ => (0..n).map(|i| T::lit(i as f64 / (n - 1) as f64)).collect(),
    }
}

/// Spline basis with an orthonormalizing transform.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthonormalBasis<T> {
    spec: SplineBasisSpec<T>,
    /// Upper triangular, positive diagonal; `orthonormal = raw · transform`.
    transform: Matrix<T>,
    grid: Vec<T>,
}

/// Orthonormalizes `spec` on a uniform grid of `grid_size` points.
pub fn orthonormalize<T: Scalar>(spec: SplineBasisSpec<T>, grid_size: usize) -> Result<OrthonormalBasis<T>, BasisError> {
    let q = spec.n_basis();
    if grid_size < 10 * q {
        return Err(BasisError::GridTooSmall { grid: grid_size, n_basis: q });
    }
    let grid = uniform_grid::<T>(grid_size);
    let raw = bspline_matrix(&grid, &spec)?;
    let scaled = raw.scale(T::one() / T::lit(grid_size as f64).sqrt());
    let (_, r) = scaled.thin_qr().map_err(BasisError::RankDeficientBasis)?;
    let rmax = r.diagonal().into_iter().fold(T::zero(), T::max);
    if let Some(j) = r.diagonal().iter().position(|&d| d <= rmax * T::lit(1e3) * T::epsilon()) {
        return Err(BasisError::RankDeficientBasis(LinalgError::RankDeficient(j)));
    }
    let transform = invert_upper(&r).map_err(BasisError::RankDeficientBasis)?;
    Ok(OrthonormalBasis { spec, transform, grid })
}

impl<T: Scalar> OrthonormalBasis<T> {
    /// Uniform-knot basis on the default 1001-point grid.
    pub fn uniform(n_basis: usize) -> Result<Self, BasisError> {
        orthonormalize(SplineBasisSpec::uniform(n_basis)?, DEFAULT_GRID_SIZE)
    }

    pub fn spec(&self) -> &SplineBasisSpec<T> {
        &self.spec
    }

    pub fn n_basis(&self) -> usize {
        self.spec.n_basis()
    }

    pub fn transform(&self) -> &Matrix<T> {
        &self.transform
    }

    pub fn grid(&self) -> &[T] {
        &self.grid
    }

    /// Orthonormal basis values at `times` (`|times| × Q`).
    pub fn evaluate(&self, times: &[T]) -> Result<Matrix<T>, BasisError> {
        Ok(bspline_matrix(times, &self.spec)?.matmul(&self.transform))
    }

    /// Evaluates a coefficient vector as a curve at `times`.
    pub fn curve(&self, coefficients: &[T], times: &[T]) -> Result<Vec<T>, BasisError> {
        Ok(self.evaluate(times)?.matvec(coefficients))
    }
}

/// Discrete Gram matrix `(1/G) XᵀX` of evaluations `X` on a grid of `G` rows.
pub fn discrete_gram<T: Scalar>(evals: &Matrix<T>) -> Matrix<T> {
    evals.tr_matmul(evals).scale(T::one() / T::lit(evals.rows() as f64))
}
