//! Joint log-posterior of the multi-block reduced-rank model.
//!
//! For subject `i` and block `p` with basis matrix `B_ip`,
//!
//! ```text
//! y_ip = B_ip θμ_p + B_ip Θ_p α_ip + ε_ip,   ε_ip ~ N(0, σ² I)
//! α_i  = L z_i,                              z_i  ~ N(0, I)
//! ```
//!
//! where `L` is the constrained Cholesky factor built from `cov_raw`. Priors:
//! standard normal on `θμ`, on every loading entry and on `z`; half-Cauchy(0, 1)
//! on `σ` (sampled as `log σ` with its Jacobian); flat on `cov_raw` unless
//! `cov_prior_sd` is set.
//!
//! The flat prior leaves the posterior improper: as a diagonal coordinate of
//! `cov_raw` goes to `-∞`, `L_jj → 0` while the cross-block entries of row `j`
//! keep the likelihood bounded away from zero. Chains usually stay in the bulk,
//! but one can drift into that tail; a finite `cov_prior_sd` closes it.
//!
//! Every coordinate of the flat parameter vector is unconstrained, so the
//! density is finite everywhere and the sampler needs no transforms.

use thiserror::Error;

use crate::basis::{BasisError, OrthonormalBasis};
use crate::covariance::{build_factor, count_unconstrained, BlockStructure, CovarianceError, FactorConfig};
use crate::dataset::MultiBlockDataset;
use crate::linalg::{dot, Matrix};
use crate::sampler::LogDensity;
use crate::scalar::{Scalar, LN_2PI};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("parameter vector has length {found}, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("data has {data} blocks but the model spec has {spec}")]
    SpecMismatch { data: usize, spec: usize },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("dataset times must be rescaled to [0, 1] before fitting")]
    NotRescaled,
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Covariance(#[from] CovarianceError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec<T> {
    pub n_components: usize,
    pub basis: OrthonormalBasis<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec<T> {
    blocks: Vec<BlockSpec<T>>,
    structure: BlockStructure,
    basis_offsets: Vec<usize>,
    /// One residual scale per block instead of a single shared one.
    pub per_block_sigma: bool,
    pub factor: FactorConfig,
    /// Standard deviation of an optional `N(0, s²)` prior on every `cov_raw`
    /// coordinate; `None` keeps the flat prior.
    pub cov_prior_sd: Option<f64>,
}

impl<T: Scalar> ModelSpec<T> {
    pub fn new(blocks: Vec<BlockSpec<T>>) -> Result<Self, ModelError> {
        if blocks.is_empty() {
            return Err(ModelError::InvalidSpec("no blocks".into()));
        }
        for (p, b) in blocks.iter().enumerate() {
            if b.n_components == 0 || b.n_components >= b.basis.n_basis() {
                return Err(ModelError::InvalidSpec(format!(
                    "block {p}: need 1 <= K_p < Q_p, got K_p = {}, Q_p = {}",
                    b.n_components,
                    b.basis.n_basis()
                )));
            }
        }
        let structure = BlockStructure::new(blocks.iter().map(|b| b.n_components).collect())?;
        let mut basis_offsets = vec![0];
        for b in &blocks {
            basis_offsets.push(basis_offsets.last().unwrap() + b.basis.n_basis());
        }
        Ok(Self { blocks, structure, basis_offsets, per_block_sigma: false, factor: FactorConfig::default(), cov_prior_sd: None })
    }

    /// Uniform-knot bases from `(K_p, Q_p)` pairs.
    pub fn uniform(dims: &[(usize, usize)]) -> Result<Self, ModelError> {
        let blocks = dims
            .iter()
            .map(|&(k, q)| Ok(BlockSpec { n_components: k, basis: OrthonormalBasis::uniform(q)? }))
            .collect::<Result<Vec<_>, BasisError>>()?;
        Self::new(blocks)
    }

    pub fn with_per_block_sigma(mut self, on: bool) -> Self {
        self.per_block_sigma = on;
        self
    }

    pub fn with_cov_prior_sd(mut self, sd: Option<f64>) -> Result<Self, ModelError> {
        if sd.is_some_and(|s| !(s > 0.0 && s.is_finite())) {
            return Err(ModelError::InvalidSpec("cov_prior_sd must be positive and finite".into()));
        }
        self.cov_prior_sd = sd;
        Ok(self)
    }

    pub fn blocks(&self) -> &[BlockSpec<T>] {
        &self.blocks
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn structure(&self) -> &BlockStructure {
        &self.structure
    }

    /// Total basis dimension `Q = Σ Q_p`.
    pub fn q_total(&self) -> usize {
        *self.basis_offsets.last().unwrap()
    }

    pub fn basis_range(&self, block: usize) -> std::ops::Range<usize> {
        self.basis_offsets[block]..self.basis_offsets[block + 1]
    }

    pub fn n_sigma(&self) -> usize {
        if self.per_block_sigma {
            self.blocks.len()
        } else {
            1
        }
    }

    #[inline]
    pub fn sigma_index(&self, block: usize) -> usize {
        if self.per_block_sigma {
            block
        } else {
            0
        }
    }
}

/// Observations of one subject in one block with their basis matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockObs<T> {
    pub design: Matrix<T>,
    pub y: Vec<T>,
    /// `BᵀB`, `Bᵀy` and `yᵀy`: the likelihood only needs these.
    gram: Matrix<T>,
    bty: Vec<T>,
    yty: T,
}

impl<T: Scalar> BlockObs<T> {
    pub fn new(design: Matrix<T>, y: Vec<T>) -> Self {
        let q = design.cols();
        let mut gram = Matrix::zeros(q, q);
        let mut bty = vec![T::zero(); q];
        for (r, &yr) in y.iter().enumerate() {
            let row = design.row(r);
            for a in 0..q {
                bty[a] += row[a] * yr;
                for b in 0..q {
                    gram[(a, b)] += row[a] * row[b];
                }
            }
        }
        let yty = dot(&y, &y);
        Self { design, y, gram, bty, yty }
    }
}

/// Dataset converted into per-subject design matrices for a given spec.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelData<T> {
    subjects: Vec<Vec<BlockObs<T>>>,
}

impl<T: Scalar> ModelData<T> {
    pub fn new(data: &MultiBlockDataset, spec: &ModelSpec<T>) -> Result<Self, ModelError> {
        if data.n_blocks() != spec.n_blocks() {
            return Err(ModelError::SpecMismatch { data: data.n_blocks(), spec: spec.n_blocks() });
        }
        if !data.is_rescaled() {
            return Err(ModelError::NotRescaled);
        }
        let mut subjects = Vec::with_capacity(data.n_subjects());
        for s in 0..data.n_subjects() {
            let mut row = Vec::with_capacity(spec.n_blocks());
            for (p, b) in spec.blocks().iter().enumerate() {
                let series = data.series(s, p);
                let times: Vec<T> = series.times.iter().map(|&t| T::lit(t)).collect();
                row.push(BlockObs::new(
                    b.basis.evaluate(&times)?,
                    series.values.iter().map(|&v| T::lit(v)).collect(),
                ));
            }
            subjects.push(row);
        }
        Ok(Self { subjects })
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn subject(&self, i: usize) -> &[BlockObs<T>] {
        &self.subjects[i]
    }

    pub fn n_observations(&self, i: usize) -> usize {
        self.subjects[i].iter().map(|b| b.y.len()).sum()
    }
}

/// Offsets of every parameter group inside the flat unconstrained vector.
///
/// Order: `θμ` (Q), loadings per block (`Q_p × K_p` row-major), `cov_raw`,
/// `z` (`N × K` row-major), `log σ` (1 or P).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub q_total: usize,
    pub loading_offsets: Vec<usize>,
    pub cov_offset: usize,
    pub n_cov: usize,
    pub z_offset: usize,
    pub n_subjects: usize,
    pub k_total: usize,
    pub sigma_offset: usize,
    pub n_sigma: usize,
    pub dim: usize,
    /// `Q_p` of every block.
    pub block_rows: Vec<usize>,
}

impl ParamLayout {
    pub fn new<T: Scalar>(spec: &ModelSpec<T>, n_subjects: usize) -> Self {
        let q_total = spec.q_total();
        let mut loading_offsets = Vec::with_capacity(spec.n_blocks() + 1);
        let mut off = q_total;
        for b in spec.blocks() {
            loading_offsets.push(off);
            off += b.basis.n_basis() * b.n_components;
        }
        loading_offsets.push(off);
        let cov_offset = off;
        let n_cov = count_unconstrained(spec.structure());
        let z_offset = cov_offset + n_cov;
        let k_total = spec.structure().total();
        let sigma_offset = z_offset + n_subjects * k_total;
        let n_sigma = spec.n_sigma();
        Self {
            q_total,
            loading_offsets,
            cov_offset,
            n_cov,
            z_offset,
            n_subjects,
            k_total,
            sigma_offset,
            n_sigma,
            dim: sigma_offset + n_sigma,
            block_rows: spec.blocks().iter().map(|b| b.basis.n_basis()).collect(),
        }
    }

    /// Compact text description stored alongside persisted draws.
    pub fn describe(&self) -> String {
        format!(
            "theta_mu:{}:{};loadings:{}:{};cov_raw:{}:{};z:{}:{}x{};log_sigma_eps:{}:{}",
            0,
            self.q_total,
            self.loading_offsets[0],
            self.cov_offset - self.loading_offsets[0],
            self.cov_offset,
            self.n_cov,
            self.z_offset,
            self.n_subjects,
            self.k_total,
            self.sigma_offset,
            self.n_sigma
        )
    }

    /// One name per coordinate, e.g. `theta_mu[3]`, `loadings[1][4,0]`, `z[17,2]`.
    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.q_total).map(|i| format!("theta_mu[{i}]")).collect();
        for p in 0..self.loading_offsets.len() - 1 {
            let len = self.loading_offsets[p + 1] - self.loading_offsets[p];
            let rows = self.block_rows.get(p).copied().unwrap_or(1).max(1);
            let cols = len / rows;
            names.extend((0..len).map(|j| format!("loadings[{p}][{},{}]", j / cols, j % cols)));
        }
        names.extend((0..self.n_cov).map(|j| format!("cov_raw[{j}]")));
        for i in 0..self.n_subjects {
            names.extend((0..self.k_total).map(|c| format!("z[{i},{c}]")));
        }
        names.extend((0..self.n_sigma).map(|j| format!("log_sigma_eps[{j}]")));
        names
    }

    pub fn unpack<T: Scalar>(&self, spec: &ModelSpec<T>, x: &[T]) -> Result<ParameterVector<T>, ModelError> {
        if x.len() != self.dim {
            return Err(ModelError::DimensionMismatch { expected: self.dim, found: x.len() });
        }
        let theta_raw = spec
            .blocks()
            .iter()
            .enumerate()
            .map(|(p, b)| {
                let o = self.loading_offsets[p];
                Matrix::from_row_slice(b.basis.n_basis(), b.n_components, &x[o..self.loading_offsets[p + 1]])
            })
            .collect();
        Ok(ParameterVector {
            theta_mu: x[..self.q_total].to_vec(),
            theta_raw,
            cov_raw: x[self.cov_offset..self.z_offset].to_vec(),
            z_scores: Matrix::from_row_slice(self.n_subjects, self.k_total, &x[self.z_offset..self.sigma_offset]),
            log_sigma_eps: x[self.sigma_offset..].to_vec(),
        })
    }

    pub fn pack<T: Scalar>(&self, p: &ParameterVector<T>) -> Result<Vec<T>, ModelError> {
        let mut x = Vec::with_capacity(self.dim);
        x.extend_from_slice(&p.theta_mu);
        for m in &p.theta_raw {
            x.extend_from_slice(m.as_slice());
        }
        x.extend_from_slice(&p.cov_raw);
        x.extend_from_slice(p.z_scores.as_slice());
        x.extend_from_slice(&p.log_sigma_eps);
        if x.len() != self.dim {
            return Err(ModelError::DimensionMismatch { expected: self.dim, found: x.len() });
        }
        Ok(x)
    }
}

/// Structured view of the unconstrained coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector<T> {
    pub theta_mu: Vec<T>,
    /// Unconstrained loadings, one `Q_p × K_p` matrix per block.
    pub theta_raw: Vec<Matrix<T>>,
    pub cov_raw: Vec<T>,
    /// Standardized score innovations, `N × K`; scores are `α_i = L z_i`.
    pub z_scores: Matrix<T>,
    pub log_sigma_eps: Vec<T>,
}

impl<T: Scalar> ParameterVector<T> {
    pub fn zeros(spec: &ModelSpec<T>, n_subjects: usize) -> Self {
        let layout = ParamLayout::new(spec, n_subjects);
        layout.unpack(spec, &vec![T::zero(); layout.dim]).expect("layout matches")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogDensityResult<T> {
    pub value: T,
    pub gradient: Vec<T>,
}

/// Log density of `y ~ N(design · beta, σ² I)`, adding `∂/∂beta` into
/// `grad_beta` and returning the residual sum of squares alongside.
/// `work` must hold at least `beta.len()` values.
fn block_loglik<T: Scalar>(obs: &BlockObs<T>, beta: &[T], sigma: T, grad_beta: Option<&mut [T]>, work: &mut [T]) -> (T, T) {
    let v = obs.y.len();
    if v == 0 {
        return (T::zero(), T::zero());
    }
    let q = beta.len();
    let g_beta = &mut work[..q];
    for (a, gb) in g_beta.iter_mut().enumerate() {
        *gb = dot(obs.gram.row(a), beta);
    }
    let ss = (obs.yty - T::lit(2.0) * dot(beta, &obs.bty) + dot(beta, g_beta)).max(T::zero());
    let inv_var = (sigma * sigma).recip();
    if let Some(g) = grad_beta {
        for ((gq, &b), &gb) in g.iter_mut().zip(&obs.bty).zip(g_beta.iter()) {
            *gq += (b - gb) * inv_var;
        }
    }
    let vf = T::lit(v as f64);
    let ll = -vf * T::lit(0.5 * LN_2PI) - vf * sigma.ln() - ss * inv_var * T::lit(0.5);
    (ll, ss)
}

/// Log-likelihood of one subject given explicit mean coefficients, loadings,
/// scores and residual scales. Used for pointwise likelihoods of rotated draws.
pub fn subject_log_likelihood<T: Scalar>(
    spec: &ModelSpec<T>,
    obs: &[BlockObs<T>],
    theta_mu: &[T],
    loadings: &[Matrix<T>],
    alpha: &[T],
    sigmas: &[T],
) -> T {
    let mut total = T::zero();
    for (p, ob) in obs.iter().enumerate() {
        let range = spec.basis_range(p);
        let alpha_p = &alpha[spec.structure().range(p)];
        let mut beta = theta_mu[range].to_vec();
        let lp = &loadings[p];
        for (q, bq) in beta.iter_mut().enumerate() {
            *bq += dot(lp.row(q), alpha_p);
        }
        let mut work = vec![T::zero(); beta.len()];
        total += block_loglik(ob, &beta, sigmas[spec.sigma_index(p)], None, &mut work).0;
    }
    total
}

/// The model posterior bound to a dataset.
#[derive(Debug, Clone)]
pub struct Posterior<'a, T> {
    spec: &'a ModelSpec<T>,
    data: &'a ModelData<T>,
    layout: ParamLayout,
}

impl<'a, T: Scalar> Posterior<'a, T> {
    pub fn new(spec: &'a ModelSpec<T>, data: &'a ModelData<T>) -> Self {
        let layout = ParamLayout::new(spec, data.n_subjects());
        Self { spec, data, layout }
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn spec(&self) -> &ModelSpec<T> {
        self.spec
    }

    pub fn data(&self) -> &ModelData<T> {
        self.data
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    pub fn log_posterior(&self, x: &[T]) -> Result<T, ModelError> {
        self.evaluate(x, None).map(|(v, _)| v)
    }

    pub fn gradient(&self, x: &[T]) -> Result<LogDensityResult<T>, ModelError> {
        let mut g = vec![T::zero(); self.layout.dim];
        let (value, _) = self.evaluate(x, Some(&mut g))?;
        Ok(LogDensityResult { value, gradient: g })
    }

    /// Likelihood contribution of each subject at `x`.
    pub fn pointwise_log_likelihood(&self, x: &[T]) -> Result<Vec<T>, ModelError> {
        let mut out = vec![T::zero(); self.data.n_subjects()];
        self.evaluate(x, None).map(|(_, pw)| {
            out.copy_from_slice(&pw);
            out
        })
    }

    /// Sum of the likelihood terms only (no priors, no Jacobian).
    pub fn log_likelihood(&self, x: &[T]) -> Result<T, ModelError> {
        Ok(self.pointwise_log_likelihood(x)?.into_iter().sum())
    }

    /// Value plus optional gradient; also returns per-subject likelihood terms.
    fn evaluate(&self, x: &[T], mut grad: Option<&mut [T]>) -> Result<(T, Vec<T>), ModelError> {
        let lay = &self.layout;
        if x.len() != lay.dim {
            return Err(ModelError::DimensionMismatch { expected: lay.dim, found: x.len() });
        }
        let spec = self.spec;
        let structure = spec.structure();
        let k = lay.k_total;
        let half = T::lit(0.5);
        let half_ln2pi = T::lit(0.5 * LN_2PI);

        let factor = build_factor(&x[lay.cov_offset..lay.z_offset], structure, spec.factor)?;
        let l = factor.factor();
        let sigmas: Vec<T> = x[lay.sigma_offset..].iter().map(|s| s.exp()).collect();
        let theta_mu = &x[..lay.q_total];
        let loadings: Vec<&[T]> =
            (0..spec.n_blocks()).map(|p| &x[lay.loading_offsets[p]..lay.loading_offsets[p + 1]]).collect();

        let mut grad_l = Matrix::zeros(k, k);
        let mut value = T::zero();
        let mut pointwise = Vec::with_capacity(self.data.n_subjects());
        let mut alpha = vec![T::zero(); k];
        let mut g_alpha = vec![T::zero(); k];
        let q_max = spec.blocks().iter().map(|b| b.basis.n_basis()).max().unwrap_or(0);
        let mut beta_buf = vec![T::zero(); q_max];
        let mut u_buf = vec![T::zero(); q_max];
        let mut work = vec![T::zero(); q_max];

        for i in 0..self.data.n_subjects() {
            let z = &x[lay.z_offset + i * k..lay.z_offset + (i + 1) * k];
            for (r, a) in alpha.iter_mut().enumerate() {
                *a = dot(&l.row(r)[..=r], &z[..=r]);
            }
            g_alpha.iter_mut().for_each(|g| *g = T::zero());
            let mut subject_ll = T::zero();
            for (p, obs) in self.data.subject(i).iter().enumerate() {
                if obs.y.is_empty() {
                    continue;
                }
                let qr = spec.basis_range(p);
                let qp = qr.len();
                let kr = structure.range(p);
                let kp = kr.len();
                let load = loadings[p];
                let alpha_p = &alpha[kr.clone()];
                let beta = &mut beta_buf[..qp];
                for (q, bq) in beta.iter_mut().enumerate() {
                    *bq = theta_mu[qr.start + q] + dot(&load[q * kp..(q + 1) * kp], alpha_p);
                }
                let si = spec.sigma_index(p);
                let sigma = sigmas[si];
                match grad.as_deref_mut() {
                    None => subject_ll += block_loglik(obs, beta, sigma, None, &mut work).0,
                    Some(g) => {
                        let u = &mut u_buf[..qp];
                        u.iter_mut().for_each(|v| *v = T::zero());
                        let (ll, ss) = block_loglik(obs, beta, sigma, Some(&mut *u), &mut work);
                        subject_ll += ll;
                        for (gq, &uq) in g[qr.clone()].iter_mut().zip(u.iter()) {
                            *gq += uq;
                        }
                        let lo = lay.loading_offsets[p];
                        for q in 0..qp {
                            for c in 0..kp {
                                g[lo + q * kp + c] += u[q] * alpha_p[c];
                                g_alpha[kr.start + c] += load[q * kp + c] * u[q];
                            }
                        }
                        g[lay.sigma_offset + si] += ss / (sigma * sigma) - T::lit(obs.y.len() as f64);
                    }
                }
            }
            if let Some(g) = grad.as_deref_mut() {
                let gz = &mut g[lay.z_offset + i * k..lay.z_offset + (i + 1) * k];
                for r in 0..k {
                    let ga = g_alpha[r];
                    if ga == T::zero() {
                        continue;
                    }
                    for c in 0..=r {
                        gz[c] += l[(r, c)] * ga;
                        grad_l[(r, c)] += ga * z[c];
                    }
                }
            }
            pointwise.push(subject_ll);
            value += subject_ll;
        }

        // Standard normal priors on θμ, loadings and z.
        let normal_end = lay.cov_offset;
        let mut n_std = 0usize;
        for (j, &xi) in x[..normal_end].iter().chain(&x[lay.z_offset..lay.sigma_offset]).enumerate() {
            value -= half * xi * xi;
            n_std += 1;
            if let Some(g) = grad.as_deref_mut() {
                let idx = if j < normal_end { j } else { lay.z_offset + (j - normal_end) };
                g[idx] -= xi;
            }
        }
        value -= T::lit(n_std as f64) * half_ln2pi;

        // Half-Cauchy(0, 1) on σ plus the log-Jacobian of σ = exp(s).
        for (j, &s) in x[lay.sigma_offset..].iter().enumerate() {
            let sig = sigmas[j];
            value += T::lit((2.0 / std::f64::consts::PI).ln()) - (T::one() + sig * sig).ln() + s;
            if let Some(g) = grad.as_deref_mut() {
                g[lay.sigma_offset + j] += T::one() - T::lit(2.0) * sig * sig / (T::one() + sig * sig);
            }
        }

        if let Some(sd) = self.spec.cov_prior_sd {
            let prec = T::lit(1.0 / (sd * sd));
            let norm = T::lit(-sd.ln()) - half_ln2pi;
            for (j, &v) in x[lay.cov_offset..lay.z_offset].iter().enumerate() {
                value += norm - half * prec * v * v;
                if let Some(g) = grad.as_deref_mut() {
                    g[lay.cov_offset + j] -= prec * v;
                }
            }
        }

        if let Some(g) = grad {
            factor.backprop(grad_l, &mut g[lay.cov_offset..lay.z_offset]);
        }
        Ok((value, pointwise))
    }
}

impl<T: Scalar> LogDensity<T> for Posterior<'_, T> {
    fn dim(&self) -> usize {
        self.layout.dim
    }

    fn logp_and_grad(&self, x: &[T], grad: &mut [T]) -> T {
        grad.iter_mut().for_each(|g| *g = T::zero());
        match self.evaluate(x, Some(grad)) {
            Ok((v, _)) if v.is_finite() && grad.iter().all(|g| g.is_finite()) => v,
            _ => T::neg_infinity(),
        }
    }
}

/// Log-posterior at structured parameters.
pub fn log_posterior<T: Scalar>(params: &ParameterVector<T>, data: &ModelData<T>, spec: &ModelSpec<T>) -> Result<T, ModelError> {
    let post = Posterior::new(spec, data);
    post.log_posterior(&post.layout().pack(params)?)
}

/// Log-posterior and its gradient in flat layout order.
pub fn gradient<T: Scalar>(
    params: &ParameterVector<T>,
    data: &ModelData<T>,
    spec: &ModelSpec<T>,
) -> Result<LogDensityResult<T>, ModelError> {
    let post = Posterior::new(spec, data);
    post.gradient(&post.layout().pack(params)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load_long_records, ObservationRecord};

    fn tiny_dataset() -> MultiBlockDataset {
        let rows = vec![
            ObservationRecord::new("a", "x", 0.0, 0.3),
            ObservationRecord::new("a", "x", 0.5, -0.2),
            ObservationRecord::new("a", "y", 1.0, 1.1),
            ObservationRecord::new("b", "y", 0.25, 0.4),
        ];
        load_long_records(&rows).unwrap().standardize_and_rescale().unwrap()
    }

    #[test]
    fn invalid_block_dims_rejected() {
        assert!(matches!(ModelSpec::<f64>::uniform(&[(4, 4)]), Err(ModelError::InvalidSpec(_))));
        assert!(matches!(ModelSpec::<f64>::uniform(&[(0, 4)]), Err(ModelError::InvalidSpec(_))));
        let s = ModelSpec::<f64>::uniform(&[(2, 6), (2, 5), (1, 5)]).unwrap();
        assert_eq!(s.q_total(), 16);
        assert_eq!(s.structure().total(), 5);
    }

    #[test]
    fn layout_roundtrip() {
        let spec = ModelSpec::<f64>::uniform(&[(2, 5), (1, 4)]).unwrap().with_per_block_sigma(true);
        let lay = ParamLayout::new(&spec, 3);
        assert_eq!(lay.dim, 9 + 10 + 4 + count_unconstrained(spec.structure()) + 9 + 2);
        let x: Vec<f64> = (0..lay.dim).map(|i| i as f64).collect();
        let p = lay.unpack(&spec, &x).unwrap();
        assert_eq!(p.theta_raw[1].rows(), 4);
        assert_eq!(p.log_sigma_eps.len(), 2);
        assert_eq!(lay.pack(&p).unwrap(), x);
        assert!(lay.unpack(&spec, &x[1..]).is_err());
        let names = lay.names();
        assert_eq!(names.len(), lay.dim);
        assert_eq!(names[9 + 9], "loadings[0][4,1]");
        assert_eq!(names[lay.dim - 1], "log_sigma_eps[1]");
    }

    #[test]
    fn block_count_mismatch_is_reported() {
        let spec = ModelSpec::<f64>::uniform(&[(1, 4)]).unwrap();
        assert_eq!(ModelData::new(&tiny_dataset(), &spec), Err(ModelError::SpecMismatch { data: 2, spec: 1 }));
    }

    #[test]
    fn zero_residual_likelihood() {
        // Fit a single-block subject whose observations equal B θμ exactly.
        let spec = ModelSpec::<f64>::uniform(&[(1, 4)]).unwrap();
        let times = [0.1, 0.4, 0.8];
        let theta_mu = vec![0.5, -1.0, 0.25, 2.0];
        let y = spec.blocks()[0].basis.curve(&theta_mu, &times).unwrap();
        let rows: Vec<_> = times.iter().zip(&y).map(|(&t, &v)| ObservationRecord::new("s", "b", t, v)).collect();
        let raw = load_long_records(&rows).unwrap();
        let ds = MultiBlockDataset::from_rescaled_series(
            raw.blocks().to_vec(),
            raw.subjects().to_vec(),
            vec![vec![raw.series(0, 0).clone()]],
            (0.0, 1.0),
        );
        let data = ModelData::new(&ds, &spec).unwrap();
        let mut p = ParameterVector::zeros(&spec, 1);
        p.theta_mu = theta_mu;
        p.log_sigma_eps = vec![0.3];
        let post = Posterior::new(&spec, &data);
        let ll = post.log_likelihood(&post.layout().pack(&p).unwrap()).unwrap();
        let expected = -1.5 * LN_2PI - 3.0 * 0.3;
        assert!((ll - expected).abs() < 1e-12);
    }

    #[test]
    fn empty_series_contributes_nothing() {
        let spec = ModelSpec::<f64>::uniform(&[(1, 4), (1, 4)]).unwrap();
        let data = ModelData::new(&tiny_dataset(), &spec).unwrap();
        let post = Posterior::new(&spec, &data);
        let x = vec![0.1; post.dim()];
        let pw = post.pointwise_log_likelihood(&x).unwrap();
        assert_eq!(pw.len(), 2);
        assert!(pw.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn prior_gradient_vanishes_at_origin() {
        let spec = ModelSpec::<f64>::uniform(&[(2, 5)]).unwrap();
        let ds = MultiBlockDataset::from_rescaled_series(vec!["b".into()], vec![], vec![], (0.0, 1.0));
        let data = ModelData::new(&ds, &spec).unwrap();
        let post = Posterior::new(&spec, &data);
        let g = post.gradient(&vec![0.0; post.dim()]).unwrap().gradient;
        let lay = post.layout();
        assert!(g[..lay.cov_offset].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cov_prior_adds_normal_terms() {
        let spec = ModelSpec::<f64>::uniform(&[(1, 4), (1, 4)]).unwrap();
        let with = spec.clone().with_cov_prior_sd(Some(2.0)).unwrap();
        assert!(spec.clone().with_cov_prior_sd(Some(0.0)).is_err());
        let data = ModelData::new(&tiny_dataset(), &spec).unwrap();
        let (flat, proper) = (Posterior::new(&spec, &data), Posterior::new(&with, &data));
        let x: Vec<f64> = (0..flat.dim()).map(|i| 0.1 * i as f64 - 1.0).collect();
        let lay = flat.layout();
        let cov = &x[lay.cov_offset..lay.z_offset];
        let extra: f64 = cov.iter().map(|v| -2f64.ln() - 0.5 * LN_2PI - v * v / 8.0).sum();
        let (a, b) = (flat.gradient(&x).unwrap(), proper.gradient(&x).unwrap());
        assert!((b.value - a.value - extra).abs() < 1e-10);
        for j in 0..x.len() {
            let want = if (lay.cov_offset..lay.z_offset).contains(&j) { -x[j] / 4.0 } else { 0.0 };
            assert!((b.gradient[j] - a.gradient[j] - want).abs() < 1e-10);
        }
    }
}
