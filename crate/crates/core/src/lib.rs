//! Bayesian multivariate sparse functional principal components analysis.
//!
//! Several functional variables ("blocks") observed sparsely and irregularly
//! on the same subjects are modelled jointly: each block has its own mean
//! curve and FPCs in an orthonormal spline basis, and the FPC scores of all
//! blocks share one covariance whose within-block entries are fixed at zero.
//! Associations between blocks are summarized by Gaussian mutual information.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`, which is what the harness code uses.

pub mod association;
pub mod basis;
pub mod convergence;
pub mod covariance;
pub mod dataset;
pub mod diagnostics;
pub mod experiments;
pub mod io;
pub mod linalg;
pub mod model;
pub mod posterior;
pub mod sampler;
pub mod scalar;
pub mod simulate;

pub use scalar::Scalar;

pub type Matrix = linalg::Matrix<f64>;
pub type OrthonormalBasis = basis::OrthonormalBasis<f64>;
pub type ModelSpec = model::ModelSpec<f64>;
pub type ModelData = model::ModelData<f64>;
pub type Posterior<'a> = model::Posterior<'a, f64>;
pub type ParameterVector = model::ParameterVector<f64>;
pub type ScoreCovariance = covariance::ScoreCovariance<f64>;
pub type Draws = sampler::Draws<f64>;
pub type RotatedDraw = posterior::RotatedDraw<f64>;
pub type FittedModel = posterior::FittedModel<f64>;

/// Single-precision variants.
pub mod f32 {
    pub type Matrix = crate::linalg::Matrix<f32>;
    pub type OrthonormalBasis = crate::basis::OrthonormalBasis<f32>;
    pub type ModelSpec = crate::model::ModelSpec<f32>;
    pub type ModelData = crate::model::ModelData<f32>;
    pub type Posterior<'a> = crate::model::Posterior<'a, f32>;
    pub type Draws = crate::sampler::Draws<f32>;
}
