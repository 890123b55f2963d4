//! Per-draw rotation to orthonormal loadings, sign alignment across draws and
//! pointwise curve summaries.

use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::covariance::{build_factor, ScoreCovariance};
use crate::linalg::{dot, Matrix};
use crate::model::{ModelError, ModelSpec, ParamLayout};
use crate::sampler::Draws;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PosteriorError {
    #[error("loadings of block {block} are rank deficient")]
    RankDeficientLoadings { block: usize },
    #[error("expected {expected} columns, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("no draws to summarize")]
    NoDraws,
    #[error("report grid point {0} outside [0, 1]")]
    GridOutOfRange(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("csv output failed: {0}")]
    Io(String),
}

/// One posterior draw after rotation: orthonormal loadings per block and the
/// matching scores and score covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct RotatedDraw<T> {
    pub theta_mu: Vec<T>,
    pub loadings: Vec<Matrix<T>>,
    pub score_cov: ScoreCovariance<T>,
    /// `N × K` rotated scores.
    pub scores: Matrix<T>,
    pub sigma_eps: Vec<T>,
}

impl<T: Scalar> RotatedDraw<T> {
    /// Within-block eigenvalues (the diagonal of the rotated covariance).
    pub fn eigenvalues(&self) -> Vec<T> {
        self.score_cov.sigma.diagonal()
    }

    /// Scores of subject `i` as a slice of length `K`.
    pub fn subject_scores(&self, i: usize) -> &[T] {
        self.scores.row(i)
    }

    fn flip(&mut self, block: usize, col: usize, offset: usize) {
        let j = offset + col;
        let l = &mut self.loadings[block];
        for r in 0..l.rows() {
            l[(r, col)] = -l[(r, col)];
        }
        for i in 0..self.scores.rows() {
            self.scores[(i, j)] = -self.scores[(i, j)];
        }
        let k = self.score_cov.sigma.rows();
        for m in [&mut self.score_cov.sigma, &mut self.score_cov.corr] {
            for c in 0..k {
                if c != j {
                    m[(j, c)] = -m[(j, c)];
                    m[(c, j)] = -m[(c, j)];
                }
            }
        }
    }
}

fn block_offsets(loadings: &[Matrix<impl Scalar>]) -> Vec<usize> {
    let mut off = vec![0];
    for l in loadings {
        off.push(off.last().unwrap() + l.cols());
    }
    off
}

/// Rotates one draw so that each block's loadings are orthonormal and the
/// within-block score covariance is diagonal with descending variances.
///
/// Per block, `M_p = Θ_p D_p Θ_pᵀ` is eigendecomposed through the thin QR
/// `Θ_p = Q R`: the eigenvectors of the small matrix `R D_p Rᵀ = U Λ Uᵀ` give
/// `Θ*_p = Q U` and the score rotation `G_p = Θ*_pᵀ Θ_p = Uᵀ R`.
pub fn rotate_draw<T: Scalar>(
    theta_raw: &[Matrix<T>],
    score_cov: &ScoreCovariance<T>,
    scores: &Matrix<T>,
) -> Result<(Vec<Matrix<T>>, ScoreCovariance<T>, Matrix<T>), PosteriorError> {
    let offsets = block_offsets(theta_raw);
    let k = *offsets.last().unwrap();
    if score_cov.sigma.rows() != k || scores.cols() != k {
        return Err(PosteriorError::DimensionMismatch { expected: k, found: score_cov.sigma.rows().min(scores.cols()) });
    }
    let mut rotated = Vec::with_capacity(theta_raw.len());
    let mut g = Matrix::zeros(k, k);
    for (p, theta) in theta_raw.iter().enumerate() {
        let kp = theta.cols();
        let (q, r) = theta.thin_qr().map_err(|_| PosteriorError::RankDeficientLoadings { block: p })?;
        let scale = r.max_abs();
        let tol = T::lit(1e-12) * scale;
        if !(scale > T::zero()) || (0..kp).any(|i| !(r[(i, i)] > tol)) {
            return Err(PosteriorError::RankDeficientLoadings { block: p });
        }
        let d: Vec<T> = (0..kp).map(|j| score_cov.sigma[(offsets[p] + j, offsets[p] + j)]).collect();
        let rd = Matrix::from_fn(kp, kp, |i, j| r[(i, j)] * d[j]);
        let small = rd.matmul(&r.transpose());
        let small = Matrix::from_fn(kp, kp, |i, j| (small[(i, j)] + small[(j, i)]) * T::lit(0.5));
        let (_, u) = small.symmetric_eigen();
        rotated.push(q.matmul(&u));
        let gp = u.tr_matmul(&r);
        for i in 0..kp {
            for j in 0..kp {
                g[(offsets[p] + i, offsets[p] + j)] = gp[(i, j)];
            }
        }
    }
    let sigma = g.matmul(&score_cov.sigma).matmul(&g.transpose());
    let sigma = Matrix::from_fn(k, k, |i, j| {
        let same_block = offsets.windows(2).any(|w| (w[0]..w[1]).contains(&i) && (w[0]..w[1]).contains(&j));
        if i != j && same_block {
            T::zero()
        } else {
            (sigma[(i, j)] + sigma[(j, i)]) * T::lit(0.5)
        }
    });
    let alpha = scores.matmul(&g.transpose());
    Ok((rotated, ScoreCovariance::from_sigma(sigma), alpha))
}

/// Converts one unconstrained draw into a [`RotatedDraw`].
pub fn rotate_unconstrained<T: Scalar>(
    spec: &ModelSpec<T>,
    layout: &ParamLayout,
    x: &[T],
) -> Result<RotatedDraw<T>, PosteriorError> {
    let params = layout.unpack(spec, x)?;
    let factor = build_factor(&params.cov_raw, spec.structure(), spec.factor).map_err(ModelError::from)?;
    let l = factor.factor();
    let sigma = l.matmul(&l.transpose());
    let alpha = params.z_scores.matmul(&l.transpose());
    let (loadings, score_cov, scores) = rotate_draw(&params.theta_raw, &ScoreCovariance::from_sigma(sigma), &alpha)?;
    Ok(RotatedDraw {
        theta_mu: params.theta_mu,
        loadings,
        score_cov,
        scores,
        sigma_eps: params.log_sigma_eps.iter().map(|s| s.exp()).collect(),
    })
}

/// Rotates every stored draw, in chain order.
pub fn rotate_draws<T: Scalar>(
    spec: &ModelSpec<T>,
    layout: &ParamLayout,
    draws: &Draws<T>,
) -> Result<Vec<RotatedDraw<T>>, PosteriorError> {
    if draws.dim != layout.dim {
        return Err(PosteriorError::DimensionMismatch { expected: layout.dim, found: draws.dim });
    }
    let all: Vec<&[T]> = draws.iter().collect();
    all.par_iter().map(|x| rotate_unconstrained(spec, layout, x)).collect()
}

fn flip_towards<T: Scalar>(draw: &mut RotatedDraw<T>, reference: &[Matrix<T>]) {
    let offsets = block_offsets(&draw.loadings);
    for (p, refl) in reference.iter().enumerate() {
        for c in 0..refl.cols().min(draw.loadings[p].cols()) {
            let l = &draw.loadings[p];
            let ip = (0..l.rows()).fold(T::zero(), |acc, r| acc + l[(r, c)] * refl[(r, c)]);
            if ip < T::zero() {
                draw.flip(p, c, offsets[p]);
            }
        }
    }
}

/// Flips loading columns so every draw points the same way as `reference`.
pub fn align_to<T: Scalar>(draws: &mut [RotatedDraw<T>], reference: &[Matrix<T>]) {
    draws.par_iter_mut().for_each(|d| flip_towards(d, reference));
}

fn mean_loadings<T: Scalar>(draws: &[RotatedDraw<T>]) -> Vec<Matrix<T>> {
    let n = T::lit(draws.len() as f64);
    let mut acc: Vec<Matrix<T>> = draws[0].loadings.iter().map(|l| Matrix::zeros(l.rows(), l.cols())).collect();
    for d in draws {
        for (a, l) in acc.iter_mut().zip(&d.loadings) {
            *a = a.add(l);
        }
    }
    acc.into_iter().map(|a| a.scale(n.recip())).collect()
}

/// Sign alignment: first against the first draw, then once more against the
/// posterior mean of the aligned loadings.
pub fn align_draws<T: Scalar>(draws: &mut [RotatedDraw<T>]) {
    if draws.is_empty() {
        return;
    }
    let first = draws[0].loadings.clone();
    align_to(draws, &first);
    let mean = mean_loadings(draws);
    align_to(draws, &mean);
}

/// Sample quantile with linear interpolation between order statistics
/// (the default "type 7" definition). `sorted` must be ascending.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Posterior median with an equal-tailed 95% interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub median: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn from_samples(mut values: Vec<f64>) -> Self {
        values.sort_by(f64::total_cmp);
        Self {
            median: quantile_sorted(&values, 0.5),
            lo: quantile_sorted(&values, 0.025),
            hi: quantile_sorted(&values, 0.975),
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

/// Pointwise summaries of one curve on the report grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveBand {
    pub block: usize,
    /// `None` for the mean curve, `Some(k)` for component `k` (0-based).
    pub component: Option<usize>,
    pub points: Vec<Interval>,
}

impl CurveBand {
    pub fn medians(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.median).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel<T> {
    pub draws: Vec<RotatedDraw<T>>,
    pub grid: Vec<f64>,
    pub mean_curves: Vec<CurveBand>,
    /// `fpc_curves[p][k]`.
    pub fpc_curves: Vec<Vec<CurveBand>>,
    /// Posterior mean of `λ_k / Σ_j λ_j` within each block.
    pub explained_variance: Vec<Vec<f64>>,
    /// Posterior medians of the rotated scores, `N × K`.
    pub score_medians: Matrix<f64>,
}

/// Summarizes aligned draws on `grid` (points in `[0, 1]`).
pub fn summarize_curves<T: Scalar>(
    draws: Vec<RotatedDraw<T>>,
    spec: &ModelSpec<T>,
    grid: &[f64],
) -> Result<FittedModel<T>, PosteriorError> {
    if draws.is_empty() {
        return Err(PosteriorError::NoDraws);
    }
    if let Some(&t) = grid.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(PosteriorError::GridOutOfRange(t));
    }
    let tgrid: Vec<T> = grid.iter().map(|&t| T::lit(t)).collect();
    let structure = spec.structure();
    let mut mean_curves = Vec::new();
    let mut fpc_curves = Vec::new();
    let mut explained_variance = Vec::new();
    for (p, block) in spec.blocks().iter().enumerate() {
        let design = block.basis.evaluate(&tgrid).map_err(ModelError::from)?;
        let band = |f: &(dyn Fn(&RotatedDraw<T>) -> Vec<T> + Sync)| -> Vec<Interval> {
            let curves: Vec<Vec<f64>> =
                draws.par_iter().map(|d| design.matvec(&f(d)).into_iter().map(|v| v.as_f64()).collect()).collect();
            (0..grid.len()).map(|g| Interval::from_samples(curves.iter().map(|c| c[g]).collect())).collect()
        };
        let range = spec.basis_range(p);
        mean_curves.push(CurveBand { block: p, component: None, points: band(&|d| d.theta_mu[range.clone()].to_vec()) });
        fpc_curves.push(
            (0..block.n_components)
                .map(|k| CurveBand { block: p, component: Some(k), points: band(&|d| d.loadings[p].column(k)) })
                .collect(),
        );
        let kr = structure.range(p);
        let mut ev = vec![0.0; kr.len()];
        for d in &draws {
            let lam: Vec<f64> = d.eigenvalues()[kr.clone()].iter().map(|v| v.as_f64()).collect();
            let total: f64 = lam.iter().sum();
            for (e, l) in ev.iter_mut().zip(&lam) {
                *e += l / total;
            }
        }
        explained_variance.push(ev.into_iter().map(|e| e / draws.len() as f64).collect());
    }
    let (n, k) = (draws[0].scores.rows(), draws[0].scores.cols());
    let score_medians = Matrix::from_fn(n, k, |i, j| {
        let mut v: Vec<f64> = draws.iter().map(|d| d.scores[(i, j)].as_f64()).collect();
        v.sort_by(f64::total_cmp);
        quantile_sorted(&v, 0.5)
    });
    Ok(FittedModel { draws, grid: grid.to_vec(), mean_curves, fpc_curves, explained_variance, score_medians })
}

fn component_label(c: Option<usize>) -> String {
    match c {
        None => "mean".into(),
        Some(k) => format!("fpc{}", k + 1),
    }
}

/// Writes `grid,block,component,median,lo,hi` rows for every curve.
pub fn write_curves_csv<T, W: Write>(fit: &FittedModel<T>, block_names: &[String], out: W) -> Result<(), PosteriorError> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| PosteriorError::Io(e.to_string());
    w.write_record(["grid", "block", "component", "median", "lo", "hi"]).map_err(io)?;
    let bands = fit.mean_curves.iter().chain(fit.fpc_curves.iter().flatten());
    for band in bands {
        let name = block_names.get(band.block).cloned().unwrap_or_else(|| band.block.to_string());
        for (t, iv) in fit.grid.iter().zip(&band.points) {
            w.write_record([
                t.to_string(),
                name.clone(),
                component_label(band.component),
                iv.median.to_string(),
                iv.lo.to_string(),
                iv.hi.to_string(),
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(|e| PosteriorError::Io(e.to_string()))
}

/// Writes `block,component,explained_variance` rows.
pub fn write_explained_variance_csv<T, W: Write>(
    fit: &FittedModel<T>,
    block_names: &[String],
    out: W,
) -> Result<(), PosteriorError> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| PosteriorError::Io(e.to_string());
    w.write_record(["block", "component", "explained_variance"]).map_err(io)?;
    for (p, ev) in fit.explained_variance.iter().enumerate() {
        for (k, v) in ev.iter().enumerate() {
            w.write_record([block_names[p].clone(), component_label(Some(k)), v.to_string()]).map_err(io)?;
        }
    }
    w.flush().map_err(|e| PosteriorError::Io(e.to_string()))
}

/// Fitted block trajectory `B θμ_p + B Θ*_p α*_p` of one subject at `times`.
pub fn fitted_block_values<T: Scalar>(
    spec: &ModelSpec<T>,
    draw: &RotatedDraw<T>,
    subject: usize,
    block: usize,
    design: &Matrix<T>,
) -> Vec<T> {
    let alpha = &draw.subject_scores(subject)[spec.structure().range(block)];
    let mut beta = draw.theta_mu[spec.basis_range(block)].to_vec();
    let l = &draw.loadings[block];
    for (q, b) in beta.iter_mut().enumerate() {
        *b += dot(l.row(q), alpha);
    }
    design.matvec(&beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::BlockStructure;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
    }

    fn random_cov(structure: &BlockStructure, rng: &mut ChaCha8Rng) -> ScoreCovariance<f64> {
        let v: Vec<f64> = (0..crate::covariance::count_unconstrained(structure)).map(|_| StandardNormal.sample(rng)).collect();
        let f = build_factor(&v, structure, Default::default()).unwrap();
        crate::covariance::assemble(&f)
    }

    #[test]
    fn orthonormal_loadings_are_a_fixed_point() {
        let theta = Matrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let cov = ScoreCovariance::from_sigma(Matrix::from_diagonal(&[4.0, 1.0]));
        let scores = Matrix::from_row_slice(1, 2, &[0.3, -0.7]);
        let (l, s, a) = rotate_draw(&[theta.clone()], &cov, &scores).unwrap();
        for c in 0..2 {
            let ip: f64 = (0..3).map(|r| l[0][(r, c)] * theta[(r, c)]).sum();
            assert!((ip.abs() - 1.0).abs() < 1e-12);
        }
        assert!((s.sigma[(0, 0)] - 4.0).abs() < 1e-12 && (s.sigma[(1, 1)] - 1.0).abs() < 1e-12);
        assert!((a[(0, 0)].abs() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn rotation_preserves_covariance_and_fits() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let structure = BlockStructure::new(vec![2, 2, 1]).unwrap();
        let qs = [6, 5, 5];
        for _ in 0..20 {
            let theta: Vec<Matrix<f64>> =
                qs.iter().zip(structure.sizes()).map(|(&q, &k)| random_matrix(q, k, &mut rng)).collect();
            let cov = random_cov(&structure, &mut rng);
            let scores = random_matrix(4, 5, &mut rng);
            let (l, s, a) = rotate_draw(&theta, &cov, &scores).unwrap();
            for p in 0..3 {
                let r = structure.range(p);
                let gram = l[p].tr_matmul(&l[p]);
                assert!(gram.max_abs_diff(&Matrix::identity(r.len())) < 1e-10);
                let idx: Vec<usize> = r.clone().collect();
                let before = theta[p].matmul(&cov.sigma.select(&idx, &idx)).matmul(&theta[p].transpose());
                let after = l[p].matmul(&s.sigma.select(&idx, &idx)).matmul(&l[p].transpose());
                assert!(before.max_abs_diff(&after) < 1e-10);
                let ev = s.sigma.select(&idx, &idx).diagonal();
                assert!(ev.windows(2).all(|w| w[0] >= w[1]) && ev.iter().all(|&e| e >= 0.0));
                for i in 0..4 {
                    let fa = theta[p].matvec(&scores.row(i)[r.clone()]);
                    let fb = l[p].matvec(&a.row(i)[r.clone()]);
                    assert!(fa.iter().zip(&fb).all(|(x, y)| (x - y).abs() < 1e-10));
                }
            }
        }
    }

    #[test]
    fn rank_deficient_loadings_rejected() {
        let theta = Matrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let cov = ScoreCovariance::from_sigma(Matrix::identity(2));
        let err = rotate_draw(&[theta], &cov, &Matrix::zeros(1, 2)).unwrap_err();
        assert_eq!(err, PosteriorError::RankDeficientLoadings { block: 0 });
    }

    fn base_draw(rng: &mut ChaCha8Rng) -> RotatedDraw<f64> {
        let structure = BlockStructure::new(vec![2, 1]).unwrap();
        let theta = vec![random_matrix(5, 2, rng), random_matrix(4, 1, rng)];
        let cov = random_cov(&structure, rng);
        let (loadings, score_cov, scores) = rotate_draw(&theta, &cov, &random_matrix(3, 3, rng)).unwrap();
        RotatedDraw { theta_mu: vec![0.0; 9], loadings, score_cov, scores, sigma_eps: vec![1.0] }
    }

    #[test]
    fn alignment_collapses_sign_orbit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = base_draw(&mut rng);
        let mut draws: Vec<RotatedDraw<f64>> = (0..16)
            .map(|s| {
                let mut d = base.clone();
                if s & 1 == 1 {
                    d.flip(0, 0, 0);
                }
                if s & 2 == 2 {
                    d.flip(0, 1, 0);
                }
                if s & 4 == 4 {
                    d.flip(1, 0, 2);
                }
                d
            })
            .collect();
        let before: Vec<Matrix<f64>> = draws
            .iter()
            .map(|d| d.loadings[0].matmul(&d.score_cov.sigma.select(&[0, 1], &[0, 1])).matmul(&d.loadings[0].transpose()))
            .collect();
        align_draws(&mut draws);
        for (d, b) in draws.iter().zip(&before) {
            assert_eq!(d.loadings, draws[0].loadings);
            assert!(d.score_cov.sigma.max_abs_diff(&draws[0].score_cov.sigma) < 1e-15);
            assert!(d.scores.max_abs_diff(&draws[0].scores) < 1e-15);
            let after = d.loadings[0].matmul(&d.score_cov.sigma.select(&[0, 1], &[0, 1])).matmul(&d.loadings[0].transpose());
            assert!(after.max_abs_diff(b) < 1e-12);
        }
    }

    #[test]
    fn quantiles_match_type7() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(quantile_sorted(&v, 0.5), 5.5);
        assert!((quantile_sorted(&v, 0.025) - 1.225).abs() < 1e-12);
        assert!((quantile_sorted(&v, 0.975) - 9.775).abs() < 1e-12);
        let iv = Interval::from_samples(vec![2.0; 5]);
        assert_eq!((iv.lo, iv.median, iv.hi), (2.0, 2.0, 2.0));
    }

    #[test]
    fn explained_variance_and_zero_mean() {
        let spec = ModelSpec::<f64>::uniform(&[(2, 5)]).unwrap();
        let theta = Matrix::from_fn(5, 2, |r, c| if r == c { 1.0 } else { 0.0 });
        let draw = RotatedDraw {
            theta_mu: vec![0.0; 5],
            loadings: vec![theta],
            score_cov: ScoreCovariance::from_sigma(Matrix::from_diagonal(&[4.0, 1.0])),
            scores: Matrix::zeros(2, 2),
            sigma_eps: vec![0.5],
        };
        let grid: Vec<f64> = (0..11).map(|i| i as f64 / 10.0).collect();
        let fit = summarize_curves(vec![draw.clone(), draw], &spec, &grid).unwrap();
        assert!((fit.explained_variance[0][0] - 0.8).abs() < 1e-12);
        assert!((fit.explained_variance[0][1] - 0.2).abs() < 1e-12);
        assert!(fit.mean_curves[0].points.iter().all(|p| p.median == 0.0 && p.lo == 0.0 && p.hi == 0.0));
        let mut buf = Vec::new();
        write_curves_csv(&fit, &["b".to_string()], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("grid,block,component,median,lo,hi\n"));
        assert_eq!(text.lines().count(), 1 + 3 * 11);
        assert!(summarize_curves(Vec::<RotatedDraw<f64>>::new(), &spec, &grid).is_err());
        assert_eq!(
            summarize_curves(vec![fit.draws[0].clone()], &spec, &[1.5]).unwrap_err(),
            PosteriorError::GridOutOfRange(1.5)
        );
    }
}
