//! Subject-level PSIS-LOO and posterior predictive replicates.
//!
//! The leave-one-out unit is a subject's whole multi-block trajectory, and the
//! pointwise likelihood conditions on that draw's scores for the subject.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::linalg::{psd_factor, Matrix};
use crate::model::{subject_log_likelihood, ModelData, ModelSpec};
use crate::posterior::RotatedDraw;
use crate::scalar::{log_sum_exp, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("draws carry scores for {draws} subjects but the data has {data}")]
    DimensionMismatch { draws: usize, data: usize },
    #[error("tail has {0} points, at least 5 are needed")]
    InsufficientTail(usize),
    #[error("PSIS-LOO needs at least 100 draws, got {0}")]
    TooFewDraws(usize),
    #[error("requested {requested} replicates from {available} draws")]
    TooManyReplicates { requested: usize, available: usize },
    #[error("csv output failed: {0}")]
    Io(String),
}

pub const K_WARN: f64 = 0.5;
pub const K_BAD: f64 = 0.7;

/// `draws × N` matrix of per-subject log-likelihoods.
pub fn pointwise_loglik<T: Scalar>(
    draws: &[RotatedDraw<T>],
    data: &ModelData<T>,
    spec: &ModelSpec<T>,
) -> Result<Matrix<f64>, DiagnosticsError> {
    let n = data.n_subjects();
    if let Some(d) = draws.iter().find(|d| d.scores.rows() != n) {
        return Err(DiagnosticsError::DimensionMismatch { draws: d.scores.rows(), data: n });
    }
    let rows: Vec<Vec<f64>> = draws
        .par_iter()
        .map(|d| {
            (0..n)
                .map(|i| {
                    subject_log_likelihood(spec, data.subject(i), &d.theta_mu, &d.loadings, d.scores.row(i), &d.sigma_eps)
                        .as_f64()
                })
                .collect()
        })
        .collect();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Matrix::from_row_slice(draws.len(), n, &flat))
}

/// Shape and scale of a fitted generalized Pareto distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpdFit {
    pub shape: f64,
    pub scale: f64,
}

impl GpdFit {
    /// Returned for tails with no spread: no fit is possible and no smoothing applied.
    pub const DEGENERATE: Self = Self { shape: f64::NEG_INFINITY, scale: 0.0 };

    pub fn is_degenerate(&self) -> bool {
        self.shape == f64::NEG_INFINITY
    }

    /// Quantile function.
    pub fn quantile(&self, p: f64) -> f64 {
        let k = self.shape;
        if k.abs() < f64::EPSILON {
            -self.scale * (-p).ln_1p()
        } else {
            self.scale * (-k * (-p).ln_1p()).exp_m1() / k
        }
    }
}

/// Empirical-Bayes estimate of the generalized Pareto shape and scale of
/// non-negative exceedances (Zhang and Stephens), with the shape shrunk
/// slightly towards 0.5 as is customary for PSIS.
pub fn fit_generalized_pareto(tail: &[f64]) -> Result<GpdFit, DiagnosticsError> {
    let n = tail.len();
    if n < 5 {
        return Err(DiagnosticsError::InsufficientTail(n));
    }
    let mut x = tail.to_vec();
    x.sort_by(f64::total_cmp);
    let (lo, hi) = (x[0], x[n - 1]);
    if !(hi > lo) || !(hi > 0.0) {
        return Ok(GpdFit::DEGENERATE);
    }
    let nf = n as f64;
    let m = 30 + (nf.sqrt() as usize);
    let quartile = x[((nf / 4.0 + 0.5) as usize).max(1) - 1];
    let quartile = if quartile > 0.0 { quartile } else { hi / nf };
    let b: Vec<f64> =
        (1..=m).map(|j| 1.0 / hi + (1.0 - (m as f64 / (j as f64 - 0.5)).sqrt()) / (3.0 * quartile)).collect();
    let profile: Vec<f64> = b
        .iter()
        .map(|&bj| {
            let k = x.iter().map(|&v| (-bj * v).ln_1p()).sum::<f64>() / nf;
            nf * ((-bj / k).ln() - k - 1.0)
        })
        .collect();
    let mut weights: Vec<f64> =
        profile.iter().map(|&li| 1.0 / profile.iter().map(|&lj| (lj - li).exp()).sum::<f64>()).collect();
    let keep: Vec<bool> = weights.iter().map(|&w| w >= 10.0 * f64::EPSILON).collect();
    let mut b_post = 0.0;
    let mut total = 0.0;
    for ((w, &bj), &k) in weights.iter_mut().zip(&b).zip(&keep) {
        if !k || !w.is_finite() {
            *w = 0.0;
        }
        b_post += *w * bj;
        total += *w;
    }
    let b_post = b_post / total;
    let k_post = x.iter().map(|&v| (-b_post * v).ln_1p()).sum::<f64>() / nf;
    let scale = -k_post / b_post;
    let prior_n = 10.0;
    let shape = (nf * k_post + prior_n * 0.5) / (nf + prior_n);
    Ok(GpdFit { shape, scale })
}

/// Number of largest ratios replaced by generalized Pareto quantiles.
pub fn tail_length(n_draws: usize) -> usize {
    let s = n_draws as f64;
    ((0.2 * s).min(3.0 * s.sqrt()).ceil() as usize).max(5).min(n_draws.saturating_sub(1))
}

/// Pareto-smoothed, truncated and self-normalized log importance weights.
/// Returns the log weights (summing to one in linear scale) and `k̂`.
pub fn psis_smooth(log_ratios: &[f64]) -> (Vec<f64>, f64) {
    let s = log_ratios.len();
    let max = log_ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut lw: Vec<f64> = log_ratios.iter().map(|v| v - max).collect();
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| lw[a].total_cmp(&lw[b]));
    let m = tail_length(s);
    let cutoff = lw[order[s - m - 1]].max(f64::MIN_POSITIVE.ln());
    let tail_idx: Vec<usize> = order.iter().copied().filter(|&i| lw[i] > cutoff).collect();
    let mut k = GpdFit::DEGENERATE.shape;
    if tail_idx.len() >= 5 {
        let exp_cut = cutoff.exp();
        let exceed: Vec<f64> = tail_idx.iter().map(|&i| lw[i].exp() - exp_cut).collect();
        let fit = fit_generalized_pareto(&exceed).expect("tail has at least 5 points");
        k = fit.shape;
        if !fit.is_degenerate() && fit.shape.is_finite() {
            let t = tail_idx.len() as f64;
            for (r, &i) in tail_idx.iter().enumerate() {
                let q = fit.quantile((r as f64 + 0.5) / t);
                lw[i] = (q + exp_cut).ln().min(0.0);
            }
        }
    }
    let norm = log_sum_exp(&lw);
    lw.iter_mut().for_each(|v| *v -= norm);
    (lw, k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LooReport {
    pub elpd_loo: f64,
    pub se_elpd: f64,
    /// Effective number of parameters, `lpd − elpd_loo`.
    pub p_loo: f64,
    /// In-sample log pointwise predictive density.
    pub lpd: f64,
    pub pointwise: Vec<f64>,
    pub pareto_k: Vec<f64>,
}

impl LooReport {
    /// Counts of `k̂` in `(< 0.5, 0.5–0.7, > 0.7)`.
    pub fn k_buckets(&self) -> [usize; 3] {
        let mut b = [0; 3];
        for &k in &self.pareto_k {
            b[if k < K_WARN {
                0
            } else if k <= K_BAD {
                1
            } else {
                2
            }] += 1;
        }
        b
    }

    /// Subjects with `k̂` above `threshold`.
    pub fn flagged(&self, threshold: f64) -> Vec<usize> {
        (0..self.pareto_k.len()).filter(|&i| self.pareto_k[i] > threshold).collect()
    }

    pub fn write_csv<W: Write>(&self, subjects: &[String], out: W) -> Result<(), DiagnosticsError> {
        let io = |e: csv::Error| DiagnosticsError::Io(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["subject", "elpd_i", "pareto_k"]).map_err(io)?;
        for (i, (e, k)) in self.pointwise.iter().zip(&self.pareto_k).enumerate() {
            let name = subjects.get(i).cloned().unwrap_or_else(|| i.to_string());
            w.write_record([name, e.to_string(), k.to_string()]).map_err(io)?;
        }
        w.flush().map_err(|e| DiagnosticsError::Io(e.to_string()))
    }
}

/// PSIS-LOO from a `draws × N` log-likelihood matrix.
pub fn psis_loo(loglik: &Matrix<f64>) -> Result<LooReport, DiagnosticsError> {
    let (s, n) = (loglik.rows(), loglik.cols());
    if s < 100 {
        return Err(DiagnosticsError::TooFewDraws(s));
    }
    let per: Vec<(f64, f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let ll = loglik.column(i);
            let neg: Vec<f64> = ll.iter().map(|v| -v).collect();
            let (lw, k) = psis_smooth(&neg);
            let terms: Vec<f64> = lw.iter().zip(&ll).map(|(w, l)| w + l).collect();
            let lpd = log_sum_exp(&ll) - (s as f64).ln();
            (log_sum_exp(&terms), k, lpd)
        })
        .collect();
    let pointwise: Vec<f64> = per.iter().map(|p| p.0).collect();
    let pareto_k = per.iter().map(|p| p.1).collect();
    let elpd_loo: f64 = pointwise.iter().sum();
    let lpd: f64 = per.iter().map(|p| p.2).sum();
    let mean = elpd_loo / n as f64;
    let var = if n > 1 { pointwise.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0) } else { 0.0 };
    Ok(LooReport { elpd_loo, se_elpd: (n as f64 * var).sqrt(), p_loo: lpd - elpd_loo, lpd, pointwise, pareto_k })
}

/// Observed values and replicated datasets, both flattened per block in
/// subject-then-time order.
#[derive(Debug, Clone, PartialEq)]
pub struct PpcExport {
    pub observed: Vec<Vec<f64>>,
    /// `replicates[r][p]`, same shape as `observed[p]`.
    pub replicates: Vec<Vec<Vec<f64>>>,
    /// Draw index used for each replicate.
    pub draw_indices: Vec<usize>,
    /// Subject of every flattened value, per block.
    pub subjects: Vec<Vec<usize>>,
}

impl PpcExport {
    /// Writes `source,block,subject,value` rows (`source` is `observed` or `rep<r>`).
    pub fn write_csv<W: Write>(&self, block_names: &[String], out: W) -> Result<(), DiagnosticsError> {
        let io = |e: csv::Error| DiagnosticsError::Io(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["source", "block", "subject", "value"]).map_err(io)?;
        let sets = std::iter::once(("observed".to_string(), &self.observed))
            .chain(self.replicates.iter().enumerate().map(|(r, v)| (format!("rep{}", r + 1), v)));
        for (source, values) in sets {
            for (p, block) in values.iter().enumerate() {
                for (v, s) in block.iter().zip(&self.subjects[p]) {
                    w.write_record([source.clone(), block_names[p].clone(), s.to_string(), v.to_string()]).map_err(io)?;
                }
            }
        }
        w.flush().map_err(|e| DiagnosticsError::Io(e.to_string()))
    }
}

/// Simulates `n_rep` replicated datasets at the observed design from evenly
/// spaced draws, with fresh scores and residuals.
pub fn posterior_predictive<T: Scalar>(
    draws: &[RotatedDraw<T>],
    data: &ModelData<T>,
    spec: &ModelSpec<T>,
    n_rep: usize,
    seed: u64,
) -> Result<PpcExport, DiagnosticsError> {
    if n_rep > draws.len() {
        return Err(DiagnosticsError::TooManyReplicates { requested: n_rep, available: draws.len() });
    }
    let n = data.n_subjects();
    let n_blocks = spec.n_blocks();
    let mut observed = vec![Vec::new(); n_blocks];
    let mut subjects = vec![Vec::new(); n_blocks];
    for i in 0..n {
        for (p, obs) in data.subject(i).iter().enumerate() {
            observed[p].extend(obs.y.iter().map(|v| v.as_f64()));
            subjects[p].extend(std::iter::repeat_n(i, obs.y.len()));
        }
    }
    let draw_indices: Vec<usize> = (0..n_rep).map(|r| r * draws.len() / n_rep.max(1)).collect();
    let k = spec.structure().total();
    let replicates = draw_indices
        .par_iter()
        .enumerate()
        .map(|(r, &di)| {
            let d = &draws[di];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let root = psd_factor(&d.score_cov.sigma.cast::<f64>());
            let mut out = vec![Vec::new(); n_blocks];
            for i in 0..n {
                let z: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
                let alpha = root.matvec(&z);
                for (p, obs) in data.subject(i).iter().enumerate() {
                    let kr = spec.structure().range(p);
                    let l = &d.loadings[p];
                    let beta: Vec<f64> = spec
                        .basis_range(p)
                        .enumerate()
                        .map(|(q, gq)| {
                            d.theta_mu[gq].as_f64() + (0..kr.len()).map(|c| l[(q, c)].as_f64() * alpha[kr.start + c]).sum::<f64>()
                        })
                        .collect();
                    let sigma = d.sigma_eps[spec.sigma_index(p)].as_f64();
                    for row in 0..obs.y.len() {
                        let mu: f64 = obs.design.row(row).iter().zip(&beta).map(|(b, c)| b.as_f64() * c).sum();
                        let e: f64 = StandardNormal.sample(&mut rng);
                        out[p].push(mu + sigma * e);
                    }
                }
            }
            out
        })
        .collect();
    Ok(PpcExport { observed, replicates, draw_indices, subjects })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::Exp1;

    fn gpd_sample(k: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fit = GpdFit { shape: k, scale: 1.0 };
        (0..n).map(|_| fit.quantile(rand::Rng::random::<f64>(&mut rng))).collect()
    }

    #[test]
    fn gpd_shape_recovered() {
        let k = fit_generalized_pareto(&gpd_sample(0.3, 1000, 1)).unwrap().shape;
        assert!((0.2..=0.4).contains(&k), "k = {k}");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let exp: Vec<f64> = (0..1000).map(|_| Exp1.sample(&mut rng)).collect();
        let k = fit_generalized_pareto(&exp).unwrap().shape;
        assert!((-0.1..=0.1).contains(&k), "k = {k}");
    }

    #[test]
    fn gpd_degenerate_and_short_tails() {
        assert!(fit_generalized_pareto(&[1.0; 10]).unwrap().shape <= 0.0);
        assert_eq!(fit_generalized_pareto(&[1.0, 2.0]), Err(DiagnosticsError::InsufficientTail(2)));
    }

    #[test]
    fn tail_length_rule() {
        assert_eq!(tail_length(100), 20);
        assert_eq!(tail_length(1000), 95);
        assert_eq!(tail_length(4000), 190);
    }

    #[test]
    fn constant_loglik_gives_uniform_weights() {
        let ll = Matrix::from_fn(200, 3, |_, j| -1.5 * (j as f64 + 1.0));
        let r = psis_loo(&ll).unwrap();
        for (j, e) in r.pointwise.iter().enumerate() {
            assert!((e + 1.5 * (j as f64 + 1.0)).abs() < 1e-10);
        }
        assert!(r.pareto_k.iter().all(|&k| k < K_WARN));
        assert_eq!(r.k_buckets(), [3, 0, 0]);
    }

    #[test]
    fn smoothed_weights_normalized_and_order_preserving() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lr: Vec<f64> = (0..1000).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); 2.0 * z }).collect();
        let (lw, k) = psis_smooth(&lr);
        assert!(k.is_finite());
        let total: f64 = lw.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let mut idx: Vec<usize> = (0..lr.len()).collect();
        idx.sort_by(|&a, &b| lr[a].total_cmp(&lr[b]));
        assert!(idx.windows(2).all(|w| lw[w[0]] <= lw[w[1]] + 1e-12));
    }

    #[test]
    fn too_few_draws() {
        assert_eq!(psis_loo(&Matrix::zeros(50, 2)), Err(DiagnosticsError::TooFewDraws(50)));
    }
}
