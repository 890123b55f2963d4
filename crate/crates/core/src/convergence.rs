//! Split-R̂ and effective sample size on rank-normalized draws.

use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::sampler::Draws;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConvergenceError {
    #[error("R-hat needs at least 2 chains, got {0}")]
    InsufficientChains(usize),
    #[error("need at least 4 draws per chain, got {0}")]
    TooFewDraws(usize),
    #[error("chains have unequal lengths")]
    RaggedChains,
}

fn check(chains: &[Vec<f64>]) -> Result<usize, ConvergenceError> {
    let n = chains.first().map_or(0, Vec::len);
    if chains.iter().any(|c| c.len() != n) {
        return Err(ConvergenceError::RaggedChains);
    }
    if n < 4 {
        return Err(ConvergenceError::TooFewDraws(n));
    }
    Ok(n)
}

/// Splits every chain into two halves (dropping the middle draw of odd chains).
fn split(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let half = chains[0].len() / 2;
    let odd = chains[0].len() % 2;
    chains.iter().flat_map(|c| [c[..half].to_vec(), c[half + odd..].to_vec()]).collect()
}

/// Blom-style normal scores of average ranks over all chains.
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let total: usize = chains.iter().map(Vec::len).sum();
    let mut flat: Vec<(f64, usize)> = chains.iter().flatten().copied().zip(0..).collect();
    flat.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut ranks = vec![0.0; total];
    let mut i = 0;
    while i < total {
        let mut j = i;
        while j + 1 < total && flat[j + 1].0 == flat[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for item in &flat[i..=j] {
            ranks[item.1] = avg;
        }
        i = j + 1;
    }
    let normal = Normal::standard();
    let s = total as f64;
    let mut out = Vec::with_capacity(chains.len());
    let mut pos = 0;
    for c in chains {
        out.push(ranks[pos..pos + c.len()].iter().map(|&r| normal.inverse_cdf((r - 0.375) / (s + 0.25))).collect());
        pos += c.len();
    }
    out
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Classic potential scale reduction of already-split chains.
fn psrf(chains: &[Vec<f64>]) -> f64 {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = chains.iter().map(|c| sample_var(c)).sum::<f64>() / chains.len() as f64;
    let b = n * sample_var(&means);
    let var_plus = (n - 1.0) / n * w + b / n;
    if w == 0.0 {
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    (var_plus / w).sqrt()
}

/// Rank-normalized split-R̂: the larger of the bulk and folded (tail) versions.
pub fn rhat_chains(chains: &[Vec<f64>]) -> Result<f64, ConvergenceError> {
    if chains.len() < 2 {
        return Err(ConvergenceError::InsufficientChains(chains.len()));
    }
    check(chains)?;
    let sp = split(chains);
    let bulk = psrf(&rank_normalize(&sp));
    let mut all: Vec<f64> = chains.iter().flatten().copied().collect();
    all.sort_by(f64::total_cmp);
    let med = all[all.len() / 2];
    let folded: Vec<Vec<f64>> = sp.iter().map(|c| c.iter().map(|v| (v - med).abs()).collect()).collect();
    let tail = psrf(&rank_normalize(&folded));
    Ok(bulk.max(tail))
}

/// Biased autocovariance at `lag`.
fn autocov(x: &[f64], m: f64, lag: usize) -> f64 {
    let n = x.len();
    x[..n - lag].iter().zip(&x[lag..]).map(|(a, b)| (a - m) * (b - m)).sum::<f64>() / n as f64
}

/// Multi-chain ESS with Geyer's initial monotone sequence.
fn ess_raw(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains[0].len();
    let nf = n as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let acov0: Vec<f64> = chains.iter().zip(&means).map(|(c, &mu)| autocov(c, mu, 0)).collect();
    let mean_var = mean(&acov0) * nf / (nf - 1.0);
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        var_plus += sample_var(&means);
    }
    if !(var_plus > 0.0) {
        return (m * n) as f64;
    }
    let rho_at = |t: usize| -> f64 {
        let a = chains.iter().zip(&means).map(|(c, &mu)| autocov(c, mu, t)).sum::<f64>() / m as f64;
        1.0 - (mean_var - a) / var_plus
    };
    let mut rho = vec![0.0; n + 1];
    rho[0] = 1.0;
    let mut rho_even = 1.0;
    let mut rho_odd = rho_at(1);
    rho[1] = rho_odd;
    let mut s = 1;
    while s + 4 < n && rho_even + rho_odd > 0.0 {
        rho_even = rho_at(s + 1);
        rho_odd = rho_at(s + 2);
        if rho_even + rho_odd >= 0.0 {
            rho[s + 1] = rho_even;
            rho[s + 2] = rho_odd;
        }
        s += 2;
    }
    let max_s = s;
    if rho[max_s] > 0.0 {
        rho[max_s + 1] = rho[max_s];
    }
    let mut t = 1;
    while t + 3 <= max_s {
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t] {
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0;
            rho[t + 2] = rho[t + 1];
        }
        t += 2;
    }
    let total = (m * n) as f64;
    let tau = (-1.0 + 2.0 * rho[..max_s].iter().sum::<f64>() + rho[max_s + 1]).max(1.0 / total.log10());
    total / tau
}

/// Bulk effective sample size of rank-normalized split chains.
pub fn ess_chains(chains: &[Vec<f64>]) -> Result<f64, ConvergenceError> {
    if chains.is_empty() {
        return Err(ConvergenceError::InsufficientChains(0));
    }
    check(chains)?;
    Ok(ess_raw(&rank_normalize(&split(chains))))
}

pub fn rhat<T: Scalar>(draws: &Draws<T>, coordinate: usize) -> Result<f64, ConvergenceError> {
    rhat_chains(&draws.coordinate(coordinate))
}

pub fn ess<T: Scalar>(draws: &Draws<T>, coordinate: usize) -> Result<f64, ConvergenceError> {
    ess_chains(&draws.coordinate(coordinate))
}
