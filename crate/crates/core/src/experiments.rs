//! Fit pipeline and the simulation-study harness.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::association::{all_pairs, posterior_association, AssociationError, AssociationKind};
use crate::convergence::{rhat_chains, ConvergenceError};
use crate::dataset::{write_csv, DatasetError, MultiBlockDataset};
use crate::io::{format_chain_stats, save_draws, DrawsIoError};
use crate::model::{ModelData, ModelError, ModelSpec, ParamLayout, Posterior};
use crate::posterior::{align_draws, align_to, rotate_draws, summarize_curves, FittedModel, Interval, PosteriorError, RotatedDraw};
use crate::sampler::{run, ChainConfig, Draws, SamplerError};
use crate::simulate::{scenario_sigma, simulate_dataset, Scenario, ScenarioSpec, ScenarioTruth, SimulateError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Posterior(#[from] PosteriorError),
    #[error(transparent)]
    Association(#[from] AssociationError),
    #[error(transparent)]
    Convergence(#[from] ConvergenceError),
    #[error(transparent)]
    Simulate(#[from] SimulateError),
    #[error(transparent)]
    DrawsIo(#[from] DrawsIoError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("need at least one replicate")]
    NoReplicates,
}

/// Standardizes a raw dataset; already standardized data is returned as is.
pub fn prepare_dataset(data: &MultiBlockDataset) -> Result<MultiBlockDataset, DatasetError> {
    if data.standardization().is_some() {
        Ok(data.clone())
    } else {
        data.standardize_and_rescale()
    }
}

/// Output of one model fit on a standardized dataset.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub dataset: MultiBlockDataset,
    pub layout: ParamLayout,
    pub draws: Draws<f64>,
    pub fitted: FittedModel<f64>,
    /// Largest split-R̂ over score covariance entries and residual scales;
    /// `NaN` with fewer than 2 chains or 4 draws.
    pub max_rhat: f64,
    /// Largest split-R̂ over mean-curve coefficients. Reported, not used to
    /// flag replicates: these mix slowly along the mean/score-average ridge.
    pub mean_rhat: f64,
}

fn max_rhat_of(
    draws: &[RotatedDraw<f64>],
    n_chains: usize,
    n_draws: usize,
    extractors: &[Box<dyn Fn(&RotatedDraw<f64>) -> f64 + Sync + '_>],
) -> Result<f64, ConvergenceError> {
    let values: Vec<f64> = extractors
        .par_iter()
        .map(|f| {
            let chains: Vec<Vec<f64>> =
                (0..n_chains).map(|c| draws[c * n_draws..(c + 1) * n_draws].iter().map(|d| f(d)).collect()).collect();
            rhat_chains(&chains)
        })
        .collect::<Result<_, _>>()?;
    Ok(values.into_iter().fold(1.0, f64::max))
}

/// Largest split-R̂ over the rotated score covariance entries (structural
/// zeros skipped) and residual scales: the quantities convergence is judged on.
pub fn covariance_rhat(draws: &[RotatedDraw<f64>], n_chains: usize, n_draws: usize) -> Result<f64, ConvergenceError> {
    let first = &draws[0];
    let k = first.score_cov.sigma.rows();
    let mut extractors: Vec<Box<dyn Fn(&RotatedDraw<f64>) -> f64 + Sync>> = Vec::new();
    for i in 0..k {
        for j in 0..=i {
            if i == j || first.score_cov.sigma[(i, j)] != 0.0 {
                extractors.push(Box::new(move |d| d.score_cov.sigma[(i, j)]));
            }
        }
    }
    for j in 0..first.sigma_eps.len() {
        extractors.push(Box::new(move |d| d.sigma_eps[j]));
    }
    max_rhat_of(draws, n_chains, n_draws, &extractors)
}

/// Largest split-R̂ over the mean-curve coefficients.
pub fn mean_rhat(draws: &[RotatedDraw<f64>], n_chains: usize, n_draws: usize) -> Result<f64, ConvergenceError> {
    let extractors: Vec<Box<dyn Fn(&RotatedDraw<f64>) -> f64 + Sync>> = (0..draws[0].theta_mu.len())
        .map(|j| Box::new(move |d: &RotatedDraw<f64>| d.theta_mu[j]) as Box<dyn Fn(&RotatedDraw<f64>) -> f64 + Sync>)
        .collect();
    max_rhat_of(draws, n_chains, n_draws, &extractors)
}

/// Rotation, alignment and summaries for draws of a standardized dataset.
pub fn analyze(
    dataset: MultiBlockDataset,
    spec: &ModelSpec<f64>,
    draws: Draws<f64>,
    grid: &[f64],
) -> Result<FitResult, ExperimentError> {
    let layout = ParamLayout::new(spec, dataset.n_subjects());
    let mut rotated = rotate_draws(spec, &layout, &draws)?;
    align_draws(&mut rotated);
    let (max_rhat, mean_rhat) = if draws.n_chains >= 2 && draws.n_draws >= 4 {
        (covariance_rhat(&rotated, draws.n_chains, draws.n_draws)?, mean_rhat(&rotated, draws.n_chains, draws.n_draws)?)
    } else {
        (f64::NAN, f64::NAN)
    };
    let fitted = summarize_curves(rotated, spec, grid)?;
    Ok(FitResult { dataset, layout, draws, fitted, max_rhat, mean_rhat })
}

/// Standardizes `data`, samples the posterior and summarizes it on `grid`.
pub fn fit(
    data: &MultiBlockDataset,
    spec: &ModelSpec<f64>,
    chain: &ChainConfig,
    grid: &[f64],
) -> Result<FitResult, ExperimentError> {
    let dataset = prepare_dataset(data)?;
    let model_data = ModelData::new(&dataset, spec)?;
    let posterior = Posterior::new(spec, &model_data);
    let draws = run(chain, &posterior)?;
    analyze(dataset, spec, draws, grid)
}

/// Report grid of `n` equally spaced points on `[0, 1]`.
pub fn report_grid(n: usize) -> Vec<f64> {
    crate::basis::uniform_grid(n)
}

fn relative_l2(estimate: &[f64], truth: &[f64]) -> f64 {
    let norm: f64 = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: f64 = estimate.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    diff / norm
}

/// Relative L2 errors of posterior-median curves against the truth, per block.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRecovery {
    pub mean_error: Vec<f64>,
    /// `fpc_error[p][k]`, minimized over the sign of the estimate.
    pub fpc_error: Vec<Vec<f64>>,
}

/// Compares the fitted curves of a simulated dataset with its generating truth.
/// Mean curves are compared on the original value scale; FPC curves are
/// scale-free.
pub fn curve_recovery(fit: &FitResult, spec: &ModelSpec<f64>, truth: &ScenarioTruth) -> Result<CurveRecovery, ExperimentError> {
    let grid = &fit.fitted.grid;
    let scales = fit.dataset.standardization().expect("fits use standardized data");
    let times: Vec<f64> = grid.iter().map(|&t| fit.dataset.original_time(t)).collect();
    let mut mean_error = Vec::new();
    let mut fpc_error = Vec::new();
    for (p, block) in spec.blocks().iter().enumerate() {
        let basis = &block.basis;
        let true_mean = basis.curve(&truth.theta_mu[p], &times).map_err(ModelError::from)?;
        let est: Vec<f64> = fit.fitted.mean_curves[p].medians().iter().map(|v| scales[p].mean + scales[p].sd * v).collect();
        mean_error.push(relative_l2(&est, &true_mean));
        let mut errs = Vec::new();
        for (k, band) in fit.fitted.fpc_curves[p].iter().enumerate() {
            let true_fpc = basis.curve(&truth.loadings[p].column(k), &times).map_err(ModelError::from)?;
            let est = band.medians();
            let neg: Vec<f64> = est.iter().map(|v| -v).collect();
            errs.push(relative_l2(&est, &true_fpc).min(relative_l2(&neg, &true_fpc)));
        }
        fpc_error.push(errs);
    }
    Ok(CurveRecovery { mean_error, fpc_error })
}

/// Averages of per-replicate curve errors.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRecoveryReport {
    pub n_replicates: usize,
    pub mean_error: Vec<f64>,
    pub fpc_error: Vec<Vec<f64>>,
}

pub fn recovery_report(fits: &[CurveRecovery]) -> Option<CurveRecoveryReport> {
    let first = fits.first()?;
    let n = fits.len() as f64;
    let mean_error = (0..first.mean_error.len()).map(|p| fits.iter().map(|f| f.mean_error[p]).sum::<f64>() / n).collect();
    let fpc_error = first
        .fpc_error
        .iter()
        .enumerate()
        .map(|(p, ks)| (0..ks.len()).map(|k| fits.iter().map(|f| f.fpc_error[p][k]).sum::<f64>() / n).collect())
        .collect();
    Some(CurveRecoveryReport { n_replicates: fits.len(), mean_error, fpc_error })
}

/// One quantity of one replicate: truth and posterior interval.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantityInterval {
    pub quantity: String,
    pub index: String,
    pub truth: f64,
    pub interval: Interval,
}

impl QuantityInterval {
    pub fn covered(&self) -> bool {
        self.interval.contains(self.truth)
    }
}

/// Intervals for the score covariance (original scale, structural zeros
/// skipped) and normalized MI/CMI of one fit, with loadings signed like the truth.
pub fn replicate_intervals(fit: &FitResult, spec: &ModelSpec<f64>, truth: &ScenarioTruth) -> Result<Vec<QuantityInterval>, ExperimentError> {
    let mut draws = fit.fitted.draws.clone();
    align_to(&mut draws, &truth.loadings);
    let structure = spec.structure();
    let scales = fit.dataset.standardization().expect("fits use standardized data");
    let k = structure.total();
    let mut out = Vec::new();
    for i in 0..k {
        for j in 0..=i {
            let (bi, bj) = (structure.block_of(i), structure.block_of(j));
            if i != j && bi == bj {
                continue;
            }
            let factor = scales[bi].sd * scales[bj].sd;
            let values: Vec<f64> = draws.iter().map(|d| d.score_cov.sigma[(i, j)] * factor).collect();
            out.push(QuantityInterval {
                quantity: "sigma".into(),
                index: format!("{}-{}", i + 1, j + 1),
                truth: truth.score_cov.sigma[(i, j)],
                interval: Interval::from_samples(values),
            });
        }
    }
    let pairs = all_pairs(structure.n_blocks());
    for (kind, label, truths) in
        [(AssociationKind::Marginal, "mi", &truth.mi), (AssociationKind::Conditional, "cmi", &truth.cmi)]
    {
        for (est, &(pair, t)) in posterior_association(&draws, structure, &pairs, kind)?.into_iter().zip(truths.iter()) {
            out.push(QuantityInterval {
                quantity: label.into(),
                index: format!("{}-{}", pair.0 + 1, pair.1 + 1),
                truth: t,
                interval: est.summary,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReplicateStatus {
    Ok,
    /// Some identified quantity had split-R̂ above the threshold.
    NotConverged(f64),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateOutcome {
    pub index: usize,
    pub status: ReplicateStatus,
    pub max_rhat: f64,
    pub intervals: Vec<QuantityInterval>,
    pub recovery: Option<CurveRecovery>,
}

impl ReplicateOutcome {
    pub fn is_ok(&self) -> bool {
        self.status == ReplicateStatus::Ok
    }

    pub fn median_of(&self, quantity: &str, index: &str) -> Option<f64> {
        self.intervals.iter().find(|q| q.quantity == quantity && q.index == index).map(|q| q.interval.median)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageConfig {
    pub scenario: Scenario,
    pub replicates: usize,
    pub master_seed: u64,
    /// Template for the simulated datasets; scenario and seed are overwritten.
    pub simulation: ScenarioSpec,
    pub per_block_sigma: bool,
    /// Optional normal prior sd on the covariance coordinates (flat when `None`).
    pub cov_prior_sd: Option<f64>,
    pub chain: ChainConfig,
    pub grid_size: usize,
    pub rhat_threshold: f64,
    /// Where per-replicate artifacts go (`<dir>/<scenario>/<rep>/`).
    pub out_dir: Option<PathBuf>,
}

impl CoverageConfig {
    pub fn new(scenario: Scenario, replicates: usize, master_seed: u64) -> Self {
        Self {
            scenario,
            replicates,
            master_seed,
            simulation: ScenarioSpec::new(scenario, 0),
            per_block_sigma: false,
            cov_prior_sd: None,
            chain: ChainConfig { chains: 2, warmup: 500, draws: 500, ..Default::default() },
            grid_size: 101,
            rhat_threshold: 1.05,
            out_dir: None,
        }
    }

    /// Text that identifies the configuration in persisted artifacts.
    fn fingerprint(&self) -> String {
        let prior = self.cov_prior_sd.map(|sd| format!(" cov_prior_sd={sd}")).unwrap_or_default();
        format!(
            "scenario={} seed={} n={} t={} rate={} k={:?} q={:?} shared={} per_block_sigma={} chains={} warmup={} draws={} target={} traj={:?} grid={}{}",
            self.scenario,
            self.master_seed,
            self.simulation.n_subjects,
            self.simulation.n_timepoints,
            self.simulation.mean_rate,
            self.simulation.n_components,
            self.simulation.n_basis,
            self.simulation.shared_counts,
            self.per_block_sigma,
            self.chain.chains,
            self.chain.warmup,
            self.chain.draws,
            self.chain.target_accept,
            self.chain.trajectory,
            self.grid_size,
            prior
        )
    }

    fn model_spec(&self) -> Result<ModelSpec<f64>, ModelError> {
        let dims: Vec<(usize, usize)> =
            self.simulation.n_components.iter().copied().zip(self.simulation.n_basis.iter().copied()).collect();
        ModelSpec::uniform(&dims)?.with_per_block_sigma(self.per_block_sigma).with_cov_prior_sd(self.cov_prior_sd)
    }
}

/// Seed of stream `stream` derived from `master`; independent of evaluation order.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Simulated dataset and fitted model of one replicate.
pub fn run_replicate(config: &CoverageConfig, index: usize) -> Result<(ScenarioTruth, MultiBlockDataset, FitResult), ExperimentError> {
    let truth = scenario_sigma(config.scenario);
    let sim = ScenarioSpec {
        scenario: config.scenario,
        seed: derive_seed(config.master_seed, 2 * index as u64),
        ..config.simulation.clone()
    };
    let raw = simulate_dataset(&sim, &truth)?;
    let spec = config.model_spec()?;
    let chain = ChainConfig { seed: derive_seed(config.master_seed, 2 * index as u64 + 1), ..config.chain.clone() };
    let result = fit(&raw, &spec, &chain, &report_grid(config.grid_size))?;
    Ok((truth, raw, result))
}

fn replicate_dir(config: &CoverageConfig, index: usize) -> Option<PathBuf> {
    config.out_dir.as_ref().map(|d| d.join(config.scenario.to_string()).join(format!("{:03}", index + 1)))
}

fn outcome_for(config: &CoverageConfig, index: usize) -> ReplicateOutcome {
    let result = run_replicate(config, index).and_then(|(truth, raw, fit)| {
        let spec = config.model_spec()?;
        let intervals = replicate_intervals(&fit, &spec, &truth)?;
        let recovery = curve_recovery(&fit, &spec, &truth)?;
        let status = if fit.max_rhat.is_nan() || fit.max_rhat > config.rhat_threshold {
            ReplicateStatus::NotConverged(fit.max_rhat)
        } else {
            ReplicateStatus::Ok
        };
        let outcome = ReplicateOutcome { index, status, max_rhat: fit.max_rhat, intervals, recovery: Some(recovery) };
        if let Some(dir) = replicate_dir(config, index) {
            persist_replicate(&dir, config, &raw, &fit, &outcome)?;
        }
        Ok(outcome)
    });
    result.unwrap_or_else(|e: ExperimentError| ReplicateOutcome {
        index,
        status: ReplicateStatus::Failed(e.to_string()),
        max_rhat: f64::NAN,
        intervals: Vec::new(),
        recovery: None,
    })
}

fn persist_replicate(
    dir: &Path,
    config: &CoverageConfig,
    raw: &MultiBlockDataset,
    fit: &FitResult,
    outcome: &ReplicateOutcome,
) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir)?;
    write_csv(fs::File::create(dir.join("data.csv"))?, &raw.to_records())?;
    save_draws(dir.join("draws.bin"), &fit.draws, &fit.layout.describe())?;
    fs::write(dir.join("draws_meta.txt"), format_chain_stats(&fit.draws.stats))?;
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record(["quantity", "index", "truth", "median", "lo", "hi", "covered"])?;
    for q in &outcome.intervals {
        w.write_record([
            q.quantity.clone(),
            q.index.clone(),
            q.truth.to_string(),
            q.interval.median.to_string(),
            q.interval.lo.to_string(),
            q.interval.hi.to_string(),
            q.covered().to_string(),
        ])?;
    }
    w.flush()?;
    let status = match &outcome.status {
        ReplicateStatus::Ok => "ok".to_string(),
        ReplicateStatus::NotConverged(r) => format!("not_converged {r}"),
        ReplicateStatus::Failed(e) => format!("failed {e}"),
    };
    let rec = outcome.recovery.as_ref().map(|r| format!("mean_error {:?}\nfpc_error {:?}\n", r.mean_error, r.fpc_error));
    fs::write(
        dir.join("status.txt"),
        format!("{}\nstatus {}\nmax_rhat {}\n{}", config.fingerprint(), status, outcome.max_rhat, rec.unwrap_or_default()),
    )?;
    Ok(())
}

/// Reloads a replicate persisted under the same configuration.
fn load_replicate(config: &CoverageConfig, index: usize) -> Option<ReplicateOutcome> {
    let dir = replicate_dir(config, index)?;
    let status_text = fs::read_to_string(dir.join("status.txt")).ok()?;
    let mut lines = status_text.lines();
    if lines.next()? != config.fingerprint() {
        return None;
    }
    let mut status = None;
    let mut max_rhat = f64::NAN;
    let mut mean_error = None;
    let mut fpc_error = None;
    for line in lines {
        let (key, rest) = line.split_once(' ')?;
        match key {
            "status" => {
                status = Some(match rest.split_once(' ') {
                    None if rest == "ok" => ReplicateStatus::Ok,
                    Some(("not_converged", r)) => ReplicateStatus::NotConverged(r.parse().ok()?),
                    Some(("failed", e)) => ReplicateStatus::Failed(e.to_string()),
                    _ => return None,
                })
            }
            "max_rhat" => max_rhat = rest.parse().ok()?,
            "mean_error" => mean_error = Some(parse_list(rest)?),
            "fpc_error" => {
                let inner = rest.trim().strip_prefix('[')?.strip_suffix(']')?;
                fpc_error = Some(
                    inner
                        .split("], ")
                        .filter(|s| !s.is_empty())
                        .map(|s| parse_list(&format!("{}]", s.trim_end_matches(']'))))
                        .collect::<Option<Vec<_>>>()?,
                )
            }
            _ => {}
        }
    }
    let mut intervals = Vec::new();
    if let Ok(mut r) = csv::Reader::from_path(dir.join("summary.csv")) {
        for rec in r.records() {
            let rec = rec.ok()?;
            let f = |i: usize| rec.get(i).and_then(|v| v.parse::<f64>().ok());
            intervals.push(QuantityInterval {
                quantity: rec.get(0)?.to_string(),
                index: rec.get(1)?.to_string(),
                truth: f(2)?,
                interval: Interval { median: f(3)?, lo: f(4)?, hi: f(5)? },
            });
        }
    }
    let recovery = match (mean_error, fpc_error) {
        (Some(mean_error), Some(fpc_error)) => Some(CurveRecovery { mean_error, fpc_error }),
        _ => None,
    };
    Some(ReplicateOutcome { index, status: status?, max_rhat, intervals, recovery })
}

fn parse_list(s: &str) -> Option<Vec<f64>> {
    let inner = s.trim().strip_prefix('[')?.strip_suffix(']')?;
    if inner.trim().is_empty() {
        return Some(Vec::new());
    }
    inner.split(',').map(|v| v.trim().parse().ok()).collect()
}

/// Coverage of one quantity across successful replicates.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageRow {
    pub quantity: String,
    pub index: String,
    pub truth: f64,
    /// `None` marks a zero-truth association whose interval cannot contain 0.
    pub coverage: Option<f64>,
    pub mean_median: f64,
    pub mean_lo: f64,
    pub mean_hi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    pub scenario: Scenario,
    pub replicates: Vec<ReplicateOutcome>,
    pub rows: Vec<CoverageRow>,
    pub curve_recovery: Option<CurveRecoveryReport>,
}

impl CoverageReport {
    pub fn successful(&self) -> impl Iterator<Item = &ReplicateOutcome> {
        self.replicates.iter().filter(|r| r.is_ok())
    }

    pub fn n_successful(&self) -> usize {
        self.successful().count()
    }

    pub fn n_failed(&self) -> usize {
        self.replicates.len() - self.n_successful()
    }

    /// Average coverage over the covariance parameters.
    pub fn mean_covariance_coverage(&self) -> Option<f64> {
        let c: Vec<f64> = self.rows.iter().filter(|r| r.quantity == "sigma").filter_map(|r| r.coverage).collect();
        (!c.is_empty()).then(|| c.iter().sum::<f64>() / c.len() as f64)
    }

    pub fn row(&self, quantity: &str, index: &str) -> Option<&CoverageRow> {
        self.rows.iter().find(|r| r.quantity == quantity && r.index == index)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["quantity", "index", "truth", "coverage", "mean_median", "mean_lo", "mean_hi"])?;
        for r in &self.rows {
            w.write_record([
                r.quantity.clone(),
                r.index.clone(),
                r.truth.to_string(),
                r.coverage.map_or_else(|| "0*".to_string(), |c| c.to_string()),
                r.mean_median.to_string(),
                r.mean_lo.to_string(),
                r.mean_hi.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn text_summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenario {}", self.scenario);
        let _ = writeln!(
            s,
            "replicates {} (successful {}, excluded {})",
            self.replicates.len(),
            self.n_successful(),
            self.n_failed()
        );
        for r in self.replicates.iter().filter(|r| !r.is_ok()) {
            let _ = writeln!(s, "  replicate {}: {:?}", r.index + 1, r.status);
        }
        if let Some(c) = self.mean_covariance_coverage() {
            let _ = writeln!(s, "mean covariance coverage {c:.3}");
        }
        let _ = writeln!(s, "{:<6} {:<6} {:>8} {:>9} {:>8} {:>8} {:>8}", "qty", "index", "truth", "coverage", "median", "lo", "hi");
        for r in &self.rows {
            let cov = r.coverage.map_or_else(|| "0*".to_string(), |c| format!("{c:.3}"));
            let _ = writeln!(
                s,
                "{:<6} {:<6} {:>8.3} {:>9} {:>8.3} {:>8.3} {:>8.3}",
                r.quantity, r.index, r.truth, cov, r.mean_median, r.mean_lo, r.mean_hi
            );
        }
        if let Some(rec) = &self.curve_recovery {
            let _ = writeln!(s, "curve recovery over {} replicates", rec.n_replicates);
            for (p, (m, f)) in rec.mean_error.iter().zip(&rec.fpc_error).enumerate() {
                let fs: Vec<String> = f.iter().map(|v| format!("{v:.3}")).collect();
                let _ = writeln!(s, "  block {}: mean {:.3}, fpc [{}]", p + 1, m, fs.join(", "));
            }
        }
        s
    }
}

/// Aggregates replicate outcomes (successful ones only) into a report.
pub fn assemble_report(scenario: Scenario, replicates: Vec<ReplicateOutcome>) -> CoverageReport {
    let ok: Vec<&ReplicateOutcome> = replicates.iter().filter(|r| r.is_ok()).collect();
    let mut rows = Vec::new();
    if let Some(first) = ok.first() {
        for (j, q) in first.intervals.iter().enumerate() {
            let n = ok.len() as f64;
            let ivs: Vec<&QuantityInterval> = ok.iter().filter_map(|r| r.intervals.get(j)).collect();
            let zero_association = q.quantity != "sigma" && q.truth.abs() < 1e-12;
            let coverage = (!zero_association).then(|| ivs.iter().filter(|v| v.covered()).count() as f64 / n);
            rows.push(CoverageRow {
                quantity: q.quantity.clone(),
                index: q.index.clone(),
                truth: q.truth,
                coverage,
                mean_median: ivs.iter().map(|v| v.interval.median).sum::<f64>() / n,
                mean_lo: ivs.iter().map(|v| v.interval.lo).sum::<f64>() / n,
                mean_hi: ivs.iter().map(|v| v.interval.hi).sum::<f64>() / n,
            });
        }
    }
    let recoveries: Vec<CurveRecovery> = ok.iter().filter_map(|r| r.recovery.clone()).collect();
    CoverageReport { scenario, curve_recovery: recovery_report(&recoveries), rows, replicates }
}

/// Simulates and fits `config.replicates` datasets and reports coverage.
///
/// Replicates run on the current rayon pool; each has its own derived seeds,
/// so the report does not depend on the degree of parallelism. Replicates
/// already persisted under the same configuration are reloaded, not refitted.
pub fn coverage_study(config: &CoverageConfig) -> Result<CoverageReport, ExperimentError> {
    if config.replicates == 0 {
        return Err(ExperimentError::NoReplicates);
    }
    let outcomes: Vec<ReplicateOutcome> = (0..config.replicates)
        .into_par_iter()
        .map(|i| load_replicate(config, i).unwrap_or_else(|| outcome_for(config, i)))
        .collect();
    Ok(assemble_report(config.scenario, outcomes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn interval(m: f64) -> Interval {
        Interval { median: m, lo: m - 0.1, hi: m + 0.1 }
    }

    fn outcome(index: usize, ok: bool, shift: f64) -> ReplicateOutcome {
        ReplicateOutcome {
            index,
            status: if ok { ReplicateStatus::Ok } else { ReplicateStatus::NotConverged(1.2) },
            max_rhat: 1.0,
            intervals: vec![
                QuantityInterval { quantity: "sigma".into(), index: "1-1".into(), truth: 4.0, interval: interval(4.0 + shift) },
                QuantityInterval { quantity: "mi".into(), index: "1-2".into(), truth: 0.0, interval: interval(0.2) },
            ],
            recovery: Some(CurveRecovery { mean_error: vec![0.1], fpc_error: vec![vec![0.2]] }),
        }
    }

    #[test]
    fn coverage_counts_successful_replicates_only() {
        let report = assemble_report(
            Scenario::I,
            vec![outcome(0, true, 0.0), outcome(1, true, 0.5), outcome(2, false, 0.0), outcome(3, true, 0.05)],
        );
        assert_eq!(report.n_successful(), 3);
        assert_eq!(report.n_failed(), 1);
        let row = report.row("sigma", "1-1").unwrap();
        assert!((row.coverage.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(report.row("mi", "1-2").unwrap().coverage, None);
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains(",0*,"));
        assert!(report.text_summary().contains("excluded 1"));
    }

    #[test]
    fn derived_seeds_are_distinct_and_stable() {
        let a: Vec<u64> = (0..10).map(|i| derive_seed(7, i)).collect();
        let b: Vec<u64> = (0..10).map(|i| derive_seed(7, i)).collect();
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 10);
    }

    #[test]
    fn relative_error_and_list_parsing() {
        assert_eq!(relative_l2(&[1.0, 1.0], &[1.0, 1.0]), 0.0);
        assert!((relative_l2(&[0.0, 0.0], &[3.0, 4.0]) - 1.0).abs() < 1e-15);
        assert_eq!(parse_list("[0.5, 1.25]"), Some(vec![0.5, 1.25]));
    }
}
