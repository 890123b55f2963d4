//! Synthetic multi-block datasets with known score covariance.
//!
//! Four covariance scenarios over the `K = (2, 2, 1)` score layout:
//! I all scores independent; II one strong cross-block correlation (0.75);
//! III adds a medium one (0.5); IV adds a weak one (0.25).

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use thiserror::Error;

use crate::association::{all_pairs, normalized, AssociationKind};
use crate::basis::{uniform_grid, OrthonormalBasis};
use crate::covariance::{BlockStructure, ScoreCovariance};
use crate::dataset::{MultiBlockDataset, Series};
use crate::linalg::{psd_factor, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulateError {
    #[error("unknown scenario {0:?} (expected I, II, III or IV)")]
    UnknownScenario(String),
    #[error("invalid simulation spec: {0}")]
    InvalidSpec(String),
    #[error("csv output failed: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scenario {
    I,
    II,
    III,
    IV,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::I, Scenario::II, Scenario::III, Scenario::IV];
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::I => "I",
            Scenario::II => "II",
            Scenario::III => "III",
            Scenario::IV => "IV",
        })
    }
}

impl FromStr for Scenario {
    type Err = SimulateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(Scenario::I),
            "II" | "2" => Ok(Scenario::II),
            "III" | "3" => Ok(Scenario::III),
            "IV" | "4" => Ok(Scenario::IV),
            _ => Err(SimulateError::UnknownScenario(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub n_subjects: usize,
    /// Number of equally spaced candidate times in `[0, 1]`.
    pub n_timepoints: usize,
    /// Poisson mean of the number of observations per series.
    pub mean_rate: f64,
    pub n_components: Vec<usize>,
    pub n_basis: Vec<usize>,
    pub seed: u64,
    /// Draw one observation count per subject and reuse it for every block.
    pub shared_counts: bool,
}

impl ScenarioSpec {
    pub fn new(scenario: Scenario, seed: u64) -> Self {
        Self {
            scenario,
            n_subjects: 100,
            n_timepoints: 10,
            mean_rate: 8.0,
            n_components: vec![2, 2, 1],
            n_basis: vec![6, 5, 5],
            seed,
            shared_counts: false,
        }
    }

    fn validate(&self) -> Result<(), SimulateError> {
        let bad = |m: &str| Err(SimulateError::InvalidSpec(m.into()));
        if self.n_components.len() != self.n_basis.len() || self.n_components.is_empty() {
            return bad("components and basis sizes must have the same, non-zero length");
        }
        if self.n_components.iter().zip(&self.n_basis).any(|(&k, &q)| k == 0 || k >= q) {
            return bad("need 1 <= K_p < Q_p for every block");
        }
        if self.n_timepoints < 2 || !(self.mean_rate > 0.0) || self.mean_rate > self.n_timepoints as f64 {
            return bad("need at least 2 candidate times and 0 < mean_rate <= n_timepoints");
        }
        if self.n_subjects == 0 {
            return bad("need at least one subject");
        }
        Ok(())
    }
}

/// Generating parameters plus the analytic association truths.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTruth {
    pub scenario: Scenario,
    pub structure: BlockStructure,
    pub score_cov: ScoreCovariance<f64>,
    /// Mean coefficients per block, in the orthonormal basis of that block.
    pub theta_mu: Vec<Vec<f64>>,
    /// Orthonormal loadings per block (`Q_p × K_p`).
    pub loadings: Vec<Matrix<f64>>,
    pub sigma_eps: f64,
    /// Normalized marginal MI for each block pair `(p1, p2)`, `p1 < p2`.
    pub mi: Vec<((usize, usize), f64)>,
    /// Normalized conditional MI, same pair order.
    pub cmi: Vec<((usize, usize), f64)>,
}

/// Score standard deviations, descending within block.
pub const SCENARIO_SD: [f64; 5] = [2.0, 1.0, 2.0, 1.0, 1.5];
pub const DEFAULT_SIGMA_EPS: f64 = 0.5;

/// Correlation entries `(i, j, r)` for each scenario, indices into the
/// stacked score vector `(b1 pc1, b1 pc2, b2 pc1, b2 pc2, b3 pc1)`.
pub fn scenario_correlations(scenario: Scenario) -> Vec<(usize, usize, f64)> {
    let mut c = Vec::new();
    if scenario != Scenario::I {
        c.push((2, 4, 0.75));
    }
    if matches!(scenario, Scenario::III | Scenario::IV) {
        c.push((0, 2, 0.5));
    }
    if scenario == Scenario::IV {
        c.push((1, 4, 0.25));
    }
    c
}

/// Scenario covariance and truths using the default `K = (2, 2, 1)`,
/// `Q = (6, 5, 5)` generating parameters.
pub fn scenario_sigma(scenario: Scenario) -> ScenarioTruth {
    let structure = BlockStructure::new(vec![2, 2, 1]).expect("non-empty blocks");
    let mut corr = Matrix::identity(5);
    for (i, j, r) in scenario_correlations(scenario) {
        corr[(i, j)] = r;
        corr[(j, i)] = r;
    }
    let score_cov = ScoreCovariance::from_parts(SCENARIO_SD.to_vec(), corr);
    let (theta_mu, loadings, sigma_eps) = default_truth_parameters(structure.sizes(), &[6, 5, 5]);
    let truths = |kind| {
        all_pairs(3)
            .into_iter()
            .map(|(a, b)| ((a, b), normalized(kind, &score_cov.corr, &structure, a, b).expect("scenario R is PD")))
            .collect()
    };
    ScenarioTruth {
        scenario,
        mi: truths(AssociationKind::Marginal),
        cmi: truths(AssociationKind::Conditional),
        structure,
        score_cov,
        theta_mu,
        loadings,
        sigma_eps,
    }
}

/// Deterministic generating parameters for any `(K_p, Q_p)` layout.
///
/// Mean curves are the basis projections of `±2.2 + 0.75 sin(1.5π t + p)`
/// for block `p` (sign alternating with `p`); loadings are orthonormalized Gaussian matrices
/// drawn from a fixed per-block seed.
pub fn default_truth_parameters(n_components: &[usize], n_basis: &[usize]) -> (Vec<Vec<f64>>, Vec<Matrix<f64>>, f64) {
    let grid: Vec<f64> = uniform_grid(crate::basis::DEFAULT_GRID_SIZE);
    let theta_mu = n_basis
        .iter()
        .enumerate()
        .map(|(p, &q)| {
            // Least-squares projection of an offset sine onto the orthonormal basis.
            let offset = if p % 2 == 0 { 2.2 } else { -2.2 };
            let basis = OrthonormalBasis::<f64>::uniform(q).expect("valid basis size");
            let target: Vec<f64> = grid.iter().map(|&t| offset + 0.75 * (1.5 * std::f64::consts::PI * t + p as f64).sin()).collect();
            let evals = basis.evaluate(&grid).expect("grid in [0, 1]");
            evals.tr_matvec(&target).into_iter().map(|v| v / grid.len() as f64).collect()
        })
        .collect();
    let loadings = n_components
        .iter()
        .zip(n_basis)
        .enumerate()
        .map(|(p, (&k, &q))| {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + p as u64);
            let raw = Matrix::from_fn(q, k, |_, _| StandardNormal.sample(&mut rng));
            let (qm, _) = raw.thin_qr().expect("Gaussian matrix has full rank");
            qm
        })
        .collect();
    (theta_mu, loadings, DEFAULT_SIGMA_EPS)
}

/// Block names used by simulated datasets.
pub fn block_names(n: usize) -> Vec<String> {
    (1..=n).map(|p| format!("b{p}")).collect()
}

/// Draws one dataset. Values are on the generating scale and times already on
/// the `[0, 1]` clock.
pub fn simulate_dataset(spec: &ScenarioSpec, truth: &ScenarioTruth) -> Result<MultiBlockDataset, SimulateError> {
    spec.validate()?;
    let n_blocks = spec.n_components.len();
    if truth.structure.sizes() != spec.n_components.as_slice()
        || truth.loadings.iter().map(Matrix::rows).ne(spec.n_basis.iter().copied())
    {
        return Err(SimulateError::InvalidSpec("truth does not match the simulated K/Q layout".into()));
    }
    let bases: Vec<OrthonormalBasis<f64>> = spec
        .n_basis
        .iter()
        .map(|&q| OrthonormalBasis::uniform(q).map_err(|e| SimulateError::InvalidSpec(e.to_string())))
        .collect::<Result<_, _>>()?;
    let candidates: Vec<f64> = uniform_grid(spec.n_timepoints);
    // Curves at every candidate time: mean per block and loadings per block.
    let designs: Vec<Matrix<f64>> = bases.iter().map(|b| b.evaluate(&candidates).expect("grid in [0, 1]")).collect();
    let means: Vec<Vec<f64>> = designs.iter().zip(&truth.theta_mu).map(|(d, t)| d.matvec(t)).collect();
    let fpcs: Vec<Matrix<f64>> = designs.iter().zip(&truth.loadings).map(|(d, l)| d.matmul(l)).collect();
    let root = psd_factor(&truth.score_cov.sigma);
    let k = truth.structure.total();

    let poisson = Poisson::new(spec.mean_rate).map_err(|e| SimulateError::InvalidSpec(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let count = |rng: &mut ChaCha8Rng| (poisson.sample(rng) as usize).clamp(2, spec.n_timepoints);
    let width = spec.n_subjects.to_string().len().max(3);
    let mut subjects = Vec::with_capacity(spec.n_subjects);
    let mut series = Vec::with_capacity(spec.n_subjects);
    for i in 0..spec.n_subjects {
        subjects.push(format!("s{:0width$}", i + 1));
        let z: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
        let alpha = root.matvec(&z);
        let shared = spec.shared_counts.then(|| count(&mut rng));
        let mut row = Vec::with_capacity(n_blocks);
        for p in 0..n_blocks {
            let n_obs = shared.unwrap_or_else(|| count(&mut rng));
            let mut idx = sample(&mut rng, spec.n_timepoints, n_obs).into_vec();
            idx.sort_unstable();
            let kr = truth.structure.range(p);
            let values = idx
                .iter()
                .map(|&t| {
                    let signal: f64 = kr.clone().enumerate().map(|(c, j)| fpcs[p][(t, c)] * alpha[j]).sum();
                    let e: f64 = StandardNormal.sample(&mut rng);
                    means[p][t] + signal + truth.sigma_eps * e
                })
                .collect();
            row.push(Series { times: idx.iter().map(|&t| candidates[t]).collect(), values });
        }
        series.push(row);
    }
    Ok(MultiBlockDataset::from_rescaled_series(block_names(n_blocks), subjects, series, (0.0, 1.0)))
}

/// Writes `quantity,index,value` rows: covariance entries (lower triangle),
/// then normalized MI and CMI truths per block pair (1-based labels).
pub fn write_truth_csv<W: Write>(truth: &ScenarioTruth, out: W) -> Result<(), SimulateError> {
    let io = |e: csv::Error| SimulateError::Io(e.to_string());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["quantity", "index", "value"]).map_err(io)?;
    let k = truth.structure.total();
    for i in 0..k {
        for j in 0..=i {
            w.write_record(["sigma".to_string(), format!("{}-{}", i + 1, j + 1), truth.score_cov.sigma[(i, j)].to_string()])
                .map_err(io)?;
        }
    }
    for (label, rows) in [("mi", &truth.mi), ("cmi", &truth.cmi)] {
        for &((a, b), v) in rows.iter() {
            w.write_record([label.to_string(), format!("{}-{}", a + 1, b + 1), v.to_string()]).map_err(io)?;
        }
    }
    w.flush().map_err(|e| SimulateError::Io(e.to_string()))
}
