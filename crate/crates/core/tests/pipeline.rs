use msfpca::covariance::{BlockStructure, ScoreCovariance};
use msfpca::dataset::MultiBlockDataset;
use msfpca::diagnostics::posterior_predictive;
use msfpca::experiments::{curve_recovery, fit, report_grid};
use msfpca::linalg::Matrix;
use msfpca::model::{ModelData, ModelSpec};
use msfpca::posterior::RotatedDraw;
use msfpca::sampler::ChainConfig;
use msfpca::simulate::{default_truth_parameters, scenario_sigma, simulate_dataset, Scenario, ScenarioSpec, ScenarioTruth};
use statrs::distribution::{Discrete, Poisson};

fn one_block_truth(score_sd: f64, sigma_eps: f64) -> ScenarioTruth {
    let (theta_mu, loadings, _) = default_truth_parameters(&[1], &[5]);
    ScenarioTruth {
        scenario: Scenario::I,
        structure: BlockStructure::new(vec![1]).unwrap(),
        score_cov: ScoreCovariance::from_parts(vec![score_sd], Matrix::identity(1)),
        theta_mu,
        loadings,
        sigma_eps,
        mi: Vec::new(),
        cmi: Vec::new(),
    }
}

fn one_block_sim(n: usize, timepoints: usize, rate: f64, seed: u64) -> ScenarioSpec {
    ScenarioSpec {
        n_subjects: n,
        n_timepoints: timepoints,
        mean_rate: rate,
        n_components: vec![1],
        n_basis: vec![5],
        ..ScenarioSpec::new(Scenario::I, seed)
    }
}

#[test]
fn observed_fraction_matches_truncated_poisson() {
    // E[clamp(n, 2, 10)] / 10 for n ~ Poisson(8), summed over the pmf.
    let pois = Poisson::new(8.0).unwrap();
    let expected: f64 = (0..200u64).map(|n| pois.pmf(n) * n.clamp(2, 10) as f64).sum::<f64>() / 10.0;
    let truth = scenario_sigma(Scenario::II);
    let data = simulate_dataset(&ScenarioSpec { n_subjects: 2000, ..ScenarioSpec::new(Scenario::II, 6) }, &truth).unwrap();
    let fraction = data.n_observations() as f64 / (2000.0 * 3.0 * 10.0);
    // Per-series variance of the count is below 8, so the standard error is about 0.001.
    assert!((fraction - expected).abs() < 0.005, "{fraction} vs {expected}");
    assert!((0.7..0.85).contains(&fraction));
}

fn ppc_fixture() -> (MultiBlockDataset, ModelSpec<f64>) {
    let data = simulate_dataset(&one_block_sim(12, 10, 6.0, 3), &one_block_truth(1.0, 0.5)).unwrap();
    (data, ModelSpec::uniform(&[(1, 5)]).unwrap())
}

#[test]
fn noiseless_replicates_equal_mean_curves() {
    let (data, spec) = ppc_fixture();
    let md = ModelData::new(&data, &spec).unwrap();
    let theta_mu = vec![0.3, -1.0, 0.2, 0.5, -0.1];
    let draw = RotatedDraw {
        theta_mu: theta_mu.clone(),
        loadings: vec![Matrix::from_fn(5, 1, |i, _| if i == 1 { 1.0 } else { 0.0 })],
        score_cov: ScoreCovariance::from_parts(vec![0.0], Matrix::identity(1)),
        scores: Matrix::zeros(data.n_subjects(), 1),
        sigma_eps: vec![0.0],
    };
    let ppc = posterior_predictive(&[draw.clone(), draw], &md, &spec, 2, 1).unwrap();
    let basis = &spec.blocks()[0].basis;
    let expected: Vec<f64> =
        (0..data.n_subjects()).flat_map(|i| basis.curve(&theta_mu, &data.series(i, 0).times).unwrap()).collect();
    for rep in &ppc.replicates {
        assert_eq!(rep[0].len(), expected.len());
        for (a, b) in rep[0].iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

fn chain(seed: u64) -> ChainConfig {
    ChainConfig { chains: 2, warmup: 400, draws: 400, seed, ..Default::default() }
}

fn pooled_variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

#[test]
fn replicates_reproduce_design_and_spread() {
    let data = simulate_dataset(&one_block_sim(40, 10, 6.0, 8), &one_block_truth(1.0, 0.3)).unwrap();
    let spec = ModelSpec::uniform(&[(1, 5)]).unwrap();
    let result = fit(&data, &spec, &chain(8), &report_grid(21)).unwrap();
    let md = ModelData::new(&result.dataset, &spec).unwrap();
    let ppc = posterior_predictive(&result.fitted.draws, &md, &spec, 50, 2).unwrap();

    assert_eq!(ppc.replicates.len(), 50);
    let subjects: Vec<usize> =
        (0..result.dataset.n_subjects()).flat_map(|i| std::iter::repeat_n(i, result.dataset.series(i, 0).values.len())).collect();
    assert_eq!(ppc.subjects[0], subjects);
    assert!(ppc.replicates.iter().all(|r| r.len() == 1 && r[0].len() == subjects.len()));

    let observed = pooled_variance(&ppc.observed[0]);
    let replicated = ppc.replicates.iter().map(|r| pooled_variance(&r[0])).sum::<f64>() / 50.0;
    let ratio = replicated / observed;
    assert!((0.8..=1.25).contains(&ratio), "variance ratio {ratio}");
}

#[test]
fn noiseless_dense_fit_recovers_curves() {
    let truth = one_block_truth(1.0, 0.02);
    let data = simulate_dataset(&one_block_sim(40, 20, 20.0, 4), &truth).unwrap();
    let spec = ModelSpec::uniform(&[(1, 5)]).unwrap();
    let result = fit(&data, &spec, &chain(4), &report_grid(101)).unwrap();
    let rec = curve_recovery(&result, &spec, &truth).unwrap();
    assert!(rec.fpc_error[0][0] < 0.02, "{rec:?}");
    // The posterior mean curve tracks the sample mean, which sits about
    // score_sd / sqrt(N) off the population mean along the FPC.
    let truth_tight = one_block_truth(0.1, 0.02);
    let data = simulate_dataset(&one_block_sim(40, 20, 20.0, 4), &truth_tight).unwrap();
    let result = fit(&data, &spec, &chain(4), &report_grid(101)).unwrap();
    let rec = curve_recovery(&result, &spec, &truth_tight).unwrap();
    assert!(rec.mean_error[0] < 0.02, "{rec:?}");
}

#[test]
fn recovery_improves_with_sample_size() {
    let truth = one_block_truth(1.0, 0.5);
    let spec = ModelSpec::uniform(&[(1, 5)]).unwrap();
    let mut averages = Vec::new();
    for n in [25, 50, 100] {
        let reps = 10;
        let mut total = 0.0;
        for r in 0..reps {
            let seed = 1000 * n as u64 + r;
            let data = simulate_dataset(&one_block_sim(n, 10, 8.0, seed), &truth).unwrap();
            let result = fit(&data, &spec, &chain(seed), &report_grid(51)).unwrap();
            let rec = curve_recovery(&result, &spec, &truth).unwrap();
            total += rec.mean_error[0] + rec.fpc_error[0][0];
        }
        averages.push(total / reps as f64);
    }
    assert!(averages[0] > averages[1] && averages[1] > averages[2], "{averages:?}");
}
