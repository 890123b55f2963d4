use msfpca::convergence::{ess_chains, rhat_chains};
use msfpca::sampler::{run, ChainConfig, LogDensity, Trajectory};

struct Gaussian {
    /// Precision matrix, row-major.
    precision: Vec<Vec<f64>>,
}

impl LogDensity<f64> for Gaussian {
    fn dim(&self) -> usize {
        self.precision.len()
    }

    fn logp_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let px: Vec<f64> = self.precision.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
        for (g, v) in grad.iter_mut().zip(&px) {
            *g = -v;
        }
        -0.5 * x.iter().zip(&px).map(|(a, b)| a * b).sum::<f64>()
    }
}

fn moments(draws: &msfpca::sampler::Draws<f64>, j: usize) -> (f64, f64) {
    let v: Vec<f64> = draws.coordinate(j).concat();
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64)
}

#[test]
fn standard_normal_moments() {
    let target = Gaussian { precision: vec![vec![1.0]] };
    for trajectory in [Trajectory::Nuts { max_depth: 10 }, Trajectory::Static { n_steps: 8 }] {
        let config = ChainConfig { chains: 4, warmup: 1000, draws: 2000, seed: 2, trajectory, ..Default::default() };
        let draws = run(&config, &target).unwrap();
        let (m, v) = moments(&draws, 0);
        assert!(m.abs() <= 0.05, "{trajectory:?} mean {m}");
        assert!((0.9..=1.1).contains(&v), "{trajectory:?} variance {v}");
        assert!(rhat_chains(&draws.coordinate(0)).unwrap() < 1.01);
    }
}

#[test]
fn correlated_pair_recovers_correlation() {
    let rho: f64 = 0.9;
    let det = 1.0 - rho * rho;
    let target = Gaussian { precision: vec![vec![1.0 / det, -rho / det], vec![-rho / det, 1.0 / det]] };
    let config = ChainConfig { chains: 4, warmup: 1000, draws: 2000, seed: 5, ..Default::default() };
    let draws = run(&config, &target).unwrap();
    let (x, y) = (draws.coordinate(0).concat(), draws.coordinate(1).concat());
    let (mx, vx) = moments(&draws, 0);
    let (my, vy) = moments(&draws, 1);
    let cov = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (x.len() - 1) as f64;
    let r = cov / (vx * vy).sqrt();
    assert!((r - rho).abs() <= 0.05, "sample correlation {r}");
    assert!(ess_chains(&draws.coordinate(0)).unwrap() > 400.0);
    assert_eq!(draws.divergences(), 0);
}

#[test]
fn runs_are_reproducible() {
    let target = Gaussian { precision: vec![vec![2.0, 0.3], vec![0.3, 1.0]] };
    let config = ChainConfig { chains: 3, warmup: 200, draws: 300, seed: 77, ..Default::default() };
    let a = run(&config, &target).unwrap();
    let b = run(&config, &target).unwrap();
    assert_eq!(a, b);
    let c = run(&ChainConfig { seed: 78, ..config }, &target).unwrap();
    assert_ne!(a.values, c.values);
}
