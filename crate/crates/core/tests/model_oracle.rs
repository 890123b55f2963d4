//! The model density against independent dense evaluations.

use msfpca::covariance::{build_factor, FactorConfig};
use msfpca::dataset::{load_long_records, MultiBlockDataset, ObservationRecord, Series};
use msfpca::diagnostics::pointwise_loglik;
use msfpca::model::{ModelData, ModelSpec, Posterior};
use msfpca::posterior::rotate_unconstrained;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Two subjects, two blocks, three observations per series.
fn toy() -> MultiBlockDataset {
    let mut rows = Vec::new();
    let vals = [[0.3, 1.2, -0.4], [2.0, 1.1, 0.9], [-1.0, 0.2, 0.5], [0.7, -0.3, 1.8]];
    let times = [[0.0, 4.0, 9.0], [1.0, 5.0, 10.0], [2.0, 3.0, 8.0], [0.0, 6.0, 7.0]];
    for (s, subject) in ["s1", "s2"].iter().enumerate() {
        for (b, block) in ["a", "b"].iter().enumerate() {
            let idx = 2 * s + b;
            for (t, v) in times[idx].iter().zip(vals[idx]) {
                rows.push(ObservationRecord::new(*subject, *block, *t, v));
            }
        }
    }
    load_long_records(&rows).unwrap().standardize_and_rescale().unwrap()
}

/// `log p(y | x)` summed over subjects, built from full design matrices.
fn dense_log_likelihood(data: &MultiBlockDataset, spec: &ModelSpec<f64>, x: &[f64]) -> f64 {
    let post_layout = msfpca::model::ParamLayout::new(spec, data.n_subjects());
    let p = post_layout.unpack(spec, x).unwrap();
    let l = build_factor(&p.cov_raw, spec.structure(), FactorConfig::default()).unwrap().factor().clone();
    let k = spec.structure().total();
    let l = DMatrix::from_fn(k, k, |i, j| l[(i, j)]);
    let mut total = 0.0;
    for i in 0..data.n_subjects() {
        let z = DVector::from_fn(k, |j, _| p.z_scores[(i, j)]);
        let alpha = &l * z;
        for (b, block) in spec.blocks().iter().enumerate() {
            let series = data.series(i, b);
            let design = block.basis.evaluate(&series.times).unwrap();
            let bm = DMatrix::from_fn(design.rows(), design.cols(), |r, c| design[(r, c)]);
            let theta = &p.theta_raw[b];
            let th = DMatrix::from_fn(theta.rows(), theta.cols(), |r, c| theta[(r, c)]);
            let mu = DVector::from_column_slice(&p.theta_mu[spec.basis_range(b)]);
            let a = alpha.rows(spec.structure().offset(b), theta.cols()).into_owned();
            let mean = &bm * (mu + th * a);
            let sigma = p.log_sigma_eps[spec.sigma_index(b)].exp();
            let y = DVector::from_column_slice(&series.values);
            let r = y - mean;
            let n = series.values.len() as f64;
            total += -0.5 * n * LN_2PI - n * sigma.ln() - 0.5 * r.norm_squared() / (sigma * sigma);
        }
    }
    total
}

fn dense_log_prior(spec: &ModelSpec<f64>, n_subjects: usize, x: &[f64]) -> f64 {
    let lay = msfpca::model::ParamLayout::new(spec, n_subjects);
    let std_normal: Vec<f64> = x[..lay.cov_offset].iter().chain(&x[lay.z_offset..lay.sigma_offset]).copied().collect();
    let normal: f64 = std_normal.iter().map(|v| -0.5 * LN_2PI - 0.5 * v * v).sum();
    let half_cauchy: f64 = x[lay.sigma_offset..]
        .iter()
        .map(|&s| {
            let sigma = s.exp();
            (2.0 / std::f64::consts::PI).ln() - (1.0 + sigma * sigma).ln() + s
        })
        .sum();
    normal + half_cauchy
}

#[test]
fn log_posterior_matches_dense_oracle() {
    let data = toy();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for per_block in [false, true] {
        let spec = ModelSpec::<f64>::uniform(&[(2, 5), (1, 4)]).unwrap().with_per_block_sigma(per_block);
        let md = ModelData::new(&data, &spec).unwrap();
        let post = Posterior::new(&spec, &md);
        for _ in 0..25 {
            let x: Vec<f64> = (0..post.dim()).map(|_| rng.random_range(-1.5..1.5)).collect();
            let want = dense_log_likelihood(&data, &spec, &x) + dense_log_prior(&spec, 2, &x);
            let got = post.log_posterior(&x).unwrap();
            assert!((got - want).abs() <= 1e-10 * want.abs(), "{got} vs {want}");
            let ll = post.log_likelihood(&x).unwrap();
            let want_ll = dense_log_likelihood(&data, &spec, &x);
            assert!((ll - want_ll).abs() <= 1e-10 * want_ll.abs());
        }
    }
}

#[test]
fn empty_dataset_leaves_prior_terms_only() {
    let spec = ModelSpec::<f64>::uniform(&[(2, 5), (1, 4)]).unwrap();
    let data = MultiBlockDataset::from_rescaled_series(vec!["a".into(), "b".into()], Vec::new(), Vec::new(), (0.0, 1.0));
    let md = ModelData::new(&data, &spec).unwrap();
    let post = Posterior::new(&spec, &md);
    let x = vec![0.0; post.dim()];
    // θμ (9) and loadings (5·2 + 4·1) are standard normal, cov_raw is flat, σ = 1.
    let n_std = 9.0 + 14.0;
    let want = -0.5 * n_std * LN_2PI + (2.0 / std::f64::consts::PI).ln() - 2f64.ln();
    assert!((post.log_posterior(&x).unwrap() - want).abs() < 1e-12);
    assert!((dense_log_prior(&spec, 0, &x) - want).abs() < 1e-12);
}

#[test]
fn doubling_residuals_quadruples_the_scale_gradient_term() {
    let data = toy();
    let spec = ModelSpec::<f64>::uniform(&[(2, 5), (1, 4)]).unwrap();
    let md = ModelData::new(&data, &spec).unwrap();
    let post = Posterior::new(&spec, &md);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut x: Vec<f64> = (0..post.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let s_idx = post.layout().sigma_offset;
    x[s_idx] = 0.0;

    // Fitted values at x, reconstructed through the rotation-free draw.
    let draw = rotate_unconstrained(&spec, post.layout(), &x).unwrap();
    let mut series = Vec::new();
    for i in 0..data.n_subjects() {
        let mut row = Vec::new();
        for b in 0..2 {
            let s = data.series(i, b);
            let design = spec.blocks()[b].basis.evaluate(&s.times).unwrap();
            let mut beta: Vec<f64> = draw.theta_mu[spec.basis_range(b)].to_vec();
            let kr = spec.structure().range(b);
            for (q, bq) in beta.iter_mut().enumerate() {
                *bq += kr.clone().enumerate().map(|(c, j)| draw.loadings[b][(q, c)] * draw.scores[(i, j)]).sum::<f64>();
            }
            let fit = design.matvec(&beta);
            let values = s.values.iter().zip(&fit).map(|(y, f)| f + 2.0 * (y - f)).collect();
            row.push(Series { times: s.times.clone(), values });
        }
        series.push(row);
    }
    let doubled = MultiBlockDataset::from_rescaled_series(data.blocks().to_vec(), data.subjects().to_vec(), series, (0.0, 1.0));
    let md2 = ModelData::new(&doubled, &spec).unwrap();
    let post2 = Posterior::new(&spec, &md2);
    let g1 = post.gradient(&x).unwrap().gradient[s_idx];
    let g2 = post2.gradient(&x).unwrap().gradient[s_idx];
    // At σ = 1 the prior and Jacobian terms cancel, leaving Σr² − V.
    let v = data.n_observations() as f64;
    assert!(((g2 + v) - 4.0 * (g1 + v)).abs() < 1e-9 * (g1 + v).abs().max(1.0), "{g1} {g2}");
}

#[test]
fn pointwise_sums_reproduce_the_likelihood_term() {
    let data = toy();
    let spec = ModelSpec::<f64>::uniform(&[(2, 5), (1, 4)]).unwrap();
    let md = ModelData::new(&data, &spec).unwrap();
    let post = Posterior::new(&spec, &md);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let xs: Vec<Vec<f64>> = (0..20).map(|_| (0..post.dim()).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let draws: Vec<_> = xs.iter().map(|x| rotate_unconstrained(&spec, post.layout(), x).unwrap()).collect();
    let pw = pointwise_loglik(&draws, &md, &spec).unwrap();
    for (s, x) in xs.iter().enumerate() {
        let sum: f64 = pw.row(s).iter().sum();
        assert!((sum - post.log_likelihood(x).unwrap()).abs() < 1e-8);
        let direct = post.pointwise_log_likelihood(x).unwrap();
        for (a, b) in pw.row(s).iter().zip(&direct) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}

#[test]
fn zero_residual_and_empty_subjects() {
    let spec = ModelSpec::<f64>::uniform(&[(1, 4)]).unwrap();
    let times = vec![0.1, 0.5, 0.9];
    let basis = &spec.blocks()[0].basis;
    let theta_mu = [0.4, -0.2, 0.3, 0.1];
    let values = basis.curve(&theta_mu, &times).unwrap();
    let data = MultiBlockDataset::from_rescaled_series(
        vec!["a".into()],
        vec!["s1".into(), "s2".into()],
        vec![vec![Series { times, values }], vec![Series { times: Vec::new(), values: Vec::new() }]],
        (0.0, 1.0),
    );
    let md = ModelData::new(&data, &spec).unwrap();
    let post = Posterior::new(&spec, &md);
    let mut x = vec![0.0; post.dim()];
    x[..4].copy_from_slice(&theta_mu);
    // Any full-rank loadings; z = 0 keeps the scores at zero.
    let lo = post.layout().loading_offsets[0];
    x[lo..lo + 4].copy_from_slice(&[0.5, -0.5, 0.25, 1.0]);
    let draw = rotate_unconstrained(&spec, post.layout(), &x).unwrap();
    let pw = pointwise_loglik(&[draw], &md, &spec).unwrap();
    assert!((pw[(0, 0)] + 1.5 * LN_2PI).abs() < 1e-12);
    assert_eq!(pw[(0, 1)], 0.0);
}
