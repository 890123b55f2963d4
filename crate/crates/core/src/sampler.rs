//! Hamiltonian Monte Carlo over an unconstrained density.
//!
//! The default transition is a dynamic trajectory (No-U-Turn doubling with
//! multinomial selection and the generalized turning criterion); a fixed
//! number of leapfrog steps with a Metropolis correction is the fallback.
//! Warmup adapts the step size by dual averaging and a diagonal inverse mass
//! matrix from windowed position variances: 15% step-size only, 75% windows
//! of doubling length for the metric, and a final 10% step-size polish.
//!
//! Every chain owns a ChaCha stream selected by its index, so results do not
//! depend on how chains are scheduled across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::scalar::{log_add_exp, Scalar};

/// Differentiable log density on `R^dim`.
pub trait LogDensity<T>: Sync {
    fn dim(&self) -> usize;

    /// Writes `∇ log p(x)` into `grad` and returns `log p(x)`.
    ///
    /// A non-finite return marks `x` as outside the support.
    fn logp_and_grad(&self, x: &[T], grad: &mut [T]) -> T;
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("log density is not finite at any of {0} initial points")]
    NonFiniteDensity(usize),
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
    #[error("step size search failed (step size {0})")]
    StepSize(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Trajectory {
    /// Dynamic trajectory length with at most `2^max_depth` leapfrog steps.
    Nuts { max_depth: usize },
    /// Fixed number of leapfrog steps per transition.
    Static { n_steps: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainConfig {
    pub chains: usize,
    pub warmup: usize,
    pub draws: usize,
    pub seed: u64,
    pub target_accept: f64,
    pub trajectory: Trajectory,
    /// Initial values are drawn uniformly from `(-init_radius, init_radius)`.
    pub init_radius: f64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup: 1000,
            draws: 1000,
            seed: 0,
            target_accept: 0.8,
            trajectory: Trajectory::Nuts { max_depth: 10 },
            init_radius: 2.0,
        }
    }
}

impl ChainConfig {
    fn validate(&self) -> Result<(), SamplerError> {
        if self.chains == 0 || self.draws == 0 {
            return Err(SamplerError::InvalidConfig("chains and draws must be positive".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(SamplerError::InvalidConfig(format!("target_accept {} not in (0, 1)", self.target_accept)));
        }
        match self.trajectory {
            Trajectory::Nuts { max_depth } if max_depth == 0 => {
                Err(SamplerError::InvalidConfig("max_depth must be positive".into()))
            }
            Trajectory::Static { n_steps } if n_steps == 0 => {
                Err(SamplerError::InvalidConfig("n_steps must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainStats {
    pub mean_accept: f64,
    pub divergences: usize,
    pub step_size: f64,
    pub mean_tree_depth: f64,
    pub n_leapfrog: usize,
    pub inv_mass: Vec<f64>,
}

/// Post-warmup draws stored chain-major: `values[(c * draws + s) * dim + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Draws<T> {
    pub n_chains: usize,
    pub n_draws: usize,
    pub dim: usize,
    pub values: Vec<T>,
    pub stats: Vec<ChainStats>,
}

impl<T: Scalar> Draws<T> {
    pub fn draw(&self, chain: usize, iter: usize) -> &[T] {
        let start = (chain * self.n_draws + iter) * self.dim;
        &self.values[start..start + self.dim]
    }

    /// All draws in chain order.
    pub fn iter(&self) -> impl Iterator<Item = &[T]> {
        self.values.chunks_exact(self.dim)
    }

    pub fn n_total(&self) -> usize {
        self.n_chains * self.n_draws
    }

    /// Values of one coordinate, one `Vec` per chain.
    pub fn coordinate(&self, j: usize) -> Vec<Vec<f64>> {
        (0..self.n_chains).map(|c| (0..self.n_draws).map(|s| self.draw(c, s)[j].as_f64()).collect()).collect()
    }

    pub fn divergences(&self) -> usize {
        self.stats.iter().map(|s| s.divergences).sum()
    }
}

#[derive(Clone)]
struct PhasePoint<T> {
    q: Vec<T>,
    p: Vec<T>,
    grad: Vec<T>,
    logp: T,
}

struct Integrator<'a, T, D: ?Sized> {
    density: &'a D,
    inv_mass: Vec<T>,
}

impl<T: Scalar, D: LogDensity<T> + ?Sized> Integrator<'_, T, D> {
    fn kinetic(&self, p: &[T]) -> T {
        p.iter().zip(&self.inv_mass).map(|(&pi, &m)| pi * pi * m).sum::<T>() * T::lit(0.5)
    }

    fn hamiltonian(&self, z: &PhasePoint<T>) -> T {
        let h = -z.logp + self.kinetic(&z.p);
        if h.is_nan() {
            T::infinity()
        } else {
            h
        }
    }

    fn p_sharp(&self, p: &[T]) -> Vec<T> {
        p.iter().zip(&self.inv_mass).map(|(&pi, &m)| pi * m).collect()
    }

    fn leapfrog(&self, z: &mut PhasePoint<T>, eps: T) {
        let half = eps * T::lit(0.5);
        for (p, &g) in z.p.iter_mut().zip(&z.grad) {
            *p += half * g;
        }
        for ((q, &p), &m) in z.q.iter_mut().zip(&z.p).zip(&self.inv_mass) {
            *q += eps * m * p;
        }
        z.logp = self.density.logp_and_grad(&z.q, &mut z.grad);
        if !z.logp.is_finite() {
            z.logp = T::neg_infinity();
            return;
        }
        for (p, &g) in z.p.iter_mut().zip(&z.grad) {
            *p += half * g;
        }
    }

    fn sample_momentum(&self, rng: &mut ChaCha8Rng, p: &mut [T]) {
        for (pi, &m) in p.iter_mut().zip(&self.inv_mass) {
            let n: f64 = StandardNormal.sample(rng);
            *pi = T::lit(n) / m.sqrt();
        }
    }
}

fn uniform01(rng: &mut ChaCha8Rng) -> f64 {
    rng.random::<f64>()
}

fn turning<T: Scalar>(p_sharp_minus: &[T], p_sharp_plus: &[T], rho: &[f64]) -> bool {
    let a: f64 = p_sharp_plus.iter().zip(rho).map(|(p, r)| p.as_f64() * r).sum();
    let b: f64 = p_sharp_minus.iter().zip(rho).map(|(p, r)| p.as_f64() * r).sum();
    !(a > 0.0 && b > 0.0)
}

const MAX_DELTA_H: f64 = 1000.0;

struct TreeBuilder<'a, 'r, T, D: ?Sized> {
    integ: &'a Integrator<'a, T, D>,
    rng: &'r mut ChaCha8Rng,
    eps: T,
    h0: T,
    n_leapfrog: usize,
    sum_metro_prob: f64,
    divergent: bool,
}

impl<T: Scalar, D: LogDensity<T> + ?Sized> TreeBuilder<'_, '_, T, D> {
    /// Extends the trajectory from `z` by `2^depth` steps in direction `sign`.
    /// Returns `false` if the subtree diverged or turned.
    #[allow(clippy::too_many_arguments)]
    fn build(
        &mut self,
        depth: usize,
        z: &mut PhasePoint<T>,
        z_propose: &mut PhasePoint<T>,
        p_sharp_beg: &mut Vec<T>,
        p_sharp_end: &mut Vec<T>,
        rho: &mut Vec<f64>,
        p_beg: &mut Vec<T>,
        p_end: &mut Vec<T>,
        sign: T,
        log_sum_weight: &mut f64,
    ) -> bool {
        if depth == 0 {
            self.integ.leapfrog(z, sign * self.eps);
            self.n_leapfrog += 1;
            let h = self.integ.hamiltonian(z).as_f64();
            let h0 = self.h0.as_f64();
            if !(h - h0 <= MAX_DELTA_H) {
                self.divergent = true;
            }
            *log_sum_weight = log_add_exp(*log_sum_weight, h0 - h);
            self.sum_metro_prob += if h0 - h > 0.0 { 1.0 } else { (h0 - h).exp() };
            z_propose.clone_from(z);
            *p_sharp_beg = self.integ.p_sharp(&z.p);
            p_sharp_end.clone_from(p_sharp_beg);
            for (r, p) in rho.iter_mut().zip(&z.p) {
                *r += p.as_f64();
            }
            p_beg.clone_from(&z.p);
            p_end.clone_from(p_beg);
            return !self.divergent;
        }

        let dim = z.q.len();
        let mut lsw_init = f64::NEG_INFINITY;
        let mut p_init_end = vec![T::zero(); dim];
        let mut p_sharp_init_end = vec![T::zero(); dim];
        let mut rho_init = vec![0.0; dim];
        if !self.build(
            depth - 1,
            z,
            z_propose,
            p_sharp_beg,
            &mut p_sharp_init_end,
            &mut rho_init,
            p_beg,
            &mut p_init_end,
            sign,
            &mut lsw_init,
        ) {
            return false;
        }

        let mut z_propose_final = z.clone();
        let mut lsw_final = f64::NEG_INFINITY;
        let mut p_final_beg = vec![T::zero(); dim];
        let mut p_sharp_final_beg = vec![T::zero(); dim];
        let mut rho_final = vec![0.0; dim];
        if !self.build(
            depth - 1,
            z,
            &mut z_propose_final,
            &mut p_sharp_final_beg,
            p_sharp_end,
            &mut rho_final,
            &mut p_final_beg,
            p_end,
            sign,
            &mut lsw_final,
        ) {
            return false;
        }

        let lsw_subtree = log_add_exp(lsw_init, lsw_final);
        *log_sum_weight = log_add_exp(*log_sum_weight, lsw_subtree);
        if lsw_final > lsw_subtree || uniform01(self.rng) < (lsw_final - lsw_subtree).exp() {
            std::mem::swap(z_propose, &mut z_propose_final);
        }

        let rho_subtree: Vec<f64> = rho_init.iter().zip(&rho_final).map(|(a, b)| a + b).collect();
        for (r, s) in rho.iter_mut().zip(&rho_subtree) {
            *r += s;
        }
        let mut persist = !turning(p_sharp_beg, p_sharp_end, &rho_subtree);
        let rho_ext: Vec<f64> = rho_init.iter().zip(&p_final_beg).map(|(a, b)| a + b.as_f64()).collect();
        persist &= !turning(p_sharp_beg, &p_sharp_final_beg, &rho_ext);
        let rho_ext: Vec<f64> = rho_final.iter().zip(&p_init_end).map(|(a, b)| a + b.as_f64()).collect();
        persist &= !turning(&p_sharp_init_end, p_sharp_end, &rho_ext);
        persist
    }
}

struct Transition<T> {
    point: PhasePoint<T>,
    accept_stat: f64,
    divergent: bool,
    depth: usize,
    n_leapfrog: usize,
}

fn nuts_transition<T: Scalar, D: LogDensity<T> + ?Sized>(
    integ: &Integrator<'_, T, D>,
    rng: &mut ChaCha8Rng,
    current: &PhasePoint<T>,
    eps: T,
    max_depth: usize,
) -> Transition<T> {
    let mut z = current.clone();
    integ.sample_momentum(rng, &mut z.p);
    let h0 = integ.hamiltonian(&z);

    let mut z_fwd = z.clone();
    let mut z_bck = z.clone();
    let mut z_sample = z.clone();
    let mut z_propose = z.clone();

    let ps0 = integ.p_sharp(&z.p);
    let mut p_fwd_fwd = z.p.clone();
    let mut p_sharp_fwd_fwd = ps0.clone();
    let mut p_fwd_bck = z.p.clone();
    let mut p_sharp_fwd_bck = ps0.clone();
    let mut p_bck_fwd = z.p.clone();
    let mut p_sharp_bck_fwd = ps0.clone();
    let mut p_bck_bck = z.p.clone();
    let mut p_sharp_bck_bck = ps0;

    let mut rho: Vec<f64> = z.p.iter().map(|p| p.as_f64()).collect();
    let mut log_sum_weight = 0.0f64;
    let mut depth = 0;
    let mut builder =
        TreeBuilder { integ, rng, eps, h0, n_leapfrog: 0, sum_metro_prob: 0.0, divergent: false };

    while depth < max_depth {
        let dim = rho.len();
        let mut rho_fwd = vec![0.0; dim];
        let mut rho_bck = vec![0.0; dim];
        let mut lsw_subtree = f64::NEG_INFINITY;
        let valid = if uniform01(builder.rng) > 0.5 {
            rho_bck.clone_from(&rho);
            p_bck_fwd.clone_from(&p_fwd_bck);
            p_sharp_bck_fwd.clone_from(&p_sharp_fwd_bck);
            builder.build(
                depth,
                &mut z_fwd,
                &mut z_propose,
                &mut p_sharp_fwd_bck,
                &mut p_sharp_fwd_fwd,
                &mut rho_fwd,
                &mut p_fwd_bck,
                &mut p_fwd_fwd,
                T::one(),
                &mut lsw_subtree,
            )
        } else {
            rho_fwd.clone_from(&rho);
            p_fwd_bck.clone_from(&p_bck_fwd);
            p_sharp_fwd_bck.clone_from(&p_sharp_bck_fwd);
            builder.build(
                depth,
                &mut z_bck,
                &mut z_propose,
                &mut p_sharp_bck_fwd,
                &mut p_sharp_bck_bck,
                &mut rho_bck,
                &mut p_bck_fwd,
                &mut p_bck_bck,
                -T::one(),
                &mut lsw_subtree,
            )
        };
        if !valid {
            break;
        }
        depth += 1;
        if lsw_subtree > log_sum_weight || uniform01(builder.rng) < (lsw_subtree - log_sum_weight).exp() {
            z_sample.clone_from(&z_propose);
        }
        log_sum_weight = log_add_exp(log_sum_weight, lsw_subtree);

        rho = rho_bck.iter().zip(&rho_fwd).map(|(a, b)| a + b).collect();
        let mut persist = !turning(&p_sharp_bck_bck, &p_sharp_fwd_fwd, &rho);
        let rho_ext: Vec<f64> = rho_bck.iter().zip(&p_fwd_bck).map(|(a, b)| a + b.as_f64()).collect();
        persist &= !turning(&p_sharp_bck_bck, &p_sharp_fwd_bck, &rho_ext);
        let rho_ext: Vec<f64> = rho_fwd.iter().zip(&p_bck_fwd).map(|(a, b)| a + b.as_f64()).collect();
        persist &= !turning(&p_sharp_bck_fwd, &p_sharp_fwd_fwd, &rho_ext);
        if !persist {
            break;
        }
    }
    let n = builder.n_leapfrog.max(1);
    Transition {
        point: z_sample,
        accept_stat: builder.sum_metro_prob / n as f64,
        divergent: builder.divergent,
        depth,
        n_leapfrog: builder.n_leapfrog,
    }
}

fn static_transition<T: Scalar, D: LogDensity<T> + ?Sized>(
    integ: &Integrator<'_, T, D>,
    rng: &mut ChaCha8Rng,
    current: &PhasePoint<T>,
    eps: T,
    n_steps: usize,
) -> Transition<T> {
    let mut z = current.clone();
    integ.sample_momentum(rng, &mut z.p);
    let h0 = integ.hamiltonian(&z).as_f64();
    let mut divergent = false;
    for _ in 0..n_steps {
        integ.leapfrog(&mut z, eps);
        if !(integ.hamiltonian(&z).as_f64() - h0 <= MAX_DELTA_H) {
            divergent = true;
            break;
        }
    }
    let h = integ.hamiltonian(&z).as_f64();
    let accept = if divergent { 0.0 } else { (h0 - h).exp().min(1.0) };
    let point = if !divergent && uniform01(rng) < accept { z } else { current.clone() };
    Transition { point, accept_stat: accept, divergent, depth: 0, n_leapfrog: n_steps }
}

/// Nesterov dual averaging of `log ε` towards a target acceptance statistic.
#[derive(Debug, Clone)]
struct DualAveraging {
    target: f64,
    mu: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(target: f64, eps: f64) -> Self {
        Self { target, mu: (10.0 * eps).ln(), counter: 0.0, s_bar: 0.0, x_bar: 0.0 }
    }

    fn update(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let a = accept_stat.min(1.0);
        let eta = 1.0 / (self.counter + Self::T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - a);
        let x = self.mu - self.s_bar * self.counter.sqrt() / Self::GAMMA;
        let x_eta = self.counter.powf(-Self::KAPPA);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Iteration indices (exclusive, relative to warmup start) at which metric windows close.
fn metric_window_ends(warmup: usize) -> Vec<usize> {
    if warmup < 20 {
        return Vec::new();
    }
    let init_buffer = (0.15 * warmup as f64).round() as usize;
    let term_buffer = (0.10 * warmup as f64).round() as usize;
    let end = warmup - term_buffer;
    let available = end - init_buffer;
    let mut base = 25.min(available);
    if base == 0 {
        return Vec::new();
    }
    let mut ends = Vec::new();
    let mut start = init_buffer;
    loop {
        let mut e = start + base;
        if e + 2 * base > end {
            e = end;
        }
        ends.push(e);
        if e >= end {
            break;
        }
        start = e;
        base *= 2;
    }
    ends
}

#[derive(Debug, Clone)]
struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Self { n: 0.0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    fn push<T: Scalar>(&mut self, x: &[T]) {
        self.n += 1.0;
        for ((m, s), xi) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let xi = xi.as_f64();
            let d = xi - *m;
            *m += d / self.n;
            *s += d * (xi - *m);
        }
    }

    /// Regularized variance shrunk towards `1e-3`.
    fn regularized_variance(&self) -> Vec<f64> {
        let n = self.n;
        self.m2
            .iter()
            .map(|s| {
                let var = if n > 1.0 { s / (n - 1.0) } else { 1.0 };
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

fn initial_point<T: Scalar, D: LogDensity<T> + ?Sized>(
    density: &D,
    rng: &mut ChaCha8Rng,
    radius: f64,
) -> Result<PhasePoint<T>, SamplerError> {
    const ATTEMPTS: usize = 100;
    let dim = density.dim();
    for _ in 0..ATTEMPTS {
        let q: Vec<T> = (0..dim).map(|_| T::lit(rng.random_range(-radius..radius))).collect();
        let mut grad = vec![T::zero(); dim];
        let logp = density.logp_and_grad(&q, &mut grad);
        if logp.is_finite() && grad.iter().all(|g| g.is_finite()) {
            return Ok(PhasePoint { q, p: vec![T::zero(); dim], grad, logp });
        }
    }
    Err(SamplerError::NonFiniteDensity(ATTEMPTS))
}

/// Doubling/halving search for a step size whose one-step acceptance crosses 0.8.
fn find_reasonable_step<T: Scalar, D: LogDensity<T> + ?Sized>(
    integ: &Integrator<'_, T, D>,
    rng: &mut ChaCha8Rng,
    start: &PhasePoint<T>,
    mut eps: f64,
) -> f64 {
    let log_target = 0.8f64.ln();
    let mut z = start.clone();
    integ.sample_momentum(rng, &mut z.p);
    let h0 = integ.hamiltonian(&z).as_f64();
    integ.leapfrog(&mut z, T::lit(eps));
    let delta = h0 - integ.hamiltonian(&z).as_f64();
    let up = delta > log_target;
    for _ in 0..100 {
        let mut z = start.clone();
        integ.sample_momentum(rng, &mut z.p);
        let h0 = integ.hamiltonian(&z).as_f64();
        integ.leapfrog(&mut z, T::lit(eps));
        let delta = h0 - integ.hamiltonian(&z).as_f64();
        if up && !(delta > log_target) {
            break;
        }
        if !up && !(delta < log_target) {
            break;
        }
        let next = if up { eps * 2.0 } else { eps * 0.5 };
        if !(next > 1e-12 && next < 1e7) {
            break;
        }
        eps = next;
    }
    eps
}

struct ChainOutput<T> {
    values: Vec<T>,
    stats: ChainStats,
}

fn run_chain<T: Scalar, D: LogDensity<T> + ?Sized>(
    config: &ChainConfig,
    density: &D,
    chain: usize,
) -> Result<ChainOutput<T>, SamplerError> {
    let dim = density.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(chain as u64);
    let mut current = initial_point(density, &mut rng, config.init_radius)?;
    let mut integ = Integrator { density, inv_mass: vec![T::one(); dim] };

    let mut eps = find_reasonable_step(&integ, &mut rng, &current, 1.0);
    let mut da = DualAveraging::new(config.target_accept, eps);
    let windows = metric_window_ends(config.warmup);
    let first_window_start = (0.15 * config.warmup as f64).round() as usize;
    let last_window_end = windows.last().copied().unwrap_or(0);
    let mut welford = Welford::new(dim);

    let step = |integ: &Integrator<'_, T, D>, rng: &mut ChaCha8Rng, cur: &PhasePoint<T>, eps: f64| match config
        .trajectory
    {
        Trajectory::Nuts { max_depth } => nuts_transition(integ, rng, cur, T::lit(eps), max_depth),
        Trajectory::Static { n_steps } => static_transition(integ, rng, cur, T::lit(eps), n_steps),
    };

    for it in 0..config.warmup {
        let tr = step(&integ, &mut rng, &current, eps);
        current = tr.point;
        eps = da.update(tr.accept_stat);
        if it >= first_window_start && it < last_window_end {
            welford.push(&current.q);
        }
        if windows.contains(&(it + 1)) {
            let var = welford.regularized_variance();
            integ.inv_mass = var.iter().map(|&v| T::lit(v)).collect();
            welford = Welford::new(dim);
            eps = find_reasonable_step(&integ, &mut rng, &current, eps);
            da = DualAveraging::new(config.target_accept, eps);
        }
    }
    if config.warmup > 0 {
        eps = da.final_step();
    }

    let mut values = Vec::with_capacity(config.draws * dim);
    let (mut accept_sum, mut divergences, mut depth_sum, mut n_leapfrog) = (0.0, 0, 0usize, 0usize);
    for _ in 0..config.draws {
        let tr = step(&integ, &mut rng, &current, eps);
        current = tr.point;
        accept_sum += tr.accept_stat;
        divergences += tr.divergent as usize;
        depth_sum += tr.depth;
        n_leapfrog += tr.n_leapfrog;
        values.extend_from_slice(&current.q);
    }
    let n = config.draws as f64;
    Ok(ChainOutput {
        values,
        stats: ChainStats {
            mean_accept: accept_sum / n,
            divergences,
            step_size: eps,
            mean_tree_depth: depth_sum as f64 / n,
            n_leapfrog,
            inv_mass: integ.inv_mass.iter().map(|m| m.as_f64()).collect(),
        },
    })
}

/// Runs all chains (in parallel on the current rayon pool) and collects post-warmup draws.
pub fn run<T: Scalar, D: LogDensity<T> + ?Sized>(config: &ChainConfig, density: &D) -> Result<Draws<T>, SamplerError> {
    config.validate()?;
    let dim = density.dim();
    if dim == 0 {
        return Err(SamplerError::InvalidConfig("density has dimension 0".into()));
    }
    let outputs: Vec<ChainOutput<T>> = (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(config, density, c))
        .collect::<Result<_, _>>()?;
    let mut values = Vec::with_capacity(config.chains * config.draws * dim);
    let mut stats = Vec::with_capacity(config.chains);
    for o in outputs {
        values.extend(o.values);
        stats.push(o.stats);
    }
    Ok(Draws { n_chains: config.chains, n_draws: config.draws, dim, values, stats })
}
