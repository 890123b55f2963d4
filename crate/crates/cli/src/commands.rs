use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use msfpca::association::{all_pairs, posterior_association, write_association_csv, AssociationEstimate, AssociationKind};
use msfpca::dataset::{write_csv, MultiBlockDataset};
use msfpca::diagnostics::{pointwise_loglik, posterior_predictive, psis_loo, LooReport, K_BAD, K_WARN};
use msfpca::experiments::{coverage_study, fit as fit_model, CoverageConfig, FitResult};
use msfpca::model::ModelData;
use msfpca::posterior::{write_curves_csv, write_explained_variance_csv, FittedModel};
use msfpca::simulate::{scenario_sigma, simulate_dataset, write_truth_csv, Scenario, ScenarioSpec};

use crate::config::FitConfig;
use crate::error::CliError;
use crate::run::{create, load_dataset, read_text, save, write_file, Run};
use crate::KindArg;

fn parse_scenario(s: &str) -> Result<Scenario, CliError> {
    s.parse().map_err(|e: msfpca::simulate::SimulateError| CliError::InvalidArgument(e.to_string()))
}

pub fn simulate(scenario: &str, seed: u64, subjects: usize, out: &Path, truth: Option<&Path>) -> Result<(), CliError> {
    let scenario = parse_scenario(scenario)?;
    let spec = ScenarioSpec { n_subjects: subjects, ..ScenarioSpec::new(scenario, seed) };
    let t = scenario_sigma(scenario);
    let data = simulate_dataset(&spec, &t).map_err(CliError::failed)?;
    write_csv(create(out)?, &data.to_records()).map_err(CliError::failed)?;
    if let Some(path) = truth {
        write_truth_csv(&t, create(path)?).map_err(CliError::failed)?;
    }
    println!("wrote {} observations for {} subjects to {}", data.n_observations(), data.n_subjects(), out.display());
    Ok(())
}

pub struct FitArgs {
    pub data: PathBuf,
    pub spec: PathBuf,
    pub chains: Option<usize>,
    pub iters: Option<usize>,
    pub warmup: Option<usize>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub sweep: bool,
    pub draws_csv: bool,
}

fn apply_overrides(cfg: &mut FitConfig, args: &FitArgs) {
    let s = &mut cfg.sampler;
    if let Some(c) = args.chains {
        s.chains = c;
    }
    match (args.iters, args.warmup) {
        (Some(it), Some(w)) => {
            s.warmup = w;
            s.draws = it.saturating_sub(w);
        }
        (Some(it), None) => {
            s.warmup = it / 2;
            s.draws = it - it / 2;
        }
        (None, Some(w)) => s.warmup = w,
        (None, None) => {}
    }
    if let Some(seed) = args.seed {
        s.seed = seed;
    }
}

fn run_fit(cfg: &FitConfig, raw: &MultiBlockDataset) -> Result<FitResult, CliError> {
    let spec = cfg.model_spec()?;
    Ok(fit_model(raw, &spec, &cfg.sampler.chain_config(), &msfpca::experiments::report_grid(101))?)
}

fn loo_of(cfg: &FitConfig, fit: &FitResult) -> Result<LooReport, CliError> {
    let spec = cfg.model_spec()?;
    let data = ModelData::new(&fit.dataset, &spec)?;
    let ll = pointwise_loglik(&fit.fitted.draws, &data, &spec).map_err(CliError::failed)?;
    psis_loo(&ll).map_err(CliError::failed)
}

pub fn fit(args: FitArgs) -> Result<(), CliError> {
    let mut cfg = FitConfig::parse(&read_text(&args.spec)?)?;
    let raw = load_dataset(&args.data)?;
    cfg.align_to_data(raw.blocks())?;
    apply_overrides(&mut cfg, &args);
    if cfg.sampler.draws == 0 {
        return Err(CliError::InvalidArgument("no post-warmup draws requested".into()));
    }

    let mut sweep_table = None;
    let (cfg, result) = if args.sweep {
        let mut rows = Vec::new();
        let mut best: Option<(f64, FitConfig, FitResult)> = None;
        for cand in cfg.sweep_candidates()? {
            let result = run_fit(&cand, &raw)?;
            let loo = loo_of(&cand, &result)?;
            let max_k = loo.pareto_k.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            rows.push((cand.label(), loo.elpd_loo, loo.se_elpd, loo.p_loo, max_k));
            if best.as_ref().is_none_or(|b| loo.elpd_loo > b.0) {
                best = Some((loo.elpd_loo, cand, result));
            }
        }
        rows.sort_by(|a, b| b.1.total_cmp(&a.1));
        sweep_table = Some(rows);
        let (_, c, r) = best.expect("at least one candidate");
        (c, r)
    } else {
        let r = run_fit(&cfg, &raw)?;
        (cfg, r)
    };

    save(&args.out, &cfg, &raw, &result)?;
    if args.draws_csv {
        let names = result.layout.names();
        msfpca::io::write_draws_csv(create(&args.out.join("draws.csv"))?, &result.draws, &names).map_err(CliError::failed)?;
    }
    if let Some(rows) = &sweep_table {
        let mut w = csv::Writer::from_writer(create(&args.out.join("summary").join("sweep.csv"))?);
        w.write_record(["rank", "candidate", "elpd_loo", "se_elpd", "p_loo", "max_pareto_k"]).map_err(CliError::failed)?;
        for (i, (label, elpd, se, p, k)) in rows.iter().enumerate() {
            w.write_record([(i + 1).to_string(), label.clone(), elpd.to_string(), se.to_string(), p.to_string(), k.to_string()])
                .map_err(CliError::failed)?;
        }
        w.flush().map_err(CliError::failed)?;
    }

    let names = result.dataset.blocks().to_vec();
    let fitted = original_scale(&result.fitted, &result.dataset);
    write_curves_csv(&fitted, &names, create(&args.out.join("summary").join("curves.csv"))?).map_err(CliError::failed)?;
    write_explained_variance_csv(&fitted, &names, create(&args.out.join("summary").join("explained_variance.csv"))?)
        .map_err(CliError::failed)?;
    let spec = cfg.model_spec()?;
    // Draws from a collapsed component have no defined correlation; keep the
    // run and say so instead of failing after sampling.
    let assoc = match associations(&result, &spec, KindArg::Both) {
        Ok(a) => {
            write_association_csv(&a, &names, create(&args.out.join("summary").join("mi.csv"))?).map_err(CliError::failed)?;
            Ok(a)
        }
        Err(e) => {
            eprintln!("warning: mutual information unavailable: {e}");
            Err(e.to_string())
        }
    };

    let report = fit_report(&cfg, &result, &assoc, sweep_table.as_deref());
    write_file(&args.out.join("report.txt"), &report)?;
    print!("{report}");
    Ok(())
}

/// Mean curves and grid mapped back to the original value and time scales.
fn original_scale(fitted: &FittedModel<f64>, dataset: &MultiBlockDataset) -> FittedModel<f64> {
    let mut out = fitted.clone();
    out.grid = fitted.grid.iter().map(|&t| dataset.original_time(t)).collect();
    for band in &mut out.mean_curves {
        for iv in &mut band.points {
            iv.median = dataset.unstandardize_value(band.block, iv.median);
            iv.lo = dataset.unstandardize_value(band.block, iv.lo);
            iv.hi = dataset.unstandardize_value(band.block, iv.hi);
        }
    }
    out
}

fn associations(fit: &FitResult, spec: &msfpca::model::ModelSpec<f64>, kind: KindArg) -> Result<Vec<AssociationEstimate>, CliError> {
    let kinds: &[AssociationKind] = match kind {
        KindArg::Marginal => &[AssociationKind::Marginal],
        KindArg::Conditional => &[AssociationKind::Conditional],
        KindArg::Both => &[AssociationKind::Marginal, AssociationKind::Conditional],
    };
    let structure = spec.structure();
    if structure.n_blocks() < 2 {
        return Ok(Vec::new());
    }
    let pairs = all_pairs(structure.n_blocks());
    let mut out = Vec::new();
    for &k in kinds {
        out.extend(posterior_association(&fit.fitted.draws, structure, &pairs, k).map_err(CliError::failed)?);
    }
    Ok(out)
}

fn association_table(assoc: &[AssociationEstimate], names: &[String]) -> String {
    let mut s = String::new();
    if assoc.is_empty() {
        return s;
    }
    let _ = writeln!(s, "{:<16} {:<12} {:>8} {:>8} {:>8}", "pair", "kind", "median", "lo", "hi");
    for e in assoc {
        let pair = format!("{}-{}", names[e.pair.0], names[e.pair.1]);
        let _ = writeln!(
            s,
            "{:<16} {:<12} {:>8.4} {:>8.4} {:>8.4}",
            pair,
            e.kind.label(),
            e.summary.median,
            e.summary.lo,
            e.summary.hi
        );
    }
    s
}

fn fit_report(
    cfg: &FitConfig,
    fit: &FitResult,
    assoc: &Result<Vec<AssociationEstimate>, String>,
    sweep: Option<&[(String, f64, f64, f64, f64)]>) -> String {
    let mut s = String::new();
    let ds = &fit.dataset;
    let names = ds.blocks();
    let _ = writeln!(s, "data: {} subjects, {} blocks, {} observations", ds.n_subjects(), ds.n_blocks(), ds.n_observations());
    let prior = cfg.model.cov_prior_sd.map_or("flat".to_string(), |sd| format!("normal(0, {sd})"));
    let _ = writeln!(s, "model: {} per_block_sigma={} cov_prior={prior}", cfg.label(), cfg.model.per_block_sigma);
    let sm = &cfg.sampler;
    let _ = writeln!(s, "sampler: chains={} warmup={} draws={} seed={} target_accept={}", sm.chains, sm.warmup, sm.draws, sm.seed, sm.target_accept);
    for (c, st) in fit.draws.stats.iter().enumerate() {
        let _ = writeln!(
            s,
            "  chain {}: step_size={:.5} accept={:.3} divergences={} mean_tree_depth={:.2}",
            c + 1,
            st.step_size,
            st.mean_accept,
            st.divergences,
            st.mean_tree_depth
        );
    }
    let _ = writeln!(s, "max split R-hat: score covariance and residual scale {:.4}, mean curves {:.4}", fit.max_rhat, fit.mean_rhat);
    if let Some(rows) = sweep {
        let _ = writeln!(s, "sweep (ranked by elpd_loo):");
        for (label, elpd, se, p, k) in rows {
            let _ = writeln!(s, "  {label}: elpd_loo={elpd:.2} se={se:.2} p_loo={p:.2} max_k={k:.2}");
        }
    }
    let _ = writeln!(s, "explained variance:");
    for (p, ev) in fit.fitted.explained_variance.iter().enumerate() {
        let v: Vec<String> = ev.iter().map(|x| format!("{x:.3}")).collect();
        let _ = writeln!(s, "  {}: [{}]", names[p], v.join(", "));
    }
    match assoc {
        Ok(a) if !a.is_empty() => {
            let _ = writeln!(s, "normalized mutual information:");
            s.push_str(&association_table(a, names));
        }
        Ok(_) => {}
        Err(e) => {
            let _ = writeln!(s, "normalized mutual information: unavailable ({e})");
        }
    }
    s
}

pub fn summarize(run: &Path, grid: usize) -> Result<(), CliError> {
    if grid < 2 {
        return Err(CliError::InvalidArgument("--grid must be at least 2".into()));
    }
    let r = Run::load(run, grid)?;
    let names = r.block_names();
    let fitted = original_scale(&r.fit.fitted, &r.fit.dataset);
    let curves = r.summary_path("curves.csv");
    write_curves_csv(&fitted, &names, create(&curves)?).map_err(CliError::failed)?;
    write_explained_variance_csv(&fitted, &names, create(&r.summary_path("explained_variance.csv"))?).map_err(CliError::failed)?;
    println!("wrote {} and explained_variance.csv ({} grid points)", curves.display(), grid);
    Ok(())
}

pub fn mi(run: &Path, kind: KindArg) -> Result<(), CliError> {
    let r = Run::load(run, 2)?;
    let names = r.block_names();
    if r.spec.n_blocks() < 2 {
        return Err(CliError::InvalidArgument("mutual information needs at least two blocks".into()));
    }
    let assoc = associations(&r.fit, &r.spec, kind)?;
    write_association_csv(&assoc, &names, create(&r.summary_path("mi.csv"))?).map_err(CliError::failed)?;
    print!("{}", association_table(&assoc, &names));
    Ok(())
}

pub fn loo(run: &Path) -> Result<(), CliError> {
    let r = Run::load(run, 2)?;
    let report = loo_of(&r.config, &r.fit)?;
    report.write_csv(r.fit.dataset.subjects(), create(&r.summary_path("loo.csv"))?).map_err(CliError::failed)?;
    let [good, warn, bad] = report.k_buckets();
    println!("elpd_loo {:.3}", report.elpd_loo);
    println!("se_elpd {:.3}", report.se_elpd);
    println!("p_loo {:.3}", report.p_loo);
    println!("pareto_k k<={K_WARN}: {good}  {K_WARN}<k<={K_BAD}: {warn}  k>{K_BAD}: {bad}");
    let flagged: Vec<&str> = report.flagged(K_BAD).into_iter().map(|i| r.fit.dataset.subjects()[i].as_str()).collect();
    if !flagged.is_empty() {
        println!("flagged subjects: {}", flagged.join(" "));
    }
    Ok(())
}

pub fn ppc(run: &Path, reps: usize, seed: u64) -> Result<(), CliError> {
    if reps == 0 {
        return Err(CliError::InvalidArgument("--reps must be positive".into()));
    }
    let r = Run::load(run, 2)?;
    let mut export = posterior_predictive(&r.fit.fitted.draws, &r.model_data, &r.spec, reps, seed).map_err(CliError::failed)?;
    let ds = &r.fit.dataset;
    let unscale = |sets: &mut Vec<Vec<f64>>| {
        for (p, values) in sets.iter_mut().enumerate() {
            values.iter_mut().for_each(|v| *v = ds.unstandardize_value(p, *v));
        }
    };
    unscale(&mut export.observed);
    export.replicates.iter_mut().for_each(unscale);
    let path = r.summary_path("ppc.csv");
    export.write_csv(&r.block_names(), create(&path)?).map_err(CliError::failed)?;
    println!("wrote {} replicated datasets to {}", reps, path.display());
    Ok(())
}

pub fn coverage(
    scenario: &str,
    reps: usize,
    seed: u64,
    subjects: usize,
    (chains, warmup, draws): (usize, usize, usize),
    cov_prior_sd: Option<f64>,
    out: &Path,
) -> Result<(), CliError> {
    let scenario = parse_scenario(scenario)?;
    if reps == 0 {
        return Err(CliError::InvalidArgument("--reps must be positive".into()));
    }
    let mut cfg = CoverageConfig::new(scenario, reps, seed);
    cfg.simulation.n_subjects = subjects;
    cfg.chain.chains = chains;
    cfg.chain.warmup = warmup;
    cfg.chain.draws = draws;
    if cov_prior_sd.is_some_and(|sd| !(sd > 0.0 && sd.is_finite())) {
        return Err(CliError::InvalidArgument("--cov-prior-sd must be positive".into()));
    }
    cfg.cov_prior_sd = cov_prior_sd;
    cfg.out_dir = Some(out.join("runs"));
    let report = coverage_study(&cfg)?;
    report.write_csv(create(&out.join("coverage.csv"))?).map_err(CliError::failed)?;
    let text = report.text_summary();
    write_file(&out.join("coverage.txt"), &text)?;
    print!("{text}");
    Ok(())
}
