use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SPEC_221: &str = "[[block]]\ncomponents = 2\nbasis = 6\n\n[[block]]\ncomponents = 2\nbasis = 5\n\n[[block]]\ncomponents = 1\nbasis = 5\n";

fn msfpca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msfpca")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = msfpca(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn error_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).trim().to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulate(dir: &Path, scenario: &str, subjects: &str, seed: &str) -> std::path::PathBuf {
    let data = dir.join("data.csv");
    ok(&["simulate", "--scenario", scenario, "--seed", seed, "--subjects", subjects, "--out", p(&data)]);
    data
}

fn write_spec(dir: &Path, text: &str) -> std::path::PathBuf {
    let spec = dir.join("spec.toml");
    fs::write(&spec, text).unwrap();
    spec
}

/// `(median, lo, hi)` of one row of `summary/mi.csv`.
fn mi_row(run: &Path, pair: &str, kind: &str) -> (f64, f64, f64) {
    let mut r = csv::Reader::from_path(run.join("summary").join("mi.csv")).unwrap();
    for rec in r.records() {
        let rec = rec.unwrap();
        if &rec[0] == pair && &rec[1] == kind {
            return (rec[2].parse().unwrap(), rec[3].parse().unwrap(), rec[4].parse().unwrap());
        }
    }
    panic!("no {pair} {kind} row");
}

#[test]
fn scenario_two_strong_pair_is_recovered() {
    let dir = TempDir::new().unwrap();
    let data = simulate(dir.path(), "II", "100", "7");
    let spec = write_spec(dir.path(), SPEC_221);
    let run = dir.path().join("run");
    ok(&["fit", "--data", p(&data), "--spec", p(&spec), "--chains", "4", "--iters", "2000", "--seed", "7", "--out", p(&run)]);
    let table = ok(&["mi", "--run", p(&run), "--kind", "marginal"]);
    assert!(table.contains("b2-b3"));
    let (median, lo, hi) = mi_row(&run, "b2-b3", "marginal");
    assert!((0.6..=0.9).contains(&median), "MI b2-b3 median {median}");
    assert!(lo <= median && median <= hi);
}

#[test]
fn run_commands_are_deterministic_and_write_tables() {
    let dir = TempDir::new().unwrap();
    let data = simulate(dir.path(), "III", "20", "3");
    let spec = write_spec(dir.path(), SPEC_221);
    let runs: Vec<_> = ["a", "b"].iter().map(|n| dir.path().join(n)).collect();
    for run in &runs {
        ok(&["fit", "--data", p(&data), "--spec", p(&spec), "--chains", "2", "--iters", "300", "--seed", "11", "--out", p(run)]);
        ok(&["summarize", "--run", p(run), "--grid", "21"]);
        ok(&["mi", "--run", p(run)]);
        ok(&["loo", "--run", p(run)]);
        ok(&["ppc", "--run", p(run), "--reps", "5", "--seed", "2"]);
    }
    for file in ["report.txt", "draws.bin", "draws_meta.txt", "summary/curves.csv", "summary/mi.csv", "summary/loo.csv", "summary/ppc.csv"] {
        let a = fs::read(runs[0].join(file)).unwrap();
        let b = fs::read(runs[1].join(file)).unwrap();
        assert!(!a.is_empty(), "{file} is empty");
        assert_eq!(a, b, "{file} differs between identical runs");
    }
    let curves = fs::read_to_string(runs[0].join("summary/curves.csv")).unwrap();
    // Header plus 21 grid points for each mean curve (3) and FPC curve (5).
    assert_eq!(curves.lines().count(), 1 + 21 * 8);
    let loo = ok(&["loo", "--run", p(&runs[0])]);
    assert!(loo.contains("elpd_loo") && loo.contains("pareto_k"));
}

#[test]
fn mismatched_block_count_exits_with_code_two() {
    let dir = TempDir::new().unwrap();
    let data = simulate(dir.path(), "I", "10", "1");
    let spec = write_spec(dir.path(), "[[block]]\ncomponents = 1\nbasis = 4\n\n[[block]]\ncomponents = 1\nbasis = 4\n");
    let out = msfpca(&["fit", "--data", p(&data), "--spec", p(&spec), "--iters", "20", "--out", p(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
    let line = error_line(&out);
    assert!(line.starts_with("error kind=SpecMismatch message="), "{line}");
    assert_eq!(line.lines().count(), 1);
}

#[test]
fn missing_files_and_bad_config_are_reported() {
    let dir = TempDir::new().unwrap();
    let data = simulate(dir.path(), "I", "10", "1");
    let run = dir.path().join("run");

    let good_spec = write_spec(dir.path(), SPEC_221);
    let out = msfpca(&["fit", "--data", p(&dir.path().join("absent.csv")), "--spec", p(&good_spec), "--out", p(&run)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).starts_with("error kind=FileNotFound"), "{}", error_line(&out));

    let spec = dir.path().join("bad.toml");
    fs::write(&spec, "[[block]]\ncomponents = \"two\"\n").unwrap();
    let out = msfpca(&["fit", "--data", p(&data), "--spec", p(&spec), "--out", p(&run)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).starts_with("error kind=ConfigParse"), "{}", error_line(&out));

    let out = msfpca(&["mi", "--run", p(&dir.path().join("no_run"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).starts_with("error kind=FileNotFound"));

    let out = msfpca(&["simulate", "--scenario", "V", "--out", p(&dir.path().join("x.csv"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).starts_with("error kind=InvalidArgument"));
}
