use std::fs;
use std::path::Path;
use std::process::Command;

use crowd_attn::data::{load_dataset, Format};

fn run(args: &[&str], out: &Path) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_crowd-attn"))
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .env("CROWD_ATTN_THREADS", "1")
        .status()
        .unwrap()
        .code()
        .unwrap()
}

/// Simulates a small crowd under `dir/sim` and returns the dataset path.
fn small_sim(dir: &Path) -> String {
    let spec = dir.join("spec.json");
    fs::write(&spec, r#"{"n_tasks":40,"n_workers":6,"dim":16}"#).unwrap();
    let sim = dir.join("sim");
    assert_eq!(run(&["simulate", "--spec", spec.to_str().unwrap(), "--noise", "0.2"], &sim), 0);
    sim.join("dataset").to_str().unwrap().to_owned()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(str::to_owned).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(str::to_owned).collect()).collect();
    (header, rows)
}

#[test]
fn usage_errors_exit_64() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["aggregate", "--dataset", "x", "--method", "nope"], dir.path()), 64);
    assert_eq!(run(&["frobnicate"], dir.path()), 64);
}

#[test]
fn bad_inputs_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    assert_eq!(run(&["analyze", "--fit", missing.to_str().unwrap()], dir.path()), 1);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"n_tasks\": 1}").unwrap();
    assert_eq!(run(&["aggregate", "--dataset", bad.to_str().unwrap(), "--method", "mv"], dir.path()), 1);
}

#[test]
fn truncated_fit_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_sim(dir.path());
    let out = dir.path().join("agg");
    let code = run(&["aggregate", "--dataset", &ds, "--method", "a3c", "--gem-max-iters", "1", "--gem-tol", "1e-300"], &out);
    assert_eq!(code, 2);
    // outputs are still written
    assert!(out.join("fit.json").exists() && out.join("result.json").exists());
}

#[test]
fn simulated_csv_reparses() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_sim(dir.path());
    let loaded = load_dataset(Path::new(&ds), Format::Csv).unwrap();
    assert_eq!((loaded.n_tasks(), loaded.n_workers(), loaded.n_classes()), (40, 6, 4));
    assert!(loaded.gold().is_some());
    let noisy = load_dataset(&dir.path().join("sim/dataset_noisy"), Format::Csv).unwrap();
    assert_eq!(noisy.completion_orders(), loaded.completion_orders());
}

#[test]
fn benchmark_reports_every_cell_and_leaves_inputs_alone() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_sim(dir.path());
    let before = fs::read(Path::new(&ds).join("answers.csv")).unwrap();
    let out = dir.path().join("bench");
    let code = run(&["benchmark", "--dataset", &ds, "--methods", "mv,ds,glad,gtic,a3c-na", "--gem-max-iters", "3"], &out);
    assert!(code == 0 || code == 2);
    assert_eq!(fs::read(Path::new(&ds).join("answers.csv")).unwrap(), before);
    let (header, rows) = read_csv(&out.join("report.csv"));
    assert_eq!(header, ["dataset", "method", "accuracy", "iters", "seconds"]);
    assert_eq!(rows.len(), 5);
    for row in &rows {
        let acc: f64 = row[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert_eq!(row[4].parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn analyze_emits_consistent_series() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_sim(dir.path());
    let agg = dir.path().join("agg");
    let code = run(&["aggregate", "--dataset", &ds, "--method", "a3c", "--attention", "uniform", "--gem-max-iters", "3"], &agg);
    assert!(code == 0 || code == 2);
    let fit = agg.join("fit.json");
    let out = dir.path().join("analysis");
    assert_eq!(run(&["analyze", "--fit", fit.to_str().unwrap(), "--bins", "5"], &out), 0);

    let (_, hist) = read_csv(&out.join("histogram.csv"));
    assert_eq!(hist.len(), 5);
    assert_eq!(hist.iter().map(|r| r[2].parse::<usize>().unwrap()).sum::<usize>(), 6);

    // uniform attention gives flat curves
    let (header, curves) = read_csv(&out.join("curves.csv"));
    assert_eq!(header, ["role", "worker", "rank", "quality"]);
    for role in ["expert", "normal", "spammer"] {
        let q: Vec<f64> = curves.iter().filter(|r| r[0] == role).map(|r| r[3].parse().unwrap()).collect();
        if let Some(first) = q.first() {
            assert!(q.iter().all(|v| v == first), "{role} curve not flat");
        }
    }

    // flat workers have no suitable task count
    let (header, suitable) = read_csv(&out.join("suitable.csv"));
    assert_eq!(header, ["worker", "max_quality", "location"]);
    assert!(suitable.is_empty());

    let agg = dir.path().join("agg_poisson");
    let code = run(&["aggregate", "--dataset", &ds, "--method", "a3c", "--gem-max-iters", "3"], &agg);
    assert!(code == 0 || code == 2);
    let out = dir.path().join("analysis_poisson");
    assert_eq!(run(&["analyze", "--fit", agg.join("fit.json").to_str().unwrap()], &out), 0);
    let (_, suitable) = read_csv(&out.join("suitable.csv"));
    let maxima: Vec<f64> = suitable.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(maxima.windows(2).all(|w| w[0] <= w[1]));
    assert!(suitable.iter().all(|r| r[2].parse::<f64>().unwrap() > 0.0));
}
