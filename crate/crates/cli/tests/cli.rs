use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::DMatrix;
use scaledfx::mathkit::seeded_rng;
use scaledfx::model::Dataset;
use scaledfx::sim::{generate_dataset, true_psi, Correct};
use scaledfx_cli::commands::{cmd_estimate, cmd_simulate, cmd_test, SimulateArgs};
use scaledfx_cli::config::{AnalysisArgs, Estimand};
use scaledfx_cli::io::{read_csv, read_weights, write_csv};
use scaledfx_cli::report::format_sig;
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scaledfx")).args(args).output().expect("binary runs")
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn args(input: &Path, outcomes: &[&str]) -> AnalysisArgs {
    AnalysisArgs {
        input: Some(input.to_path_buf()),
        treatment: Some("a".into()),
        outcomes: Some(outcomes.iter().map(|o| o.to_string()).collect()),
        ..AnalysisArgs::default()
    }
}

fn simulated_csv(dir: &TempDir, name: &str, n: usize, lambda: f64, seed: u64) -> PathBuf {
    let ds = generate_dataset(n, lambda, &mut seeded_rng(seed, 0)).unwrap();
    let p = dir.path().join(name);
    write_csv(&p, &ds, "a").unwrap();
    p
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn minimal_file_reads() {
    let dir = TempDir::new().unwrap();
    let p = write(&dir, "min.csv", "x,a,y\n0.5,1,2.0\n-1.25,0,3\n");
    let ds = read_csv(&p, "a", &["y".into()]).unwrap();
    assert_eq!(ds.n(), 2);
    assert_eq!(ds.covariate_names(), ["x"]);
    assert_eq!(ds.treatment(), [1, 0]);
    assert_eq!(ds.outcome(0), vec![2.0, 3.0]);
}

#[test]
fn columns_are_found_by_name_in_any_order() {
    let dir = TempDir::new().unwrap();
    let p = write(&dir, "cols.csv", "y2,a,x,y1\n1,1,7,2\n3,0,8,4\n");
    let ds = read_csv(&p, "a", &["y1".into(), "y2".into()]).unwrap();
    assert_eq!(ds.outcome(0), vec![2.0, 4.0]);
    assert_eq!(ds.outcome(1), vec![1.0, 3.0]);
    assert_eq!(ds.covariate("x").unwrap(), vec![7.0, 8.0]);
}

#[test]
fn na_cell_is_rejected_with_coordinates() {
    let dir = TempDir::new().unwrap();
    let p = write(&dir, "na.csv", "x,a,y\n1,1,2\n2,0,NA\n");
    let err = read_csv(&p, "a", &["y".into()]).unwrap_err().to_string();
    assert!(err.contains("row 3") && err.contains("`y`") && err.contains("NA"), "{err}");
    let out = run(&["estimate", "--input", s(&p), "--treatment", "a", "--outcomes", "y"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 3"));
}

#[test]
fn comma_decimal_is_not_a_number() {
    let dir = TempDir::new().unwrap();
    let p = write(&dir, "comma.csv", "x;a;y\n1,5;1;2\n");
    assert!(read_csv(&p, "a", &["y".into()]).is_err());
}

#[test]
fn missing_file_and_column() {
    let dir = TempDir::new().unwrap();
    assert!(read_csv(&dir.path().join("nope.csv"), "a", &["y".into()]).is_err());
    let p = write(&dir, "m.csv", "x,a,y\n1,1,2\n2,0,3\n");
    let err = read_csv(&p, "a", &["z".into()]).unwrap_err().to_string();
    assert!(err.contains("`z`"), "{err}");
    assert!(read_csv(&p, "a", &["a".into()]).is_err());
}

#[test]
fn million_row_round_trip_is_bit_exact() {
    let n = 1_000_000;
    let mut rng = seeded_rng(7, 0);
    let mut x = DMatrix::from_fn(n, 2, |_, _| rng.normal() * 1e3);
    // values that stress shortest round-trip printing
    x[(0, 0)] = 0.1 + 0.2;
    x[(1, 0)] = f64::MIN_POSITIVE;
    x[(2, 0)] = -1.7976931348623157e308;
    x[(3, 1)] = 5e-324;
    x[(4, 1)] = -0.0;
    let a: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
    let y = DMatrix::from_fn(n, 1, |_, _| rng.normal());
    let ds = Dataset::new(x, vec!["u".into(), "w".into()], a, y, vec!["y".into()]).unwrap();
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("big.csv");
    write_csv(&p, &ds, "a").unwrap();
    let back = read_csv(&p, "a", &["y".into()]).unwrap();
    assert_eq!(back.n(), n);
    let bits = |m: &DMatrix<f64>| m.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(back.covariates()), bits(ds.covariates()));
    assert_eq!(bits(back.outcomes()), bits(ds.outcomes()));
    assert_eq!(back.treatment(), ds.treatment());
}

#[test]
fn saturated_config_reproduces_arm_moments() {
    let dir = TempDir::new().unwrap();
    let p = write(&dir, "six.csv", "x,a,y1,y2\n1,1,3,1\n2,1,5,2\n3,1,4,6\n4,0,1,0\n5,0,2,4\n6,0,6,5\n");
    let cfg = write(
        &dir,
        "sat.toml",
        &format!(
            "input = \"{}\"\ntreatment = \"a\"\noutcomes = [\"y1\", \"y2\"]\nfeatures = []\n",
            s(&p).replace('\\', "\\\\")
        ),
    );
    let resolved = AnalysisArgs { config: Some(cfg), ..AnalysisArgs::default() }.resolve().unwrap();
    let report = cmd_estimate(&resolved).unwrap();
    let treated = [[3.0, 5.0, 4.0], [1.0, 2.0, 6.0]];
    let control = [[1.0, 2.0, 6.0], [0.0, 4.0, 5.0]];
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    for (k, row) in report.estimates.unwrap().iter().enumerate() {
        let b0 = mean(&control[k]);
        let b1 = mean(&treated[k]);
        let b2 = mean(&control[k].map(|v| v * v));
        let psi = (b1 - b0) / (b2 - b0 * b0).sqrt();
        assert!((row.estimate - psi).abs() < 1e-12, "outcome {k}: {} vs {psi}", row.estimate);
    }
}

#[test]
fn config_file_and_flag_override() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "c.toml", "input = \"x.csv\"\ntreatment = \"a\"\noutcomes = [\"y\"]\nalpha = 0.1\nseed = 9\n");
    let base = AnalysisArgs { config: Some(cfg.clone()), ..AnalysisArgs::default() };
    let r = base.resolve().unwrap();
    assert_eq!((r.alpha, r.seed, r.estimand), (0.1, 9, Estimand::ScaledMean));
    let r = AnalysisArgs { alpha: Some(0.01), ..base }.resolve().unwrap();
    assert_eq!(r.alpha, 0.01);
    let bad = write(&dir, "bad.toml", "input = \"x.csv\"\ntreatmnt = \"a\"\n");
    assert!(AnalysisArgs { config: Some(bad), ..AnalysisArgs::default() }.resolve().is_err());
}

#[test]
fn config_rejects_overlapping_roles() {
    let dir = TempDir::new().unwrap();
    let p = write(&dir, "d.csv", "x,a,y\n1,1,2\n");
    let mut a = args(&p, &["y"]);
    a.features = Some(vec!["y".into()]);
    assert!(a.resolve().is_err());
    let mut a = args(&p, &["a"]);
    assert!(a.resolve().is_err());
    a = args(&p, &["y"]);
    a.clip = Some(0.6);
    assert!(a.resolve().is_err());
    a = args(&p, &["y"]);
    a.folds = Some(1);
    assert!(a.resolve().is_err());
}

#[test]
fn unknown_feature_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let p = simulated_csv(&dir, "s.csv", 200, 2.0, 3);
    let out = run(&["estimate", "--input", s(&p), "--treatment", "a", "--outcomes", "y1", "--features", "x9"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("x9"));
}

#[test]
fn constant_control_outcome_exits_numerical() {
    let dir = TempDir::new().unwrap();
    let p = write(&dir, "c.csv", "x,a,y\n1,1,3\n2,1,5\n3,1,4\n4,0,2\n5,0,2\n6,0,2\n");
    let out = run(&["estimate", "--input", s(&p), "--treatment", "a", "--outcomes", "y", "--features", ""]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bad_flag_exits_one() {
    assert_eq!(run(&["estimate", "--frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let p = simulated_csv(&dir, "s.csv", 400, 2.0, 11);
    let o = dir.path().join("o.json");
    let outputs: Vec<Vec<u8>> = (0..2)
        .map(|_| {
            let r = run(&[
                "test", "--input", s(&p), "--treatment", "a", "--outcomes", "y1,y2,y3,y4", "--bootstrap", "100",
                "--seed", "5", "--output", s(&o),
            ]);
            assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
            fs::read(&o).unwrap()
        })
        .collect();
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn schema_keys_are_always_present() {
    let dir = TempDir::new().unwrap();
    let p = simulated_csv(&dir, "s.csv", 300, 2.0, 2);
    let o = dir.path().join("o.json");
    let r = run(&["estimate", "--input", s(&p), "--treatment", "a", "--outcomes", "y1", "--output", s(&o)]);
    assert_eq!(r.status.code(), Some(0));
    let v = json(&o);
    for key in ["command", "config", "estimand", "estimates", "covariance", "tests", "simulation", "diagnostics"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert!(v["tests"].is_null() && v["simulation"].is_null());
    assert!(v["estimates"][0]["quantiles"].is_null());
    assert!(v["config"]["stratum"].is_null());
    assert!(v["diagnostics"]["bootstrap_replicates"].is_null());
}

#[test]
fn human_table_matches_structured_output() {
    let dir = TempDir::new().unwrap();
    let p = simulated_csv(&dir, "s.csv", 500, 2.0, 4);
    let o = dir.path().join("o.json");
    let r = run(&["test", "--input", s(&p), "--treatment", "a", "--outcomes", "y1,y2,y3,y4", "--output", s(&o)]);
    assert_eq!(r.status.code(), Some(0));
    let human = String::from_utf8(r.stdout).unwrap();
    let v = json(&o);
    let mut numbers = Vec::new();
    for row in v["estimates"].as_array().unwrap() {
        for key in ["estimate", "std_error", "ci_lower", "ci_upper"] {
            numbers.push(row[key].as_f64().unwrap());
        }
    }
    for row in v["covariance"]["matrix"].as_array().unwrap() {
        numbers.extend(row.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()));
    }
    numbers.push(v["tests"]["homogeneity"]["statistic"].as_f64().unwrap());
    numbers.push(v["tests"]["homogeneity"]["p_value"].as_f64().unwrap());
    for pair in v["tests"]["pairwise"].as_array().unwrap() {
        numbers.push(pair["adjusted_p_value"].as_f64().unwrap());
    }
    let tokens: Vec<&str> = human.split(|c: char| c.is_whitespace() || c == ',' || c == '(').collect();
    for x in numbers {
        let printed = format_sig(x, 6);
        assert!(tokens.contains(&printed.as_str()), "{printed} not in\n{human}");
    }
}

#[test]
fn duplicated_outcome_gives_null_statistic_and_flag() {
    let dir = TempDir::new().unwrap();
    let ds = generate_dataset(500, 2.0, &mut seeded_rng(8, 0)).unwrap();
    let y = ds.outcome(0);
    let dup = ds.with_outcomes(DMatrix::from_fn(500, 2, |i, _| y[i]), vec!["y".into(), "y_copy".into()]).unwrap();
    let p = dir.path().join("dup.csv");
    write_csv(&p, &dup, "a").unwrap();
    let o = dir.path().join("o.json");
    let r = run(&["test", "--input", s(&p), "--treatment", "a", "--outcomes", "y,y_copy", "--output", s(&o)]);
    assert_eq!(r.status.code(), Some(0));
    let v = json(&o);
    assert!(v["tests"]["homogeneity"]["statistic"].as_f64().unwrap() < 1e-8);
    assert!(v["tests"]["homogeneity"]["p_value"].as_f64().unwrap() > 0.999);
    assert_eq!(v["diagnostics"]["pseudo_inverse"], true);
    assert_eq!(v["tests"]["homogeneity"]["df"], 0);
    assert_eq!(v["tests"]["pairwise"][0]["p_value"], 1.0);
}

#[test]
fn effect_modification_and_weights() {
    let dir = TempDir::new().unwrap();
    let mut rng = seeded_rng(21, 0);
    let n = 2000;
    let mut text = String::from("x,v,a,y1,y2\n");
    for _ in 0..n {
        let x = rng.normal();
        let v = if rng.uniform() < 0.5 { 1 } else { 2 };
        let a = rng.bernoulli(0.5) as u8;
        let y1 = x + a as f64 * v as f64 + rng.normal();
        let y2 = x - a as f64 + 2.0 * rng.normal();
        text.push_str(&format!("{x},{v},{a},{y1},{y2}\n"));
    }
    let p = write(&dir, "em.csv", &text);
    let mut em = args(&p, &["y1", "y2"]);
    em.estimand = Some(Estimand::EffectMod);
    em.stratum = Some("v".into());
    em.features = Some(vec!["x".into()]);
    let report = cmd_estimate(&em.clone().resolve().unwrap()).unwrap();
    let rows = report.estimates.unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[1].label, "y1 | v=2");
    assert!(rows[1].estimate > rows[0].estimate);

    let wfile = write(&dir, "w.csv", "outcome,stratum,weight\ny1,1,1\ny2,2,1\n");
    let inline = "y1:1=1;y2:2=1";
    assert_eq!(read_weights(s(&wfile)).unwrap(), read_weights(inline).unwrap());
    let mut ws = em.clone();
    ws.estimand = Some(Estimand::WeightedSummary);
    ws.weights = Some(s(&wfile).into());
    let from_file = cmd_estimate(&ws.clone().resolve().unwrap()).unwrap().estimates.unwrap();
    ws.weights = Some(inline.into());
    let from_inline = cmd_estimate(&ws.clone().resolve().unwrap()).unwrap().estimates.unwrap();
    assert_eq!(from_file[0].estimate, from_inline[0].estimate);
    // psi* = P(v=1) gamma_1(1) + P(v=2) gamma_2(2)
    let share1 = text.lines().skip(1).filter(|l| l.split(',').nth(1) == Some("1")).count() as f64 / n as f64;
    let expected = share1 * rows[0].estimate + (1.0 - share1) * rows[3].estimate;
    assert!((from_file[0].estimate - expected).abs() < 1e-12);

    ws.weights = Some("y9:1=1".into());
    assert_eq!(cmd_estimate(&ws.clone().resolve().unwrap()).unwrap_err().exit_code(), 1);
    ws.weights = None;
    assert!(cmd_estimate(&ws.resolve().unwrap()).is_err());
    let mut no_stratum = em;
    no_stratum.stratum = None;
    assert_eq!(cmd_estimate(&no_stratum.resolve().unwrap()).unwrap_err().exit_code(), 1);
}

#[test]
fn large_simulated_file_recovers_truth() {
    let dir = TempDir::new().unwrap();
    let p = simulated_csv(&dir, "big.csv", 100_000, 2.0, 31);
    let mut a = args(&p, &["y1", "y2", "y3", "y4"]);
    a.quadratic_eta = true;
    let report = cmd_estimate(&a.resolve().unwrap()).unwrap();
    for (row, truth) in report.estimates.unwrap().iter().zip(true_psi(2.0)) {
        assert!((row.estimate - truth).abs() < 0.05, "{}: {} vs {truth}", row.label, row.estimate);
    }
}

#[test]
fn null_files_reject_at_nominal_rate() {
    let dir = TempDir::new().unwrap();
    let files = 200;
    let mut rejected = 0;
    for f in 0..files {
        let p = simulated_csv(&dir, &format!("null{f}.csv"), 5000, 0.0, 1000 + f as u64);
        let mut a = args(&p, &["y1", "y2", "y3", "y4"]);
        a.quadratic_eta = true;
        let report = cmd_test(&a.resolve().unwrap()).unwrap();
        if report.tests.unwrap().homogeneity.p_value <= 0.05 {
            rejected += 1;
        }
        fs::remove_file(&p).unwrap();
    }
    let rate = rejected as f64 / files as f64;
    assert!((rate - 0.05).abs() <= 0.03, "rejection rate {rate}");
}

#[test]
fn quantile_estimand_reports_quantiles() {
    let dir = TempDir::new().unwrap();
    let p = simulated_csv(&dir, "q.csv", 600, 2.0, 5);
    let mut a = args(&p, &["y1", "y3"]);
    a.estimand = Some(Estimand::Quantile);
    a.quantile_closed_form = true;
    let report = cmd_estimate(&a.clone().resolve().unwrap()).unwrap();
    let rows = report.estimates.unwrap();
    for r in &rows {
        let q = r.quantiles.unwrap();
        assert!(q[3] < q[1] && q[1] < q[2]);
        assert!((r.estimate - (q[0] - q[1]) / (q[2] - q[3])).abs() < 1e-12);
        assert!(r.std_error.unwrap() > 0.0);
    }
    let cov = report.covariance.unwrap();
    assert!(cov.matrix[0][1].is_nan());
    a.quantile_closed_form = false;
    a.bootstrap = Some(100);
    let boot = cmd_estimate(&a.resolve().unwrap()).unwrap();
    assert_eq!(boot.estimates.unwrap()[0].estimate, rows[0].estimate);
    assert_eq!(boot.diagnostics.bootstrap_replicates, Some(100));
}

fn sim_args(n: usize, n_sim: usize, lambda: f64) -> SimulateArgs {
    SimulateArgs { n, n_sim, lambda, correct: Correct::Both, seed: 20240601, alpha: 0.05, clip: 0.01, output: None }
}

#[test]
fn single_replicate_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let o = dir.path().join("s.json");
    let outs: Vec<Vec<u8>> = (0..2)
        .map(|_| {
            let r = run(&["simulate", "--n", "300", "--n-sim", "1", "--seed", "3", "--output", s(&o)]);
            assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
            fs::read(&o).unwrap()
        })
        .collect();
    assert_eq!(outs[0], outs[1]);
    let v: serde_json::Value = serde_json::from_slice(&outs[0]).unwrap();
    assert_eq!(v["simulation"]["replicates"].as_array().unwrap().len(), 1);
    assert_eq!(v["diagnostics"]["excluded_replicates"], 0);
}

#[test]
fn simulate_small_sample_rmse() {
    let summary = cmd_simulate(&sim_args(200, 1000, 2.0)).unwrap().simulation.unwrap();
    for (o, target) in summary.outcomes.iter().zip([2.03, 1.32, 1.27, 1.54]) {
        assert!((o.rmse / target - 1.0).abs() <= 0.15, "{}: rmse {} vs {target}", o.outcome, o.rmse);
    }
}

#[test]
fn simulate_null_type_one_error() {
    let summary = cmd_simulate(&sim_args(1000, 1000, 0.0)).unwrap().simulation.unwrap();
    assert!((summary.rejection_rate - 0.058).abs() <= 0.025, "{}", summary.rejection_rate);
}

#[test]
fn simulate_rejects_bad_flags() {
    let mut a = sim_args(200, 10, 2.0);
    a.alpha = 1.5;
    assert_eq!(cmd_simulate(&a).unwrap_err().exit_code(), 1);
    assert_eq!(run(&["simulate", "--correct", "maybe"]).status.code(), Some(1));
}
