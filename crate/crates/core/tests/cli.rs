use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const EXE: &str = env!("CARGO_BIN_EXE_factorsens");

fn run(args: &[&str]) -> Output {
    Command::new(EXE).args(args).output().expect("binary runs")
}

fn outcomes_list(q: usize) -> String {
    (1..=q).map(|j| format!("y{j}")).collect::<Vec<_>>().join(",")
}

fn simulate(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("sim");
    let mut args = vec!["simulate", "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("data.csv")
}

fn analyze(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let outcomes = outcomes_list(10);
    let mut args = vec![
        "analyze",
        "--data",
        data.to_str().unwrap(),
        "--outcomes",
        &outcomes,
        "--treatment",
        "t",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    run(&args)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        assert!(run(&["simulate", "--n", "300", "--seed", "8", "--out", out.to_str().unwrap()]).status.success());
    }
    for f in ["data.csv", "truth.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    let header = fs::read_to_string(a.join("data.csv")).unwrap();
    assert!(header.starts_with("y1,y2,y3,y4,y5,y6,y7,y8,y9,y10,t\n"));
}

#[test]
fn analyze_writes_all_outputs_and_report_rerenders() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), &["--n", "500", "--seed", "3"]);
    let out = dir.path().join("out");
    let o = analyze(&data, &out, &["--rank", "2", "--r2", "0.4,0.7", "--bootstrap", "30"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["report.json", "intervals.svg", "benchmark.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["outcomes"].as_array().unwrap().len(), 10);
    assert_eq!(report["outcomes"][0]["regions"].as_array().unwrap().len(), 2);

    let again = dir.path().join("again");
    let o = run(&["report", "--report", out.join("report.json").to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(fs::read(out.join("intervals.svg")).unwrap(), fs::read(again.join("intervals.svg")).unwrap());
}

#[test]
fn zero_budget_collapses_and_controls_only_shrink() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), &["--seed", "12"]);
    let zero = dir.path().join("zero");
    assert!(analyze(&data, &zero, &["--rank", "2", "--r2", "0"]).status.success());
    let rep = read_json(&zero.join("report.json"));
    for row in rep["outcomes"].as_array().unwrap() {
        let reg = &row["regions"][0]["factor"];
        assert_eq!(reg["lower"], reg["upper"]);
        assert_eq!(reg["center"], row["nuc"]["estimate"]);
    }

    let plain = dir.path().join("plain");
    let nc = dir.path().join("nc");
    assert!(analyze(&data, &plain, &["--rank", "2", "--r2", "0.9"]).status.success());
    let o = analyze(&data, &nc, &["--rank", "2", "--r2", "0.9", "--null-controls", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a = read_json(&plain.join("report.json"));
    let b = read_json(&nc.join("report.json"));
    for (ra, rb) in a["outcomes"].as_array().unwrap().iter().zip(b["outcomes"].as_array().unwrap()) {
        let fw = ra["regions"][0]["factor"]["halfwidth"].as_f64().unwrap();
        let nw = rb["regions"][0]["null_control"]["halfwidth"].as_f64().unwrap();
        assert!(nw <= fw + 1e-12, "{nw} > {fw}");
    }
    assert_eq!(b["settings"]["null_controls"][0], 1);
    assert!(b["null_controls"]["r2_min"].as_f64().unwrap() > 0.0);
}

#[test]
fn infeasibility_and_validation_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), &["--seed", "4"]);
    let out = dir.path().join("out");
    // budget far below the minimum implied by a confounded control
    let o = analyze(&data, &out, &["--rank", "2", "--r2", "0.000001", "--null-controls", "1"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    // more controls than factors: their effects are not in the loading column space
    let o = analyze(&data, &out, &["--rank", "1", "--r2", "0.5", "--null-controls", "1,4,6"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    // with projection the same request succeeds and says so
    let o = analyze(&data, &out, &["--rank", "1", "--r2", "0.99", "--null-controls", "1,4,6", "--project-controls"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("projected"));

    assert_eq!(analyze(&data, &out, &["--r2", "1.0"]).status.code(), Some(2));
    assert_eq!(analyze(&data, &out, &["--null-controls", "0"]).status.code(), Some(2));
    assert_eq!(analyze(&data, &out, &["--lambda", "0.05"]).status.code(), Some(2));
    assert_eq!(analyze(&data, &out, &["--contrast", "1,-1"]).status.code(), Some(2));
    let o = run(&["analyze", "--data", data.to_str().unwrap(), "--outcomes", "y1,nope", "--treatment", "t", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(run(&["simulate", "--rho2", "1.0", "--out", out.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(run(&["analyze", "--bogus"]).status.code(), Some(2));
}

/// Simulated data with the treatment dichotomised at zero and two covariates.
fn binary_data(dir: &Path) -> PathBuf {
    let data = simulate(dir, &["--n", "800", "--p", "2", "--seed", "6"]);
    let text = fs::read_to_string(&data).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().to_string();
    let t_col = header.split(',').position(|h| h == "t").unwrap();
    let mut out = header + "\n";
    for line in lines {
        let mut cells: Vec<String> = line.split(',').map(str::to_string).collect();
        let t: f64 = cells[t_col].parse().unwrap();
        cells[t_col] = if t > 0.0 { "1".into() } else { "0".into() };
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    let path = dir.join("binary.csv");
    fs::write(&path, out).unwrap();
    path
}

#[test]
fn calibrate_and_lambda_with_binary_treatment() {
    let dir = tempfile::tempdir().unwrap();
    let data = binary_data(dir.path());
    let d = data.to_str().unwrap();
    let outcomes = outcomes_list(10);
    let cal = dir.path().join("cal");
    let base = ["--data", d, "--outcomes", &outcomes, "--treatment", "t", "--covariates", "x1,x2"];

    let mut args = vec!["calibrate"];
    args.extend_from_slice(&base);
    args.extend_from_slice(&["--lambda", "0.05", "--out", cal.to_str().unwrap()]);
    let o = run(&args);
    assert_eq!(o.status.code(), Some(2), "lambda without --binary must be rejected");
    args.push("--binary");
    let o = run(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(cal.join("benchmark.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("covariate,partial_r2_treatment,partial_r2_y1"));
    let lambda: f64 = rows[1].rsplit(',').next().unwrap().parse().unwrap();
    assert!(lambda > 1.0);

    let out = dir.path().join("an");
    let mut args = vec!["analyze"];
    args.extend_from_slice(&base);
    args.extend_from_slice(&["--binary", "--rank", "2", "--r2", "0.2", "--lambda", "0.05", "--out", out.to_str().unwrap()]);
    let o = run(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rep = read_json(&out.join("report.json"));
    assert!(rep["budgets"][0]["lambda"].as_f64().unwrap() > 1.0);
    assert!(rep["outcomes"][4]["robustness_lambda"]["rv_gamma"].as_f64().unwrap() >= 1.0);
    assert_eq!(rep["benchmark"].as_array().unwrap().len(), 2);
}

#[test]
fn fit_and_robustness_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), &["--seed", "9"]);
    let d = data.to_str().unwrap();
    let outcomes = outcomes_list(10);
    let out = dir.path().join("o");
    let o = run(&["fit", "--data", d, "--outcomes", &outcomes, "--treatment", "t", "--auto-rank", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let fit = read_json(&out.join("fit.json"));
    assert_eq!(fit["factor"]["m"], 2);
    assert_eq!(fit["factor"]["model"]["gamma"].as_array().unwrap().len(), 10);

    let o = run(&[
        "robustness", "--data", d, "--outcomes", &outcomes, "--treatment", "t", "--rank", "2", "--null-controls", "1",
        "--contrast", "0,0,1,0,0,0,0,0,0,-1", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rv = read_json(&out.join("robustness.json"));
    let row = &rv["rows"][0];
    assert_eq!(row["label"], "contrast1");
    let rvg = row["rv_gamma"].as_f64().unwrap();
    let rvc = row["rv_combined"].as_f64().unwrap();
    assert!(row["xrv"].as_f64().unwrap() <= rvg);
    assert!(rvc >= rv["r2_min"].as_f64().unwrap().max(rvg) - 1e-12);
}
