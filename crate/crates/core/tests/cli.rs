use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bqr::cli::io::{fmt_num, load_csv};
use bqr::sim::{replication_data, ScenarioSpec};

const GINI: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/data/gini_synthetic.csv");

fn bqr(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bqr"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn read_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let header = rdr.headers().unwrap().iter().map(String::from).collect();
    let rows = rdr
        .records()
        .map(|r| r.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn column<'a>(header: &[String], rows: &'a [Vec<String>], name: &str) -> Vec<&'a str> {
    let k = header.iter().position(|h| h == name).unwrap();
    rows.iter().map(|r| r[k].as_str()).collect()
}

/// Writes one simulated replication as `y,x1,x2,x3`.
fn write_scenario(scenario: u8, dir: &Path) -> (PathBuf, Option<usize>) {
    let spec = ScenarioSpec::scenario(scenario, 1, 3).unwrap();
    let (data, rows, _) = replication_data(&spec, 0).unwrap();
    let path = dir.join(format!("scenario{scenario}.csv"));
    let mut w = csv::Writer::from_path(&path).unwrap();
    w.write_record(["y", "x1", "x2", "x3"]).unwrap();
    for i in 0..data.n_obs() {
        let x = data.x().row(i);
        w.write_record([data.y()[i], x[1], x[2], x[3]].map(fmt_num)).unwrap();
    }
    w.flush().unwrap();
    (path, rows.ast)
}

#[test]
fn bundled_file_loads() {
    let d = load_csv(Path::new(GINI), "gini", true).unwrap();
    assert_eq!((d.n_obs(), d.n_coef()), (81, 5));
    assert_eq!(d.column_names()[0], "intercept");
    let d = load_csv(Path::new(GINI), "gini", false).unwrap();
    assert_eq!(d.n_coef(), 4);
}

#[test]
fn failures_exit_nonzero_with_one_json_line() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty.csv");
    let header_only = tmp.path().join("header.csv");
    std::fs::write(&empty, "").unwrap();
    std::fs::write(&header_only, "y,x\n").unwrap();
    let cases = [
        vec!["fit", "--input", empty.to_str().unwrap(), "--response", "y"],
        vec!["fit", "--input", header_only.to_str().unwrap(), "--response", "y"],
        vec!["fit", "--input", GINI, "--response", "nope"],
        vec!["diagnose", "--input", GINI, "--response", "gini", "--taus", "0.5,0.5"],
    ];
    for args in cases {
        let out = bqr(&args, &tmp.path().join("out"));
        assert!(!out.status.success(), "{args:?}");
        let stderr = String::from_utf8(out.stderr).unwrap();
        assert_eq!(stderr.trim_end().lines().count(), 1, "{stderr}");
        let record: serde_json::Value = serde_json::from_str(stderr.trim_end()).unwrap();
        assert_eq!(record["status"], "error");
        assert!(record["kind"].is_string());
    }
}

#[test]
fn fit_writes_summaries_that_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("fit");
    let taus = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9";
    let run = bqr(&["fit", "--input", GINI, "--response", "gini", "--taus", taus, "--draws"], &out);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));

    let (header, rows) = read_rows(&out.join("beta_summary.csv"));
    assert_eq!(header, ["tau", "parameter", "mean", "median", "lower", "upper"]);
    assert_eq!(rows.len(), 9 * 5);
    for row in &rows {
        for cell in [&row[0], &row[2], &row[3], &row[4], &row[5]] {
            assert_eq!(&fmt_num(cell.parse::<f64>().unwrap()), cell);
        }
        let (lo, hi): (f64, f64) = (row[4].parse().unwrap(), row[5].parse().unwrap());
        assert!(lo <= hi);
    }

    let (header, rows) = read_rows(&out.join("sigma_summary.csv"));
    let sigma: Vec<f64> = column(&header, &rows, "mean").iter().map(|s| s.parse().unwrap()).collect();
    let peak = sigma.iter().copied().fold(f64::MIN, f64::max);
    assert!(sigma[0] < peak && sigma[8] < peak, "{sigma:?}");
    assert!(sigma[4] > sigma[0] && sigma[4] > sigma[8], "{sigma:?}");

    let (header, rows) = read_rows(&out.join("draws_tau=0.5.csv"));
    assert_eq!(header.len(), 1 + 5 + 1);
    assert_eq!(rows.len(), 2000);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["tau_list"].as_array().unwrap().len(), 9);
}

#[test]
fn diagnose_flags_planted_row_only() {
    let tmp = tempfile::tempdir().unwrap();
    let (path, ast) = write_scenario(4, tmp.path());
    let ast_row = ast.unwrap() + 1;
    let out = tmp.path().join("diag");
    let run = bqr(&["diagnose", "--input", path.to_str().unwrap(), "--response", "y", "--taus", "0.1"], &out);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let (header, rows) = read_rows(&out.join("outliers_tau=0.1.csv"));
    assert_eq!(header, ["row_index", "probability", "mean_kl", "flagged"]);
    let flagged: Vec<usize> = rows
        .iter()
        .filter(|r| r[3] == "true")
        .map(|r| r[0].parse().unwrap())
        .collect();
    assert!(flagged.contains(&ast_row), "{flagged:?}");

    let out = tmp.path().join("diag_strict");
    let run = bqr(
        &["diagnose", "--input", path.to_str().unwrap(), "--response", "y", "--taus", "0.1", "--flag-threshold", "1.0"],
        &out,
    );
    assert!(run.status.success());
    let (_, rows) = read_rows(&out.join("outliers_tau=0.1.csv"));
    assert!(rows.iter().all(|r| r[3] == "false"));
}

#[test]
fn diagnose_flags_nothing_without_outliers() {
    let tmp = tempfile::tempdir().unwrap();
    let (path, _) = write_scenario(1, tmp.path());
    let out = tmp.path().join("diag");
    let run = bqr(
        &["diagnose", "--input", path.to_str().unwrap(), "--response", "y", "--taus", "0.25,0.5,0.75", "--kl-mode", "single"],
        &out,
    );
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    for tau in ["0.25", "0.5", "0.75"] {
        let (_, rows) = read_rows(&out.join(format!("outliers_tau={tau}.csv")));
        assert_eq!(rows.len(), 100);
        assert!(rows.iter().all(|r| r[3] == "false"), "tau {tau}");
    }
}

#[test]
fn simulate_reports_each_quantile() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("s4");
    let run = bqr(&["simulate", "--scenario", "4", "--reps", "20", "--seed", "7"], &out);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let (header, rows) = read_rows(&out.join("summary.csv"));
    let targets = column(&header, &rows, "target");
    let taus = column(&header, &rows, "tau");
    let measures = column(&header, &rows, "measure");
    for tau in ["0.1", "0.5", "0.9"] {
        assert!((0..rows.len()).any(|k| targets[k] == "ast" && taus[k] == tau && measures[k] == "probability"));
    }
    assert!(!targets.contains(&"star"));

    let out = tmp.path().join("s1");
    let run = bqr(&["simulate", "--scenario", "1", "--reps", "2", "--iterations", "600", "--burnin", "200"], &out);
    assert!(run.status.success());
    let (header, rows) = read_rows(&out.join("summary.csv"));
    assert!(!rows.is_empty());
    assert!(column(&header, &rows, "target").iter().all(|&t| t == "base"));
}

#[test]
fn calibrate_emits_both_sample_sizes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("cal");
    let run = bqr(&["calibrate", "--reps", "2", "--iterations", "600", "--burnin", "200"], &out);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let (header, rows) = read_rows(&out.join("calibration_summary.csv"));
    let ns = column(&header, &rows, "n");
    assert_eq!(rows.len(), 6);
    assert_eq!(ns.iter().filter(|&&n| n == "100").count(), 3);
    assert_eq!(ns.iter().filter(|&&n| n == "300").count(), 3);
}
