use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use qif_fda::harness::parse_report_csv;

fn qif_fda(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qif-fda"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn simulate_data(dir: &Path) {
    let out = qif_fda(
        &[
            "simulate",
            "--scenario",
            "ou3",
            "--n",
            "40",
            "--m",
            "30",
            "--reps",
            "1",
            "--methods",
            "init",
            "--seed",
            "5",
            "--emit-data",
            "data",
            "--out",
            "r.csv",
        ],
        dir,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["simulate", "--scenario", "zz"],
        vec!["simulate", "--scenario", "pe3"],
        vec!["simulate", "--scenario", "bm", "--methods", "fda-0"],
        vec!["simulate", "--scenario", "bm", "--reps", "0"],
        vec!["simulate", "--scenario", "bm", "--bandwidth", "wide"],
        vec!["fit", "--data", "missing.csv", "--out", "x.csv"],
    ] {
        let out = qif_fda(&args, dir.path());
        assert_eq!(
            out.status.code(),
            Some(2),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

#[test]
fn unsafe_params_need_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let base = [
        "simulate",
        "--scenario",
        "pe3",
        "--n",
        "20",
        "--m",
        "15",
        "--reps",
        "1",
        "--methods",
        "init",
    ];
    assert_eq!(qif_fda(&base, dir.path()).status.code(), Some(2));
    let mut args = base.to_vec();
    args.push("--unsafe-params");
    assert!(qif_fda(&args, dir.path()).status.success());
}

#[test]
fn method_without_successes_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    // three subjects cannot support six moment conditions
    let out = qif_fda(
        &[
            "simulate",
            "--scenario",
            "bm",
            "--n",
            "3",
            "--m",
            "20",
            "--reps",
            "2",
            "--methods",
            "init,fda-3",
            "--bandwidth",
            "0.2",
            "--grid",
            "21",
            "--out",
            "r.csv",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3));
    let report = parse_report_csv(fs::File::open(dir.path().join("r.csv")).unwrap()).unwrap();
    assert_eq!(report[0].successes, 2);
    assert_eq!(report[1].successes, 0);
    assert_eq!(report[1].coefficients[0], [None; 4]);
}

#[test]
fn markdown_report_to_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let out = qif_fda(
        &[
            "simulate",
            "--scenario",
            "lp2",
            "--n",
            "30",
            "--m",
            "20",
            "--reps",
            "2",
            "--methods",
            "init,ldaCS,fda-2",
            "--grid",
            "21",
            "--bandwidth",
            "0.2",
            "--format",
            "md",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("Scenario lp2"));
    assert_eq!(text.lines().filter(|l| l.starts_with("| ")).count(), 4);
}

#[test]
fn fit_writes_estimates_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    simulate_data(dir.path());
    for (method, kind) in [("fda", "sandwich"), ("ar1", "sandwich_analogue"), ("init", "none")] {
        let out = qif_fda(
            &[
                "fit",
                "--data",
                "data/rep_0000.csv",
                "--method",
                method,
                "--grid",
                "31",
                "--out",
                "est.csv",
                "--dump-sandwich",
                "sw.json",
            ],
            dir.path(),
        );
        let estimates = fs::read_to_string(dir.path().join("est.csv")).unwrap();
        let lines: Vec<&str> = estimates.lines().collect();
        assert_eq!(lines[0], "coefficient,estimate,std_error");
        assert!(lines[1].starts_with("x1,") && lines[2].starts_with("x2,"));
        let sidecar: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("est.json")).unwrap()).unwrap();
        assert_eq!(sidecar["std_error_kind"], kind);
        assert_eq!(sidecar["n"], 40);
        if method == "init" {
            // nothing to dump for the initializer
            assert_eq!(out.status.code(), Some(1));
            assert!(lines[1].ends_with(",NA"));
        } else {
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
            assert_eq!(sidecar["converged"], true);
            let trace = sidecar["objective_trace"].as_array().unwrap();
            assert_eq!(trace[0], sidecar["q_init"]);
            let sw: serde_json::Value =
                serde_json::from_str(&fs::read_to_string(dir.path().join("sw.json")).unwrap()).unwrap();
            assert_eq!(sw["b_hat"].as_array().unwrap().len(), 2);
        }
        if method == "fda" {
            let fve = sidecar["fve"].as_f64().unwrap();
            assert!(fve >= 0.95, "{fve}");
            assert!(sidecar["bandwidth"].as_f64().unwrap() > 0.0);
        }
    }
}

#[test]
fn fpca_table_shape() {
    let dir = tempfile::tempdir().unwrap();
    simulate_data(dir.path());
    let out = qif_fda(
        &[
            "fpca",
            "--data",
            "data/rep_0000.csv",
            "--grid",
            "26",
            "--bandwidth",
            "0.2",
            "--out",
            "eig.csv",
            "--surface",
            "surf.csv",
            "--scree",
            "scree.csv",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let eig = fs::read_to_string(dir.path().join("eig.csv")).unwrap();
    let mut lines = eig.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 3 + 26);
    let first: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(first[0], 1.0);
    assert!(first[1] > 0.0 && first[2] > 0.0 && first[2] <= 1.0);
    let surf = fs::read_to_string(dir.path().join("surf.csv")).unwrap();
    assert_eq!(surf.lines().count(), 1 + 26 * 26);
    let scree = fs::read_to_string(dir.path().join("scree.csv")).unwrap();
    assert_eq!(scree.lines().count(), eig.lines().count());
}
