use std::fs;
use std::process::{Command, Output};

use regex::Regex;

fn taugate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_taugate"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(taugate(&[]).status.code(), Some(1));
    assert_eq!(taugate(&["run", "--gate-mode", "medium"]).status.code(), Some(1));
    assert_eq!(taugate(&["frobnicate"]).status.code(), Some(1));
    let bad_method = taugate(&["run", "--methods", "taugate,prefix"]);
    assert_eq!(bad_method.status.code(), Some(1));
    assert!(stderr(&bad_method).contains("prefix"));
    assert_eq!(taugate(&["run", "--lr", "-1"]).status.code(), Some(1));
}

#[test]
fn help_exits_0() {
    let o = taugate(&["run", "--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for flag in ["--methods", "--seeds", "--data-dir", "--extras", "--lambda", "--sharpness", "--lora-rank", "--lr", "--out-dir", "--gate-mode"] {
        assert!(text.contains(flag), "missing {flag}");
    }
}

#[test]
fn missing_data_exits_2_and_names_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = taugate(&["run", "--data-dir", dir.path().to_str().unwrap(), "--offline"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for name in [
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    ] {
        assert!(err.contains(name), "{name} not named in: {err}");
    }
}

#[test]
fn malformed_idx_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    for name in [
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    ] {
        fs::write(dir.path().join(name), [0u8, 0, 8, 3, 0]).unwrap();
    }
    let o = taugate(&["run", "--data-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn report_regenerates_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = "kind,method,seed,trainable_params,acc_0deg,acc_45deg,high_act_frac,foundation_checksum,layer,stat,value\n\
run,frozen,0,0,0.83,0.84,,ff00,,,\n\
run,taugate,0,512,0.85,0.86,0.3,ff00,,,\n\
run,frozen,1,0,0.81,0.82,,aa11,,,\n\
run,taugate,1,512,0.84,0.85,0.25,aa11,,,\n\
stat,taugate,0,,,,,,1,jaccard_0v45,1\n\
stat,taugate,0,,,,,,2,jaccard_0v45,0.5\n\
stat,taugate,0,,,,,,avg,jaccard_0v45,0.75\n";
    let csv_path = dir.path().join("results.csv");
    fs::write(&csv_path, csv).unwrap();
    let args = [
        "report",
        "--csv",
        csv_path.to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ];
    let o = taugate(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let main = fs::read_to_string(dir.path().join("tables/mnist_rotation_results.tex")).unwrap();
    assert!(main.contains("Frozen (no adapt) & 0 & 0.820 $\\pm$ 0.014 & 0.830 $\\pm$ 0.014 & -- \\\\"), "{main}");
    assert!(main.contains("TauGate (threshold tuning) & 512 & 0.845 $\\pm$ 0.007 & 0.855 $\\pm$ 0.007 & 0.28 \\\\"), "{main}");
    let overlap = fs::read_to_string(dir.path().join("tables/taugate_overlap.tex")).unwrap();
    assert!(overlap.contains("Hidden 2 & 0.500 $\\pm$ 0.000"));
    assert!(!dir.path().join("tables/mnist_rotation_ablations.tex").exists());

    let svg = fs::read_to_string(dir.path().join("figures/mnist_rotation_accuracy.svg")).unwrap();
    let bar = Regex::new(r#"class="bar" data-method="(\w+)" data-mode="45deg"[^>]* height="([\d.]+)""#).unwrap();
    let heights: Vec<(String, f64)> = bar
        .captures_iter(&svg)
        .map(|c| (c[1].to_string(), c[2].parse().unwrap()))
        .collect();
    assert_eq!(heights.len(), 2);
    assert!((heights[0].1 / 0.83 - heights[1].1 / 0.855).abs() < 0.1);

    // Idempotent: a second regeneration writes identical bytes.
    let before = fs::read(dir.path().join("tables/mnist_rotation_results.tex")).unwrap();
    assert_eq!(taugate(&args).status.code(), Some(0));
    assert_eq!(fs::read(dir.path().join("tables/mnist_rotation_results.tex")).unwrap(), before);
}

#[test]
fn report_on_missing_or_bad_csv() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.csv");
    assert_eq!(taugate(&["report", "--csv", missing.to_str().unwrap()]).status.code(), Some(2));
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "a,b\n1,2\n").unwrap();
    assert_eq!(taugate(&["report", "--csv", bad.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn check_passes() {
    let o = taugate(&["check", "--coords", "16"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.lines().all(|l| l.starts_with("PASS ")));
    assert!(out.contains("grad/taugate/lambda=0.1"));
}
