use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn sfs(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfs")).args(args).current_dir(dir).env_remove("SFS_SEED").output().unwrap()
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let out = sfs(args, dir);
    assert!(out.status.success(), "sfs {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn gen_small(dir: &Path, name: &str, seed: &str) {
    ok(&["gen", "--out", name, "--n", "120", "--features", "12", "--relevant", "3", "--seed", seed], dir);
}

const QUICK: [&str; 6] = ["--hidden", "8", "--epochs", "5", "--learning-rate", "0.01"];

fn single_line_failure(out: &Output, code: i32) {
    assert_eq!(out.status.code(), Some(code), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "{err:?}");
    assert!(err.starts_with("sfs: "), "{err:?}");
}

#[test]
fn single_pass_rank_is_a_full_permutation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen", "--out", "d.csv", "--n", "200", "--features", "100", "--relevant", "10"], d);
    let mut args = vec!["rank", "--data", "d.csv", "--out", "r.json", "--gamma", "0", "--reps", "3"];
    args.extend(QUICK);
    ok(&args, d);
    let r = json(&d.join("r.json"));
    let mut order: Vec<u64> = r["order"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert_eq!(r["trainings"], 3);
    order.sort_unstable();
    assert_eq!(order, (0..100).collect::<Vec<u64>>());
    let m = json(&d.join("r.manifest.json"));
    assert_eq!(m["command"], "rank");
    assert_eq!(m["inputs"][0]["path"], "d.csv");
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn gen_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_small(d, "a.csv", "4");
    gen_small(d, "b.csv", "4");
    gen_small(d, "c.csv", "5");
    let read = |n: &str| std::fs::read(d.join(n)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_ne!(read("a.csv"), read("c.csv"));
    let mask = json(&d.join("a.mask.json"));
    assert_eq!(mask["relevant"].as_array().unwrap().len(), 3);
    assert_eq!(mask["mask"].as_array().unwrap().len(), 12);
}

#[test]
fn thread_count_leaves_the_ranking_alone() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_small(d, "d.csv", "1");
    let run = |threads: &str, out: &str| {
        let mut args = vec!["rank", "--data", "d.csv", "--out", out, "--gamma", "0.5", "--threads", threads];
        args.extend(QUICK);
        ok(&args, d);
        let v = json(&d.join(out));
        (v["order"].clone(), v["history"].clone())
    };
    assert_eq!(run("1", "one.json"), run("3", "three.json"));
}

#[test]
fn flags_beat_config_files_beat_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("cfg.json"), r#"{"n": 30, "features": 6, "relevant": 2, "seed": 9}"#).unwrap();
    ok(&["gen", "--config", "cfg.json", "--out", "a.csv", "--features", "5"], d);
    let m = json(&d.join("a.manifest.json"));
    assert_eq!(m["config"]["n"], 30);
    assert_eq!(m["config"]["features"], 5);
    assert_eq!(m["config"]["noise"], 0.1);
    assert_eq!(m["config"]["seed"], 9);
    assert_eq!(m["inputs"][0]["path"], "cfg.json");

    let out = Command::new(env!("CARGO_BIN_EXE_sfs"))
        .args(["gen", "--config", "cfg.json", "--out", "b.csv"])
        .current_dir(d)
        .env("SFS_SEED", "77")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(json(&d.join("b.manifest.json"))["config"]["seed"], 77);
    assert_eq!(json(&d.join("b.manifest.json"))["seeds"]["base"], 77);
}

#[test]
fn validation_errors_exit_1_on_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_small(d, "d.csv", "0");
    single_line_failure(&sfs(&["rank", "--data", "d.csv", "--out", "r.json", "--gamma", "1.5"], d), 1);
    single_line_failure(&sfs(&["rank", "--data", "missing.csv", "--out", "r.json"], d), 1);
    single_line_failure(&sfs(&["rank", "--data", "d.csv", "--out", "r.json", "--model", "mlp_regressor"], d), 1);
    single_line_failure(&sfs(&["gen", "--out", "x.csv", "--features", "3", "--relevant", "5"], d), 1);
    single_line_failure(&sfs(&["gen", "--out", "x.csv", "--bogus"], d), 1);
    std::fs::write(d.join("bad.json"), r#"{"nn": 3}"#).unwrap();
    single_line_failure(&sfs(&["gen", "--config", "bad.json", "--out", "x.csv"], d), 1);
    assert!(!d.join("r.json").exists());
    assert!(!d.join("x.csv").exists());
}

#[test]
fn numeric_failures_exit_2_and_keep_old_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("r.json"), "previous").unwrap();
    let mut rows = String::from("a,b,y\n");
    for i in 0..20 {
        rows.push_str(&format!("{}e300,{},{}\n", i % 7 + 1, -(i as f64), i % 2));
    }
    std::fs::write(d.join("huge.csv"), rows).unwrap();
    let out = sfs(
        &[
            "rank", "--data", "huge.csv", "--out", "r.json", "--standardize", "false", "--learning-rate", "1e10",
            "--hidden", "4", "--epochs", "3",
        ],
        d,
    );
    single_line_failure(&out, 2);
    assert_eq!(std::fs::read_to_string(d.join("r.json")).unwrap(), "previous");
    assert!(!d.join("r.manifest.json").exists());

    single_line_failure(&sfs(&["gradcheck", "--cases", "1", "--tolerance", "0"], d), 2);
}

#[test]
fn gradcheck_passes_by_default() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck", "--out", "g.json"], dir.path());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("max relative error"));
    let report = json(&dir.path().join("g.json"));
    assert!(report["cases"].as_u64().unwrap() >= 100);
    assert!(report["max_relative_error"].as_f64().unwrap() < 1e-4);
}

#[test]
fn adversarial_run_records_its_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_small(d, "d.csv", "2");
    ok(
        &[
            "adv", "--data", "d.csv", "--target", "1", "--out", "a.json", "--model", "softmax_linear", "--limit", "5",
            "--epochs", "20", "--learning-rate", "0.01",
        ],
        d,
    );
    let a = json(&d.join("a.json"));
    assert_eq!(a["threshold"], 0.95);
    assert_eq!(a["samples"].as_array().unwrap().len(), 5);
    assert_eq!(json(&d.join("a.manifest.json"))["config"]["threshold"], 0.95);
    single_line_failure(
        &sfs(&["adv", "--data", "d.csv", "--target", "1", "--out", "b.json", "--model", "linear_svm"], d),
        1,
    );
}

#[test]
fn eval_reports_precision_with_a_mask() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_small(d, "train.csv", "3");
    gen_small(d, "test.csv", "3");
    let mut args = vec!["rank", "--data", "train.csv", "--out", "r.json"];
    args.extend(QUICK);
    ok(&args, d);
    let mut args = vec![
        "eval", "--train", "train.csv", "--test", "test.csv", "--ranking", "r.json", "--mask", "train.mask.json",
        "--ks", "1,3,12", "--out", "curve.csv", "--json", "curve.json",
    ];
    args.extend(QUICK);
    let out = ok(&args, d);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().filter(|l| l.contains("precision=")).count(), 3);
    let curve = std::fs::read_to_string(d.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("k,score"));
    assert_eq!(curve.lines().count(), 4);
    let v = json(&d.join("curve.json"));
    assert_eq!(v["precision_at_k"].as_array().unwrap().last().unwrap()["precision"], 0.25);
}
