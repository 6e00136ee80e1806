//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sfs_core::data::{generate_synthetic, standardize, two_blobs, Dataset, Task};
use sfs_core::eval::{feature_curve, precision_at_k};
use sfs_core::gain::{evaluate_gain, GainKind, GainSpec};
use sfs_core::gradcheck::run_suite;
use sfs_core::models::{init, predict, train, ModelSpec, TrainConfig, TrainedModel};
use sfs_core::saliency::{adversarial_perturb, aggregate_classification, sample_saliency, saliency_map, AdversarialConfig};
use sfs_core::sfs::{alive_schedule, derive_seed, rank, FeatureRanking, SfsConfig};
use sfs_core::Tensor;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c1_gradient_oracle() -> Outcome {
    let start = Instant::now();
    let report = run_suite(100, 0, 1e-4).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    check(
        report.cases >= 100 && report.max_relative_error < 1e-4 && elapsed < Duration::from_secs(30),
        format!(
            "{} cases, {} coordinates, max rel err {:.2e} ({}), {:.2?}",
            report.cases, report.coordinates, report.max_relative_error, report.worst_case, elapsed
        ),
    )
}

fn c2_misclassification_silence() -> Outcome {
    let mut model = init(&ModelSpec::softmax_linear(3, 2), 0).unwrap();
    model.parameters[0] = Tensor::from_rows(&[[1.0, -1.0], [0.5, 0.25], [-0.5, 1.0]]).unwrap();
    let x = Tensor::from_rows(&[[20.0, 0.0, 0.0]]).unwrap();
    let y = Tensor::one_hot(&[1], 2).unwrap();
    let p_true = predict(&model, &x).unwrap().at(0, 1);
    let sal = sample_saliency(&model, &GainSpec::new(GainKind::CrossEntropyComplement), &x, &y).unwrap();
    let linf = sal.max_abs();

    let mut svm = init(&ModelSpec::linear_svm(2, 2), 0).unwrap();
    svm.parameters[0] = Tensor::from_rows(&[[2.0, -2.0], [0.0, 0.0]]).unwrap();
    let xs = Tensor::from_rows(&[[-1.0, 3.0]]).unwrap();
    let scores = predict(&svm, &xs).unwrap();
    let hinge = evaluate_gain(&scores, &Tensor::one_hot(&[0], 2).unwrap(), &GainSpec::new(GainKind::HingeLog)).unwrap();
    check(
        p_true < 1e-6 && linf < 1e-4 && scores.at(0, 0) <= -1.0 && hinge == 0.0,
        format!("true-class p {p_true:.1e}, CE saliency Linf {linf:.1e}; hinge margin {}, gain {hinge}", scores.at(0, 0)),
    )
}

fn c3_gain_values() -> Outcome {
    let ce = GainSpec::new(GainKind::CrossEntropyComplement);
    let half = evaluate_gain(&Tensor::from_rows(&[[0.5, 0.5]]).unwrap(), &Tensor::one_hot(&[0], 2).unwrap(), &ce).unwrap();
    let sure = evaluate_gain(&Tensor::from_rows(&[[1.0, 0.0]]).unwrap(), &Tensor::one_hot(&[0], 2).unwrap(), &ce).unwrap();
    let mse = evaluate_gain(
        &Tensor::from_rows(&[[1.0]]).unwrap(),
        &Tensor::from_rows(&[[0.0]]).unwrap(),
        &GainSpec::new(GainKind::MseInverse),
    )
    .unwrap();
    let got = [format!("{half:.6}"), format!("{sure:.6}"), format!("{mse:.6}")];
    check(got == ["0.693147", "6.907755", "0.999001"], format!("{got:?}"))
}

fn c4_aggregation_invariance() -> Outcome {
    let ds = standardize(&two_blobs(60, 3.0, 4).unwrap()).0;
    let model = train(
        &init(&ModelSpec::mlp_classifier(2, 2, &[8]), 1).unwrap(),
        &ds.x,
        &ds.target_tensor().unwrap(),
        &TrainConfig { epochs: 5, ..TrainConfig::default() },
    )
    .unwrap();
    let gain = GainSpec::new(GainKind::CrossEntropyComplement);
    let base = saliency_map(&model, &gain, &ds.x, &ds.target_tensor().unwrap()).unwrap().aggregated;

    // Class 1 three times over, class 0 twice, in shuffled order.
    let labels = ds.labels().unwrap();
    let mut rows: Vec<usize> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        rows.extend(std::iter::repeat_n(i, if l == 1 { 3 } else { 2 }));
    }
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
    let rep = ds.select_rows(&rows);
    let replicated = saliency_map(&model, &gain, &rep.x, &rep.target_tensor().unwrap()).unwrap().aggregated;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let per_sample = Tensor::new(vec![7, 5], (0..35).map(|_| rng.random_range(0.0..3.0)).collect()).unwrap();
    let single = aggregate_classification(&per_sample, &[0; 7]).unwrap();
    let l1: f64 = single.data().iter().map(|v| v.abs()).sum();
    check(
        base.data() == replicated.data() && (l1 - 1.0).abs() < 1e-12,
        format!("replicated aggregate identical: {}, single-class L1 {l1}", base.data() == replicated.data()),
    )
}

fn c5_schedules() -> Outcome {
    let a = alive_schedule(8, 0.5, 1.0).unwrap();
    let b = alive_schedule(500, 0.0, 1.0).unwrap();
    check(a == [8, 4, 2] && b == [500], format!("{a:?}, {b:?}"))
}

fn c6_single_pass_equivalence() -> Outcome {
    let ds = standardize(&generate_synthetic(200, 12, 3, Task::Classification, 0.1, 5).unwrap()).0;
    let y = ds.target_tensor().unwrap();
    let spec = ModelSpec::mlp_classifier(12, 2, &[16]);
    let mut cfg = SfsConfig::new(spec.clone(), TrainConfig { epochs: 10, ..TrainConfig::default() });
    cfg.gamma = 0.0;
    cfg.reps = 1;
    cfg.seed = 77;
    let ranked = rank(&ds.x, &y, &cfg).unwrap();

    let seed = derive_seed(77, 0, 0);
    let model = train(&init(&spec, seed).unwrap(), &ds.x, &y, &TrainConfig { seed, ..cfg.train_config.clone() }).unwrap();
    let sal = saliency_map(&model, &cfg.gain, &ds.x, &y).unwrap().aggregated;
    let mut oracle: Vec<usize> = (0..12).collect();
    oracle.sort_by(|&a, &b| sal.data()[b].partial_cmp(&sal.data()[a]).unwrap().then(a.cmp(&b)));
    check(ranked.order == oracle, format!("rank {:?} vs oracle {:?}", ranked.order, oracle))
}

/// Precision@10 on the scaled recovery benchmark for one seed.
fn recovery_precision(seed: u64, gamma: f64, reps: usize) -> f64 {
    let ds = standardize(&generate_synthetic(1000, 100, 10, Task::Classification, 0.1, seed).unwrap()).0;
    let mut cfg = SfsConfig::new(
        ModelSpec::mlp_classifier(100, 2, &[32, 16]),
        TrainConfig { seed, ..TrainConfig::default() },
    );
    cfg.gamma = gamma;
    cfg.reps = reps;
    cfg.seed = seed;
    let ranking = rank(&ds.x, &ds.target_tensor().unwrap(), &cfg).unwrap();
    precision_at_k(&ranking, ds.relevant_mask.as_deref(), 10).unwrap()
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn c7_recovery(main: &[f64], elapsed: Duration) -> Outcome {
    let m = mean(main);
    check(m >= 0.8 && elapsed < Duration::from_secs(300), format!("precision@10 {main:?}, mean {m}, {elapsed:.2?}"))
}

fn c8_gamma_trend(main: &[f64]) -> Outcome {
    let single: Vec<f64> = SEEDS.iter().map(|&s| recovery_precision(s, 0.0, 3)).collect();
    let (a, b) = (mean(main), mean(&single));
    check(a >= b, format!("gamma 0.5 mean {a} vs gamma 0 mean {b} ({single:?})"))
}

fn c9_reps_trend(main: &[f64]) -> Outcome {
    let once: Vec<f64> = SEEDS.iter().map(|&s| recovery_precision(s, 0.5, 1)).collect();
    let (a, b) = (mean(main), mean(&once));
    check(a >= b, format!("reps 3 mean {a} vs reps 1 mean {b} ({once:?})"))
}

fn regression_split(seed: u64) -> (Dataset, Dataset) {
    let ds = generate_synthetic(600, 50, 5, Task::Regression, 0.1, seed).unwrap();
    let train_ds = ds.select_rows(&(0..400).collect::<Vec<_>>());
    let test_ds = ds.select_rows(&(400..600).collect::<Vec<_>>());
    let (train_ds, stats) = standardize(&train_ds);
    (train_ds, stats.apply(&test_ds).unwrap())
}

fn c10_regression() -> Outcome {
    let start = Instant::now();
    let spec = ModelSpec::mlp_regressor(50, &[32, 16]);
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in SEEDS {
        let (train_ds, test_ds) = regression_split(seed);
        let tc = TrainConfig { seed, ..TrainConfig::default() };
        let mut cfg = SfsConfig::new(spec.clone(), tc.clone());
        cfg.gamma = 0.5;
        cfg.reps = 3;
        cfg.seed = seed;
        let sfs = rank(&train_ds.x, &train_ds.target_tensor().unwrap(), &cfg).unwrap();
        let mut order: Vec<usize> = (0..50).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(1000 + seed));
        let random = FeatureRanking { order, history: vec![], trainings: 0 };
        let mae = |r: &FeatureRanking| feature_curve(r, &train_ds, &test_ds, &spec, &tc, &[5]).unwrap().scores[0];
        let (a, b) = (mae(&sfs), mae(&random));
        wins += usize::from(a <= b);
        detail.push(format!("{a:.3}/{b:.3}"));
    }
    let elapsed = start.elapsed();
    check(
        wins >= 4 && elapsed < Duration::from_secs(120),
        format!("SFS/random MAE at k=5 {detail:?}, {wins}/5 wins, {elapsed:.2?}"),
    )
}

fn c11_adversarial() -> Outcome {
    let (train_ds, stats) = standardize(&two_blobs(400, 4.0, 11).unwrap());
    let test_ds = stats.apply(&two_blobs(200, 4.0, 12).unwrap()).unwrap();
    let model: TrainedModel = train(
        &init(&ModelSpec::softmax_linear(2, 2), 3).unwrap(),
        &train_ds.x,
        &train_ds.target_tensor().unwrap(),
        &TrainConfig { seed: 3, ..TrainConfig::default() },
    )
    .unwrap();
    let labels = test_ds.labels().unwrap();
    let mut hits = 0;
    let mut worst_iters = 0;
    for i in 0..test_ds.n_samples() {
        let x = Tensor::new(vec![1, 2], test_ds.x.row(i).to_vec()).unwrap();
        let cfg = AdversarialConfig::new(1 - labels[i]);
        let out = adversarial_perturb(&model, &x, &cfg).unwrap();
        if out.converged && out.final_confidence >= 0.95 && out.iters_used <= 500 {
            hits += 1;
            worst_iters = worst_iters.max(out.iters_used);
        }
    }
    let rate = hits as f64 / test_ds.n_samples() as f64;
    check(rate >= 0.95, format!("{hits}/{} reached 0.95 (slowest success {worst_iters} iterations)", test_ds.n_samples()))
}

fn sfs(args: &[&str], dir: &Path) {
    let out = Command::new(env!("CARGO_BIN_EXE_sfs")).args(args).current_dir(dir).output().unwrap();
    assert!(out.status.success(), "sfs {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn without_wall_clock(path: &Path) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("wall_clock_seconds");
    v
}

fn c12_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    sfs(&["gen", "--out", "data.csv", "--n", "300", "--features", "30", "--relevant", "4", "--seed", "8"], d);
    let rank_args = [
        "rank", "--data", "data.csv", "--out", "r.json", "--csv", "r.csv", "--gamma", "0.5", "--reps", "2",
        "--hidden", "16", "--epochs", "15", "--seed", "5",
    ];
    sfs(&rank_args, d);
    let first = (std::fs::read(d.join("r.json")).unwrap(), std::fs::read(d.join("r.csv")).unwrap());
    let first_manifest = without_wall_clock(&d.join("r.manifest.json"));
    sfs(&rank_args, d);
    let second = (std::fs::read(d.join("r.json")).unwrap(), std::fs::read(d.join("r.csv")).unwrap());
    let same_manifest = first_manifest == without_wall_clock(&d.join("r.manifest.json"));
    check(
        first == second && same_manifest,
        format!(
            "ranking JSON identical: {}, CSV identical: {}, manifest identical apart from wall clock: {same_manifest}",
            first.0 == second.0,
            first.1 == second.1
        ),
    )
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    match outcome {
        Ok(detail) => {
            println!("PASS {n:>2} {name}: {detail}");
            true
        }
        Err(detail) => {
            println!("FAIL {n:>2} {name}: {detail}");
            false
        }
    }
}

fn main() {
    let mut ok = true;
    ok &= run(1, "gradient oracle", c1_gradient_oracle);
    ok &= run(2, "misclassification silence", c2_misclassification_silence);
    ok &= run(3, "exact gain values", c3_gain_values);
    ok &= run(4, "aggregation invariance", c4_aggregation_invariance);
    ok &= run(5, "schedule correctness", c5_schedules);
    ok &= run(6, "single-pass oracle equivalence", c6_single_pass_equivalence);

    let start = Instant::now();
    let main_run = catch_unwind(|| SEEDS.iter().map(|&s| recovery_precision(s, 0.5, 3)).collect::<Vec<f64>>());
    let elapsed = start.elapsed();
    match main_run {
        Ok(main) => {
            ok &= run(7, "relevant-feature recovery", || c7_recovery(&main, elapsed));
            ok &= run(8, "gamma trend", || c8_gamma_trend(&main));
            ok &= run(9, "reps trend", || c9_reps_trend(&main));
        }
        Err(_) => {
            for (n, name) in [(7, "relevant-feature recovery"), (8, "gamma trend"), (9, "reps trend")] {
                ok &= run(n, name, || Err("recovery benchmark panicked".into()));
            }
        }
    }
    ok &= run(10, "regression path", c10_regression);
    ok &= run(11, "adversarial probe", c11_adversarial);
    ok &= run(12, "rank determinism", c12_determinism);
    if !ok {
        std::process::exit(1);
    }
}
