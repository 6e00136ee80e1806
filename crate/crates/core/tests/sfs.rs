use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sfs_core::data::{generate_synthetic, Task};
use sfs_core::models::{init, predict, train, ModelSpec, TrainConfig};
use sfs_core::saliency::saliency_map;
use sfs_core::sfs::{alive_schedule, derive_seed, rank, FeatureRanking, SfsConfig};
use sfs_core::Tensor;

fn cheap_train() -> TrainConfig {
    TrainConfig { epochs: 8, batch_size: 16, learning_rate: 1e-2, ..TrainConfig::default() }
}

/// Features 0 and 1 decide the label; 2 and 3 are noise.
fn sum_sign_data(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..4 * n).map(|_| rng.sample(StandardNormal)).collect();
    let x = Tensor::new(vec![n, 4], data).unwrap();
    let labels = (0..n).map(|i| usize::from(x.at(i, 0) + x.at(i, 1) > 0.0)).collect();
    (x, labels)
}

fn training_accuracy(x: &Tensor, labels: &[usize], keep: &[bool]) -> f64 {
    let xk = x.zero_columns_except(keep);
    let y = Tensor::one_hot(labels, 2).unwrap();
    let cfg = TrainConfig { epochs: 30, learning_rate: 1e-2, ..TrainConfig::default() };
    let m = train(&init(&ModelSpec::softmax_linear(4, 2), 0).unwrap(), &xk, &y, &cfg).unwrap();
    let pred = predict(&m, &xk).unwrap().argmax_rows();
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

fn small_config(r: usize, gamma: f64, reps: usize) -> SfsConfig {
    SfsConfig { gamma, reps, ..SfsConfig::new(ModelSpec::mlp_classifier(r, 2, &[8]), cheap_train()) }
}

#[test]
fn informative_pair_ranks_first() {
    let (x, labels) = sum_sign_data(400, 3);
    // Oracle: among all pairs, {0, 1} alone explains the labels best.
    let mut best = (0.0, (0, 0));
    for a in 0..4 {
        for b in a + 1..4 {
            let keep: Vec<bool> = (0..4).map(|j| j == a || j == b).collect();
            let acc = training_accuracy(&x, &labels, &keep);
            if acc > best.0 {
                best = (acc, (a, b));
            }
        }
    }
    assert_eq!(best.1, (0, 1));

    let y = Tensor::one_hot(&labels, 2).unwrap();
    let ranking = rank(&x, &y, &small_config(4, 0.0, 3)).unwrap();
    let mut top: Vec<usize> = ranking.top(2).to_vec();
    top.sort_unstable();
    assert_eq!(top, vec![0, 1]);
}

#[test]
fn single_pass_matches_a_direct_saliency_sort() {
    let ds = generate_synthetic(120, 6, 2, Task::Classification, 0.1, 4).unwrap();
    let y = ds.target_tensor().unwrap();
    let cfg = SfsConfig { seed: 9, ..small_config(6, 0.0, 1) };
    let ranking = rank(&ds.x, &y, &cfg).unwrap();

    let seed = derive_seed(9, 0, 0);
    let model =
        train(&init(&cfg.model_spec, seed).unwrap(), &ds.x, &y, &TrainConfig { seed, ..cfg.train_config.clone() })
            .unwrap();
    let s = saliency_map(&model, &cfg.gain, &ds.x, &y).unwrap().aggregated;
    let mut expected: Vec<usize> = (0..6).collect();
    expected.sort_by(|&a, &b| s.data()[b].total_cmp(&s.data()[a]).then(a.cmp(&b)));
    assert_eq!(ranking.order, expected);
    assert_eq!(ranking.trainings, 1);
}

#[test]
fn one_feature_is_trivially_ranked() {
    let ds = generate_synthetic(40, 1, 1, Task::Classification, 0.1, 0).unwrap();
    let ranking = rank(&ds.x, &ds.target_tensor().unwrap(), &small_config(1, 0.5, 2)).unwrap();
    assert_eq!(ranking.order, vec![0]);
    assert_eq!(ranking.history.len(), 1);
}

#[test]
fn single_pass_trains_reps_models() {
    let ds = generate_synthetic(60, 10, 2, Task::Classification, 0.1, 1).unwrap();
    let ranking = rank(&ds.x, &ds.target_tensor().unwrap(), &small_config(10, 0.0, 4)).unwrap();
    assert_eq!(ranking.trainings, 4);
    assert_eq!(ranking.history.len(), 1);
}

#[test]
fn thread_count_does_not_change_the_result() {
    let ds = generate_synthetic(80, 12, 3, Task::Classification, 0.1, 2).unwrap();
    let y = ds.target_tensor().unwrap();
    let one = rank(&ds.x, &y, &small_config(12, 0.5, 3)).unwrap();
    let again = rank(&ds.x, &y, &small_config(12, 0.5, 3)).unwrap();
    let three = rank(&ds.x, &y, &SfsConfig { threads: 3, ..small_config(12, 0.5, 3) }).unwrap();
    assert_eq!(one, again);
    assert_eq!(one, three);
}

#[test]
fn regression_ranking_runs() {
    let ds = generate_synthetic(80, 6, 2, Task::Regression, 0.1, 6).unwrap();
    let cfg = SfsConfig { gamma: 0.5, ..SfsConfig::new(ModelSpec::mlp_regressor(6, &[8]), cheap_train()) };
    let ranking = rank(&ds.x, &ds.target_tensor().unwrap(), &cfg).unwrap();
    ranking.validate().unwrap();
}

#[test]
fn json_round_trip_keeps_the_ranking() {
    let ds = generate_synthetic(40, 5, 2, Task::Classification, 0.1, 0).unwrap();
    let cfg = small_config(5, 0.5, 2);
    let ranking = rank(&ds.x, &ds.target_tensor().unwrap(), &cfg).unwrap();
    let back = FeatureRanking::from_json(&ranking.to_json(&cfg)).unwrap();
    assert_eq!(back, ranking);
    let bad = serde_json::json!({ "order": [0, 0, 1] });
    assert!(FeatureRanking::from_json(&bad).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let ds = generate_synthetic(20, 4, 1, Task::Classification, 0.1, 0).unwrap();
    let y = ds.target_tensor().unwrap();
    for cfg in [
        small_config(4, 1.0, 1),
        small_config(4, -0.1, 1),
        small_config(4, 0.0, 0),
        SfsConfig { epsilon_stop: 0.5, ..small_config(4, 0.0, 1) },
        SfsConfig { threads: 0, ..small_config(4, 0.0, 1) },
        small_config(5, 0.0, 1),
    ] {
        assert!(rank(&ds.x, &y, &cfg).is_err(), "{cfg:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn schedules_shrink_geometrically(r in 1usize..2000, gamma in 0.0f64..0.999, eps in 1.0f64..20.0) {
        let s = alive_schedule(r, gamma, eps).unwrap();
        prop_assert_eq!(s[0], r);
        for w in s.windows(2) {
            prop_assert_eq!(w[1], (w[0] as f64 * gamma).floor() as usize);
            prop_assert!(w[1] < w[0]);
        }
        for &n in &s[1..] {
            prop_assert!(n as f64 > eps);
        }
        let next = (*s.last().unwrap() as f64 * gamma).floor();
        prop_assert!(next <= eps);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn rankings_are_consistent(seed in 0u64..1000, r in 2usize..9, gamma in prop_oneof![Just(0.0), 0.3f64..0.8], reps in 1usize..3) {
        let ds = generate_synthetic(48, r, 1, Task::Classification, 0.2, seed).unwrap();
        let cfg = SfsConfig { seed, ..small_config(r, gamma, reps) };
        let ranking = rank(&ds.x, &ds.target_tensor().unwrap(), &cfg).unwrap();

        let mut sorted = ranking.order.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..r).collect::<Vec<_>>());

        let schedule = alive_schedule(r, gamma, 1.0).unwrap();
        prop_assert_eq!(ranking.trainings, reps * schedule.len());
        prop_assert_eq!(ranking.history.len(), schedule.len());

        // A feature that died in round t keeps its place behind every survivor of t.
        for (t, round) in ranking.history.iter().enumerate() {
            prop_assert_eq!(round.alive, schedule[t]);
            let survivors = ranking.history.get(t + 1).map_or(0, |n| n.alive);
            prop_assert_eq!(&round.features[survivors..], &ranking.order[survivors..round.alive]);
            if let Some(next) = ranking.history.get(t + 1) {
                let mut a = round.features[..next.alive].to_vec();
                let mut b = next.features.clone();
                a.sort_unstable();
                b.sort_unstable();
                prop_assert_eq!(a, b);
            }
            prop_assert!(round.saliency.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}
