//! Iterative saliency-based feature ranking.
//!
//! Each round trains `reps` fresh models on the data with every dead feature
//! zeroed, sums their aggregated saliency, and re-sorts the alive features by
//! it. The number of alive features then shrinks by the factor `gamma` and
//! the next round starts. Features that drop out keep the position they had
//! when they died, so the final order is a permutation of all features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gain::GainSpec;
use crate::models::{init, train, ModelSpec, TrainConfig};
use crate::saliency::saliency_map;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SfsConfig {
    /// Fraction of alive features kept per round, in `[0, 1)`. Zero means a single round.
    pub gamma: f64,
    /// Rounds continue while more than `max(epsilon_stop, 1)` features are alive.
    pub epsilon_stop: f64,
    /// Independently initialized trainings per round.
    pub reps: usize,
    pub gain: GainSpec,
    pub model_spec: ModelSpec,
    pub train_config: TrainConfig,
    pub seed: u64,
    /// Worker threads for the repetitions of one round. Results do not depend on it.
    #[serde(default = "one")]
    pub threads: usize,
}

fn one() -> usize {
    1
}

impl SfsConfig {
    pub fn new(model_spec: ModelSpec, train_config: TrainConfig) -> Self {
        SfsConfig {
            gamma: 0.0,
            epsilon_stop: 1.0,
            reps: 3,
            gain: GainSpec::for_loss(model_spec.kind.loss_kind()),
            model_spec,
            train_config,
            seed: 0,
            threads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::parameter(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if !(self.epsilon_stop >= 1.0) {
            return Err(Error::parameter(format!("epsilon_stop must be at least 1, got {}", self.epsilon_stop)));
        }
        if self.reps == 0 {
            return Err(Error::parameter("reps must be positive"));
        }
        if self.threads == 0 {
            return Err(Error::parameter("threads must be positive"));
        }
        self.gain.validate()?;
        self.model_spec.validate()?;
        self.train_config.validate()?;
        if self.gain.kind.matching_loss() != self.model_spec.kind.loss_kind() {
            return Err(Error::contract(format!(
                "{:?} gain does not pair with a {:?} model",
                self.gain.kind, self.model_spec.kind
            )));
        }
        Ok(())
    }
}

/// One elimination round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// Number of alive features in the round.
    pub alive: usize,
    /// Alive features, most salient first.
    pub features: Vec<usize>,
    /// Accumulated saliency of `features`, aligned with it.
    pub saliency: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRanking {
    /// Every feature index exactly once, most relevant first.
    pub order: Vec<usize>,
    pub history: Vec<RoundRecord>,
    /// Models trained to produce the ranking.
    pub trainings: usize,
}

/// Alive-feature counts per round: starts at `r`, then `floor(prev * gamma)`
/// while the count stays above `max(epsilon_stop, 1)`.
pub fn alive_schedule(r: usize, gamma: f64, epsilon_stop: f64) -> Result<Vec<usize>> {
    if r == 0 {
        return Err(Error::contract("cannot schedule zero features"));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::parameter(format!("gamma must lie in [0, 1), got {gamma}")));
    }
    if !(epsilon_stop >= 1.0) {
        return Err(Error::parameter(format!("epsilon_stop must be at least 1, got {epsilon_stop}")));
    }
    let floor = epsilon_stop.max(1.0);
    let mut schedule = vec![r];
    let mut n = (r as f64 * gamma).floor() as usize;
    while n as f64 > floor {
        schedule.push(n);
        n = (n as f64 * gamma).floor() as usize;
    }
    Ok(schedule)
}

/// Seed for repetition `rep` of round `round`, mixed from the run seed.
pub fn derive_seed(base: u64, round: usize, rep: usize) -> u64 {
    let mut h = splitmix64(base);
    h = splitmix64(h ^ round as u64);
    splitmix64(h ^ (rep as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Ranks the features of `x` (expected standardized) against targets `y`.
pub fn rank(x: &Tensor, y: &Tensor, cfg: &SfsConfig) -> Result<FeatureRanking> {
    rank_with_eval_set(x, y, None, cfg)
}

/// Like [`rank`], but measures saliency on `eval` instead of the training data.
pub fn rank_with_eval_set(
    x: &Tensor,
    y: &Tensor,
    eval: Option<(&Tensor, &Tensor)>,
    cfg: &SfsConfig,
) -> Result<FeatureRanking> {
    cfg.validate()?;
    if !x.is_matrix() || x.rows() == 0 || x.cols() == 0 {
        return Err(Error::contract(format!("ranking needs a non-empty N×R matrix, got {:?}", x.shape())));
    }
    let r = x.cols();
    if r != cfg.model_spec.input_dim {
        return Err(Error::shape(format!("data has {r} features, model expects {}", cfg.model_spec.input_dim)));
    }
    if let Some((ex, ey)) = eval {
        if !ex.is_matrix() || ex.cols() != r || ex.rows() == 0 || ey.rows() != ex.rows() {
            return Err(Error::shape("evaluation set does not match the training data"));
        }
    }

    let schedule = alive_schedule(r, cfg.gamma, cfg.epsilon_stop)?;
    let mut order: Vec<usize> = (0..r).collect();
    let mut history = Vec::with_capacity(schedule.len());
    let mut trainings = 0;

    for (round, &n_alive) in schedule.iter().enumerate() {
        let mut keep = vec![false; r];
        for &f in &order[..n_alive] {
            keep[f] = true;
        }
        let x_hat = x.zero_columns_except(&keep);
        let eval_hat = eval.map(|(ex, ey)| (ex.zero_columns_except(&keep), ey));

        let run_rep = |rep: usize| -> Result<Tensor> {
            let seed = derive_seed(cfg.seed, round, rep);
            let fresh = init(&cfg.model_spec, seed)?;
            let tc = TrainConfig { seed, ..cfg.train_config.clone() };
            let model = train(&fresh, &x_hat, y, &tc).map_err(|e| in_round(e, round, rep))?;
            let (sx, sy) = match &eval_hat {
                Some((ex, ey)) => (ex, *ey),
                None => (&x_hat, y),
            };
            Ok(saliency_map(&model, &cfg.gain, sx, sy).map_err(|e| in_round(e, round, rep))?.aggregated)
        };
        let per_rep = run_reps(cfg.reps, cfg.threads, &run_rep)?;
        trainings += cfg.reps;

        // Summed in repetition order, independent of thread count.
        let mut acc = vec![0.0; r];
        for s in &per_rep {
            for (a, v) in acc.iter_mut().zip(s.data()) {
                *a += v;
            }
        }

        let mut alive: Vec<usize> = order[..n_alive].to_vec();
        alive.sort_by(|&a, &b| acc[b].total_cmp(&acc[a]).then(a.cmp(&b)));
        order[..n_alive].copy_from_slice(&alive);
        history.push(RoundRecord {
            alive: n_alive,
            saliency: alive.iter().map(|&f| acc[f]).collect(),
            features: alive,
        });
    }

    Ok(FeatureRanking { order, history, trainings })
}

fn run_reps(reps: usize, threads: usize, job: &(dyn Fn(usize) -> Result<Tensor> + Sync)) -> Result<Vec<Tensor>> {
    if threads <= 1 || reps <= 1 {
        return (0..reps).map(job).collect();
    }
    let workers = threads.min(reps);
    let mut slots: Vec<Option<Result<Tensor>>> = (0..reps).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    (w..reps).step_by(workers).map(|rep| (rep, job(rep))).collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (rep, res) in h.join().expect("repetition worker panicked") {
                slots[rep] = Some(res);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every repetition ran")).collect()
}

fn in_round(e: Error, round: usize, rep: usize) -> Error {
    match e {
        Error::Numeric { location } => Error::Numeric { location: format!("round {round}, rep {rep}: {location}") },
        other => other,
    }
}

impl FeatureRanking {
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.order.len()];
        for &f in &self.order {
            if f >= seen.len() || seen[f] {
                return Err(Error::contract("ranking order is not a permutation"));
            }
            seen[f] = true;
        }
        Ok(())
    }

    pub fn top(&self, k: usize) -> &[usize] {
        &self.order[..k.min(self.order.len())]
    }

    /// `{order, history: [{alive, features, saliency}], trainings, config}`.
    pub fn to_json(&self, config: &SfsConfig) -> serde_json::Value {
        serde_json::json!({
            "order": self.order,
            "history": self.history,
            "trainings": self.trainings,
            "config": config,
        })
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        #[derive(Deserialize)]
        struct Stored {
            order: Vec<usize>,
            #[serde(default)]
            history: Vec<RoundRecord>,
            #[serde(default)]
            trainings: usize,
        }
        let s: Stored = serde_json::from_value(value.clone())?;
        let ranking = FeatureRanking { order: s.order, history: s.history, trainings: s.trainings };
        ranking.validate()?;
        Ok(ranking)
    }

    /// `rank,feature_index,feature_name` rows, rank starting at 1.
    pub fn write_csv<W: std::io::Write>(&self, w: W, feature_names: &[String]) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["rank", "feature_index", "feature_name"]).map_err(crate::saliency::csv_io)?;
        for (pos, &f) in self.order.iter().enumerate() {
            let name = feature_names.get(f).cloned().unwrap_or_else(|| format!("f{f}"));
            out.write_record([(pos + 1).to_string(), f.to_string(), name]).map_err(crate::saliency::csv_io)?;
        }
        out.flush()?;
        Ok(())
    }
}
