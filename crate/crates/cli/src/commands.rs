//! The five subcommands.
//!
//! Every subcommand has a flag struct, in which every option is optional, and
//! a resolved config with defaults. The two share field names, so a config
//! file uses the long flag names with underscores.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use sfs_core::data::{
    balance_by_replication, generate_synthetic, load_dense_csv, standardize, write_dense_csv, Dataset, Task,
};
use sfs_core::eval::{feature_curve, precision_at_k};
use sfs_core::gain::{GainSpec, DEFAULT_ALPHA, DEFAULT_EPSILON};
use sfs_core::gradcheck::{run_suite, DEFAULT_STEP};
use sfs_core::models::{init, predict, train, ModelKind, ModelSpec, Optimizer, TrainConfig, DEFAULT_HIDDEN, DEFAULT_L2};
use sfs_core::saliency::{adversarial_perturb, AdversarialConfig, PerturbationMode, DEFAULT_CONFIDENCE};
use sfs_core::sfs::{alive_schedule, derive_seed, rank, FeatureRanking, SfsConfig};
use sfs_core::Tensor;

use crate::config::{parse_name, resolve};
use crate::failure::Failure;
use crate::output::{default_manifest_path, file_name, Staged};

fn required<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T, Failure> {
    value.as_ref().ok_or_else(|| Failure::Validation(format!("--{flag} is required")))
}

fn load(path: &Path, target_column: &str, task: Task) -> Result<Dataset, Failure> {
    load_dense_csv(path, target_column, task).map_err(|e| match e {
        sfs_core::Error::Io(io) => Failure::Validation(format!("cannot read {}: {io}", path.display())),
        other => Failure::Validation(format!("{}: {other}", path.display())),
    })
}

fn to_json(v: &impl Serialize) -> Value {
    serde_json::to_value(v).expect("plain data serializes")
}

// ---------------------------------------------------------------- shared

/// Model and training options shared by `rank`, `eval` and `adv`.
#[derive(Debug, Args, Serialize)]
pub struct ModelFlags {
    /// softmax_linear, mlp_classifier, mlp_regressor or linear_svm [default: mlp_classifier or mlp_regressor by task]
    #[arg(long, value_parser = parse_name::<ModelKind>)]
    model: Option<ModelKind>,
    /// Hidden layer widths of the MLP kinds [default: 150,100,50]
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    /// L2 weight decay [default: 1e-3]
    #[arg(long)]
    l2: Option<f64>,
    /// Training epochs [default: 100]
    #[arg(long)]
    epochs: Option<usize>,
    /// Minibatch size [default: 32]
    #[arg(long)]
    batch_size: Option<usize>,
    /// adam or sgd [default: adam]
    #[arg(long, value_parser = parse_name::<Optimizer>)]
    optimizer: Option<Optimizer>,
    /// Step size [default: 1e-3]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Base seed [default: 0]
    #[arg(long, env = "SFS_SEED")]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelOptions {
    model: Option<ModelKind>,
    hidden: Vec<usize>,
    l2: f64,
    epochs: usize,
    batch_size: usize,
    optimizer: Optimizer,
    learning_rate: f64,
    seed: u64,
}

impl Default for ModelOptions {
    fn default() -> Self {
        let t = TrainConfig::default();
        ModelOptions {
            model: None,
            hidden: DEFAULT_HIDDEN.to_vec(),
            l2: DEFAULT_L2,
            epochs: t.epochs,
            batch_size: t.batch_size,
            optimizer: t.optimizer,
            learning_rate: t.learning_rate,
            seed: 0,
        }
    }
}

impl ModelOptions {
    fn spec(&self, ds: &Dataset) -> Result<ModelSpec, Failure> {
        let r = ds.n_features();
        let kind = self.model.unwrap_or(match ds.task() {
            Task::Classification => ModelKind::MlpClassifier,
            Task::Regression => ModelKind::MlpRegressor,
        });
        if kind.is_classifier() != (ds.task() == Task::Classification) {
            return Err(Failure::Validation(format!("model {kind:?} does not fit a {:?} task", ds.task())));
        }
        let c = ds.n_classes();
        let spec = match kind {
            ModelKind::SoftmaxLinear => ModelSpec::softmax_linear(r, c),
            ModelKind::MlpClassifier => ModelSpec::mlp_classifier(r, c, &self.hidden),
            ModelKind::MlpRegressor => ModelSpec::mlp_regressor(r, &self.hidden),
            ModelKind::LinearSvm => ModelSpec::linear_svm(r, c),
        }
        .with_l2(self.l2);
        spec.validate()?;
        Ok(spec)
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            learning_rate: self.learning_rate,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

/// Dataset options shared by `rank`, `eval` and `adv`.
#[derive(Debug, Args, Serialize)]
pub struct DataFlags {
    /// Name of the target column [default: y]
    #[arg(long)]
    target_column: Option<String>,
    /// classification or regression [default: classification]
    #[arg(long, value_parser = parse_name::<Task>)]
    task: Option<Task>,
    /// Standardize features with statistics of the (training) data [default: true]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    standardize: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataOptions {
    target_column: String,
    task: Task,
    standardize: bool,
}

impl Default for DataOptions {
    fn default() -> Self {
        DataOptions { target_column: "y".into(), task: Task::Classification, standardize: true }
    }
}

// ---------------------------------------------------------------- gen

#[derive(Debug, Args, Serialize)]
pub struct GenArgs {
    /// JSON file with defaults for any of the options below
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Dataset CSV to write
    #[arg(long)]
    out: Option<PathBuf>,
    /// Relevance mask sidecar [default: <out> with extension mask.json]
    #[arg(long)]
    mask_out: Option<PathBuf>,
    /// Run manifest [default: <out> with extension manifest.json]
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Samples [default: 1000]
    #[arg(long)]
    n: Option<usize>,
    /// Features [default: 100]
    #[arg(long)]
    features: Option<usize>,
    /// Relevant features [default: 10]
    #[arg(long)]
    relevant: Option<usize>,
    /// classification or regression [default: classification]
    #[arg(long, value_parser = parse_name::<Task>)]
    task: Option<Task>,
    /// Standard deviation of the target noise [default: 0.1]
    #[arg(long)]
    noise: Option<f64>,
    /// [default: 0]
    #[arg(long, env = "SFS_SEED")]
    seed: Option<u64>,
    /// Name of the target column [default: y]
    #[arg(long)]
    target_column: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GenConfig {
    out: Option<PathBuf>,
    mask_out: Option<PathBuf>,
    manifest: Option<PathBuf>,
    n: usize,
    features: usize,
    relevant: usize,
    task: Task,
    noise: f64,
    seed: u64,
    target_column: String,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            out: None,
            mask_out: None,
            manifest: None,
            n: 1000,
            features: 100,
            relevant: 10,
            task: Task::Classification,
            noise: 0.1,
            seed: 0,
            target_column: "y".into(),
        }
    }
}

pub fn gen(args: &GenArgs) -> Result<(), Failure> {
    let cfg: GenConfig = resolve(&GenConfig::default(), args.config.as_deref(), args)?;
    let out = required(&cfg.out, "out")?;
    let mask_out = cfg.mask_out.clone().unwrap_or_else(|| out.with_extension("mask.json"));
    let manifest = cfg.manifest.clone().unwrap_or_else(|| default_manifest_path(out));
    let mut staged = Staged::new("gen");
    if let Some(path) = &args.config {
        staged.input(path)?;
    }

    let ds = generate_synthetic(cfg.n, cfg.features, cfg.relevant, cfg.task, cfg.noise, cfg.seed)?;
    let mut csv = Vec::new();
    write_dense_csv(&ds, &mut csv, &cfg.target_column)?;
    staged.file(out, csv);
    let mask = ds.relevant_mask.clone().unwrap_or_default();
    let relevant: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(j, _)| j).collect();
    staged.json(
        &mask_out,
        &json!({
            "relevant": relevant,
            "mask": mask,
            "feature_names": ds.feature_names,
            "manifest": file_name(&manifest),
        }),
    )?;
    staged.commit(&manifest, to_json(&cfg), json!({ "base": cfg.seed }))
}

// ---------------------------------------------------------------- rank

#[derive(Debug, Args, Serialize)]
pub struct RankArgs {
    /// JSON file with defaults for any of the options below
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Dense CSV with a header row
    #[arg(long)]
    data: Option<PathBuf>,
    /// Ranking JSON to write
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the ranking as CSV here
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Run manifest [default: <out> with extension manifest.json]
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Fraction of alive features kept per round, in [0, 1) [default: 0]
    #[arg(long)]
    gamma: Option<f64>,
    /// Stop once at most this many features are alive, at least 1 [default: 1]
    #[arg(long)]
    epsilon_stop: Option<f64>,
    /// Trainings per round [default: 3]
    #[arg(long)]
    reps: Option<usize>,
    /// Gain scale [default: 1]
    #[arg(long)]
    gain_alpha: Option<f64>,
    /// Gain clip margin [default: 1e-3]
    #[arg(long)]
    gain_epsilon: Option<f64>,
    /// Replicate minority-class samples before ranking [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    balance: Option<bool>,
    /// Worker threads for the repetitions; results do not depend on it [default: 1]
    #[arg(long)]
    threads: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    data_opts: DataFlags,
    #[command(flatten)]
    #[serde(flatten)]
    model_opts: ModelFlags,
}

#[derive(Debug, Serialize, Deserialize)]
struct RankConfig {
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    csv: Option<PathBuf>,
    manifest: Option<PathBuf>,
    gamma: f64,
    epsilon_stop: f64,
    reps: usize,
    gain_alpha: f64,
    gain_epsilon: f64,
    balance: bool,
    threads: usize,
    #[serde(flatten)]
    data_opts: DataOptions,
    #[serde(flatten)]
    model_opts: ModelOptions,
}

impl Default for RankConfig {
    fn default() -> Self {
        RankConfig {
            data: None,
            out: None,
            csv: None,
            manifest: None,
            gamma: 0.0,
            epsilon_stop: 1.0,
            reps: 3,
            gain_alpha: DEFAULT_ALPHA,
            gain_epsilon: DEFAULT_EPSILON,
            balance: false,
            threads: 1,
            data_opts: DataOptions::default(),
            model_opts: ModelOptions::default(),
        }
    }
}

pub fn rank_cmd(args: &RankArgs) -> Result<(), Failure> {
    let cfg: RankConfig = resolve(&RankConfig::default(), args.config.as_deref(), args)?;
    let data = required(&cfg.data, "data")?;
    let out = required(&cfg.out, "out")?;
    let manifest = cfg.manifest.clone().unwrap_or_else(|| default_manifest_path(out));
    let mut staged = Staged::new("rank");
    staged.input(data)?;
    if let Some(path) = &args.config {
        staged.input(path)?;
    }

    let mut ds = load(data, &cfg.data_opts.target_column, cfg.data_opts.task)?;
    if cfg.balance {
        ds = balance_by_replication(&ds, cfg.model_opts.seed)?;
    }
    if cfg.data_opts.standardize {
        ds = standardize(&ds).0;
    }
    let spec = cfg.model_opts.spec(&ds)?;
    let gain = GainSpec::for_loss(spec.kind.loss_kind()).with_alpha(cfg.gain_alpha).with_epsilon(cfg.gain_epsilon);
    let sfs = SfsConfig {
        gamma: cfg.gamma,
        epsilon_stop: cfg.epsilon_stop,
        reps: cfg.reps,
        gain,
        model_spec: spec,
        train_config: cfg.model_opts.train_config(),
        seed: cfg.model_opts.seed,
        threads: cfg.threads,
    };
    sfs.validate()?;
    let ranking = rank(&ds.x, &ds.target_tensor()?, &sfs)?;
    for (i, round) in ranking.history.iter().enumerate() {
        eprintln!("round {i}: {} alive, leader {}", round.alive, ds.feature_names[round.features[0]]);
    }

    let mut result = ranking.to_json(&sfs);
    result["feature_names"] = to_json(&ds.feature_names);
    result["manifest"] = json!(file_name(&manifest));
    staged.json(out, &result)?;
    if let Some(csv_path) = &cfg.csv {
        let mut csv = Vec::new();
        ranking.write_csv(&mut csv, &ds.feature_names)?;
        staged.file(csv_path, csv);
    }
    let rounds: Vec<Vec<u64>> = (0..alive_schedule(ds.n_features(), sfs.gamma, sfs.epsilon_stop)?.len())
        .map(|round| (0..sfs.reps).map(|rep| derive_seed(sfs.seed, round, rep)).collect())
        .collect();
    let mut config = to_json(&cfg);
    config["resolved_model"] = json!(sfs.model_spec.describe());
    staged.commit(&manifest, config, json!({ "base": sfs.seed, "per_round": rounds }))
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// JSON file with defaults for any of the options below
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Training CSV
    #[arg(long)]
    train: Option<PathBuf>,
    /// Test CSV
    #[arg(long)]
    test: Option<PathBuf>,
    /// Ranking JSON written by `rank`
    #[arg(long)]
    ranking: Option<PathBuf>,
    /// Mask sidecar written by `gen`; enables precision@k
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Feature counts to evaluate, comma separated [default: 1, 2, 5, 10, 20, 50, ... up to all features]
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// Curve CSV to write
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the curve and precision@k as JSON here
    #[arg(long)]
    json: Option<PathBuf>,
    /// Run manifest [default: <out> with extension manifest.json]
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    data_opts: DataFlags,
    #[command(flatten)]
    #[serde(flatten)]
    model_opts: ModelFlags,
}

#[derive(Debug, Serialize, Deserialize)]
struct EvalConfig {
    train: Option<PathBuf>,
    test: Option<PathBuf>,
    ranking: Option<PathBuf>,
    mask: Option<PathBuf>,
    ks: Option<Vec<usize>>,
    out: Option<PathBuf>,
    json: Option<PathBuf>,
    manifest: Option<PathBuf>,
    #[serde(flatten)]
    data_opts: DataOptions,
    #[serde(flatten)]
    model_opts: ModelOptions,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            train: None,
            test: None,
            ranking: None,
            mask: None,
            ks: None,
            out: None,
            json: None,
            manifest: None,
            data_opts: DataOptions::default(),
            model_opts: ModelOptions::default(),
        }
    }
}

/// 1, 2, 5, 10, 20, 50, ... below `r`, then `r`.
fn default_ks(r: usize) -> Vec<usize> {
    let mut ks = Vec::new();
    let mut decade = 1;
    'outer: loop {
        for m in [1, 2, 5] {
            let k = m * decade;
            if k >= r {
                break 'outer;
            }
            ks.push(k);
        }
        decade *= 10;
    }
    ks.push(r);
    ks
}

fn read_json(path: &Path) -> Result<Value, Failure> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Failure::Validation(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

pub fn eval_cmd(args: &EvalArgs) -> Result<(), Failure> {
    let cfg: EvalConfig = resolve(&EvalConfig::default(), args.config.as_deref(), args)?;
    let train_path = required(&cfg.train, "train")?;
    let test_path = required(&cfg.test, "test")?;
    let ranking_path = required(&cfg.ranking, "ranking")?;
    let out = required(&cfg.out, "out")?;
    let manifest = cfg.manifest.clone().unwrap_or_else(|| default_manifest_path(out));
    let mut staged = Staged::new("eval");
    for path in [train_path, test_path, ranking_path] {
        staged.input(path)?;
    }
    if let Some(path) = &cfg.mask {
        staged.input(path)?;
    }
    if let Some(path) = &args.config {
        staged.input(path)?;
    }

    let d = &cfg.data_opts;
    let (mut train_ds, mut test_ds) = (load(train_path, &d.target_column, d.task)?, load(test_path, &d.target_column, d.task)?);
    if d.standardize {
        let (t, stats) = standardize(&train_ds);
        test_ds = stats.apply(&test_ds)?;
        train_ds = t;
    }
    let stored = read_json(ranking_path)?;
    let ranking = FeatureRanking::from_json(&stored)?;
    let r = train_ds.n_features();
    if ranking.order.len() != r {
        return Err(Failure::Validation(format!("ranking covers {} features, data has {r}", ranking.order.len())));
    }
    let ks = cfg.ks.clone().unwrap_or_else(|| default_ks(r));
    let spec = cfg.model_opts.spec(&train_ds)?;
    let ranker_desc = match stored.get("config") {
        Some(c) => format!(
            "sfs gamma={} reps={} seed={}",
            c.get("gamma").unwrap_or(&Value::Null),
            c.get("reps").unwrap_or(&Value::Null),
            c.get("seed").unwrap_or(&Value::Null)
        ),
        None => format!("ranking {}", file_name(ranking_path)),
    };
    let curve = feature_curve(&ranking, &train_ds, &test_ds, &spec, &cfg.model_opts.train_config(), &ks)?
        .with_ranker_desc(ranker_desc);

    let precision = match &cfg.mask {
        Some(path) => {
            let mask: Vec<bool> = serde_json::from_value(read_json(path)?.get("mask").cloned().unwrap_or(Value::Null))
                .map_err(|e| Failure::Validation(format!("{}: no usable \"mask\" array: {e}", path.display())))?;
            let mut rows = Vec::new();
            for &k in &ks {
                rows.push(json!({ "k": k, "precision": precision_at_k(&ranking, Some(&mask), k)? }));
            }
            Some(rows)
        }
        None => None,
    };
    for (i, (k, s)) in curve.ks.iter().zip(&curve.scores).enumerate() {
        match &precision {
            Some(p) => println!("k={k} score={s} precision={}", p[i]["precision"]),
            None => println!("k={k} score={s}"),
        }
    }

    let mut csv = Vec::new();
    curve.write_csv(&mut csv)?;
    staged.file(out, csv);
    if let Some(json_path) = &cfg.json {
        let mut value = to_json(&curve);
        value["precision_at_k"] = to_json(&precision);
        value["manifest"] = json!(file_name(&manifest));
        staged.json(json_path, &value)?;
    }
    staged.commit(&manifest, to_json(&cfg), json!({ "base": cfg.model_opts.seed }))
}

// ---------------------------------------------------------------- adv

#[derive(Debug, Args, Serialize)]
pub struct AdvArgs {
    /// JSON file with defaults for any of the options below
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Dense CSV used to train the probed classifier
    #[arg(long)]
    data: Option<PathBuf>,
    /// Class to push samples toward
    #[arg(long)]
    target: Option<usize>,
    /// Target-class confidence that counts as success [default: 0.95]
    #[arg(long)]
    threshold: Option<f64>,
    /// Step length per iteration [default: 0.05]
    #[arg(long)]
    step: Option<f64>,
    /// [default: 500]
    #[arg(long)]
    max_iters: Option<usize>,
    /// raw_gradient (unit L2 step) or sign_gradient [default: raw_gradient]
    #[arg(long, value_parser = parse_name::<PerturbationMode>)]
    mode: Option<PerturbationMode>,
    /// Keep every feature of the perturbed sample inside LO,HI
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    clamp: Option<Vec<f64>>,
    /// Row indices to perturb [default: every row whose label is not the target, up to --limit]
    #[arg(long, value_delimiter = ',')]
    samples: Option<Vec<usize>>,
    /// Cap on the number of default-selected rows [default: 100]
    #[arg(long)]
    limit: Option<usize>,
    /// Result JSON to write
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run manifest [default: <out> with extension manifest.json]
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    data_opts: DataFlags,
    #[command(flatten)]
    #[serde(flatten)]
    model_opts: ModelFlags,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdvConfig {
    data: Option<PathBuf>,
    target: Option<usize>,
    threshold: f64,
    step: f64,
    max_iters: usize,
    mode: PerturbationMode,
    clamp: Option<Vec<f64>>,
    samples: Option<Vec<usize>>,
    limit: usize,
    out: Option<PathBuf>,
    manifest: Option<PathBuf>,
    #[serde(flatten)]
    data_opts: DataOptions,
    #[serde(flatten)]
    model_opts: ModelOptions,
}

impl Default for AdvConfig {
    fn default() -> Self {
        AdvConfig {
            data: None,
            target: None,
            threshold: DEFAULT_CONFIDENCE,
            step: 0.05,
            max_iters: 500,
            mode: PerturbationMode::RawGradient,
            clamp: None,
            samples: None,
            limit: 100,
            out: None,
            manifest: None,
            data_opts: DataOptions::default(),
            model_opts: ModelOptions::default(),
        }
    }
}

pub fn adv_cmd(args: &AdvArgs) -> Result<(), Failure> {
    let cfg: AdvConfig = resolve(&AdvConfig::default(), args.config.as_deref(), args)?;
    let data = required(&cfg.data, "data")?;
    let target = *required(&cfg.target, "target")?;
    let out = required(&cfg.out, "out")?;
    let manifest = cfg.manifest.clone().unwrap_or_else(|| default_manifest_path(out));
    let mut staged = Staged::new("adv");
    staged.input(data)?;
    if let Some(path) = &args.config {
        staged.input(path)?;
    }

    let mut ds = load(data, &cfg.data_opts.target_column, cfg.data_opts.task)?;
    if cfg.data_opts.standardize {
        ds = standardize(&ds).0;
    }
    let labels = ds.labels().ok_or_else(|| Failure::Validation("adv needs a classification dataset".into()))?.to_vec();
    let spec = cfg.model_opts.spec(&ds)?;
    let tc = cfg.model_opts.train_config();
    let model = train(&init(&spec, tc.seed)?, &ds.x, &ds.target_tensor()?, &tc)?;

    let r = ds.n_features();
    let clamp_box = match &cfg.clamp {
        Some(b) if b.len() == 2 => Some(vec![(b[0], b[1]); r]),
        Some(_) => return Err(Failure::Validation("--clamp takes exactly LO,HI".into())),
        None => None,
    };
    let adv_cfg = AdversarialConfig {
        target_class: target,
        confidence_threshold: cfg.threshold,
        step_size: cfg.step,
        max_iters: cfg.max_iters,
        perturbation_mode: cfg.mode,
        clamp_box,
    };
    let rows: Vec<usize> = match &cfg.samples {
        Some(rows) => rows.clone(),
        None => (0..ds.n_samples()).filter(|&i| labels[i] != target).take(cfg.limit).collect(),
    };
    if let Some(&bad) = rows.iter().find(|&&i| i >= ds.n_samples()) {
        return Err(Failure::Validation(format!("sample {bad} out of range for {} rows", ds.n_samples())));
    }

    let mut results = Vec::with_capacity(rows.len());
    let mut successes = 0;
    for &i in &rows {
        let before = Tensor::new(vec![1, r], ds.x.row(i).to_vec())?;
        let confidence_before = predict(&model, &before)?.at(0, target);
        let outcome = adversarial_perturb(&model, &before, &adv_cfg)?;
        successes += usize::from(outcome.converged);
        results.push(json!({
            "index": i,
            "label": labels[i],
            "before": before.data(),
            "after": outcome.x_adv.data(),
            "confidence_before": confidence_before,
            "confidence_after": outcome.final_confidence,
            "iters": outcome.iters_used,
            "converged": outcome.converged,
        }));
    }
    let success_rate = if rows.is_empty() { 0.0 } else { successes as f64 / rows.len() as f64 };
    println!("{successes}/{} samples reached confidence {} for class {target}", rows.len(), cfg.threshold);

    staged.json(
        out,
        &json!({
            "target": target,
            "threshold": cfg.threshold,
            "model": spec.describe(),
            "space": if cfg.data_opts.standardize { "standardized" } else { "raw" },
            "success_rate": success_rate,
            "samples": results,
            "manifest": file_name(&manifest),
        }),
    )?;
    staged.commit(&manifest, to_json(&cfg), json!({ "base": tc.seed }))
}

// ---------------------------------------------------------------- gradcheck

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    /// JSON file with defaults for any of the options below
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Minimum number of random cases [default: 100]
    #[arg(long)]
    cases: Option<usize>,
    /// Finite-difference step [default: 1e-4]
    #[arg(long)]
    step: Option<f64>,
    /// Largest acceptable relative error [default: 1e-4]
    #[arg(long)]
    tolerance: Option<f64>,
    /// [default: 0]
    #[arg(long, env = "SFS_SEED")]
    seed: Option<u64>,
    /// Also write the report as JSON here
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run manifest, written only with --out [default: <out> with extension manifest.json]
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GradcheckConfig {
    cases: usize,
    step: f64,
    tolerance: f64,
    seed: u64,
    out: Option<PathBuf>,
    manifest: Option<PathBuf>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { cases: 100, step: DEFAULT_STEP, tolerance: 1e-4, seed: 0, out: None, manifest: None }
    }
}

pub fn gradcheck_cmd(args: &GradcheckArgs) -> Result<(), Failure> {
    let cfg: GradcheckConfig = resolve(&GradcheckConfig::default(), args.config.as_deref(), args)?;
    if !(cfg.step > 0.0) {
        return Err(Failure::Validation("--step must be positive".into()));
    }
    let mut staged = Staged::new("gradcheck");
    if let Some(path) = &args.config {
        staged.input(path)?;
    }
    let report = run_suite(cfg.cases, cfg.seed, cfg.step)?;
    println!(
        "max relative error {:.3e} over {} cases ({} coordinates, {} skipped at ReLU kinks); worst: {}",
        report.max_relative_error, report.cases, report.coordinates, report.skipped_at_kinks, report.worst_case
    );
    if let Some(out) = &cfg.out {
        let manifest = cfg.manifest.clone().unwrap_or_else(|| default_manifest_path(out));
        let mut value = to_json(&report);
        value["manifest"] = json!(file_name(&manifest));
        staged.json(out, &value)?;
        staged.commit(&manifest, to_json(&cfg), json!({ "base": cfg.seed }))?;
    }
    if report.max_relative_error >= cfg.tolerance {
        return Err(Failure::Numeric(format!(
            "max relative error {:.3e} at {} is not below {:.1e}",
            report.max_relative_error, report.worst_case, cfg.tolerance
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ks_ladder() {
        assert_eq!(default_ks(100), vec![1, 2, 5, 10, 20, 50, 100]);
        assert_eq!(default_ks(7), vec![1, 2, 5, 7]);
        assert_eq!(default_ks(1), vec![1]);
        assert_eq!(default_ks(2), vec![1, 2]);
    }
}
