//! Scores as a function of how many top-ranked features are kept.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Target, Task};
use crate::error::{Error, Result};
use crate::models::{init, predict, train, ModelSpec, TrainConfig, TrainedModel};
use crate::saliency::csv_io;
use crate::sfs::FeatureRanking;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Mae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCurve {
    pub ks: Vec<usize>,
    pub scores: Vec<f64>,
    pub metric: Metric,
    pub ranker_desc: String,
    pub classifier_desc: String,
}

/// Accuracy (argmax) for classification, mean absolute error for regression.
pub fn score(model: &TrainedModel, test: &Dataset) -> Result<f64> {
    if model.spec.kind.is_classifier() != (test.task() == Task::Classification) {
        return Err(Error::contract("model and dataset disagree on the task"));
    }
    let out = predict(model, &test.x)?;
    match &test.target {
        Target::Classes { labels, .. } => {
            let hits = out.argmax_rows().iter().zip(labels).filter(|(p, l)| p == l).count();
            Ok(hits as f64 / labels.len() as f64)
        }
        Target::Real(values) => {
            let total: f64 = out.data().iter().zip(values).map(|(p, y)| (p - y).abs()).sum();
            Ok(total / values.len() as f64)
        }
    }
}

/// Trains `spec` on `train` and scores it on `test`; both already masked as desired.
pub fn train_and_score(train_ds: &Dataset, test: &Dataset, spec: &ModelSpec, cfg: &TrainConfig) -> Result<f64> {
    let fresh = init(spec, cfg.seed)?;
    let model = train(&fresh, &train_ds.x, &train_ds.target_tensor()?, cfg)?;
    score(&model, test)
}

/// Retrains `classifier_spec` on the top-`k` features for every `k` and scores it on `test`.
///
/// Features outside the top `k` are zeroed rather than removed, so the
/// classifier keeps its input width.
pub fn feature_curve(
    ranking: &FeatureRanking,
    train_ds: &Dataset,
    test: &Dataset,
    classifier_spec: &ModelSpec,
    train_cfg: &TrainConfig,
    ks: &[usize],
) -> Result<FeatureCurve> {
    ranking.validate()?;
    let r = train_ds.n_features();
    if test.n_features() != r || ranking.order.len() != r {
        return Err(Error::shape("ranking, train and test must share the feature count"));
    }
    if train_ds.task() != test.task() {
        return Err(Error::contract("train and test disagree on the task"));
    }
    if ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::parameter("ks must be strictly increasing"));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > r) {
        return Err(Error::parameter(format!("k = {k} outside 1..={r}")));
    }
    let mut scores = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut keep = vec![false; r];
        for &f in ranking.top(k) {
            keep[f] = true;
        }
        let s = train_and_score(
            &train_ds.with_zeroed_features(&keep),
            &test.with_zeroed_features(&keep),
            classifier_spec,
            train_cfg,
        )?;
        scores.push(s);
    }
    Ok(FeatureCurve {
        ks: ks.to_vec(),
        scores,
        metric: match train_ds.task() {
            Task::Classification => Metric::Accuracy,
            Task::Regression => Metric::Mae,
        },
        ranker_desc: format!("ranking over {r} features"),
        classifier_desc: classifier_spec.describe(),
    })
}

/// Fraction of the top `k` features that are truly relevant.
pub fn precision_at_k(ranking: &FeatureRanking, relevant_mask: Option<&[bool]>, k: usize) -> Result<f64> {
    let mask = relevant_mask.ok_or_else(|| Error::contract("precision@k needs a relevance mask"))?;
    if mask.len() != ranking.order.len() {
        return Err(Error::shape("mask and ranking cover different feature counts"));
    }
    if k == 0 || k > mask.len() {
        return Err(Error::parameter(format!("k = {k} outside 1..={}", mask.len())));
    }
    let hits = ranking.top(k).iter().filter(|&&f| mask[f]).count();
    Ok(hits as f64 / k as f64)
}

impl FeatureCurve {
    pub fn with_ranker_desc(mut self, desc: impl Into<String>) -> Self {
        self.ranker_desc = desc.into();
        self
    }

    /// `k,score` rows.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["k", "score"]).map_err(csv_io)?;
        for (k, s) in self.ks.iter().zip(&self.scores) {
            out.write_record([k.to_string(), s.to_string()]).map_err(csv_io)?;
        }
        out.flush()?;
        Ok(())
    }
}
