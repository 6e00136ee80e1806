//! Gain functions: objectives that are large when a prediction is good and
//! vanish when it is totally wrong. Their input-gradients are the saliency.
//!
//! * [`GainKind::MseInverse`]: `α / (MSE(ỹ, y) + ε)` for regressors.
//! * [`GainKind::CrossEntropyComplement`]: `−(α/N) Σ y log(1 − min(1−ε, ỹ))`
//!   for softmax classifiers.
//! * [`GainKind::HingeLog`]: the same complement log applied to margins
//!   squashed into `[0, 1]` by `(clip(ỹ, −1, 1) + 1) / 2`, for hinge-trained
//!   classifiers.
//!
//! All clips are straight-through so a saturated prediction still carries
//! gradient.

use serde::{Deserialize, Serialize};

use crate::diff::{Bindings, Graph, NodeId};
use crate::error::{Error, Result};
use crate::models::LossKind;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainKind {
    MseInverse,
    CrossEntropyComplement,
    HingeLog,
}

impl GainKind {
    /// The loss a model must be trained with for this gain to apply.
    pub fn matching_loss(self) -> LossKind {
        match self {
            GainKind::MseInverse => LossKind::Mse,
            GainKind::CrossEntropyComplement => LossKind::CategoricalCrossEntropy,
            GainKind::HingeLog => LossKind::Hinge,
        }
    }

    pub fn for_loss(loss: LossKind) -> Self {
        match loss {
            LossKind::Mse => GainKind::MseInverse,
            LossKind::CategoricalCrossEntropy => GainKind::CrossEntropyComplement,
            LossKind::Hinge => GainKind::HingeLog,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainSpec {
    pub kind: GainKind,
    pub alpha: f64,
    pub epsilon: f64,
}

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_EPSILON: f64 = 1e-3;

impl GainSpec {
    pub fn new(kind: GainKind) -> Self {
        GainSpec { kind, alpha: DEFAULT_ALPHA, epsilon: DEFAULT_EPSILON }
    }

    pub fn for_loss(loss: LossKind) -> Self {
        GainSpec::new(GainKind::for_loss(loss))
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::parameter(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::parameter(format!("epsilon must lie in (0, 1), got {}", self.epsilon)));
        }
        Ok(())
    }

    fn expect(&self, kind: GainKind) -> Result<()> {
        self.validate()?;
        if self.kind != kind {
            return Err(Error::contract(format!("gain spec is {:?}, expected {kind:?}", self.kind)));
        }
        Ok(())
    }
}

fn check_target(g: &Graph, pred: NodeId, target: &Tensor) -> Result<()> {
    if g.shape_of(pred) != target.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} and target {:?} differ",
            g.shape_of(pred),
            target.shape()
        )));
    }
    if target.is_empty() {
        return Err(Error::shape("empty target"));
    }
    Ok(())
}

/// Inverse-MSE gain node; the MSE averages over every entry of the batch.
pub fn gain_mse(g: &mut Graph, pred: NodeId, target: &Tensor, spec: &GainSpec) -> Result<NodeId> {
    spec.expect(GainKind::MseInverse)?;
    check_target(g, pred, target)?;
    let t = g.constant(target.clone());
    let d = g.sub(pred, t)?;
    let sq = g.square(d)?;
    let mse = g.mean(sq)?;
    let shifted = g.affine(mse, 1.0, spec.epsilon)?;
    let inv = g.reciprocal(shifted)?;
    g.affine(inv, spec.alpha, 0.0)
}

/// `−(α/N) Σ y log(1 − q)` for already-squashed predictions `q`.
fn complement_log(g: &mut Graph, squashed: NodeId, target: &Tensor, spec: &GainSpec) -> Result<NodeId> {
    let clipped = g.clip_upper_st(squashed, 1.0 - spec.epsilon)?;
    let complement = g.affine(clipped, -1.0, 1.0)?;
    let logs = g.log(complement)?;
    let t = g.constant(target.clone());
    let picked = g.mul(logs, t)?;
    let total = g.sum(picked)?;
    g.affine(total, -spec.alpha / target.rows() as f64, 0.0)
}

/// Cross-entropy complement gain node. `pred` holds probability rows.
pub fn gain_cross_entropy(g: &mut Graph, pred: NodeId, target: &Tensor, spec: &GainSpec) -> Result<NodeId> {
    spec.expect(GainKind::CrossEntropyComplement)?;
    check_target(g, pred, target)?;
    complement_log(g, pred, target, spec)
}

/// Logarithmic hinge gain node. `pred` holds raw class margins.
pub fn gain_hinge(g: &mut Graph, pred: NodeId, target: &Tensor, spec: &GainSpec) -> Result<NodeId> {
    spec.expect(GainKind::HingeLog)?;
    check_target(g, pred, target)?;
    let bounded = g.clip_interval_st(pred, -1.0, 1.0)?;
    let squashed = g.affine(bounded, 0.5, 0.5)?;
    complement_log(g, squashed, target, spec)
}

/// Dispatches on `spec.kind`.
pub fn gain_node(g: &mut Graph, pred: NodeId, target: &Tensor, spec: &GainSpec) -> Result<NodeId> {
    match spec.kind {
        GainKind::MseInverse => gain_mse(g, pred, target, spec),
        GainKind::CrossEntropyComplement => gain_cross_entropy(g, pred, target, spec),
        GainKind::HingeLog => gain_hinge(g, pred, target, spec),
    }
}

/// Evaluates a gain on concrete predictions.
///
/// For the cross-entropy gain every prediction row must sum to 1 within 1e-6.
pub fn evaluate_gain(pred: &Tensor, target: &Tensor, spec: &GainSpec) -> Result<f64> {
    if spec.kind == GainKind::CrossEntropyComplement {
        check_probability_rows(pred)?;
    }
    let mut g = Graph::new();
    let p = g.input(pred.shape())?;
    let out = gain_node(&mut g, p, target, spec)?;
    g.set_output(out)?;
    g.evaluate(&Bindings::new(pred, &[]))?.item()
}

pub(crate) fn check_probability_rows(pred: &Tensor) -> Result<()> {
    let c = pred.cols();
    for (i, row) in pred.data().chunks(c.max(1)).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::contract(format!("prediction row {i} sums to {s}, not 1")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn mse_gain_values() {
        let spec = GainSpec::new(GainKind::MseInverse);
        let y = t(&[&[0.3], &[-1.0]]);
        assert!((evaluate_gain(&y, &y, &spec).unwrap() - 1000.0).abs() < 1e-9);
        let v = evaluate_gain(&t(&[&[2.0]]), &t(&[&[1.0]]), &spec).unwrap();
        assert!((v - 1.0 / 1.001).abs() < 1e-12);
        let doubled = evaluate_gain(&t(&[&[2.0]]), &t(&[&[1.0]]), &spec.with_alpha(2.0)).unwrap();
        assert!((doubled - 2.0 * v).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gain_values() {
        let spec = GainSpec::new(GainKind::CrossEntropyComplement);
        let y = t(&[&[1.0, 0.0]]);
        assert_eq!(evaluate_gain(&t(&[&[0.0, 1.0]]), &y, &spec).unwrap(), 0.0);
        let half = evaluate_gain(&t(&[&[0.5, 0.5]]), &y, &spec).unwrap();
        assert!((half - 2.0_f64.ln()).abs() < 1e-12);
        let sure = evaluate_gain(&t(&[&[1.0, 0.0]]), &y, &spec).unwrap();
        assert!((sure + 1e-3_f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_non_probabilities() {
        let spec = GainSpec::new(GainKind::CrossEntropyComplement);
        let err = evaluate_gain(&t(&[&[0.7, 0.7]]), &t(&[&[1.0, 0.0]]), &spec);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn hinge_gain_values() {
        let spec = GainSpec::new(GainKind::HingeLog);
        let y = t(&[&[1.0, 0.0]]);
        assert_eq!(evaluate_gain(&t(&[&[-1.0, 3.0]]), &y, &spec).unwrap(), 0.0);
        let sure = evaluate_gain(&t(&[&[1.0, -1.0]]), &y, &spec).unwrap();
        assert!((sure + 1e-3_f64.ln()).abs() < 1e-9);
        let a = evaluate_gain(&t(&[&[2.0, 0.0]]), &y, &spec).unwrap();
        let b = evaluate_gain(&t(&[&[2000.0, 0.0]]), &y, &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_kind_and_bad_parameters() {
        let mut g = Graph::new();
        let p = g.input(&[1, 2]).unwrap();
        let y = t(&[&[1.0, 0.0]]);
        let ce = GainSpec::new(GainKind::CrossEntropyComplement);
        assert!(gain_hinge(&mut g, p, &y, &ce).is_err());
        assert!(GainSpec::new(GainKind::HingeLog).with_epsilon(1.0).validate().is_err());
        assert!(GainSpec::new(GainKind::HingeLog).with_alpha(0.0).validate().is_err());
        let bad = t(&[&[1.0, 0.0, 0.0]]);
        assert!(matches!(gain_cross_entropy(&mut g, p, &bad, &ce), Err(Error::Shape(_))));
    }
}
