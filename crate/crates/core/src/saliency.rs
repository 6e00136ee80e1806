//! Per-sample saliency, its class-balanced and plain aggregations, and a
//! gradient-driven adversarial probe.

use num_bigint::BigInt;
use num_rational::Ratio;
use num_traits::{Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::diff::{Bindings, Graph};
use crate::error::{Error, Result};
use crate::gain::{gain_node, GainKind, GainSpec};
use crate::models::{predict, LossKind, ModelKind, TrainedModel};
use crate::tensor::Tensor;

/// Per-sample saliency rows and their aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    /// `N×R`, every entry nonnegative.
    pub per_sample: Tensor,
    /// Length `R`, every entry nonnegative.
    pub aggregated: Tensor,
}

fn as_row(x: &Tensor, width: usize, what: &str) -> Result<Tensor> {
    if x.len() != width || (x.is_matrix() && x.rows() != 1) || x.shape().len() > 2 {
        return Err(Error::shape(format!("{what} must be a single row of {width} values, got {:?}", x.shape())));
    }
    x.clone().reshape(&[1, width])
}

fn check_pairing(model: &TrainedModel, gain: &GainSpec) -> Result<()> {
    gain.validate()?;
    if gain.kind.matching_loss() != model.loss_kind {
        return Err(Error::contract(format!(
            "{:?} gain does not apply to a model trained with {:?} loss",
            gain.kind, model.loss_kind
        )));
    }
    Ok(())
}

/// `|∂g(f(x), y)/∂x|` for one sample.
pub fn sample_saliency(model: &TrainedModel, gain: &GainSpec, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    check_pairing(model, gain)?;
    let x = as_row(x, model.spec.input_dim, "sample")?;
    let y = as_row(y, model.spec.output_dim, "target")?;
    raw_saliency(model, gain, &x, &y)
}

fn raw_saliency(model: &TrainedModel, gain: &GainSpec, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xi = g.input(x.shape())?;
    let out = model.build_output(&mut g, xi)?;
    let gn = gain_node(&mut g, out, y, gain)?;
    g.set_output(gn)?;
    let (_, grad) = g.input_gradient_only(&Bindings::new(x, &model.parameters))?;
    Ok(Tensor::vector(grad.into_data().into_iter().map(f64::abs).collect()))
}

/// `|∂y_c/∂x|`: gradient of one class output (probability or margin).
pub fn classic_class_saliency(model: &TrainedModel, x: &Tensor, class: usize) -> Result<Tensor> {
    if !model.spec.kind.is_classifier() {
        return Err(Error::contract("class saliency needs a classifier"));
    }
    if class >= model.spec.output_dim {
        return Err(Error::contract(format!("class {class} out of range for {} classes", model.spec.output_dim)));
    }
    let x = as_row(x, model.spec.input_dim, "sample")?;
    let mut g = Graph::new();
    let xi = g.input(x.shape())?;
    let out = model.build_output(&mut g, xi)?;
    let selector = g.constant(Tensor::one_hot(&[class], model.spec.output_dim)?);
    let picked = g.mul(out, selector)?;
    let s = g.sum(picked)?;
    g.set_output(s)?;
    let (_, grad) = g.input_gradient_only(&Bindings::new(&x, &model.parameters))?;
    Ok(Tensor::vector(grad.into_data().into_iter().map(f64::abs).collect()))
}

/// Saliency of every row of `x`, one batch-of-one graph per sample.
pub fn per_sample_saliency(model: &TrainedModel, gain: &GainSpec, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    check_pairing(model, gain)?;
    let (r, c) = (model.spec.input_dim, model.spec.output_dim);
    if !x.is_matrix() || x.cols() != r {
        return Err(Error::shape(format!("samples must be N×{r}, got {:?}", x.shape())));
    }
    if y.shape() != [x.rows(), c] {
        return Err(Error::shape(format!("targets must be {}×{c}, got {:?}", x.rows(), y.shape())));
    }
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.rows() {
        let xi = Tensor::new(vec![1, r], x.row(i).to_vec())?;
        let yi = Tensor::new(vec![1, c], y.row(i).to_vec())?;
        out.extend(raw_saliency(model, gain, &xi, &yi)?.into_data());
    }
    Tensor::new(vec![x.rows(), r], out)
}

/// Class-balanced aggregation: `Σ_c σ_c / ‖σ_c‖₁` with `σ_c` the sum of class `c`'s rows.
///
/// Class sums are accumulated exactly in fixed point and each quotient
/// `σ_cj / ‖σ_c‖₁` is rounded once, so replicating every sample of a class
/// any number of times leaves the result bit-for-bit unchanged.
/// A class whose saliency sums to zero contributes nothing.
pub fn aggregate_classification(per_sample: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if per_sample.rows() == 0 || !per_sample.is_matrix() {
        return Err(Error::contract("aggregation needs at least one sample"));
    }
    if labels.len() != per_sample.rows() {
        return Err(Error::shape(format!("{} labels for {} samples", labels.len(), per_sample.rows())));
    }
    if !per_sample.all_finite() {
        return Err(Error::Numeric { location: "saliency aggregation".into() });
    }
    let r = per_sample.cols();
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut class_sums = vec![vec![BigInt::zero(); r]; n_classes];
    for (i, &label) in labels.iter().enumerate() {
        for (acc, &v) in class_sums[label].iter_mut().zip(per_sample.row(i)) {
            if v != 0.0 {
                *acc += fixed_point(v);
            }
        }
    }
    let mut total = vec![0.0; r];
    for sums in &class_sums {
        let norm: BigInt = sums.iter().map(|v| v.abs()).sum();
        if norm.is_zero() {
            continue;
        }
        for (t, v) in total.iter_mut().zip(sums) {
            *t += Ratio::new_raw(v.clone(), norm.clone()).to_f64().expect("finite quotient");
        }
    }
    Ok(Tensor::vector(total))
}

/// `v · 2^1074` as an integer; exact for every finite `f64`.
fn fixed_point(v: f64) -> BigInt {
    let bits = v.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as usize;
    let fraction = bits & ((1 << 52) - 1);
    let mantissa = if biased == 0 { fraction } else { fraction | (1 << 52) };
    let magnitude = BigInt::from(mantissa) << biased.max(1).saturating_sub(1);
    if v < 0.0 { -magnitude } else { magnitude }
}

/// Plain column sums.
pub fn aggregate_regression(per_sample: &Tensor) -> Result<Tensor> {
    if per_sample.rows() == 0 || !per_sample.is_matrix() {
        return Err(Error::contract("aggregation needs at least one sample"));
    }
    let mut total = vec![0.0; per_sample.cols()];
    for i in 0..per_sample.rows() {
        for (t, v) in total.iter_mut().zip(per_sample.row(i)) {
            *t += v;
        }
    }
    Ok(Tensor::vector(total))
}

/// Per-sample saliency over `(x, y)` plus the aggregation matching the model's task.
pub fn saliency_map(model: &TrainedModel, gain: &GainSpec, x: &Tensor, y: &Tensor) -> Result<SaliencyMap> {
    let per_sample = per_sample_saliency(model, gain, x, y)?;
    let aggregated = if model.spec.kind.is_classifier() {
        aggregate_classification(&per_sample, &y.argmax_rows())?
    } else {
        aggregate_regression(&per_sample)?
    };
    Ok(SaliencyMap { per_sample, aggregated })
}

impl SaliencyMap {
    /// One row per sample under a header of feature names.
    pub fn write_csv<W: std::io::Write>(&self, w: W, feature_names: &[String]) -> Result<()> {
        if feature_names.len() != self.per_sample.cols() {
            return Err(Error::shape("one feature name per saliency column is required"));
        }
        let mut out = csv::Writer::from_writer(w);
        out.write_record(feature_names).map_err(csv_io)?;
        for i in 0..self.per_sample.rows() {
            out.write_record(self.per_sample.row(i).iter().map(|v| v.to_string())).map_err(csv_io)?;
        }
        out.flush()?;
        Ok(())
    }

    /// `{aggregated, n_samples, gain, model}`.
    pub fn summary_json(&self, gain: &GainSpec, model: &str) -> serde_json::Value {
        serde_json::json!({
            "aggregated": self.aggregated.data(),
            "n_samples": self.per_sample.rows(),
            "gain": gain,
            "model": model,
        })
    }
}

pub(crate) fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationMode {
    /// Step along the gradient rescaled to unit L2 norm.
    RawGradient,
    /// Step along the elementwise sign of the gradient.
    SignGradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialConfig {
    pub target_class: usize,
    pub confidence_threshold: f64,
    pub step_size: f64,
    pub max_iters: usize,
    pub perturbation_mode: PerturbationMode,
    /// Optional per-feature `[lo, hi]` box the sample is kept inside.
    pub clamp_box: Option<Vec<(f64, f64)>>,
}

pub const DEFAULT_CONFIDENCE: f64 = 0.95;

impl AdversarialConfig {
    pub fn new(target_class: usize) -> Self {
        AdversarialConfig {
            target_class,
            confidence_threshold: DEFAULT_CONFIDENCE,
            step_size: 0.05,
            max_iters: 500,
            perturbation_mode: PerturbationMode::RawGradient,
            clamp_box: None,
        }
    }

    pub fn validate(&self, input_dim: usize) -> Result<()> {
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold < 1.0) {
            return Err(Error::parameter("confidence_threshold must lie in (0, 1)"));
        }
        if !(self.step_size >= 0.0) || !self.step_size.is_finite() {
            return Err(Error::parameter("step_size must be a finite nonnegative number"));
        }
        if let Some(b) = &self.clamp_box {
            if b.len() != input_dim {
                return Err(Error::parameter(format!("clamp box has {} bounds for {input_dim} features", b.len())));
            }
            if b.iter().any(|(lo, hi)| !(lo <= hi)) {
                return Err(Error::parameter("clamp box bounds need lo <= hi"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialOutcome {
    /// The perturbed sample (`1×R`); the most confident iterate when not converged.
    pub x_adv: Tensor,
    pub iters_used: usize,
    /// Target-class probability of `x_adv`.
    pub final_confidence: f64,
    pub converged: bool,
}

/// Pushes `x` toward `cfg.target_class` by ascending the cross-entropy gain of that class.
pub fn adversarial_perturb(model: &TrainedModel, x: &Tensor, cfg: &AdversarialConfig) -> Result<AdversarialOutcome> {
    if model.loss_kind != LossKind::CategoricalCrossEntropy
        || !matches!(model.spec.kind, ModelKind::SoftmaxLinear | ModelKind::MlpClassifier)
    {
        return Err(Error::contract("adversarial probe needs a softmax classifier"));
    }
    let (r, c) = (model.spec.input_dim, model.spec.output_dim);
    if cfg.target_class >= c {
        return Err(Error::contract(format!("target class {} out of range for {c} classes", cfg.target_class)));
    }
    cfg.validate(r)?;
    let gain = GainSpec::new(GainKind::CrossEntropyComplement);
    let target = Tensor::one_hot(&[cfg.target_class], c)?;
    let confidence = |x: &Tensor| -> Result<f64> { Ok(predict(model, x)?.at(0, cfg.target_class)) };

    let mut current = as_row(x, r, "sample")?;
    if let Some(b) = &cfg.clamp_box {
        clamp(&mut current, b);
    }
    let mut conf = confidence(&current)?;
    let mut best = (current.clone(), conf);
    if conf >= cfg.confidence_threshold {
        return Ok(AdversarialOutcome { x_adv: current, iters_used: 0, final_confidence: conf, converged: true });
    }

    for iter in 1..=cfg.max_iters {
        let mut g = Graph::new();
        let xi = g.input(&[1, r])?;
        let out = model.build_output(&mut g, xi)?;
        let gn = gain_node(&mut g, out, &target, &gain)?;
        g.set_output(gn)?;
        let (_, grad) = g.input_gradient_only(&Bindings::new(&current, &model.parameters))?;
        let step: Vec<f64> = match cfg.perturbation_mode {
            PerturbationMode::RawGradient => {
                let norm = grad.l2_norm();
                if norm > 0.0 {
                    grad.data().iter().map(|v| cfg.step_size * v / norm).collect()
                } else {
                    vec![0.0; r]
                }
            }
            PerturbationMode::SignGradient => grad
                .data()
                .iter()
                .map(|&v| if v == 0.0 { 0.0 } else { cfg.step_size * v.signum() })
                .collect(),
        };
        for (v, s) in current.data_mut().iter_mut().zip(&step) {
            *v += s;
        }
        if let Some(b) = &cfg.clamp_box {
            clamp(&mut current, b);
        }
        conf = confidence(&current)?;
        if conf > best.1 {
            best = (current.clone(), conf);
        }
        if conf >= cfg.confidence_threshold {
            return Ok(AdversarialOutcome { x_adv: current, iters_used: iter, final_confidence: conf, converged: true });
        }
    }
    Ok(AdversarialOutcome { x_adv: best.0, iters_used: cfg.max_iters, final_confidence: best.1, converged: false })
}

fn clamp(x: &mut Tensor, bounds: &[(f64, f64)]) {
    for (v, &(lo, hi)) in x.data_mut().iter_mut().zip(bounds) {
        *v = v.clamp(lo, hi);
    }
}
