//! Differentiable predictors and their gradient-descent trainer.
//!
//! Every model is a stack of dense layers: `hidden_layers` ReLU layers
//! followed by a linear output layer. What differs between kinds is the
//! output head and the training loss:
//!
//! | kind            | head            | loss                      |
//! |-----------------|-----------------|---------------------------|
//! | `SoftmaxLinear` | softmax         | categorical cross-entropy |
//! | `MlpClassifier` | softmax         | categorical cross-entropy |
//! | `MlpRegressor`  | identity        | mean squared error        |
//! | `LinearSvm`     | raw margins     | multiclass hinge          |
//!
//! Parameters are stored as `[W1, b1, W2, b2, ...]` with `Wk` shaped
//! `fan_in × fan_out`.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Bindings, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    SoftmaxLinear,
    MlpClassifier,
    MlpRegressor,
    LinearSvm,
}

impl ModelKind {
    pub fn is_classifier(self) -> bool {
        !matches!(self, ModelKind::MlpRegressor)
    }

    pub fn loss_kind(self) -> LossKind {
        match self {
            ModelKind::SoftmaxLinear | ModelKind::MlpClassifier => LossKind::CategoricalCrossEntropy,
            ModelKind::MlpRegressor => LossKind::Mse,
            ModelKind::LinearSvm => LossKind::Hinge,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CategoricalCrossEntropy,
    Mse,
    Hinge,
}

/// Architecture of a model. Activations are always ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub hidden_layers: Vec<usize>,
    pub input_dim: usize,
    pub output_dim: usize,
    pub l2_weight_decay: f64,
}

pub const DEFAULT_HIDDEN: [usize; 3] = [150, 100, 50];
pub const DEFAULT_L2: f64 = 1e-3;

impl ModelSpec {
    pub fn softmax_linear(input_dim: usize, n_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::SoftmaxLinear,
            hidden_layers: Vec::new(),
            input_dim,
            output_dim: n_classes,
            l2_weight_decay: DEFAULT_L2,
        }
    }

    pub fn mlp_classifier(input_dim: usize, n_classes: usize, hidden: &[usize]) -> Self {
        ModelSpec {
            kind: ModelKind::MlpClassifier,
            hidden_layers: hidden.to_vec(),
            input_dim,
            output_dim: n_classes,
            l2_weight_decay: DEFAULT_L2,
        }
    }

    pub fn mlp_regressor(input_dim: usize, hidden: &[usize]) -> Self {
        ModelSpec {
            kind: ModelKind::MlpRegressor,
            hidden_layers: hidden.to_vec(),
            input_dim,
            output_dim: 1,
            l2_weight_decay: DEFAULT_L2,
        }
    }

    pub fn linear_svm(input_dim: usize, n_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::LinearSvm,
            hidden_layers: Vec::new(),
            input_dim,
            output_dim: n_classes,
            l2_weight_decay: DEFAULT_L2,
        }
    }

    pub fn with_l2(mut self, l2: f64) -> Self {
        self.l2_weight_decay = l2;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::parameter("input_dim must be positive"));
        }
        if self.hidden_layers.iter().any(|&w| w == 0) {
            return Err(Error::parameter("hidden layer widths must be positive"));
        }
        if matches!(self.kind, ModelKind::SoftmaxLinear | ModelKind::LinearSvm) && !self.hidden_layers.is_empty() {
            return Err(Error::parameter(format!("{:?} takes no hidden layers", self.kind)));
        }
        if self.kind.is_classifier() && self.output_dim < 2 {
            return Err(Error::parameter("classifiers need at least two classes"));
        }
        if self.kind == ModelKind::MlpRegressor && self.output_dim != 1 {
            return Err(Error::parameter("regressors have a single output"));
        }
        if !(self.l2_weight_decay >= 0.0) || !self.l2_weight_decay.is_finite() {
            return Err(Error::parameter("l2_weight_decay must be a finite nonnegative number"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every dense layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden_layers);
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layer_dims()
            .into_iter()
            .flat_map(|(i, o)| [vec![i, o], vec![o]])
            .collect()
    }

    /// Short human-readable description, e.g. `mlp_classifier[32,16]`.
    pub fn describe(&self) -> String {
        let kind = serde_json::to_value(self.kind)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default();
        if self.hidden_layers.is_empty() {
            kind
        } else {
            let widths: Vec<String> = self.hidden_layers.iter().map(|w| w.to_string()).collect();
            format!("{kind}[{}]", widths.join(","))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Drives minibatch shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            optimizer: Optimizer::Adam,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::parameter("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::parameter("learning_rate must be positive"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::parameter(format!("{name} must lie in (0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::parameter("adam_eps must be positive"));
        }
        Ok(())
    }
}

/// A model together with its parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub parameters: Vec<Tensor>,
    pub loss_kind: LossKind,
    /// Seed the parameters were initialized from.
    pub seed: u64,
}

/// Fresh parameters: uniform weights with bound `sqrt(6 / (fan_in + fan_out))`, zero biases.
pub fn init(spec: &ModelSpec, seed: u64) -> Result<TrainedModel> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parameters = Vec::new();
    for (fan_in, fan_out) in spec.layer_dims() {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weights = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        parameters.push(Tensor::new(vec![fan_in, fan_out], weights)?);
        parameters.push(Tensor::zeros(&[fan_out]));
    }
    Ok(TrainedModel { spec: spec.clone(), parameters, loss_kind: spec.kind.loss_kind(), seed })
}

impl TrainedModel {
    /// Appends the network to `g` and returns the pre-head output node.
    pub fn build_logits(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let layers = self.spec.layer_dims();
        let mut h = x;
        for (l, (fan_in, fan_out)) in layers.iter().enumerate() {
            let w = g.param(2 * l, &[*fan_in, *fan_out]);
            let b = g.param(2 * l + 1, &[*fan_out]);
            h = g.matmul(h, w)?;
            h = g.add_bias(h, b)?;
            if l + 1 < layers.len() {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Appends the network and its output head: probabilities, margins, or predictions.
    pub fn build_output(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let logits = self.build_logits(g, x)?;
        match self.spec.kind {
            ModelKind::SoftmaxLinear | ModelKind::MlpClassifier => g.softmax_rows(logits),
            ModelKind::LinearSvm | ModelKind::MlpRegressor => Ok(logits),
        }
    }

    /// Appends the training loss (with its l2 penalty) for targets `y`.
    pub fn build_loss(&self, g: &mut Graph, x: NodeId, y: &Tensor) -> Result<NodeId> {
        let logits = self.build_logits(g, x)?;
        if g.shape_of(logits) != y.shape() {
            return Err(Error::shape(format!(
                "targets have shape {:?}, model outputs {:?}",
                y.shape(),
                g.shape_of(logits)
            )));
        }
        let n = y.rows() as f64;
        let data_loss = match self.loss_kind {
            LossKind::CategoricalCrossEntropy => {
                let logp = g.log_softmax_rows(logits)?;
                let t = g.constant(y.clone());
                let picked = g.mul(logp, t)?;
                let s = g.sum(picked)?;
                g.affine(s, -1.0 / n, 0.0)?
            }
            LossKind::Mse => {
                let t = g.constant(y.clone());
                let d = g.sub(logits, t)?;
                let sq = g.square(d)?;
                g.mean(sq)?
            }
            LossKind::Hinge => {
                // y·max(0, 1 − ỹ) + (1 − y)·max(0, 1 + ỹ)
                let t = g.constant(y.clone());
                let not_t = g.constant(y.map(|v| 1.0 - v));
                let below = g.affine(logits, -1.0, 1.0)?;
                let below = g.relu(below)?;
                let above = g.affine(logits, 1.0, 1.0)?;
                let above = g.relu(above)?;
                let a = g.mul(below, t)?;
                let b = g.mul(above, not_t)?;
                let both = g.add(a, b)?;
                let s = g.sum(both)?;
                g.affine(s, 1.0 / n, 0.0)?
            }
        };
        let l2 = self.spec.l2_weight_decay;
        if l2 == 0.0 {
            return Ok(data_loss);
        }
        let mut total = data_loss;
        for (l, (fan_in, fan_out)) in self.spec.layer_dims().into_iter().enumerate() {
            let w = g.param(2 * l, &[fan_in, fan_out]);
            let sq = g.square(w)?;
            let s = g.sum(sq)?;
            let pen = g.affine(s, l2, 0.0)?;
            total = g.add(total, pen)?;
        }
        Ok(total)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if !x.is_matrix() || x.cols() != self.spec.input_dim {
            return Err(Error::shape(format!(
                "expected an N×{} input, got shape {:?}",
                self.spec.input_dim,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Training loss (including l2 penalty) on `(x, y)`.
    pub fn loss(&self, x: &Tensor, y: &Tensor) -> Result<f64> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let xi = g.input(x.shape())?;
        let out = self.build_loss(&mut g, xi, y)?;
        g.set_output(out)?;
        g.evaluate(&Bindings::new(x, &self.parameters))?.item()
    }

    /// Squared-sum norm over every weight matrix (biases excluded).
    pub fn weight_norm(&self) -> f64 {
        self.parameters.iter().step_by(2).map(|w| w.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        save_model(self, w)
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        load_model(r)
    }
}

/// Model outputs for every row of `x`.
pub fn predict(model: &TrainedModel, x: &Tensor) -> Result<Tensor> {
    model.check_input(x)?;
    let mut g = Graph::new();
    let xi = g.input(x.shape())?;
    let out = model.build_output(&mut g, xi)?;
    g.set_output(out)?;
    g.evaluate(&Bindings::new(x, &model.parameters))
}

struct OptimizerState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: i32,
}

impl OptimizerState {
    fn new(params: &[Tensor]) -> Self {
        OptimizerState {
            first: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }

    fn apply(&mut self, cfg: &TrainConfig, params: &mut [Tensor], grads: &[Tensor]) {
        self.step += 1;
        let lr = cfg.learning_rate;
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (v, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *v -= lr * d;
                    }
                }
            }
            Optimizer::Adam => {
                let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
                let c1 = 1.0 - b1.powi(self.step);
                let c2 = 1.0 - b2.powi(self.step);
                for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, s) = (&mut self.first[k], &mut self.second[k]);
                    for (((v, &d), mi), si) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(s.iter_mut()) {
                        *mi = b1 * *mi + (1.0 - b1) * d;
                        *si = b2 * *si + (1.0 - b2) * d * d;
                        *v -= lr * (*mi / c1) / ((*si / c2).sqrt() + cfg.adam_eps);
                    }
                }
            }
        }
    }
}

/// Minibatch training. Returns an updated copy of `model`.
///
/// For classifiers `y` is one-hot `N×C`; for the regressor it is `N×1`.
/// The final short batch of an epoch is used as-is.
pub fn train(model: &TrainedModel, x: &Tensor, y: &Tensor, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    model.check_input(x)?;
    if y.shape() != [x.rows(), model.spec.output_dim] {
        return Err(Error::shape(format!(
            "targets must be {}×{}, got {:?}",
            x.rows(),
            model.spec.output_dim,
            y.shape()
        )));
    }
    let mut trained = model.clone();
    let n = x.rows();
    if n == 0 || cfg.epochs == 0 {
        return Ok(trained);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut state = OptimizerState::new(&trained.parameters);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let xb = x.select_rows(batch);
            let yb = y.select_rows(batch);
            let mut g = Graph::new();
            let xi = g.input(xb.shape())?;
            let loss = trained.build_loss(&mut g, xi, &yb)?;
            g.set_output(loss)?;
            let (_, grads) = g
                .param_gradient(&Bindings::new(&xb, &trained.parameters))
                .map_err(|e| with_epoch(e, epoch))?;
            state.apply(cfg, &mut trained.parameters, &grads);
            if let Some(k) = trained.parameters.iter().position(|p| !p.all_finite()) {
                return Err(Error::Numeric { location: format!("epoch {epoch}: parameter {k} after update") });
            }
        }
    }
    Ok(trained)
}

fn with_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::Numeric { location } => Error::Numeric { location: format!("epoch {epoch}: {location}") },
        other => other,
    }
}

const MODEL_MAGIC: &[u8; 8] = b"SFSMODEL";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    version: u32,
    spec: ModelSpec,
    loss_kind: LossKind,
    seed: u64,
    shapes: Vec<Vec<usize>>,
}

/// Writes `SFSMODEL`, a little-endian `u64` header length, the JSON header,
/// then every parameter as little-endian `f64` values in declaration order.
fn save_model<W: Write>(model: &TrainedModel, mut w: W) -> Result<()> {
    let header = ModelHeader {
        version: MODEL_VERSION,
        spec: model.spec.clone(),
        loss_kind: model.loss_kind,
        seed: model.seed,
        shapes: model.parameters.iter().map(|p| p.shape().to_vec()).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for p in &model.parameters {
        for v in p.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn load_model<R: Read>(mut r: R) -> Result<TrainedModel> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::parse(0, "not a model file"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: ModelHeader = serde_json::from_slice(&json)?;
    if header.version != MODEL_VERSION {
        return Err(Error::parse(0, format!("unsupported model version {}", header.version)));
    }
    header.spec.validate()?;
    if header.shapes != header.spec.param_shapes() {
        return Err(Error::parse(0, "parameter shapes do not match the model spec"));
    }
    let mut parameters = Vec::with_capacity(header.shapes.len());
    for shape in header.shapes {
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        parameters.push(Tensor::new(shape, data)?);
    }
    if parameters.iter().any(|p| !p.all_finite()) {
        return Err(Error::parse(0, "model file holds non-finite parameters"));
    }
    Ok(TrainedModel { spec: header.spec, parameters, loss_kind: header.loss_kind, seed: header.seed })
}
