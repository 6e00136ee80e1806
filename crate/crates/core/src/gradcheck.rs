//! Central finite-difference checks of reverse-mode gradients.
//!
//! Derivatives are estimated with the five-point central stencil at steps
//! `h` and `h/2`, extrapolated once. Plain three-point differences are not
//! accurate enough where the gain functions take `log(ε)` with `ε = 1e-3`:
//! there the function varies on a scale comparable to `h` itself.
//!
//! The numerical side only ever calls forward evaluation. Straight-through
//! clips are first replaced by their linearization at the check point, so
//! the numerical derivative matches what the backward rule is defined to
//! return. Coordinates whose perturbation flips the sign of any ReLU input
//! straddle a kink and are skipped and counted.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diff::{Bindings, Graph, NodeId};
use crate::error::Result;
use crate::gain::{gain_node, GainKind, GainSpec};
use crate::models::{init, ModelKind, ModelSpec};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;

/// `|a − b| / max(|a|, |b|, 1e-3)`.
///
/// The floor keeps gradients that are zero up to rounding from dividing by nothing.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct CheckReport {
    pub cases: usize,
    pub coordinates: usize,
    pub skipped_at_kinks: usize,
    pub max_relative_error: f64,
    /// Label of the case holding the maximum.
    pub worst_case: String,
}

impl CheckReport {
    fn merge(&mut self, label: &str, other: CheckReport) {
        self.cases += other.cases;
        self.coordinates += other.coordinates;
        self.skipped_at_kinks += other.skipped_at_kinks;
        if other.max_relative_error > self.max_relative_error || self.worst_case.is_empty() {
            self.max_relative_error = other.max_relative_error;
            self.worst_case = label.to_string();
        }
    }
}

/// Five-point central difference `(−f(+2h) + 8f(+h) − 8f(−h) + f(−2h)) / 12h`
/// at steps `h` and `h/2`, combined by one Richardson step to sixth order.
/// `None` when any probe returns `None`.
fn stencil(h: f64, mut f: impl FnMut(f64) -> Result<Option<f64>>) -> Result<Option<f64>> {
    let mut five_point = |h: f64| -> Result<Option<f64>> {
        let mut v = [0.0; 4];
        for (slot, offset) in v.iter_mut().zip([2.0 * h, h, -h, -2.0 * h]) {
            match f(offset)? {
                Some(value) => *slot = value,
                None => return Ok(None),
            }
        }
        Ok(Some((-v[0] + 8.0 * v[1] - 8.0 * v[2] + v[3]) / (12.0 * h)))
    };
    let (Some(coarse), Some(fine)) = (five_point(h)?, five_point(h / 2.0)?) else {
        return Ok(None);
    };
    Ok(Some(fine + (fine - coarse) / 15.0))
}

/// Oracle value at `b`, or `None` when a ReLU input changed sign relative to the base point.
fn probe(oracle: &Graph, relus: &[NodeId], base_signs: &[bool], b: &Bindings<'_>) -> Result<Option<f64>> {
    if relu_signs(oracle, relus, b)? != base_signs {
        return Ok(None);
    }
    Ok(Some(oracle.evaluate(b)?.item()?))
}

fn relu_signs(g: &Graph, relus: &[NodeId], b: &Bindings<'_>) -> Result<Vec<bool>> {
    let values = g.forward_all(b)?;
    Ok(relus.iter().flat_map(|id| values[id.index()].data().iter().map(|&v| v > 0.0).collect::<Vec<_>>()).collect())
}

/// Compares `graph`'s reverse-mode gradient against central differences with step `h`.
///
/// Every input coordinate is checked; parameter coordinates are checked up
/// to `max_param_coords` per parameter tensor.
pub fn check_graph(graph: &Graph, input: &Tensor, params: &[Tensor], h: f64, max_param_coords: usize) -> Result<CheckReport> {
    let bindings = Bindings::new(input, params);
    let analytic = graph.input_gradient(&bindings)?;
    let oracle = graph.straight_through_linearization(&bindings)?;
    let relus = oracle.relu_inputs();
    let base_signs = relu_signs(&oracle, &relus, &bindings)?;

    let mut report = CheckReport { cases: 1, ..CheckReport::default() };
    let record = |analytic: f64, numeric: Option<f64>, report: &mut CheckReport| match numeric {
        Some(n) => {
            report.coordinates += 1;
            report.max_relative_error = report.max_relative_error.max(relative_error(analytic, n));
        }
        None => report.skipped_at_kinks += 1,
    };

    for j in 0..input.len() {
        let numeric = stencil(h, |offset| {
            let mut x = input.clone();
            x.data_mut()[j] += offset;
            probe(&oracle, &relus, &base_signs, &Bindings::new(&x, params))
        })?;
        record(analytic.wrt_input.data()[j], numeric, &mut report);
    }

    for (k, param) in params.iter().enumerate() {
        let stride = (param.len() / max_param_coords.max(1)).max(1);
        for j in (0..param.len()).step_by(stride).take(max_param_coords) {
            let numeric = stencil(h, |offset| {
                let mut p = params.to_vec();
                p[k].data_mut()[j] += offset;
                probe(&oracle, &relus, &base_signs, &Bindings::new(input, &p))
            })?;
            record(analytic.wrt_params[k].data()[j], numeric, &mut report);
        }
    }
    Ok(report)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape and data agree")
}

/// Names of the single-primitive cases, in suite order.
pub const PRIMITIVE_CASES: [&str; 16] = [
    "matmul", "add_bias", "add", "sub", "mul", "affine", "square", "relu", "log", "reciprocal",
    "softmax_rows", "log_softmax_rows", "sum", "mean", "clip_upper_st", "clip_interval_st",
];

/// One primitive applied to a random input, reduced to a scalar by a random weighting.
pub fn primitive_case(name: &str, rng: &mut ChaCha8Rng) -> Result<(Graph, Tensor, Vec<Tensor>)> {
    let (rows, cols) = (rng.random_range(1..4), rng.random_range(2..5));
    let shape = [rows, cols];
    let mut g = Graph::new();
    let (lo, hi) = match name {
        "log" => (0.5, 2.0),
        "reciprocal" => (0.5, 2.0),
        "clip_upper_st" | "clip_interval_st" => (-2.0, 2.0),
        _ => (-1.5, 1.5),
    };
    let x = g.input(&shape)?;
    let input = random_tensor(rng, &shape, lo, hi);
    let mut params = Vec::new();
    let y = match name {
        "matmul" => {
            let out_cols = rng.random_range(1..4);
            params.push(random_tensor(rng, &[cols, out_cols], -1.0, 1.0));
            let w = g.param(0, &[cols, out_cols]);
            g.matmul(x, w)?
        }
        "add_bias" => {
            params.push(random_tensor(rng, &[cols], -1.0, 1.0));
            let b = g.param(0, &[cols]);
            g.add_bias(x, b)?
        }
        "add" | "sub" | "mul" => {
            params.push(random_tensor(rng, &shape, -1.0, 1.0));
            let p = g.param(0, &shape);
            match name {
                "add" => g.add(x, p)?,
                "sub" => g.sub(p, x)?,
                _ => g.mul(x, p)?,
            }
        }
        "affine" => {
            let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
            g.affine(x, a, b)?
        }
        "square" => g.square(x)?,
        "relu" => g.relu(x)?,
        "log" => g.log(x)?,
        "reciprocal" => g.reciprocal(x)?,
        "softmax_rows" => g.softmax_rows(x)?,
        "log_softmax_rows" => g.log_softmax_rows(x)?,
        "sum" => {
            let s = g.sum(x)?;
            let sq = g.square(s)?;
            g.set_output(sq)?;
            return Ok((g, input, params));
        }
        "mean" => {
            let s = g.mean(x)?;
            let sq = g.square(s)?;
            g.set_output(sq)?;
            return Ok((g, input, params));
        }
        "clip_upper_st" => g.clip_upper_st(x, 0.5)?,
        "clip_interval_st" => g.clip_interval_st(x, -0.5, 0.5)?,
        other => panic!("unknown primitive case {other}"),
    };
    let weights = random_tensor(rng, g.shape_of(y), -1.0, 1.0);
    let wn = g.constant(weights);
    let weighted = g.mul(y, wn)?;
    // A smooth nonlinearity downstream makes the upstream gradient depend on the clipped value.
    let sq = g.square(weighted)?;
    let total = g.sum(sq)?;
    g.set_output(total)?;
    Ok((g, input, params))
}

fn random_model_spec(kind: ModelKind, rng: &mut ChaCha8Rng) -> ModelSpec {
    let r = rng.random_range(2..6);
    let c = rng.random_range(2..4);
    match kind {
        ModelKind::SoftmaxLinear => ModelSpec::softmax_linear(r, c),
        ModelKind::MlpClassifier => ModelSpec::mlp_classifier(r, c, &[rng.random_range(2..6), rng.random_range(2..5)]),
        ModelKind::MlpRegressor => ModelSpec::mlp_regressor(r, &[rng.random_range(2..6)]),
        ModelKind::LinearSvm => ModelSpec::linear_svm(r, c),
    }
}

fn random_targets(spec: &ModelSpec, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if spec.kind.is_classifier() {
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.output_dim)).collect();
        Tensor::one_hot(&labels, spec.output_dim)
    } else {
        Ok(random_tensor(rng, &[n, 1], -2.0, 2.0))
    }
}

pub const MODEL_KINDS: [ModelKind; 4] =
    [ModelKind::SoftmaxLinear, ModelKind::MlpClassifier, ModelKind::MlpRegressor, ModelKind::LinearSvm];

/// Training loss (with l2 penalty) of a random model on a random batch.
pub fn model_loss_case(kind: ModelKind, rng: &mut ChaCha8Rng) -> Result<(Graph, Tensor, Vec<Tensor>)> {
    let spec = random_model_spec(kind, rng).with_l2(0.01);
    let model = init(&spec, rng.random())?;
    let n = rng.random_range(1..5);
    let x = random_tensor(rng, &[n, spec.input_dim], -2.0, 2.0);
    let y = random_targets(&spec, n, rng)?;
    let mut g = Graph::new();
    let xi = g.input(x.shape())?;
    let loss = model.build_loss(&mut g, xi, &y)?;
    g.set_output(loss)?;
    Ok((g, x, model.parameters))
}

/// Gain of a random model's output on a single sample: the saliency graph.
pub fn gain_case(kind: GainKind, rng: &mut ChaCha8Rng) -> Result<(Graph, Tensor, Vec<Tensor>)> {
    let model_kind = match kind {
        GainKind::MseInverse => ModelKind::MlpRegressor,
        GainKind::CrossEntropyComplement => {
            if rng.random_bool(0.5) { ModelKind::SoftmaxLinear } else { ModelKind::MlpClassifier }
        }
        GainKind::HingeLog => ModelKind::LinearSvm,
    };
    let spec = random_model_spec(model_kind, rng);
    let mut model = init(&spec, rng.random())?;
    // Larger weights push some margins past the hinge clip and some probabilities past 1 − ε.
    let scale = rng.random_range(0.5..4.0);
    for p in model.parameters.iter_mut() {
        p.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    let x = random_tensor(rng, &[1, spec.input_dim], -2.0, 2.0);
    let y = random_targets(&spec, 1, rng)?;
    let mut g = Graph::new();
    let xi = g.input(x.shape())?;
    let out = model.build_output(&mut g, xi)?;
    let gn = gain_node(&mut g, out, &y, &GainSpec::new(kind))?;
    g.set_output(gn)?;
    Ok((g, x, model.parameters))
}

pub const GAIN_KINDS: [GainKind; 3] = [GainKind::MseInverse, GainKind::CrossEntropyComplement, GainKind::HingeLog];

/// Runs at least `min_cases` seeded random cases cycling through every
/// primitive, every model loss, and every gain, with finite-difference step `h`.
pub fn run_suite(min_cases: usize, seed: u64, h: f64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_cycle = PRIMITIVE_CASES.len() + MODEL_KINDS.len() + GAIN_KINDS.len();
    let cycles = min_cases.div_ceil(per_cycle).max(1);
    let mut total = CheckReport::default();
    for cycle in 0..cycles {
        for name in PRIMITIVE_CASES {
            let (g, x, p) = primitive_case(name, &mut rng)?;
            total.merge(&format!("{name} #{cycle}"), check_graph(&g, &x, &p, h, 64)?);
        }
        for kind in MODEL_KINDS {
            let (g, x, p) = model_loss_case(kind, &mut rng)?;
            total.merge(&format!("{kind:?} loss #{cycle}"), check_graph(&g, &x, &p, h, 64)?);
        }
        for kind in GAIN_KINDS {
            let (g, x, p) = gain_case(kind, &mut rng)?;
            total.merge(&format!("{kind:?} gain #{cycle}"), check_graph(&g, &x, &p, h, 64)?);
        }
    }
    Ok(total)
}
