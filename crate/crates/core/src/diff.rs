//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] is a static record of primitive operations. Nodes are appended
//! in construction order, which is also a valid topological order, so the
//! forward pass walks the node list front to back and the backward pass walks
//! it back to front. Values are supplied at evaluation time through
//! [`Bindings`]: one optional input sample plus the model parameters.
//!
//! Two clip operations are *straight-through*: their forward value is
//! clamped but their backward pass passes the upstream gradient through
//! unchanged, even where the clamp is active.

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_transpose_a, matmul_transpose_b, Tensor};

/// Handle to a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(usize),
    Constant(Tensor),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine { x: NodeId, scale: f64, shift: f64 },
    Square(NodeId),
    Relu(NodeId),
    Log(NodeId),
    Reciprocal(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    ClipUpperSt { x: NodeId, hi: f64 },
    ClipIntervalSt { x: NodeId, lo: f64, hi: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::Square(_) => "square",
            Op::Relu(_) => "relu",
            Op::Log(_) => "log",
            Op::Reciprocal(_) => "reciprocal",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LogSoftmaxRows(_) => "log_softmax_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::ClipUpperSt { .. } => "clip_upper_st",
            Op::ClipIntervalSt { .. } => "clip_interval_st",
        }
    }

    fn children(&self) -> Vec<NodeId> {
        match *self {
            Op::Input | Op::Param(_) | Op::Constant(_) => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                vec![a, b]
            }
            Op::Affine { x, .. }
            | Op::Square(x)
            | Op::Relu(x)
            | Op::Log(x)
            | Op::Reciprocal(x)
            | Op::SoftmaxRows(x)
            | Op::LogSoftmaxRows(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::ClipUpperSt { x, .. }
            | Op::ClipIntervalSt { x, .. } => vec![x],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Values bound to a graph's placeholders for one evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Bindings<'a> {
    pub input: Option<&'a Tensor>,
    pub params: &'a [Tensor],
}

impl<'a> Bindings<'a> {
    pub fn new(input: &'a Tensor, params: &'a [Tensor]) -> Self {
        Bindings { input: Some(input), params }
    }

    pub fn params_only(params: &'a [Tensor]) -> Self {
        Bindings { input: None, params }
    }
}

/// Gradient of a scalar graph output.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientResult {
    /// Value of the scalar output.
    pub value: f64,
    /// Gradient with respect to the bound input, same shape as the input.
    pub wrt_input: Tensor,
    /// One gradient per bound parameter; parameters the graph never reads get zeros.
    pub wrt_params: Vec<Tensor>,
}

/// A computation recorded as a list of primitive operations.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    input: Option<NodeId>,
    output: Option<NodeId>,
}

fn row_len(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<&[usize]> {
        self.nodes
            .get(id.0)
            .map(|n| n.shape.as_slice())
            .ok_or_else(|| Error::contract(format!("node {} does not belong to this graph", id.0)))
    }

    /// Declares the input sample placeholder. A graph has at most one.
    pub fn input(&mut self, shape: &[usize]) -> Result<NodeId> {
        if self.input.is_some() {
            return Err(Error::contract("graph already has an input placeholder"));
        }
        let id = self.push(Op::Input, shape.to_vec());
        self.input = Some(id);
        Ok(id)
    }

    /// Declares a placeholder for parameter `index` of the bindings.
    pub fn param(&mut self, index: usize, shape: &[usize]) -> NodeId {
        self.push(Op::Param(index), shape.to_vec())
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value), shape)
    }

    /// Matrix product of an `m×k` and a `k×n` node.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.check(a)?.to_vec(), self.check(b)?.to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        Ok(self.push(Op::MatMul(a, b), vec![sa[0], sb[1]]))
    }

    /// Adds a length-`n` bias vector to every row of an `m×n` node.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.check(a)?.to_vec(), self.check(bias)?.to_vec());
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(Error::shape(format!("add_bias of {sa:?} and {sb:?}")));
        }
        Ok(self.push(Op::AddBias(a, bias), sa))
    }

    fn same_shape(&mut self, a: NodeId, b: NodeId, what: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.check(a)?, self.check(b)?);
        if sa != sb {
            return Err(Error::shape(format!("{what} of {sa:?} and {sb:?}")));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "add")?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "sub")?;
        Ok(self.push(Op::Sub(a, b), s))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "mul")?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        let s = self.check(x)?.to_vec();
        Ok(self.push(Op::Affine { x, scale, shift }, s))
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.check(x)?.to_vec();
        Ok(self.push(Op::Square(x), s))
    }

    /// `max(0, x)`; the derivative at exactly 0 is taken as 0.
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.check(x)?.to_vec();
        Ok(self.push(Op::Relu(x), s))
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.check(x)?.to_vec();
        Ok(self.push(Op::Log(x), s))
    }

    pub fn reciprocal(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.check(x)?.to_vec();
        Ok(self.push(Op::Reciprocal(x), s))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.check(x)?.to_vec();
        Ok(self.push(Op::SoftmaxRows(x), s))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.check(x)?.to_vec();
        Ok(self.push(Op::LogSoftmaxRows(x), s))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        Ok(self.push(Op::Sum(x), Vec::new()))
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        if self.check(x)?.iter().product::<usize>() == 0 {
            return Err(Error::shape("mean of an empty tensor"));
        }
        Ok(self.push(Op::Mean(x), Vec::new()))
    }

    /// `min(hi, x)` forward, identity backward.
    pub fn clip_upper_st(&mut self, x: NodeId, hi: f64) -> Result<NodeId> {
        let s = self.check(x)?.to_vec();
        Ok(self.push(Op::ClipUpperSt { x, hi }, s))
    }

    /// `min(hi, max(lo, x))` forward, identity backward. Requires `lo < hi`.
    pub fn clip_interval_st(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if !(lo < hi) {
            return Err(Error::parameter(format!("clip interval needs lo < hi, got [{lo}, {hi}]")));
        }
        let s = self.check(x)?.to_vec();
        Ok(self.push(Op::ClipIntervalSt { x, lo, hi }, s))
    }

    /// Marks the node whose value [`Graph::evaluate`] returns.
    pub fn set_output(&mut self, id: NodeId) -> Result<()> {
        self.check(id)?;
        self.output = Some(id);
        Ok(())
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    fn output_or_err(&self) -> Result<NodeId> {
        self.output.ok_or_else(|| Error::contract("graph has no designated output"))
    }

    /// Runs the forward pass and returns the designated output's value.
    pub fn evaluate(&self, bindings: &Bindings<'_>) -> Result<Tensor> {
        let out = self.output_or_err()?;
        let mut values = self.forward(bindings, out)?;
        Ok(values.swap_remove(out.0))
    }

    /// Value of any node after a forward pass up to the output.
    pub fn evaluate_node(&self, bindings: &Bindings<'_>, id: NodeId) -> Result<Tensor> {
        self.check(id)?;
        let mut values = self.forward(bindings, id)?;
        Ok(values.swap_remove(id.0))
    }

    /// Gradient of the scalar output with respect to the input and every parameter.
    pub fn input_gradient(&self, bindings: &Bindings<'_>) -> Result<GradientResult> {
        let input = self.input.ok_or_else(|| Error::contract("graph has no input placeholder"))?;
        let (value, mut grads) = self.backward(bindings, true, true)?;
        let wrt_input = take_grad(&mut grads, input, &self.nodes[input.0].shape);
        let wrt_params = self.collect_param_grads(&mut grads, bindings.params);
        Ok(GradientResult { value, wrt_input, wrt_params })
    }

    /// Gradient of the scalar output with respect to the input only.
    ///
    /// Skips parameter gradients entirely, which saves the outer products of
    /// every weight matrix.
    pub fn input_gradient_only(&self, bindings: &Bindings<'_>) -> Result<(f64, Tensor)> {
        let input = self.input.ok_or_else(|| Error::contract("graph has no input placeholder"))?;
        let (value, mut grads) = self.backward(bindings, true, false)?;
        Ok((value, take_grad(&mut grads, input, &self.nodes[input.0].shape)))
    }

    /// Value of the scalar output and its gradient with respect to every parameter.
    pub fn param_gradient(&self, bindings: &Bindings<'_>) -> Result<(f64, Vec<Tensor>)> {
        let (value, mut grads) = self.backward(bindings, false, true)?;
        Ok((value, self.collect_param_grads(&mut grads, bindings.params)))
    }

    fn collect_param_grads(&self, grads: &mut [Option<Vec<f64>>], params: &[Tensor]) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(k) = node.op {
                if let Some(g) = grads[i].take() {
                    for (o, v) in out[k].data_mut().iter_mut().zip(g) {
                        *o += v;
                    }
                }
            }
        }
        out
    }

    fn check_bindings(&self, bindings: &Bindings<'_>) -> Result<()> {
        for node in &self.nodes {
            match node.op {
                Op::Input => {
                    let t = bindings.input.ok_or_else(|| Error::shape("input placeholder is not bound"))?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(Error::shape(format!(
                            "input bound with shape {:?}, graph expects {:?}",
                            t.shape(),
                            node.shape
                        )));
                    }
                }
                Op::Param(k) => {
                    let t = bindings
                        .params
                        .get(k)
                        .ok_or_else(|| Error::shape(format!("parameter {k} is not bound")))?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(Error::shape(format!(
                            "parameter {k} bound with shape {:?}, graph expects {:?}",
                            t.shape(),
                            node.shape
                        )));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn forward(&self, bindings: &Bindings<'_>, upto: NodeId) -> Result<Vec<Tensor>> {
        self.check_bindings(bindings)?;
        let mut values: Vec<Tensor> = Vec::with_capacity(upto.0 + 1);
        for (i, node) in self.nodes[..=upto.0].iter().enumerate() {
            let v = self.forward_node(node, &values, bindings);
            if !v.all_finite() {
                return Err(Error::Numeric { location: format!("node {i} ({})", node.op.name()) });
            }
            values.push(v);
        }
        Ok(values)
    }

    fn forward_node(&self, node: &Node, values: &[Tensor], bindings: &Bindings<'_>) -> Tensor {
        let shape = node.shape.clone();
        let unary = |x: NodeId, f: &dyn Fn(f64) -> f64| -> Tensor {
            Tensor::new(shape.clone(), values[x.0].data().iter().map(|&v| f(v)).collect())
                .expect("shape fixed at construction")
        };
        let binary = |a: NodeId, b: NodeId, f: &dyn Fn(f64, f64) -> f64| -> Tensor {
            let data = values[a.0].data().iter().zip(values[b.0].data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(shape.clone(), data).expect("shape fixed at construction")
        };
        match &node.op {
            // Binding shapes were checked before the pass.
            Op::Input => bindings.input.expect("checked").clone(),
            Op::Param(k) => bindings.params[*k].clone(),
            Op::Constant(t) => t.clone(),
            Op::MatMul(a, b) => {
                let (sa, sb) = (values[a.0].shape(), values[b.0].shape());
                let data = matmul(values[a.0].data(), values[b.0].data(), sa[0], sa[1], sb[1]);
                Tensor::new(shape, data).expect("shape fixed at construction")
            }
            Op::AddBias(a, b) => {
                let n = row_len(&shape);
                let bias = values[b.0].data();
                let mut out = values[a.0].clone();
                for row in out.data_mut().chunks_mut(n) {
                    for (o, &bv) in row.iter_mut().zip(bias) {
                        *o += bv;
                    }
                }
                out
            }
            Op::Add(a, b) => binary(*a, *b, &|x, y| x + y),
            Op::Sub(a, b) => binary(*a, *b, &|x, y| x - y),
            Op::Mul(a, b) => binary(*a, *b, &|x, y| x * y),
            Op::Affine { x, scale, shift } => unary(*x, &|v| scale * v + shift),
            Op::Square(x) => unary(*x, &|v| v * v),
            Op::Relu(x) => unary(*x, &|v| if v > 0.0 { v } else { 0.0 }),
            Op::Log(x) => unary(*x, &f64::ln),
            Op::Reciprocal(x) => unary(*x, &|v| 1.0 / v),
            Op::SoftmaxRows(x) => {
                let mut out = values[x.0].clone();
                for row in out.data_mut().chunks_mut(row_len(&shape)) {
                    softmax_in_place(row);
                }
                out
            }
            Op::LogSoftmaxRows(x) => {
                let mut out = values[x.0].clone();
                for row in out.data_mut().chunks_mut(row_len(&shape)) {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    for v in row.iter_mut() {
                        *v -= lse;
                    }
                }
                out
            }
            Op::Sum(x) => Tensor::scalar(values[x.0].data().iter().sum()),
            Op::Mean(x) => {
                let t = &values[x.0];
                Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
            }
            Op::ClipUpperSt { x, hi } => unary(*x, &|v| v.min(*hi)),
            Op::ClipIntervalSt { x, lo, hi } => unary(*x, &|v| v.max(*lo).min(*hi)),
        }
    }

    fn backward(
        &self,
        bindings: &Bindings<'_>,
        want_input: bool,
        want_params: bool,
    ) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let out = self.output_or_err()?;
        if self.nodes[out.0].shape.iter().product::<usize>() != 1 {
            return Err(Error::contract(format!(
                "gradients need a scalar output, output has shape {:?}",
                self.nodes[out.0].shape
            )));
        }
        let values = self.forward(bindings, out)?;

        let mut needs = vec![false; out.0 + 1];
        for (i, node) in self.nodes[..=out.0].iter().enumerate() {
            needs[i] = match node.op {
                Op::Input => want_input,
                Op::Param(_) => want_params,
                Op::Constant(_) => false,
                ref op => op.children().iter().any(|c| needs[c.0]),
            };
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backward_node(node, &g, &values, &needs, &mut grads);
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Input | Op::Param(_)) {
                grads[i] = Some(g);
            }
        }
        Ok((values[out.0].data()[0], grads))
    }

    fn backward_node(
        &self,
        node: &Node,
        g: &[f64],
        values: &[Tensor],
        needs: &[bool],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let mut send = |id: NodeId, contrib: Vec<f64>| {
            if !needs[id.0] {
                return;
            }
            match &mut grads[id.0] {
                Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let elementwise = |x: NodeId, f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
            values[x.0].data().iter().zip(g).map(|(&xv, &gv)| f(xv, gv)).collect()
        };
        match &node.op {
            Op::Input | Op::Param(_) | Op::Constant(_) => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (values[a.0].shape(), values[b.0].shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs[a.0] {
                    send(*a, matmul_transpose_b(g, values[b.0].data(), m, n, k));
                }
                if needs[b.0] {
                    send(*b, matmul_transpose_a(values[a.0].data(), g, m, k, n));
                }
            }
            Op::AddBias(a, b) => {
                let n = row_len(&node.shape);
                if needs[b.0] {
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    send(*b, db);
                }
                send(*a, g.to_vec());
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if needs[a.0] {
                    send(*a, elementwise(*b, &|bv, gv| bv * gv));
                }
                if needs[b.0] {
                    send(*b, elementwise(*a, &|av, gv| av * gv));
                }
            }
            Op::Affine { x, scale, .. } => send(*x, g.iter().map(|v| scale * v).collect()),
            Op::Square(x) => send(*x, elementwise(*x, &|xv, gv| 2.0 * xv * gv)),
            Op::Relu(x) => send(*x, elementwise(*x, &|xv, gv| if xv > 0.0 { gv } else { 0.0 })),
            Op::Log(x) => send(*x, elementwise(*x, &|xv, gv| gv / xv)),
            Op::Reciprocal(x) => send(*x, elementwise(*x, &|xv, gv| -gv / (xv * xv))),
            Op::SoftmaxRows(x) => {
                let n = row_len(&node.shape);
                // Recompute the softmax from the input; cheaper than keeping a handle.
                let mut y = values[x.0].data().to_vec();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks_mut(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    softmax_in_place(yr);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr.iter()).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                send(*x, dx);
            }
            Op::LogSoftmaxRows(x) => {
                let n = row_len(&node.shape);
                let mut y = values[x.0].data().to_vec();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks_mut(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    softmax_in_place(yr);
                    let total: f64 = gr.iter().sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr.iter()).zip(gr) {
                        *d = gv - yv * total;
                    }
                }
                send(*x, dx);
            }
            Op::Sum(x) => send(*x, vec![g[0]; values[x.0].len()]),
            Op::Mean(x) => {
                let n = values[x.0].len();
                send(*x, vec![g[0] / n as f64; n]);
            }
            Op::ClipUpperSt { x, .. } | Op::ClipIntervalSt { x, .. } => send(*x, g.to_vec()),
        }
    }
}

impl Graph {
    /// Values of every node up to the output, for oracles that need intermediates.
    pub(crate) fn forward_all(&self, bindings: &Bindings<'_>) -> Result<Vec<Tensor>> {
        let out = self.output_or_err()?;
        self.forward(bindings, out)
    }

    /// Ids of the nodes feeding a ReLU; their signs decide which linear piece is active.
    pub(crate) fn relu_inputs(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .collect()
    }

    /// Copy of the graph where every straight-through clip is replaced by its
    /// linearization at `bindings`: `x + (clip(x₀) − x₀)`.
    ///
    /// The copy has the clipped forward value at the binding point and a true
    /// derivative of one through the former clip, which is what the
    /// straight-through backward rule claims. Finite differences of the copy
    /// therefore check that rule using forward evaluation only.
    pub(crate) fn straight_through_linearization(&self, bindings: &Bindings<'_>) -> Result<Graph> {
        let values = self.forward_all(bindings)?;
        let mut out = Graph::new();
        let mut remap: Vec<NodeId> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate().take(values.len()) {
            let m = |id: NodeId| remap[id.0];
            let new_op = match &node.op {
                Op::ClipUpperSt { x, .. } | Op::ClipIntervalSt { x, .. } => {
                    let before = &values[x.0];
                    let offset = Tensor::new(
                        node.shape.clone(),
                        values[i].data().iter().zip(before.data()).map(|(c, v)| c - v).collect(),
                    )?;
                    let k = out.constant(offset);
                    Op::Add(m(*x), k)
                }
                Op::Input => Op::Input,
                Op::Param(k) => Op::Param(*k),
                Op::Constant(t) => Op::Constant(t.clone()),
                Op::MatMul(a, b) => Op::MatMul(m(*a), m(*b)),
                Op::AddBias(a, b) => Op::AddBias(m(*a), m(*b)),
                Op::Add(a, b) => Op::Add(m(*a), m(*b)),
                Op::Sub(a, b) => Op::Sub(m(*a), m(*b)),
                Op::Mul(a, b) => Op::Mul(m(*a), m(*b)),
                Op::Affine { x, scale, shift } => Op::Affine { x: m(*x), scale: *scale, shift: *shift },
                Op::Square(x) => Op::Square(m(*x)),
                Op::Relu(x) => Op::Relu(m(*x)),
                Op::Log(x) => Op::Log(m(*x)),
                Op::Reciprocal(x) => Op::Reciprocal(m(*x)),
                Op::SoftmaxRows(x) => Op::SoftmaxRows(m(*x)),
                Op::LogSoftmaxRows(x) => Op::LogSoftmaxRows(m(*x)),
                Op::Sum(x) => Op::Sum(m(*x)),
                Op::Mean(x) => Op::Mean(m(*x)),
            };
            let id = out.push(new_op, node.shape.clone());
            if matches!(node.op, Op::Input) {
                out.input = Some(id);
            }
            remap.push(id);
        }
        if let Some(o) = self.output {
            out.output = Some(remap[o.0]);
        }
        Ok(out)
    }
}

fn take_grad(grads: &mut [Option<Vec<f64>>], id: NodeId, shape: &[usize]) -> Tensor {
    match grads.get_mut(id.0).and_then(Option::take) {
        Some(g) => Tensor::new(shape.to_vec(), g).expect("gradient matches its node"),
        None => Tensor::zeros(shape),
    }
}

/// Numerically stable softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Standalone straight-through interval clip of a tensor's values.
///
/// The backward rule is only meaningful inside a [`Graph`]; see
/// [`Graph::clip_interval_st`].
pub fn clip_interval_straight_through(x: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
    if !(lo < hi) {
        return Err(Error::parameter(format!("clip interval needs lo < hi, got [{lo}, {hi}]")));
    }
    Ok(x.map(|v| v.max(lo).min(hi)))
}
