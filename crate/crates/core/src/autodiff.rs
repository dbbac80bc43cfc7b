//! Reverse-mode automatic differentiation over explicit computational graphs.
//!
//! A [`Graph`] is an append-only list of nodes; creation order is a valid
//! topological order because every node may only reference nodes created
//! before it. Graphs are built define-by-run: when all inputs of a new node
//! already carry values the node is evaluated immediately, otherwise it is
//! evaluated by a later call to [`Graph::forward`].
//!
//! [`Graph::backward`] walks the nodes in reverse creation order. A node read
//! by several consumers receives the sum of their contributions before its own
//! local derivative is applied, which is also how a parameter shared across
//! time steps ends up with the summed gradient.
//!
//! Parameters live outside the graph in a [`ParamStore`]; a graph snapshots
//! their values into `Param` nodes and hands gradients back with
//! [`Graph::accumulate`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::ActivationKind;
use crate::tensor::Tensor;

/// Probabilities fed to logarithms are clamped into `[PROB_FLOOR, 1 - PROB_FLOOR]`.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named parameters of a model together with their gradient accumulators.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Euclidean norm of all gradients concatenated.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.grad.norm_sq())
            .sum::<f64>()
            .sqrt()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, values: &[Tensor]) {
        assert_eq!(values.len(), self.params.len(), "snapshot size");
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v.clone();
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Scalar cost functions. Each reduces its input(s) to a single number by
/// summing per-row (or per-element) costs.
#[derive(Clone, Debug, PartialEq)]
pub enum Loss {
    /// Input: logits, one row per example. Cost `sum_i w_i * -log softmax(row_i)[t_i]`.
    SoftmaxCrossEntropy { targets: Vec<usize>, weights: Vec<f64> },
    /// Input: probabilities, one row per example. Cost `sum_i -log p_i[t_i]`.
    CategoricalNll { targets: Vec<usize> },
    /// Input: Bernoulli means. Cost `sum -y log mu - (1-y) log(1-mu)`.
    Bernoulli { targets: Vec<f64> },
    /// Inputs: means and optionally standard deviations (unit when absent).
    /// Cost `sum (y-mu)^2 / (2 sigma^2) + log sigma`.
    Gaussian { targets: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input,
    Constant,
    Param(ParamId),
    MatMul { trans_a: bool, trans_b: bool },
    /// Elementwise sum; the second operand may be a single row broadcast over rows.
    Add,
    Sub,
    Mul,
    /// `a[i][j] * s[i]` for a column `s`.
    ScaleRows,
    /// `scale * x + shift`
    Affine { scale: f64, shift: f64 },
    Activation(ActivationKind),
    ConcatCols,
    ConcatRows,
    SliceCols { start: usize, len: usize },
    SliceRows { start: usize, len: usize },
    GatherRows { ids: Vec<usize> },
    /// Row `i` of the output is the sum of the table rows listed in `ids[i]`.
    GatherSum { ids: Vec<Vec<usize>> },
    /// Row-wise softmax; entries whose mask is `false` get probability 0.
    Softmax { mask: Option<Vec<bool>> },
    Sum,
    Loss(Loss),
}

#[derive(Clone, Debug)]
pub struct Node {
    pub id: NodeId,
    pub op: Op,
    pub inputs: Vec<NodeId>,
    /// Declared shape for unbound inputs.
    shape: Vec<usize>,
    pub value: Option<Tensor>,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
    clamp_events: usize,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Number of times a probability had to be clamped away from 0 or 1
    /// before taking its logarithm.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    /// The computed value of a node. Panics if the node is unevaluated; use
    /// [`Graph::try_value`] when that is possible.
    pub fn value(&self, id: NodeId) -> &Tensor {
        self.try_value(id)
            .unwrap_or_else(|| panic!("node {} has no value", id.0))
    }

    pub fn try_value(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id.0).and_then(|n| n.value.as_ref())
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, store: Option<&ParamStore>) -> Result<NodeId> {
        let id = self.nodes.len();
        for input in &inputs {
            if input.0 >= id {
                return Err(Error::UnknownNode(input.0));
            }
        }
        let ready = inputs.iter().all(|i| self.nodes[i.0].value.is_some());
        let value = if ready {
            let vals: Vec<&Tensor> = inputs
                .iter()
                .map(|i| self.nodes[i.0].value.as_ref().unwrap())
                .collect();
            let (v, clamps) = evaluate(&op, &vals, store).map_err(|e| e.at_node(id))?;
            self.clamp_events += clamps;
            Some(v)
        } else {
            None
        };
        self.nodes.push(Node {
            id: NodeId(id),
            op,
            inputs,
            shape: Vec::new(),
            value,
        });
        Ok(NodeId(id))
    }

    /// An input placeholder to be bound by [`Graph::forward`].
    pub fn input(&mut self, shape: &[usize]) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            id,
            op: Op::Input,
            inputs: Vec::new(),
            shape: shape.to_vec(),
            value: None,
        });
        id
    }

    /// An input bound at creation. It can be rebound by [`Graph::forward`].
    pub fn input_value(&mut self, value: Tensor) -> NodeId {
        let id = self.input(value.shape());
        self.nodes[id.0].value = Some(value);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            id,
            op: Op::Constant,
            inputs: Vec::new(),
            shape: value.shape().to_vec(),
            value: Some(value),
        });
        id
    }

    /// The node holding parameter `pid`. Created on first use and shared by
    /// every later use within this graph.
    pub fn param(&mut self, store: &ParamStore, pid: ParamId) -> NodeId {
        if let Some(&id) = self.param_nodes.get(&pid) {
            return id;
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            id,
            op: Op::Param(pid),
            inputs: Vec::new(),
            shape: store.value(pid).shape().to_vec(),
            value: Some(store.value(pid).clone()),
        });
        self.param_nodes.insert(pid, id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, trans_a: bool, trans_b: bool) -> Result<NodeId> {
        self.push(Op::MatMul { trans_a, trans_b }, vec![a, b], None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add, vec![a, b], None)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub, vec![a, b], None)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul, vec![a, b], None)
    }

    pub fn scale_rows(&mut self, a: NodeId, column: NodeId) -> Result<NodeId> {
        self.push(Op::ScaleRows, vec![a, column], None)
    }

    pub fn affine_scalar(&mut self, a: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        self.push(Op::Affine { scale, shift }, vec![a], None)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.affine_scalar(a, factor, 0.0)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: NodeId) -> Result<NodeId> {
        self.affine_scalar(a, -1.0, 1.0)
    }

    pub fn activation(&mut self, a: NodeId, kind: ActivationKind) -> Result<NodeId> {
        self.push(Op::Activation(kind), vec![a], None)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.activation(a, ActivationKind::Sigmoid)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.activation(a, ActivationKind::Tanh)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.push(Op::ConcatCols, parts.to_vec(), None)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.push(Op::ConcatRows, parts.to_vec(), None)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.push(Op::SliceCols { start, len }, vec![a], None)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.push(Op::SliceRows { start, len }, vec![a], None)
    }

    pub fn gather_rows(&mut self, table: NodeId, ids: Vec<usize>) -> Result<NodeId> {
        self.push(Op::GatherRows { ids }, vec![table], None)
    }

    pub fn gather_sum(&mut self, table: NodeId, ids: Vec<Vec<usize>>) -> Result<NodeId> {
        self.push(Op::GatherSum { ids }, vec![table], None)
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax { mask: None }, vec![a], None)
    }

    pub fn masked_softmax(&mut self, a: NodeId, mask: Vec<bool>) -> Result<NodeId> {
        self.push(Op::Softmax { mask: Some(mask) }, vec![a], None)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum, vec![a], None)
    }

    pub fn loss(&mut self, inputs: &[NodeId], loss: Loss) -> Result<NodeId> {
        self.push(Op::Loss(loss), inputs.to_vec(), None)
    }

    /// Binds `bindings` to their input nodes and recomputes every node in
    /// creation order, reading parameter values from `store`.
    pub fn forward(&mut self, store: &ParamStore, bindings: &HashMap<NodeId, Tensor>) -> Result<()> {
        for (id, value) in bindings {
            let node = self.nodes.get_mut(id.0).ok_or(Error::UnknownNode(id.0))?;
            if node.op != Op::Input {
                return Err(Error::invalid(format!("node {} is not an input", id.0)));
            }
            if !node.shape.is_empty() && node.shape.as_slice() != value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "input",
                    node: Some(id.0),
                    detail: format!("declared {:?}, bound {:?}", node.shape, value.shape()),
                });
            }
            node.value = Some(value.clone());
        }
        self.clamp_events = 0;
        for idx in 0..self.nodes.len() {
            match &self.nodes[idx].op {
                Op::Input => {
                    if self.nodes[idx].value.is_none() {
                        return Err(Error::UnboundInput(idx));
                    }
                }
                Op::Constant => {}
                Op::Param(pid) => {
                    self.nodes[idx].value = Some(store.value(*pid).clone());
                }
                op => {
                    let vals: Vec<&Tensor> = self.nodes[idx]
                        .inputs
                        .iter()
                        .map(|i| self.nodes[i.0].value.as_ref().expect("evaluated in order"))
                        .collect();
                    let (v, clamps) = evaluate(op, &vals, Some(store)).map_err(|e| e.at_node(idx))?;
                    self.clamp_events += clamps;
                    self.nodes[idx].value = Some(v);
                }
            }
        }
        Ok(())
    }

    /// Gradients of the scalar `cost` with respect to every node it depends on.
    pub fn backward(&self, cost: NodeId) -> Result<Gradients> {
        let cost_node = self.nodes.get(cost.0).ok_or(Error::UnknownNode(cost.0))?;
        let cost_value = cost_node
            .value
            .as_ref()
            .ok_or(Error::BackwardBeforeForward(cost.0))?;
        if cost_value.len() != 1 {
            return Err(Error::NonScalarCost {
                node: cost.0,
                shape: cost_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[cost.0] = Some(Tensor::filled(cost_value.shape(), 1.0));
        for idx in (0..=cost.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.inputs.is_empty() {
                let inputs: Vec<&Tensor> = node
                    .inputs
                    .iter()
                    .map(|i| {
                        self.nodes[i.0]
                            .value
                            .as_ref()
                            .ok_or(Error::BackwardBeforeForward(i.0))
                    })
                    .collect::<Result<_>>()?;
                let output = node.value.as_ref().ok_or(Error::BackwardBeforeForward(idx))?;
                let local = backprop(&node.op, &inputs, output, &grad);
                for (input, g) in node.inputs.iter().zip(local) {
                    let Some(g) = g else { continue };
                    match &mut grads[input.0] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            grads[idx] = Some(grad);
        }
        Ok(Gradients { grads })
    }

    /// Adds the gradients of all parameter nodes into the store's accumulators.
    pub fn accumulate(&self, grads: &Gradients, store: &mut ParamStore) {
        for (&pid, &node) in &self.param_nodes {
            if let Some(g) = grads.get(node) {
                store.get_mut(pid).grad.add_assign(g);
            }
        }
    }

    /// Backward from `cost` followed by [`Graph::accumulate`].
    pub fn backward_into(&self, cost: NodeId, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(cost)?;
        self.accumulate(&grads, store);
        Ok(grads)
    }

    /// The node holding `pid` in this graph, if the parameter was used.
    pub fn param_node(&self, pid: ParamId) -> Option<NodeId> {
        self.param_nodes.get(&pid).copied()
    }
}

/// Compares the analytic gradient of `cost` with respect to `param` against
/// central finite differences and returns the largest elementwise relative
/// error `|a - n| / max(f, |a| + |n|)`.
///
/// The floor `f = 1e-6 * max(1, |cost|)` sits well above the round-off in
/// `(c(+eps) - c(-eps)) / 2 eps`, which is about `1e-16 * |cost| / eps`;
/// entries smaller than the floor are in effect compared absolutely.
///
/// The graph is re-evaluated with the parameter perturbed in place; the
/// original value is restored before returning.
pub fn finite_diff_check(
    graph: &mut Graph,
    store: &mut ParamStore,
    param: ParamId,
    cost: NodeId,
    epsilon: f64,
) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let none = HashMap::new();
    graph.forward(store, &none)?;
    let floor = 1e-6 * graph.value(cost).item().abs().max(1.0);
    let grads = graph.backward(cost)?;
    let analytic = match graph.param_node(param).and_then(|n| grads.get(n)) {
        Some(g) => g.clone(),
        None => Tensor::zeros(store.value(param).shape()),
    };
    let original = store.value(param).clone();
    let mut worst: f64 = 0.0;
    let mut outcome = Ok(());
    for k in 0..original.len() {
        let mut eval_at = |delta: f64| -> Result<f64> {
            store.value_mut(param).data_mut()[k] = original.data()[k] + delta;
            graph.forward(store, &none)?;
            Ok(graph.value(cost).item())
        };
        let plus = eval_at(epsilon);
        let minus = eval_at(-epsilon);
        let (plus, minus) = match (plus, minus) {
            (Ok(p), Ok(m)) => (p, m),
            (Err(e), _) | (_, Err(e)) => {
                outcome = Err(e);
                break;
            }
        };
        store.value_mut(param).data_mut()[k] = original.data()[k];
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic.data()[k];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    *store.value_mut(param) = original;
    graph.forward(store, &none)?;
    outcome.map(|_| worst)
}

fn same_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims2() != b.dims2() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn clamp_prob(p: f64, clamps: &mut usize) -> f64 {
    if p < PROB_FLOOR {
        *clamps += 1;
        PROB_FLOOR
    } else if p > 1.0 - PROB_FLOOR {
        *clamps += 1;
        1.0 - PROB_FLOOR
    } else {
        p
    }
}

fn check_targets(op: &'static str, rows: usize, cols: usize, targets: &[usize]) -> Result<()> {
    if targets.len() != rows {
        return Err(Error::shape(op, format!("{} targets for {rows} rows", targets.len())));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
        return Err(Error::OutOfRange {
            what: "class index",
            index: t,
            size: cols,
        });
    }
    Ok(())
}

/// Forward evaluation of one node. Returns the value and the number of
/// probability clamps performed.
fn evaluate(op: &Op, inputs: &[&Tensor], store: Option<&ParamStore>) -> Result<(Tensor, usize)> {
    let mut clamps = 0;
    let value = match op {
        Op::Input | Op::Constant => unreachable!("leaf nodes are not evaluated"),
        Op::Param(pid) => store
            .ok_or_else(|| Error::invalid("parameter evaluation needs a store"))?
            .value(*pid)
            .clone(),
        Op::MatMul { trans_a, trans_b } => Tensor::matmul(inputs[0], inputs[1], *trans_a, *trans_b)?,
        Op::Add => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.dims2() == b.dims2() {
                a.zip_map(b, |x, y| x + y)
            } else if b.rows() == 1 && b.cols() == a.cols() {
                let mut out = a.clone();
                let cols = a.cols();
                for (i, x) in out.data_mut().iter_mut().enumerate() {
                    *x += b.data()[i % cols];
                }
                out
            } else {
                return Err(Error::shape(
                    "add",
                    format!("{:?} + {:?}", a.shape(), b.shape()),
                ));
            }
        }
        Op::Sub => {
            same_dims("sub", inputs[0], inputs[1])?;
            inputs[0].zip_map(inputs[1], |x, y| x - y)
        }
        Op::Mul => {
            same_dims("mul", inputs[0], inputs[1])?;
            inputs[0].zip_map(inputs[1], |x, y| x * y)
        }
        Op::ScaleRows => {
            let (a, s) = (inputs[0], inputs[1]);
            let (r, c) = a.dims2();
            if s.len() != r {
                return Err(Error::shape(
                    "scale_rows",
                    format!("{:?} rows scaled by {:?}", a.shape(), s.shape()),
                ));
            }
            let mut out = a.clone();
            for i in 0..r {
                let f = s.data()[i];
                out.data_mut()[i * c..(i + 1) * c].iter_mut().for_each(|x| *x *= f);
            }
            out
        }
        Op::Affine { scale, shift } => inputs[0].map(|x| scale * x + shift),
        Op::Activation(kind) => kind.forward(inputs[0])?,
        Op::ConcatCols => {
            let rows = inputs[0].rows();
            if inputs.iter().any(|t| t.rows() != rows) {
                return Err(Error::shape("concat_cols", "row counts differ"));
            }
            let total: usize = inputs.iter().map(|t| t.cols()).sum();
            let mut data = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for t in inputs {
                    data.extend_from_slice(t.row(i));
                }
            }
            Tensor::matrix(rows, total, data)
        }
        Op::ConcatRows => {
            let cols = inputs[0].cols();
            if inputs.iter().any(|t| t.cols() != cols) {
                return Err(Error::shape("concat_rows", "column counts differ"));
            }
            let rows: usize = inputs.iter().map(|t| t.rows()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for t in inputs {
                data.extend_from_slice(t.data());
            }
            Tensor::matrix(rows, cols, data)
        }
        Op::SliceCols { start, len } => {
            let (r, c) = inputs[0].dims2();
            if start + len > c {
                return Err(Error::shape("slice_cols", format!("{start}+{len} > {c}")));
            }
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&inputs[0].row(i)[*start..start + len]);
            }
            Tensor::matrix(r, *len, data)
        }
        Op::SliceRows { start, len } => {
            let (r, c) = inputs[0].dims2();
            if start + len > r {
                return Err(Error::shape("slice_rows", format!("{start}+{len} > {r}")));
            }
            Tensor::matrix(*len, c, inputs[0].data()[start * c..(start + len) * c].to_vec())
        }
        Op::GatherRows { ids } => {
            let (r, c) = inputs[0].dims2();
            let mut data = Vec::with_capacity(ids.len() * c);
            for &id in ids {
                if id >= r {
                    return Err(Error::OutOfRange {
                        what: "embedding table",
                        index: id,
                        size: r,
                    });
                }
                data.extend_from_slice(inputs[0].row(id));
            }
            Tensor::matrix(ids.len(), c, data)
        }
        Op::GatherSum { ids } => {
            let (r, c) = inputs[0].dims2();
            let mut out = Tensor::zeros(&[ids.len(), c]);
            for (i, row_ids) in ids.iter().enumerate() {
                for &id in row_ids {
                    if id >= r {
                        return Err(Error::OutOfRange {
                            what: "embedding table",
                            index: id,
                            size: r,
                        });
                    }
                    for (o, x) in out.row_mut(i).iter_mut().zip(inputs[0].row(id)) {
                        *o += x;
                    }
                }
            }
            out
        }
        Op::Softmax { mask } => {
            let x = inputs[0];
            let (r, c) = x.dims2();
            if let Some(m) = mask {
                if m.len() != x.len() {
                    return Err(Error::shape("softmax", "mask size differs from input"));
                }
            }
            let mut out = Tensor::zeros(x.shape());
            for i in 0..r {
                let row = x.row(i);
                let keep = |j: usize| mask.as_ref().is_none_or(|m| m[i * c + j]);
                let max = (0..c)
                    .filter(|&j| keep(j))
                    .map(|j| row[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut total = 0.0;
                let out_row = out.row_mut(i);
                for j in 0..c {
                    if keep(j) {
                        out_row[j] = (row[j] - max).exp();
                        total += out_row[j];
                    }
                }
                out_row.iter_mut().for_each(|v| *v /= total);
            }
            out
        }
        Op::Sum => Tensor::scalar(inputs[0].sum()),
        Op::Loss(loss) => Tensor::scalar(loss_value(loss, inputs, &mut clamps)?),
    };
    Ok((value, clamps))
}

fn loss_value(loss: &Loss, inputs: &[&Tensor], clamps: &mut usize) -> Result<f64> {
    match loss {
        Loss::SoftmaxCrossEntropy { targets, weights } => {
            let x = inputs[0];
            let (r, c) = x.dims2();
            check_targets("softmax_cross_entropy", r, c, targets)?;
            if weights.len() != r {
                return Err(Error::shape("softmax_cross_entropy", "one weight per row required"));
            }
            let mut total = 0.0;
            for i in 0..r {
                if weights[i] == 0.0 {
                    continue;
                }
                let row = x.row(i);
                total += weights[i] * (crate::tensor::log_sum_exp(row) - row[targets[i]]);
            }
            Ok(total)
        }
        Loss::CategoricalNll { targets } => {
            let p = inputs[0];
            let (r, c) = p.dims2();
            check_targets("categorical_nll", r, c, targets)?;
            Ok((0..r)
                .map(|i| -clamp_prob(p.get(i, targets[i]), clamps).ln())
                .sum())
        }
        Loss::Bernoulli { targets } => {
            let mu = inputs[0];
            if targets.len() != mu.len() {
                return Err(Error::shape("bernoulli", "one target per mean required"));
            }
            Ok(mu
                .data()
                .iter()
                .zip(targets)
                .map(|(&m, &y)| {
                    let m = clamp_prob(m, clamps);
                    -y * m.ln() - (1.0 - y) * (1.0 - m).ln()
                })
                .sum())
        }
        Loss::Gaussian { targets } => {
            let mu = inputs[0];
            if targets.len() != mu.len() {
                return Err(Error::shape("gaussian", "one target per mean required"));
            }
            match inputs.get(1) {
                None => Ok(mu
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(m, y)| 0.5 * (y - m) * (y - m))
                    .sum()),
                Some(sigma) => {
                    same_dims("gaussian", mu, sigma)?;
                    if sigma.data().iter().any(|&s| !(s > 0.0)) {
                        return Err(Error::invalid("gaussian standard deviation must be positive"));
                    }
                    Ok(mu
                        .data()
                        .iter()
                        .zip(sigma.data())
                        .zip(targets)
                        .map(|((m, s), y)| (y - m) * (y - m) / (2.0 * s * s) + s.ln())
                        .sum())
                }
            }
        }
    }
}

/// Local vector-Jacobian products: given the gradient of the cost with
/// respect to a node's output, the gradient with respect to each input.
fn backprop(op: &Op, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
    match op {
        Op::Input | Op::Constant | Op::Param(_) => Vec::new(),
        Op::MatMul { trans_a, trans_b } => {
            let (a, b) = (inputs[0], inputs[1]);
            // C = A' B' with A' = op(A), B' = op(B).
            let da = match (trans_a, trans_b) {
                (false, false) => Tensor::matmul(grad, b, false, true),
                (false, true) => Tensor::matmul(grad, b, false, false),
                (true, false) => Tensor::matmul(b, grad, false, true),
                (true, true) => Tensor::matmul(b, grad, true, true),
            };
            let db = match (trans_a, trans_b) {
                (false, false) => Tensor::matmul(a, grad, true, false),
                (true, false) => Tensor::matmul(a, grad, false, false),
                (false, true) => Tensor::matmul(grad, a, true, false),
                (true, true) => Tensor::matmul(grad, a, true, true),
            };
            let da = da.expect("shapes validated in forward").reshape(a.shape().to_vec());
            let db = db.expect("shapes validated in forward").reshape(b.shape().to_vec());
            vec![da.ok(), db.ok()]
        }
        Op::Add => {
            let b = inputs[1];
            let db = if inputs[0].dims2() == b.dims2() {
                grad.clone().reshape(b.shape().to_vec()).ok()
            } else {
                let cols = grad.cols();
                let mut acc = vec![0.0; cols];
                for (i, g) in grad.data().iter().enumerate() {
                    acc[i % cols] += g;
                }
                Tensor::new(b.shape().to_vec(), acc).ok()
            };
            vec![Some(grad.clone()), db]
        }
        Op::Sub => vec![Some(grad.clone()), Some(grad.map(|g| -g))],
        Op::Mul => vec![
            Some(grad.zip_map(inputs[1], |g, b| g * b)),
            Some(grad.zip_map(inputs[0], |g, a| g * a)),
        ],
        Op::ScaleRows => {
            let (a, s) = (inputs[0], inputs[1]);
            let (r, c) = a.dims2();
            let mut da = grad.clone();
            let mut ds = vec![0.0; r];
            for (i, d) in ds.iter_mut().enumerate() {
                let f = s.data()[i];
                let g_row = &grad.data()[i * c..(i + 1) * c];
                *d = g_row.iter().zip(a.row(i)).map(|(g, x)| g * x).sum();
                da.data_mut()[i * c..(i + 1) * c].iter_mut().for_each(|x| *x *= f);
            }
            vec![Some(da), Tensor::new(s.shape().to_vec(), ds).ok()]
        }
        Op::Affine { scale, .. } => vec![Some(grad.map(|g| scale * g))],
        Op::Activation(kind) => vec![Some(kind.backward(inputs[0], output, grad))],
        Op::ConcatCols => {
            let rows = grad.rows();
            let mut offset = 0;
            inputs
                .iter()
                .map(|t| {
                    let c = t.cols();
                    let mut data = Vec::with_capacity(rows * c);
                    for i in 0..rows {
                        data.extend_from_slice(&grad.row(i)[offset..offset + c]);
                    }
                    offset += c;
                    Tensor::new(t.shape().to_vec(), data).ok()
                })
                .collect()
        }
        Op::ConcatRows => {
            let cols = grad.cols();
            let mut offset = 0;
            inputs
                .iter()
                .map(|t| {
                    let n = t.rows() * cols;
                    let part = grad.data()[offset..offset + n].to_vec();
                    offset += n;
                    Tensor::new(t.shape().to_vec(), part).ok()
                })
                .collect()
        }
        Op::SliceCols { start, len } => {
            let mut da = Tensor::zeros(inputs[0].shape());
            for i in 0..grad.rows() {
                da.row_mut(i)[*start..start + len].copy_from_slice(grad.row(i));
            }
            vec![Some(da)]
        }
        Op::SliceRows { start, .. } => {
            let mut da = Tensor::zeros(inputs[0].shape());
            let c = inputs[0].cols();
            da.data_mut()[start * c..start * c + grad.len()].copy_from_slice(grad.data());
            vec![Some(da)]
        }
        Op::GatherRows { ids } => {
            let mut dt = Tensor::zeros(inputs[0].shape());
            for (i, &id) in ids.iter().enumerate() {
                for (d, g) in dt.row_mut(id).iter_mut().zip(grad.row(i)) {
                    *d += g;
                }
            }
            vec![Some(dt)]
        }
        Op::GatherSum { ids } => {
            let mut dt = Tensor::zeros(inputs[0].shape());
            for (i, row_ids) in ids.iter().enumerate() {
                for &id in row_ids {
                    for (d, g) in dt.row_mut(id).iter_mut().zip(grad.row(i)) {
                        *d += g;
                    }
                }
            }
            vec![Some(dt)]
        }
        Op::Softmax { .. } => {
            let (r, c) = output.dims2();
            let mut dx = Tensor::zeros(output.shape());
            for i in 0..r {
                let y = output.row(i);
                let g = &grad.data()[i * c..(i + 1) * c];
                let inner: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                    *d = y[j] * (g[j] - inner);
                }
            }
            vec![Some(dx)]
        }
        Op::Sum => vec![Some(Tensor::filled(inputs[0].shape(), grad.item()))],
        Op::Loss(loss) => loss_backprop(loss, inputs, grad.item()),
    }
}

fn loss_backprop(loss: &Loss, inputs: &[&Tensor], g: f64) -> Vec<Option<Tensor>> {
    let mut ignored = 0;
    match loss {
        Loss::SoftmaxCrossEntropy { targets, weights } => {
            let x = inputs[0];
            let (r, c) = x.dims2();
            let mut dx = Tensor::zeros(x.shape());
            for i in 0..r {
                if weights[i] == 0.0 {
                    continue;
                }
                let scale = g * weights[i];
                let row = dx.row_mut(i);
                crate::tensor::softmax_into(x.row(i), row);
                row[targets[i]] -= 1.0;
                row.iter_mut().for_each(|v| *v *= scale);
            }
            let _ = c;
            vec![Some(dx)]
        }
        Loss::CategoricalNll { targets } => {
            let p = inputs[0];
            let mut dp = Tensor::zeros(p.shape());
            for (i, &t) in targets.iter().enumerate() {
                let q = clamp_prob(p.get(i, t), &mut ignored);
                dp.set(i, t, -g / q);
            }
            vec![Some(dp)]
        }
        Loss::Bernoulli { targets } => {
            let mu = inputs[0];
            let d = mu
                .data()
                .iter()
                .zip(targets)
                .map(|(&m, &y)| {
                    let m = clamp_prob(m, &mut ignored);
                    g * (-y / m + (1.0 - y) / (1.0 - m))
                })
                .collect();
            vec![Tensor::new(mu.shape().to_vec(), d).ok()]
        }
        Loss::Gaussian { targets } => {
            let mu = inputs[0];
            match inputs.get(1) {
                None => {
                    let d = mu.data().iter().zip(targets).map(|(m, y)| g * (m - y)).collect();
                    vec![Tensor::new(mu.shape().to_vec(), d).ok()]
                }
                Some(sigma) => {
                    let mut dmu = Vec::with_capacity(mu.len());
                    let mut dsigma = Vec::with_capacity(mu.len());
                    for ((m, s), y) in mu.data().iter().zip(sigma.data()).zip(targets) {
                        let r = y - m;
                        dmu.push(g * (m - y) / (s * s));
                        dsigma.push(g * (1.0 / s - r * r / (s * s * s)));
                    }
                    vec![
                        Tensor::new(mu.shape().to_vec(), dmu).ok(),
                        Tensor::new(sigma.shape().to_vec(), dsigma).ok(),
                    ]
                }
            }
        }
    }
}
