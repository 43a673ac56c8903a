//! Forward evaluation and generalized backpropagation.
//!
//! Backward signals travel along edges. When node `i` is processed in
//! reverse topological order, every child has already deposited its signal
//! for `i` in the per-edge buffers. The fast path sums those signals
//! (ascending child id) and applies the local gradient once; for an `Add`
//! node the local gradient is one and the signal is copied to every parent.
//! [`BackwardMode::Reference`] instead pushes each child signal through the
//! local gradient separately and sums the products, which is the unoptimized
//! form kept as an oracle for the fast path.

use crate::tensor::{self, Tensor, TensorError};

use super::{geometry, Graph, GraphError, LayerKind, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackwardMode {
    /// Sum child signals, then apply the local gradient once.
    #[default]
    Fast,
    /// Apply the local gradient per child signal, then sum.
    Reference,
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    Argmax(Vec<usize>),
    LossGrad(Tensor),
}

/// Mutable state of one execution of a graph.
#[derive(Debug, Clone)]
pub struct ExecContext {
    acts: Vec<Option<Tensor>>,
    aux: Vec<Aux>,
    signals: Vec<Option<Tensor>>,
    edge_grads: Vec<Vec<Option<Tensor>>>,
    param_grads: Vec<Vec<Tensor>>,
    loss: Option<f64>,
    add_scale: f64,
}

impl ExecContext {
    pub fn new(graph: &Graph) -> Self {
        let n = graph.len();
        ExecContext {
            acts: vec![None; n],
            aux: vec![Aux::None; n],
            signals: vec![None; n],
            edge_grads: graph.nodes.iter().map(|nd| vec![None; nd.parents.len()]).collect(),
            param_grads: graph
                .nodes
                .iter()
                .map(|nd| nd.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect())
                .collect(),
            loss: None,
            add_scale: 1.0,
        }
    }

    /// Output of a node from the last forward pass.
    pub fn activation(&self, node: NodeId) -> Option<&Tensor> {
        self.acts.get(node).and_then(|a| a.as_ref())
    }

    /// `∂z/∂(output of node)` from the last backward pass, summed over all
    /// outgoing edges. `None` for nodes that do not reach the loss.
    pub fn signal(&self, node: NodeId) -> Option<&Tensor> {
        self.signals.get(node).and_then(|s| s.as_ref())
    }

    /// Signal the node sent to the parent in `slot` during the last backward pass.
    pub fn edge_signal(&self, node: NodeId, slot: usize) -> Option<&Tensor> {
        self.edge_grads.get(node).and_then(|e| e.get(slot)).and_then(|s| s.as_ref())
    }

    pub fn loss(&self) -> Option<f64> {
        self.loss
    }

    pub fn param_grad(&self, node: NodeId, index: usize) -> &Tensor {
        &self.param_grads[node][index]
    }

    pub(crate) fn pool_argmax(&self, node: NodeId) -> Option<&[usize]> {
        match self.aux.get(node) {
            Some(Aux::Argmax(am)) => Some(am),
            _ => None,
        }
    }

    /// Fault injection: scales every signal an `Add` node sends to its
    /// parents. Exists only so the gradient checker can be shown to catch a
    /// broken backward rule; leave at 1.0 otherwise.
    pub fn set_add_backward_scale(&mut self, scale: f64) {
        self.add_scale = scale;
    }
}

/// Parameter gradients of one backward pass, indexed `[node][param]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<Tensor>>);

impl Gradients {
    pub fn get(&self, node: NodeId, index: usize) -> &Tensor {
        &self.0[node][index]
    }

    /// Largest elementwise difference over all parameters.
    pub fn max_abs_diff(&self, other: &Gradients) -> f64 {
        self.0
            .iter()
            .flatten()
            .zip(other.0.iter().flatten())
            .map(|(a, b)| a.max_abs_diff(b).unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max)
    }

    /// Adds `other` into `self`.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().flatten().zip(other.0.iter().flatten()) {
            a.add_assign(b).expect("gradients of the same graph");
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.0.iter_mut().flatten() {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
}

impl Graph {
    pub fn new_context(&self) -> ExecContext {
        ExecContext::new(self)
    }

    fn check_context(&self, ctx: &ExecContext) -> Result<(), GraphError> {
        if ctx.acts.len() != self.len()
            || ctx.param_grads.iter().map(Vec::len).ne(self.nodes.iter().map(|n| n.params.len()))
        {
            return Err(GraphError::ContextMismatch);
        }
        Ok(())
    }

    /// Evaluates every node and returns the loss for `label`.
    pub fn forward(&self, ctx: &mut ExecContext, input: &Tensor, label: usize) -> Result<f64, GraphError> {
        self.run_forward(ctx, input, Some(label))?;
        ctx.loss.ok_or(GraphError::Missing("softmax loss"))
    }

    /// Evaluates every node except the loss.
    pub fn infer(&self, ctx: &mut ExecContext, input: &Tensor) -> Result<(), GraphError> {
        self.run_forward(ctx, input, None)
    }

    /// Class scores feeding the loss node.
    pub fn logits<'a>(&self, ctx: &'a ExecContext) -> Result<&'a Tensor, GraphError> {
        let loss = self.loss_id.ok_or(GraphError::Missing("softmax loss"))?;
        let parent = self.nodes[loss].parents[0];
        ctx.activation(parent).ok_or(GraphError::NotEvaluated(parent))
    }

    /// Predicted class: argmax of the logits, ties to the lower class id.
    pub fn predict(&self, ctx: &mut ExecContext, input: &Tensor) -> Result<usize, GraphError> {
        self.infer(ctx, input)?;
        Ok(self.logits(ctx)?.argmax())
    }

    fn run_forward(&self, ctx: &mut ExecContext, input: &Tensor, label: Option<usize>) -> Result<(), GraphError> {
        self.check_context(ctx)?;
        let input_id = self.input_id.ok_or(GraphError::Missing("input"))?;
        let expected = &self.nodes[input_id].out_shape;
        if input.shape() != expected {
            return Err(GraphError::InputShape { expected: expected.clone(), got: input.shape().clone() });
        }
        ctx.loss = None;
        ctx.acts.iter_mut().for_each(|a| *a = None);
        for &id in &self.order {
            let node = &self.nodes[id];
            let kind_name = node.kind.name();
            let kernel_err = |source: TensorError| match source {
                TensorError::NonFinite(_) => GraphError::NonFinite { node: id, kind: kind_name, what: "activation" },
                source => GraphError::Kernel { node: id, kind: kind_name, source },
            };
            let parent = |slot: usize| -> Result<&Tensor, GraphError> {
                let p = node.parents[slot];
                ctx.acts[p].as_ref().ok_or(GraphError::NotEvaluated(p))
            };
            let (out, aux) = match &node.kind {
                LayerKind::Input { .. } => (input.clone(), Aux::None),
                LayerKind::Conv { .. } => {
                    let y = tensor::conv2d(parent(0)?, &node.params[0].value, &node.params[1].value, geometry(&node.kind))
                        .map_err(kernel_err)?;
                    (y, Aux::None)
                }
                LayerKind::Relu => (tensor::relu(parent(0)?), Aux::None),
                LayerKind::MaxPool { window, stride } => {
                    let (y, am) = tensor::maxpool2d(parent(0)?, *window, *stride).map_err(kernel_err)?;
                    (y, Aux::Argmax(am))
                }
                LayerKind::GlobalAvgPool => (tensor::global_avg_pool(parent(0)?).map_err(kernel_err)?, Aux::None),
                LayerKind::L2Normalize { epsilon } => {
                    (tensor::l2_normalize(parent(0)?, *epsilon).map_err(kernel_err)?, Aux::None)
                }
                LayerKind::FullyConnected { .. } => {
                    let y = tensor::fully_connected(parent(0)?, &node.params[0].value, &node.params[1].value)
                        .map_err(kernel_err)?;
                    (y, Aux::None)
                }
                LayerKind::Add => {
                    let inputs = (0..node.parents.len()).map(parent).collect::<Result<Vec<_>, _>>()?;
                    (tensor::add_n(&inputs).map_err(kernel_err)?, Aux::None)
                }
                LayerKind::SoftmaxLoss { .. } => {
                    let Some(label) = label else { continue };
                    let (loss, grad) = tensor::softmax_cross_entropy(parent(0)?, label).map_err(kernel_err)?;
                    ctx.loss = Some(loss);
                    (Tensor::vector(&[loss]), Aux::LossGrad(grad))
                }
            };
            if !out.is_finite() {
                return Err(GraphError::NonFinite { node: id, kind: kind_name, what: "activation" });
            }
            ctx.acts[id] = Some(out);
            ctx.aux[id] = aux;
        }
        Ok(())
    }

    /// Reverse-mode pass using the summed-signal fast path.
    pub fn backward(&self, ctx: &mut ExecContext) -> Result<Gradients, GraphError> {
        self.backward_with(ctx, BackwardMode::Fast)
    }

    /// Reverse-mode pass applying local gradients per child branch.
    pub fn backward_reference(&self, ctx: &mut ExecContext) -> Result<Gradients, GraphError> {
        self.backward_with(ctx, BackwardMode::Reference)
    }

    pub fn backward_with(&self, ctx: &mut ExecContext, mode: BackwardMode) -> Result<Gradients, GraphError> {
        self.check_context(ctx)?;
        if ctx.loss.is_none() {
            return Err(GraphError::BackwardBeforeForward);
        }
        let loss_id = self.loss_id.ok_or(GraphError::Missing("softmax loss"))?;
        ctx.signals.iter_mut().for_each(|s| *s = None);
        ctx.edge_grads.iter_mut().flatten().for_each(|e| *e = None);
        for (grads, node) in ctx.param_grads.iter_mut().zip(&self.nodes) {
            for (g, p) in grads.iter_mut().zip(&node.params) {
                *g = Tensor::zeros(p.value.shape());
            }
        }

        for &id in self.order.iter().rev() {
            let branches: Vec<Tensor> = if id == loss_id {
                vec![Tensor::vector(&[1.0])]
            } else {
                self.nodes[id]
                    .out_edges()
                    .iter()
                    .filter_map(|&(child, slot)| ctx.edge_grads[child][slot].clone())
                    .collect()
            };
            if branches.is_empty() {
                continue;
            }
            let (parent_grads, param_grads, signal) = match mode {
                BackwardMode::Fast => {
                    let mut iter = branches.into_iter();
                    let mut signal = iter.next().expect("non-empty");
                    for b in iter {
                        signal.add_assign(&b).map_err(|source| GraphError::Kernel {
                            node: id,
                            kind: self.nodes[id].kind.name(),
                            source,
                        })?;
                    }
                    let (pg, wg) = self.local_backward(ctx, id, &signal, mode)?;
                    (pg, wg, signal)
                }
                BackwardMode::Reference => {
                    let mut pg_sum: Option<Vec<Tensor>> = None;
                    let mut wg_sum: Option<Vec<Tensor>> = None;
                    for b in &branches {
                        let (pg, wg) = self.local_backward(ctx, id, b, mode)?;
                        pg_sum = Some(sum_lists(pg_sum, pg));
                        wg_sum = Some(sum_lists(wg_sum, wg));
                    }
                    let signal = tensor::add_n(&branches.iter().collect::<Vec<_>>()).map_err(|source| {
                        GraphError::Kernel { node: id, kind: self.nodes[id].kind.name(), source }
                    })?;
                    (pg_sum.unwrap_or_default(), wg_sum.unwrap_or_default(), signal)
                }
            };
            let kind = self.nodes[id].kind.name();
            if !parent_grads.iter().chain(&param_grads).all(Tensor::is_finite) {
                return Err(GraphError::NonFinite { node: id, kind, what: "gradient" });
            }
            for (slot, g) in parent_grads.into_iter().enumerate() {
                ctx.edge_grads[id][slot] = Some(g);
            }
            if !param_grads.is_empty() {
                ctx.param_grads[id] = param_grads;
            }
            ctx.signals[id] = Some(signal);
        }
        Ok(Gradients(ctx.param_grads.clone()))
    }

    /// Gradients with respect to the node's parents (one per slot) and its
    /// parameters, given `∂z/∂(output)`.
    fn local_backward(
        &self,
        ctx: &ExecContext,
        id: NodeId,
        signal: &Tensor,
        mode: BackwardMode,
    ) -> Result<(Vec<Tensor>, Vec<Tensor>), GraphError> {
        let node = &self.nodes[id];
        let kind = node.kind.name();
        let err = |source: TensorError| match source {
            TensorError::NonFinite(_) => GraphError::NonFinite { node: id, kind, what: "gradient" },
            source => GraphError::Kernel { node: id, kind, source },
        };
        let parent = |slot: usize| -> Result<&Tensor, GraphError> {
            let p = node.parents[slot];
            ctx.acts[p].as_ref().ok_or(GraphError::NotEvaluated(p))
        };
        Ok(match &node.kind {
            LayerKind::Input { .. } => (vec![], vec![]),
            LayerKind::Conv { .. } => {
                let g = tensor::conv2d_backward(parent(0)?, &node.params[0].value, signal, geometry(&node.kind))
                    .map_err(err)?;
                (vec![g.input], vec![g.kernels, g.bias])
            }
            LayerKind::Relu => (vec![tensor::relu_backward(parent(0)?, signal).map_err(err)?], vec![]),
            LayerKind::MaxPool { .. } => {
                let Aux::Argmax(am) = &ctx.aux[id] else {
                    return Err(GraphError::NotEvaluated(id));
                };
                (vec![tensor::maxpool2d_backward(parent(0)?.shape(), am, signal).map_err(err)?], vec![])
            }
            LayerKind::GlobalAvgPool => {
                (vec![tensor::global_avg_pool_backward(parent(0)?.shape(), signal).map_err(err)?], vec![])
            }
            LayerKind::L2Normalize { epsilon } => {
                (vec![tensor::l2_normalize_backward(parent(0)?, signal, *epsilon).map_err(err)?], vec![])
            }
            LayerKind::FullyConnected { .. } => {
                let g = tensor::fully_connected_backward(parent(0)?, &node.params[0].value, signal).map_err(err)?;
                (vec![g.input], vec![g.weights, g.bias])
            }
            LayerKind::Add => {
                let n = node.parents.len();
                let grads = match mode {
                    BackwardMode::Fast => tensor::add_n_backward(signal, n),
                    BackwardMode::Reference => {
                        // ∂β/∂α⁽ʲ⁾ is the identity; apply it explicitly per input.
                        let ones = Tensor::filled(signal.shape(), 1.0);
                        (0..n).map(|_| signal.mul(&ones)).collect::<Result<Vec<_>, _>>().map_err(err)?
                    }
                };
                let grads = if ctx.add_scale == 1.0 {
                    grads
                } else {
                    grads.iter().map(|g| g.scale(ctx.add_scale)).collect()
                };
                (grads, vec![])
            }
            LayerKind::SoftmaxLoss { .. } => {
                let Aux::LossGrad(grad) = &ctx.aux[id] else {
                    return Err(GraphError::BackwardBeforeForward);
                };
                (vec![grad.scale(signal.data()[0])], vec![])
            }
        })
    }
}

fn sum_lists(acc: Option<Vec<Tensor>>, next: Vec<Tensor>) -> Vec<Tensor> {
    match acc {
        None => next,
        Some(mut acc) => {
            for (a, b) in acc.iter_mut().zip(&next) {
                a.add_assign(b).expect("same local gradient shapes");
            }
            acc
        }
    }
}
