//! DAG-structured networks.
//!
//! A [`Graph`] is an append-only table of nodes. Each node names its parents,
//! so acyclicity holds by construction for graphs built with
//! [`Graph::add_node`]; graphs read back from disk are validated with
//! [`topo_order_of`]. Run state (activations, backward signals, parameter
//! gradients) lives in an [`ExecContext`], never in the graph.

mod exec;
mod io;

use std::collections::BinaryHeap;
use std::cmp::Reverse;

use thiserror::Error;

use crate::init::{Init, ParamSpec};
use crate::tensor::{window_extent, ConvGeometry, Shape, Tensor, TensorError};

pub use exec::{BackwardMode, ExecContext, Gradients};
pub(crate) use io::{read_tensor_blob, write_tensor_blob};
pub use io::{load_model, read_model, save_model, write_model, ModelFormatError, MODEL_MAGIC, MODEL_VERSION};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Input { height: usize, width: usize, channels: usize },
    Conv { kernel_h: usize, kernel_w: usize, out_channels: usize, stride: usize, pad: usize },
    Relu,
    MaxPool { window: usize, stride: usize },
    GlobalAvgPool,
    L2Normalize { epsilon: f64 },
    FullyConnected { outputs: usize },
    Add,
    SoftmaxLoss { classes: usize },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "input",
            LayerKind::Conv { .. } => "conv",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::L2Normalize { .. } => "l2_normalize",
            LayerKind::FullyConnected { .. } => "fully_connected",
            LayerKind::Add => "add",
            LayerKind::SoftmaxLoss { .. } => "softmax_loss",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::FullyConnected { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("node {node}: unknown parent {parent}")]
    UnknownParent { node: NodeId, parent: NodeId },
    #[error("node {node} ({kind}) takes {expected} parent(s), got {got}")]
    Arity { node: NodeId, kind: &'static str, expected: &'static str, got: usize },
    #[error("node {node}: {detail}")]
    Structure { node: NodeId, detail: String },
    #[error("node {node} ({kind}): shape inference failed: {detail}")]
    Shape { node: NodeId, kind: &'static str, detail: String },
    #[error("node {node}: parameter initialization failed: {detail}")]
    Init { node: NodeId, detail: String },
    #[error("graph contains a cycle through node {0}")]
    Cycle(NodeId),
    #[error("graph has no {0} node")]
    Missing(&'static str),
    #[error("input has shape {got}, graph expects {expected}")]
    InputShape { expected: Shape, got: Shape },
    #[error("node {node} ({kind}): {source}")]
    Kernel { node: NodeId, kind: &'static str, source: TensorError },
    #[error("node {node} ({kind}) produced a non-finite {what}")]
    NonFinite { node: NodeId, kind: &'static str, what: &'static str },
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("no activation recorded for node {0}; run forward first")]
    NotEvaluated(NodeId),
    #[error("execution context was created for a different graph")]
    ContextMismatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    id: NodeId,
    kind: LayerKind,
    parents: Vec<NodeId>,
    params: Vec<Param>,
    out_shape: Shape,
    /// (child, parent slot in the child) pairs, ascending.
    out_edges: Vec<(NodeId, usize)>,
}

impl Node {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn kind(&self) -> &LayerKind {
        &self.kind
    }

    pub fn parents(&self) -> &[NodeId] {
        &self.parents
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn out_shape(&self) -> &Shape {
        &self.out_shape
    }

    /// Distinct children, ascending.
    pub fn children(&self) -> Vec<NodeId> {
        let mut c: Vec<NodeId> = self.out_edges.iter().map(|&(c, _)| c).collect();
        c.dedup();
        c
    }

    /// Number of distinct nodes listing this node as a parent.
    pub fn fan_out(&self) -> usize {
        self.children().len()
    }

    pub(crate) fn out_edges(&self) -> &[(NodeId, usize)] {
        &self.out_edges
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    input_id: Option<NodeId>,
    loss_id: Option<NodeId>,
    order: Vec<NodeId>,
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

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn input_id(&self) -> Option<NodeId> {
        self.input_id
    }

    pub fn loss_id(&self) -> Option<NodeId> {
        self.loss_id
    }

    pub fn input_shape(&self) -> Option<&Shape> {
        self.input_id.map(|id| &self.nodes[id].out_shape)
    }

    /// Number of classes of the loss node.
    pub fn num_classes(&self) -> Option<usize> {
        self.loss_id.map(|id| match self.nodes[id].kind {
            LayerKind::SoftmaxLoss { classes } => classes,
            _ => unreachable!("loss node is a softmax loss"),
        })
    }

    /// Appends a node, inferring its output shape and initializing its
    /// parameters. Parents must already exist, so the graph stays acyclic.
    pub fn add_node(&mut self, kind: LayerKind, parents: &[NodeId], init: &Init) -> Result<NodeId, GraphError> {
        let id = self.nodes.len();
        for &p in parents {
            if p >= id {
                return Err(GraphError::UnknownParent { node: id, parent: p });
            }
            if matches!(self.nodes[p].kind, LayerKind::SoftmaxLoss { .. }) {
                return Err(GraphError::Structure {
                    node: id,
                    detail: "the softmax loss cannot have children".into(),
                });
            }
        }
        let name = kind.name();
        let arity_err = |expected| GraphError::Arity { node: id, kind: name, expected, got: parents.len() };
        match &kind {
            LayerKind::Input { .. } => {
                if !parents.is_empty() {
                    return Err(arity_err("0"));
                }
                if self.input_id.is_some() {
                    return Err(GraphError::Structure { node: id, detail: "graph already has an input".into() });
                }
            }
            LayerKind::Add => {
                if parents.is_empty() {
                    return Err(arity_err("1 or more"));
                }
            }
            _ => {
                if parents.len() != 1 {
                    return Err(arity_err("1"));
                }
            }
        }
        if matches!(kind, LayerKind::SoftmaxLoss { .. }) && self.loss_id.is_some() {
            return Err(GraphError::Structure { node: id, detail: "graph already has a softmax loss".into() });
        }

        let parent_shapes: Vec<&Shape> = parents.iter().map(|&p| &self.nodes[p].out_shape).collect();
        let (out_shape, specs) = infer(id, &kind, &parent_shapes)?;
        let values = init
            .materialize(&specs)
            .map_err(|detail| GraphError::Init { node: id, detail })?;
        let params = specs
            .iter()
            .zip(values)
            .map(|(s, value)| Param { name: s.name.to_string(), value })
            .collect();

        for (slot, &p) in parents.iter().enumerate() {
            self.nodes[p].out_edges.push((id, slot));
        }
        match kind {
            LayerKind::Input { .. } => self.input_id = Some(id),
            LayerKind::SoftmaxLoss { .. } => self.loss_id = Some(id),
            _ => {}
        }
        self.nodes.push(Node {
            id,
            kind,
            parents: parents.to_vec(),
            params,
            out_shape,
            out_edges: Vec::new(),
        });
        self.order.push(id);
        Ok(id)
    }

    /// Evaluation order: every parent before its children, ties by ascending id.
    pub fn topo_order(&self) -> &[NodeId] {
        &self.order
    }

    /// Replaces a parameter value. The shape must not change.
    pub fn set_param(&mut self, node: NodeId, index: usize, value: Tensor) -> Result<(), GraphError> {
        let p = self
            .nodes
            .get_mut(node)
            .and_then(|n| n.params.get_mut(index))
            .ok_or_else(|| GraphError::Structure { node, detail: format!("no parameter #{index}") })?;
        if p.value.shape() != value.shape() {
            return Err(GraphError::Shape {
                node,
                kind: "param",
                detail: format!("{} vs {}", p.value.shape(), value.shape()),
            });
        }
        p.value = value;
        Ok(())
    }

    pub(crate) fn param_mut(&mut self, node: NodeId, index: usize) -> &mut Tensor {
        &mut self.nodes[node].params[index].value
    }

    /// All `(node, parameter index)` pairs, in node order.
    pub fn param_slots(&self) -> Vec<(NodeId, usize)> {
        self.nodes
            .iter()
            .flat_map(|n| (0..n.params.len()).map(move |k| (n.id, k)))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.nodes.iter().flat_map(|n| &n.params).map(|p| p.value.numel()).sum()
    }

    /// First node of the given kind, by id.
    pub fn first_of(&self, pred: impl Fn(&LayerKind) -> bool) -> Option<NodeId> {
        self.nodes.iter().find(|n| pred(&n.kind)).map(|n| n.id)
    }

    /// Rebuilds a graph from a raw node table, validating acyclicity,
    /// parent ordering, and shapes.
    pub fn from_table(table: Vec<(LayerKind, Vec<NodeId>, Vec<Tensor>)>) -> Result<Graph, GraphError> {
        let parents: Vec<Vec<NodeId>> = table.iter().map(|(_, p, _)| p.clone()).collect();
        topo_order_of(&parents)?;
        let mut g = Graph::new();
        for (id, (kind, parents, params)) in table.into_iter().enumerate() {
            if let Some(&p) = parents.iter().find(|&&p| p >= id) {
                return Err(GraphError::Structure {
                    node: id,
                    detail: format!("parent {p} does not precede its child"),
                });
            }
            g.add_node(kind, &parents, &Init::Values(params))?;
        }
        if g.input_id.is_none() {
            return Err(GraphError::Missing("input"));
        }
        Ok(g)
    }
}

fn shape_of(dims: Vec<usize>) -> Shape {
    Shape::new(dims).expect("inferred extents are positive")
}

fn infer(id: NodeId, kind: &LayerKind, parents: &[&Shape]) -> Result<(Shape, Vec<ParamSpec>), GraphError> {
    let name = kind.name();
    let err = |detail: String| GraphError::Shape { node: id, kind: name, detail };
    let hwc = |s: &Shape| s.as_hwc().ok_or_else(|| err(format!("expected an H×W×C input, got {s}")));
    match kind {
        LayerKind::Input { height, width, channels } => {
            let s = Shape::new(vec![*height, *width, *channels]).map_err(|e| err(e.to_string()))?;
            Ok((s, vec![]))
        }
        LayerKind::Conv { kernel_h, kernel_w, out_channels, stride, pad } => {
            let (h, w, c) = hwc(parents[0])?;
            if *stride == 0 || *out_channels == 0 || *kernel_h == 0 || *kernel_w == 0 {
                return Err(err("kernel extents, channels, and stride must be positive".into()));
            }
            let oh = window_extent(h, *kernel_h, *stride, *pad);
            let ow = window_extent(w, *kernel_w, *stride, *pad);
            let (Some(oh), Some(ow)) = (oh, ow) else {
                return Err(err(format!("{kernel_h}×{kernel_w} kernel does not fit {h}×{w} input")));
            };
            let fan_in = kernel_h * kernel_w * c;
            Ok((
                shape_of(vec![oh, ow, *out_channels]),
                vec![
                    ParamSpec {
                        name: "weight",
                        shape: shape_of(vec![*kernel_h, *kernel_w, c, *out_channels]),
                        fan_in,
                        is_bias: false,
                    },
                    ParamSpec { name: "bias", shape: shape_of(vec![*out_channels]), fan_in, is_bias: true },
                ],
            ))
        }
        LayerKind::Relu => Ok((parents[0].clone(), vec![])),
        LayerKind::MaxPool { window, stride } => {
            let (h, w, c) = hwc(parents[0])?;
            if *window == 0 || *stride == 0 || *window > h || *window > w || *stride > h || *stride > w {
                return Err(err(format!("window {window} / stride {stride} does not fit {h}×{w} input")));
            }
            Ok((shape_of(vec![(h - window) / stride + 1, (w - window) / stride + 1, c]), vec![]))
        }
        LayerKind::GlobalAvgPool => {
            let (_, _, c) = hwc(parents[0])?;
            Ok((shape_of(vec![1, 1, c]), vec![]))
        }
        LayerKind::L2Normalize { epsilon } => {
            if !(*epsilon > 0.0) {
                return Err(err("epsilon must be positive".into()));
            }
            Ok((parents[0].clone(), vec![]))
        }
        LayerKind::FullyConnected { outputs } => {
            if *outputs == 0 {
                return Err(err("outputs must be positive".into()));
            }
            let f = parents[0].numel();
            Ok((
                shape_of(vec![1, 1, *outputs]),
                vec![
                    ParamSpec { name: "weight", shape: shape_of(vec![f, *outputs]), fan_in: f, is_bias: false },
                    ParamSpec { name: "bias", shape: shape_of(vec![*outputs]), fan_in: f, is_bias: true },
                ],
            ))
        }
        LayerKind::Add => {
            let first = parents[0];
            if let Some(bad) = parents.iter().find(|s| **s != first) {
                return Err(err(format!("inputs disagree: {first} vs {bad}")));
            }
            Ok((first.clone(), vec![]))
        }
        LayerKind::SoftmaxLoss { classes } => {
            if *classes < 2 {
                return Err(err("need at least two classes".into()));
            }
            if parents[0].numel() != *classes {
                return Err(err(format!("expected {classes} logits, parent produces {}", parents[0])));
            }
            Ok((shape_of(vec![1]), vec![]))
        }
    }
}

/// Kahn's algorithm over a raw parent table, popping the smallest ready id
/// first. Fails on unknown parents and cycles.
pub fn topo_order_of(parents: &[Vec<NodeId>]) -> Result<Vec<NodeId>, GraphError> {
    let n = parents.len();
    let mut indegree = vec![0usize; n];
    let mut children: Vec<Vec<NodeId>> = vec![Vec::new(); n];
    for (id, ps) in parents.iter().enumerate() {
        for &p in ps {
            if p >= n {
                return Err(GraphError::UnknownParent { node: id, parent: p });
            }
            indegree[id] += 1;
            children[p].push(id);
        }
    }
    let mut ready: BinaryHeap<Reverse<NodeId>> =
        (0..n).filter(|&i| indegree[i] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(id)) = ready.pop() {
        order.push(id);
        for &c in &children[id] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.push(Reverse(c));
            }
        }
    }
    if order.len() != n {
        let stuck = (0..n).find(|&i| indegree[i] > 0).unwrap_or(0);
        return Err(GraphError::Cycle(stuck));
    }
    Ok(order)
}

pub(crate) fn geometry(kind: &LayerKind) -> ConvGeometry {
    match kind {
        LayerKind::Conv { stride, pad, .. } => ConvGeometry { stride: *stride, pad: *pad },
        _ => unreachable!("not a conv layer"),
    }
}
