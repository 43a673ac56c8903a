//! Multi-scale networks: a chain backbone with pooled output branches.
//!
//! Each tapped ReLU feeds a branch `GlobalAvgPool → L2Normalize →
//! FullyConnected[F × K]`; the branch scores meet in one `Add` node that
//! feeds the softmax loss. Backbone layer `i` is always graph node `i + 1`
//! (node 0 is the input), which is how taps are located again in a graph
//! loaded from disk.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{ExecContext, Graph, GraphError, LayerKind, NodeId};
use crate::init::Init;
use crate::tensor::{self, window_extent, Shape, Tensor, DEFAULT_L2_EPSILON};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MultiscaleError {
    #[error("invalid backbone: {0}")]
    Backbone(String),
    #[error("invalid tap set: {0}")]
    Taps(String),
    #[error("need at least 2 classes, got {0}")]
    Classes(usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackboneLayer {
    Conv {
        kernel: usize,
        out_channels: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
    },
    Relu,
    #[serde(rename = "maxpool")]
    MaxPool { window: usize, stride: usize },
}

impl BackboneLayer {
    fn layer_kind(&self) -> LayerKind {
        match *self {
            BackboneLayer::Conv { kernel, out_channels, stride, pad } => {
                LayerKind::Conv { kernel_h: kernel, kernel_w: kernel, out_channels, stride, pad }
            }
            BackboneLayer::Relu => LayerKind::Relu,
            BackboneLayer::MaxPool { window, stride } => LayerKind::MaxPool { window, stride },
        }
    }
}

/// Chain backbone: input shape (`[height, width, channels]`) and layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub input: [usize; 3],
    pub layers: Vec<BackboneLayer>,
}

/// Graph node holding the output of backbone layer `layer`.
pub fn backbone_node(layer: usize) -> NodeId {
    layer + 1
}

impl BackboneSpec {
    pub fn new(input: [usize; 3], layers: Vec<BackboneLayer>) -> Result<Self, MultiscaleError> {
        let spec = BackboneSpec { input, layers };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks that every conv is followed by a ReLU before the next conv,
    /// that at least one ReLU exists, and that all shapes fit.
    pub fn validate(&self) -> Result<(), MultiscaleError> {
        let mut pending_conv: Option<usize> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                BackboneLayer::Conv { .. } => {
                    if let Some(prev) = pending_conv {
                        return Err(MultiscaleError::Backbone(format!(
                            "conv at layer {prev} is not followed by a ReLU before the conv at layer {i}"
                        )));
                    }
                    pending_conv = Some(i);
                }
                BackboneLayer::Relu => pending_conv = None,
                BackboneLayer::MaxPool { .. } => {}
            }
        }
        if let Some(prev) = pending_conv {
            return Err(MultiscaleError::Backbone(format!("conv at layer {prev} is never followed by a ReLU")));
        }
        if self.relu_layers().is_empty() {
            return Err(MultiscaleError::Backbone("no ReLU layer".into()));
        }
        self.layer_shapes()?;
        Ok(())
    }

    /// Indices of ReLU layers: the candidate taps.
    pub fn relu_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, BackboneLayer::Relu))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn last_relu(&self) -> Option<usize> {
        self.relu_layers().last().copied()
    }

    pub fn conv_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, BackboneLayer::Conv { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    /// Output shape of every backbone layer.
    pub fn layer_shapes(&self) -> Result<Vec<Shape>, MultiscaleError> {
        let [mut h, mut w, mut c] = self.input;
        if h == 0 || w == 0 || c == 0 {
            return Err(MultiscaleError::Backbone("input extents must be positive".into()));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (ih, iw, ic) = (h, w, c);
            let fail = || MultiscaleError::Backbone(format!("layer {i} does not fit its {ih}×{iw}×{ic} input"));
            match *layer {
                BackboneLayer::Conv { kernel, out_channels, stride, pad } => {
                    if out_channels == 0 {
                        return Err(fail());
                    }
                    h = window_extent(h, kernel, stride, pad).ok_or_else(fail)?;
                    w = window_extent(w, kernel, stride, pad).ok_or_else(fail)?;
                    c = out_channels;
                }
                BackboneLayer::Relu => {}
                BackboneLayer::MaxPool { window, stride } => {
                    if window == 0 || stride == 0 || window > h || window > w || stride > h || stride > w {
                        return Err(fail());
                    }
                    h = (h - window) / stride + 1;
                    w = (w - window) / stride + 1;
                }
            }
            shapes.push(Shape::new(vec![h, w, c]).expect("positive extents"));
        }
        Ok(shapes)
    }

    /// Channel count of a backbone layer's output.
    pub fn channels(&self, layer: usize) -> Result<usize, MultiscaleError> {
        let shapes = self.layer_shapes()?;
        shapes
            .get(layer)
            .map(|s| s.dims()[2])
            .ok_or_else(|| MultiscaleError::Taps(format!("layer {layer} does not exist")))
    }

    /// Recovers the backbone of a graph built by [`build_multiscale`] or
    /// [`build_chain`].
    pub fn from_graph(graph: &Graph) -> Result<BackboneSpec, MultiscaleError> {
        let input = graph.input_id().ok_or(MultiscaleError::Graph(GraphError::Missing("input")))?;
        let LayerKind::Input { height, width, channels } = *graph.node(input).kind() else {
            unreachable!("input node has input kind")
        };
        let mut layers = Vec::new();
        let mut prev = input;
        for node in graph.nodes().iter().skip(input + 1) {
            if node.parents() != [prev] {
                break;
            }
            let layer = match *node.kind() {
                LayerKind::Conv { kernel_h, kernel_w, out_channels, stride, pad } if kernel_h == kernel_w => {
                    BackboneLayer::Conv { kernel: kernel_h, out_channels, stride, pad }
                }
                LayerKind::Relu => BackboneLayer::Relu,
                LayerKind::MaxPool { window, stride } => BackboneLayer::MaxPool { window, stride },
                _ => break,
            };
            layers.push(layer);
            prev = node.id();
        }
        BackboneSpec::new([height, width, channels], layers)
    }
}

/// Six 3×3 conv/ReLU pairs (8, 8, 16, 16, 16, 16 channels) with a 2×2 max
/// pool after the second and fourth pair. ReLUs sit at layers 1, 3, 6, 8, 11
/// and 13.
pub fn toy_backbone(input: [usize; 3]) -> Result<BackboneSpec, MultiscaleError> {
    use BackboneLayer::{MaxPool, Relu};
    let conv = |out_channels| BackboneLayer::Conv { kernel: 3, out_channels, stride: 1, pad: 1 };
    let pool = MaxPool { window: 2, stride: 2 };
    BackboneSpec::new(
        input,
        vec![
            conv(8), Relu, conv(8), Relu, pool.clone(),
            conv(16), Relu, conv(16), Relu, pool,
            conv(16), Relu, conv(16), Relu,
        ],
    )
}

/// Backbone ReLU layers chosen as multi-scale outputs, kept ascending.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TapSet(Vec<usize>);

impl TapSet {
    pub fn new(layers: impl Into<Vec<usize>>, backbone: &BackboneSpec) -> Result<TapSet, MultiscaleError> {
        let mut layers = layers.into();
        if layers.is_empty() {
            return Err(MultiscaleError::Taps("tap set is empty".into()));
        }
        let relus = backbone.relu_layers();
        if let Some(bad) = layers.iter().find(|l| !relus.contains(l)) {
            return Err(MultiscaleError::Taps(format!("layer {bad} is not a ReLU layer")));
        }
        layers.sort_unstable();
        if let Some(w) = layers.windows(2).find(|w| w[0] == w[1]) {
            return Err(MultiscaleError::Taps(format!("layer {} listed twice", w[0])));
        }
        Ok(TapSet(layers))
    }

    pub fn all(backbone: &BackboneSpec) -> TapSet {
        TapSet(backbone.relu_layers())
    }

    pub fn last(backbone: &BackboneSpec) -> TapSet {
        TapSet(backbone.last_relu().into_iter().collect())
    }

    pub fn layers(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Length of the concatenated multi-scale feature.
    pub fn feature_dim(&self, backbone: &BackboneSpec) -> Result<usize, MultiscaleError> {
        let shapes = backbone.layer_shapes()?;
        Ok(self.0.iter().map(|&l| shapes[l].dims()[2]).sum())
    }
}

/// How a multi-scale network's parameters are initialized.
///
/// Backbone layer `i` draws from stream `i` and the head attached to layer
/// `i` from stream `2³² + i`, so networks built from one scheme share every
/// parameter they have in common.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InitScheme {
    /// He-normal backbone, Normal(0, head_std) heads, zero biases.
    Standard { seed: u64, head_std: f64 },
    /// Every parameter uniform in `[-scale, scale]`.
    Uniform { seed: u64, scale: f64 },
}

pub const DEFAULT_HEAD_STD: f64 = 0.01;
const HEAD_STREAM: u64 = 1 << 32;

impl InitScheme {
    pub fn standard(seed: u64) -> Self {
        InitScheme::Standard { seed, head_std: DEFAULT_HEAD_STD }
    }

    fn backbone(&self, layer: usize) -> Init {
        match *self {
            InitScheme::Standard { seed, .. } => Init::HeNormal { seed, stream: layer as u64 },
            InitScheme::Uniform { seed, scale } => Init::Uniform { scale, seed, stream: layer as u64 },
        }
    }

    fn head(&self, layer: usize) -> Init {
        let stream = HEAD_STREAM + layer as u64;
        match *self {
            InitScheme::Standard { seed, head_std } => Init::Normal { std: head_std, seed, stream },
            InitScheme::Uniform { seed, scale } => Init::Uniform { scale, seed, stream },
        }
    }
}

fn build_backbone(graph: &mut Graph, backbone: &BackboneSpec, init: &InitScheme) -> Result<(), MultiscaleError> {
    backbone.validate()?;
    let [height, width, channels] = backbone.input;
    let mut prev = graph.add_node(LayerKind::Input { height, width, channels }, &[], &Init::Zeros)?;
    for (i, layer) in backbone.layers.iter().enumerate() {
        let kind = layer.layer_kind();
        let init = if kind.has_params() { init.backbone(i) } else { Init::Zeros };
        prev = graph.add_node(kind, &[prev], &init)?;
        debug_assert_eq!(prev, backbone_node(i));
    }
    Ok(())
}

fn add_head(graph: &mut Graph, layer: usize, classes: usize, init: &InitScheme) -> Result<NodeId, MultiscaleError> {
    let pool = graph.add_node(LayerKind::GlobalAvgPool, &[backbone_node(layer)], &Init::Zeros)?;
    let norm = graph.add_node(LayerKind::L2Normalize { epsilon: DEFAULT_L2_EPSILON }, &[pool], &Init::Zeros)?;
    Ok(graph.add_node(LayerKind::FullyConnected { outputs: classes }, &[norm], &init.head(layer))?)
}

/// Backbone plus one pooled, normalized, fully-connected branch per tap,
/// summed by an `Add` node into the softmax loss.
pub fn build_multiscale(
    backbone: &BackboneSpec,
    taps: &TapSet,
    classes: usize,
    init: &InitScheme,
) -> Result<Graph, MultiscaleError> {
    if classes < 2 {
        return Err(MultiscaleError::Classes(classes));
    }
    let taps = TapSet::new(taps.layers().to_vec(), backbone)?;
    let mut g = Graph::new();
    build_backbone(&mut g, backbone, init)?;
    let heads = taps
        .layers()
        .iter()
        .map(|&l| add_head(&mut g, l, classes, init))
        .collect::<Result<Vec<_>, _>>()?;
    let add = g.add_node(LayerKind::Add, &heads, &Init::Zeros)?;
    g.add_node(LayerKind::SoftmaxLoss { classes }, &[add], &Init::Zeros)?;
    Ok(g)
}

/// The single-scale baseline: backbone, one pooled head on the last ReLU,
/// softmax loss. Shares all parameters with `build_multiscale` under the
/// same scheme.
pub fn build_chain(backbone: &BackboneSpec, classes: usize, init: &InitScheme) -> Result<Graph, MultiscaleError> {
    if classes < 2 {
        return Err(MultiscaleError::Classes(classes));
    }
    let mut g = Graph::new();
    build_backbone(&mut g, backbone, init)?;
    let last = backbone.last_relu().expect("validated backbone has a ReLU");
    let head = add_head(&mut g, last, classes, init)?;
    g.add_node(LayerKind::SoftmaxLoss { classes }, &[head], &Init::Zeros)?;
    Ok(g)
}

/// Nodes making up one tap branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapBranch {
    pub layer: usize,
    pub pool: NodeId,
    pub norm: NodeId,
    pub head: NodeId,
}

/// Finds every `GlobalAvgPool → L2Normalize → FullyConnected` branch hanging
/// off a backbone ReLU, in ascending layer order.
pub fn tap_branches(graph: &Graph) -> Vec<TapBranch> {
    let mut out = Vec::new();
    for node in graph.nodes() {
        if node.kind() != &LayerKind::Relu {
            continue;
        }
        for pool in node.children() {
            if graph.node(pool).kind() != &LayerKind::GlobalAvgPool {
                continue;
            }
            for norm in graph.node(pool).children() {
                if !matches!(graph.node(norm).kind(), LayerKind::L2Normalize { .. }) {
                    continue;
                }
                for head in graph.node(norm).children() {
                    if matches!(graph.node(head).kind(), LayerKind::FullyConnected { .. }) && node.id() >= 1 {
                        out.push(TapBranch { layer: node.id() - 1, pool, norm, head });
                    }
                }
            }
        }
    }
    out
}

/// Spatially averaged, L2-normalized activation: the pooled feature.
pub fn pooled_feature(activation: &Tensor) -> Result<Tensor, tensor::TensorError> {
    tensor::l2_normalize(&tensor::global_avg_pool(activation)?, DEFAULT_L2_EPSILON)
}

/// The whole activation flattened and L2-normalized.
pub fn full_feature(activation: &Tensor) -> Result<Tensor, tensor::TensorError> {
    tensor::l2_normalize(activation, DEFAULT_L2_EPSILON)
}

/// Concatenation, in ascending layer order, of the pooled features of every
/// tap. Requires a prior forward (or inference) pass on `ctx`.
pub fn multiscale_feature(graph: &Graph, ctx: &ExecContext, taps: &TapSet) -> Result<Vec<f64>, GraphError> {
    let mut out = Vec::new();
    for &layer in taps.layers() {
        let node = backbone_node(layer);
        if node >= graph.len() {
            return Err(GraphError::Structure { node, detail: format!("backbone layer {layer} does not exist") });
        }
        let act = ctx.activation(node).ok_or(GraphError::NotEvaluated(node))?;
        let f = pooled_feature(act).map_err(|source| GraphError::Kernel { node, kind: "relu", source })?;
        out.extend_from_slice(f.data());
    }
    Ok(out)
}

/// Copies backbone parameters from one network to another with the same backbone.
pub fn copy_backbone(from: &Graph, to: &mut Graph, backbone: &BackboneSpec) -> Result<(), GraphError> {
    for layer in backbone.conv_layers() {
        let node = backbone_node(layer);
        for (k, p) in from.node(node).params().iter().enumerate() {
            to.set_param(node, k, p.value.clone())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(out: usize) -> BackboneLayer {
        BackboneLayer::Conv { kernel: 3, out_channels: out, stride: 1, pad: 1 }
    }

    fn small() -> BackboneSpec {
        BackboneSpec::new(
            [8, 8, 1],
            vec![
                conv(8),
                BackboneLayer::Relu,
                BackboneLayer::MaxPool { window: 2, stride: 2 },
                conv(16),
                BackboneLayer::Relu,
                conv(32),
                BackboneLayer::Relu,
            ],
        )
        .unwrap()
    }

    #[test]
    fn alternation_enforced() {
        let e = BackboneSpec::new([4, 4, 1], vec![conv(2), conv(2), BackboneLayer::Relu]).unwrap_err();
        assert!(matches!(e, MultiscaleError::Backbone(_)));
        assert!(BackboneSpec::new([4, 4, 1], vec![conv(2)]).is_err());
        assert!(BackboneSpec::new([4, 4, 1], vec![BackboneLayer::MaxPool { window: 2, stride: 2 }]).is_err());
        assert!(BackboneSpec::new([4, 4, 1], vec![BackboneLayer::Relu]).is_ok());
    }

    #[test]
    fn tapset_validation() {
        let b = small();
        assert_eq!(b.relu_layers(), vec![1, 4, 6]);
        assert!(TapSet::new(vec![], &b).is_err());
        assert!(TapSet::new(vec![0], &b).is_err());
        assert!(TapSet::new(vec![4, 4], &b).is_err());
        assert_eq!(TapSet::new(vec![6, 1], &b).unwrap().layers(), &[1, 6]);
    }

    #[test]
    fn head_shapes_follow_tap_channels() {
        let b = small();
        let taps = TapSet::all(&b);
        let g = build_multiscale(&b, &taps, 4, &InitScheme::standard(0)).unwrap();
        let branches = tap_branches(&g);
        let shapes: Vec<Vec<usize>> =
            branches.iter().map(|br| g.node(br.head).param("weight").unwrap().dims().to_vec()).collect();
        assert_eq!(shapes, vec![vec![8, 4], vec![16, 4], vec![32, 4]]);
        let add = g.node(g.loss_id().unwrap()).parents()[0];
        assert_eq!(g.node(add).parents().len(), 3);
        assert_eq!(taps.feature_dim(&b).unwrap(), 56);
        for &l in &[1, 4] {
            assert_eq!(g.node(backbone_node(l)).fan_out(), 2);
        }
        assert_eq!(g.node(backbone_node(6)).fan_out(), 1);
    }

    #[test]
    fn seven_relu_backbone_gives_seven_way_add() {
        let mut layers = Vec::new();
        for _ in 0..7 {
            layers.push(conv(4));
            layers.push(BackboneLayer::Relu);
        }
        let b = BackboneSpec::new([6, 6, 3], layers).unwrap();
        let g = build_multiscale(&b, &TapSet::all(&b), 67, &InitScheme::standard(1)).unwrap();
        let add = g.node(g.loss_id().unwrap()).parents()[0];
        assert_eq!(g.node(add).kind(), &LayerKind::Add);
        assert_eq!(g.node(add).parents().len(), 7);
    }

    #[test]
    fn backbone_recovered_from_graph() {
        let b = small();
        let g = build_multiscale(&b, &TapSet::new(vec![1, 4], &b).unwrap(), 3, &InitScheme::standard(2)).unwrap();
        assert_eq!(BackboneSpec::from_graph(&g).unwrap(), b);
        let c = build_chain(&b, 3, &InitScheme::standard(2)).unwrap();
        assert_eq!(BackboneSpec::from_graph(&c).unwrap(), b);
    }

    #[test]
    fn multiscale_feature_segments_are_unit_norm() {
        let b = small();
        let taps = TapSet::all(&b);
        let g = build_multiscale(&b, &taps, 3, &InitScheme::Uniform { seed: 4, scale: 0.5 }).unwrap();
        let mut ctx = g.new_context();
        let x = crate::init::uniform_tensor(&Shape::new(vec![8, 8, 1]).unwrap(), 1.0, 9, 0);
        g.infer(&mut ctx, &x).unwrap();
        let f = multiscale_feature(&g, &ctx, &taps).unwrap();
        assert_eq!(f.len(), 56);
        let mut start = 0;
        for width in [8, 16, 32] {
            let seg = &f[start..start + width];
            let n = seg.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(n == 0.0 || (n - 1.0).abs() < 1e-12, "norm {n}");
            start += width;
        }
        // the branch's own normalize node agrees
        let br = tap_branches(&g)[0];
        assert_eq!(ctx.activation(br.norm).unwrap().data(), &f[..8]);
    }

    #[test]
    fn feature_requires_forward() {
        let b = small();
        let g = build_chain(&b, 2, &InitScheme::standard(0)).unwrap();
        let ctx = g.new_context();
        assert!(matches!(
            multiscale_feature(&g, &ctx, &TapSet::last(&b)),
            Err(GraphError::NotEvaluated(_))
        ));
    }
}
