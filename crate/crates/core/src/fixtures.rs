//! Seeded random graphs and backbones for tests and benchmarks.

use rand::Rng;

use crate::graph::{Graph, LayerKind, NodeId};
use crate::init::{rng_for, uniform_tensor, Init};
use crate::multiscale::{BackboneLayer, BackboneSpec};
use crate::tensor::{Shape, Tensor};

/// A random DAG of at most `max_nodes` nodes (at least 6) ending in a
/// softmax loss. Convolutions, ReLUs, pools and multi-input adds are drawn
/// over earlier spatial nodes, so fan-out above one is common.
pub fn random_dag(seed: u64, max_nodes: usize, classes: usize) -> Graph {
    assert!(max_nodes >= 6, "random_dag needs room for at least 6 nodes");
    let mut rng = rng_for(seed, 0);
    let (h, w, c) = (rng.random_range(2..=6), rng.random_range(2..=6), rng.random_range(1..=3));
    let mut g = Graph::new();
    let input = g.add_node(LayerKind::Input { height: h, width: w, channels: c }, &[], &Init::Zeros).unwrap();
    let mut spatial: Vec<NodeId> = vec![input];
    let n = rng.random_range(6..=max_nodes);
    let init = |g: &Graph| Init::Uniform { scale: 0.5, seed, stream: 1 + g.len() as u64 };

    let branches = if n >= 9 { rng.random_range(1..=2) } else { 1 };
    let tail = 3 * branches + usize::from(branches > 1) + 1;
    while g.len() + tail < n {
        let p = spatial[rng.random_range(0..spatial.len())];
        let (ph, pw, _) = g.node(p).out_shape().as_hwc().unwrap();
        let id = match rng.random_range(0..4) {
            0 => {
                let k = if ph >= 3 && pw >= 3 && rng.random_bool(0.5) { 3 } else { 1 };
                let pad = if k == 3 { 1 } else { 0 };
                let kind = LayerKind::Conv {
                    kernel_h: k,
                    kernel_w: k,
                    out_channels: rng.random_range(1..=3),
                    stride: 1,
                    pad,
                };
                g.add_node(kind, &[p], &init(&g)).unwrap()
            }
            1 => g.add_node(LayerKind::Relu, &[p], &Init::Zeros).unwrap(),
            2 if ph >= 2 && pw >= 2 => {
                g.add_node(LayerKind::MaxPool { window: 2, stride: 2 }, &[p], &Init::Zeros).unwrap()
            }
            _ => {
                let shape = g.node(p).out_shape().clone();
                let same: Vec<NodeId> = spatial.iter().copied().filter(|&q| g.node(q).out_shape() == &shape).collect();
                let k = rng.random_range(2..=3);
                let parents: Vec<NodeId> = (0..k).map(|_| same[rng.random_range(0..same.len())]).collect();
                g.add_node(LayerKind::Add, &parents, &Init::Zeros).unwrap()
            }
        };
        spatial.push(id);
    }

    let mut heads = Vec::new();
    for _ in 0..branches {
        let p = spatial[rng.random_range(spatial.len() / 2..spatial.len())];
        let pool = g.add_node(LayerKind::GlobalAvgPool, &[p], &Init::Zeros).unwrap();
        let norm = g.add_node(LayerKind::L2Normalize { epsilon: 1e-12 }, &[pool], &Init::Zeros).unwrap();
        heads.push(g.add_node(LayerKind::FullyConnected { outputs: classes }, &[norm], &init(&g)).unwrap());
    }
    let top = if heads.len() > 1 { g.add_node(LayerKind::Add, &heads, &Init::Zeros).unwrap() } else { heads[0] };
    g.add_node(LayerKind::SoftmaxLoss { classes }, &[top], &Init::Zeros).unwrap();
    g
}

/// A backbone of `relus` 3×3 conv/ReLU pairs on an input of at most
/// `max_side`×`max_side`×`max_channels`, with one 2×2 max pool after the
/// second pair when the input is large enough.
pub fn random_backbone(seed: u64, relus: usize, max_side: usize, max_channels: usize) -> BackboneSpec {
    let mut rng = rng_for(seed, 1);
    let side = rng.random_range(4..=max_side.max(4));
    let input = [side, rng.random_range(4..=max_side.max(4)), rng.random_range(1..=max_channels)];
    let mut layers = Vec::new();
    for i in 0..relus {
        layers.push(BackboneLayer::Conv { kernel: 3, out_channels: rng.random_range(1..=max_channels), stride: 1, pad: 1 });
        layers.push(BackboneLayer::Relu);
        if i == 1 && input[0] >= 8 && input[1] >= 8 {
            layers.push(BackboneLayer::MaxPool { window: 2, stride: 2 });
        }
    }
    BackboneSpec::new(input, layers).expect("random backbone is valid")
}

/// Uniform `[-1, 1]` input for a graph.
pub fn random_input(graph: &Graph, seed: u64) -> Tensor {
    let shape: Shape = graph.input_shape().expect("graph has an input").clone();
    uniform_tensor(&shape, 1.0, seed, 0x1a9e7)
}
