//! Shared fixtures for the benchmarks.

use dagcnn::data::{synth_multiscale, Dataset, SynthTaskConfig};
use dagcnn::init::uniform_tensor;
use dagcnn::multiscale::{build_chain, build_multiscale};
use dagcnn::{toy_backbone, BackboneSpec, Graph, InitScheme, Shape, TapSet, Tensor};

pub fn random(dims: &[usize], stream: u64) -> Tensor {
    uniform_tensor(&Shape::new(dims.to_vec()).expect("positive dims"), 1.0, 0, stream)
}

/// The six-conv toy backbone on `size`×`size` grayscale input.
pub fn backbone(size: usize) -> BackboneSpec {
    toy_backbone([size, size, 1]).expect("toy backbone fits")
}

/// Chain and all-taps multi-scale networks sharing one initialization.
pub fn networks(size: usize, classes: usize) -> (Graph, Graph) {
    let bb = backbone(size);
    let init = InitScheme::standard(0);
    let chain = build_chain(&bb, classes, &init).expect("chain builds");
    let dag = build_multiscale(&bb, &TapSet::all(&bb), classes, &init).expect("dag builds");
    (chain, dag)
}

/// A small synthetic task for training-step benchmarks.
pub fn small_task(size: usize) -> Dataset {
    let cfg = SynthTaskConfig { size, train_per_class: 2, val_per_class: 0, test_per_class: 0, ..Default::default() };
    synth_multiscale(&cfg).expect("synthetic task")
}
