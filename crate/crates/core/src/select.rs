//! Layer-wise feature analyses: single-layer linear probes, per-class best
//! layer, greedy forward selection of taps, pooled versus full features, and
//! nearest-neighbor retrieval.
//!
//! Every probe is a softmax linear head fitted by full-batch gradient descent
//! from zero weights, so results depend on the features alone.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Split};
use crate::graph::{read_tensor_blob, write_tensor_blob, Graph, GraphError, ModelFormatError};
use crate::multiscale::{backbone_node, full_feature, pooled_feature, BackboneSpec, MultiscaleError, TapSet};
use crate::tensor::{softmax, Tensor};

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("{0} split has fewer than two classes")]
    SingleClass(&'static str),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("feature bank holds no full (unpooled) features")]
    NoFullFeatures,
    #[error("layer {0} is not in the feature bank")]
    UnknownLayer(usize),
    #[error("asked for {m} neighbors from a gallery of {gallery}")]
    TooManyNeighbors { m: usize, gallery: usize },
    #[error("query has {query} dimensions, gallery has {gallery}")]
    Dimension { query: usize, gallery: usize },
    #[error("invalid linear head config: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Multiscale(#[from] MultiscaleError),
    #[error("feature bank file: {0}")]
    Bank(#[from] ModelFormatError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Dense row-major matrix, one example per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "feature matrix size");
        FeatureMatrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        FeatureMatrix::new(rows.len(), cols, data)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Per-layer features of a set of examples.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFeatureBank {
    /// Backbone layer ids, ascending.
    pub layers: Vec<usize>,
    pub num_classes: usize,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    /// Dataset index of each row.
    pub source: Vec<usize>,
    /// Pooled features, one matrix per layer.
    pub pooled: Vec<FeatureMatrix>,
    /// Flattened, L2-normalized activations, one matrix per layer.
    pub full: Option<Vec<FeatureMatrix>>,
}

impl LayerFeatureBank {
    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn layer_index(&self, layer: usize) -> Result<usize, SelectError> {
        self.layers.binary_search(&layer).map_err(|_| SelectError::UnknownLayer(layer))
    }

    pub fn split_rows(&self, split: Split) -> Vec<usize> {
        (0..self.rows()).filter(|&r| self.splits[r] == split).collect()
    }

    /// Pooled features of `layers` concatenated in ascending layer order.
    pub fn concat_pooled(&self, layers: &[usize]) -> Result<FeatureMatrix, SelectError> {
        let mut idx = layers.iter().map(|&l| self.layer_index(l)).collect::<Result<Vec<_>, _>>()?;
        idx.sort_unstable();
        idx.dedup();
        let cols: usize = idx.iter().map(|&k| self.pooled[k].cols).sum();
        let mut data = Vec::with_capacity(self.rows() * cols);
        for r in 0..self.rows() {
            for &k in &idx {
                data.extend_from_slice(self.pooled[k].row(r));
            }
        }
        Ok(FeatureMatrix::new(self.rows(), cols, data))
    }

    fn check_splits(&self) -> Result<(), SelectError> {
        for (split, name) in [(Split::Train, "train"), (Split::Val, "val")] {
            let rows = self.split_rows(split);
            if rows.is_empty() {
                return Err(SelectError::EmptySplit(name));
            }
            let first = self.labels[rows[0]];
            if split == Split::Train && rows.iter().all(|&r| self.labels[r] == first) {
                return Err(SelectError::SingleClass(name));
            }
        }
        Ok(())
    }
}

/// Runs the network on every example of `splits` and records pooled (and
/// optionally full) features at each listed backbone layer.
pub fn extract_bank(
    graph: &Graph,
    data: &Dataset,
    layers: &[usize],
    splits: &[Split],
    include_full: bool,
) -> Result<LayerFeatureBank, SelectError> {
    let mut layers = layers.to_vec();
    layers.sort_unstable();
    layers.dedup();
    if let Some(&bad) = layers.iter().find(|&&l| backbone_node(l) >= graph.len()) {
        return Err(SelectError::UnknownLayer(bad));
    }
    let source: Vec<usize> = (0..data.len()).filter(|&i| splits.contains(&data.splits[i])).collect();
    type Row = (Vec<Tensor>, Vec<Tensor>);
    let per_example = source
        .par_iter()
        .map_init(
            || graph.new_context(),
            |ctx, &i| -> Result<Row, SelectError> {
                graph.infer(ctx, &data.images[i])?;
                let mut pooled = Vec::with_capacity(layers.len());
                let mut full = Vec::new();
                for &l in &layers {
                    let node = backbone_node(l);
                    let act = ctx.activation(node).ok_or(GraphError::NotEvaluated(node))?;
                    let kernel = |source| GraphError::Kernel { node, kind: "feature", source };
                    pooled.push(pooled_feature(act).map_err(kernel)?);
                    if include_full {
                        full.push(full_feature(act).map_err(kernel)?);
                    }
                }
                Ok((pooled, full))
            },
        )
        .collect::<Result<Vec<_>, _>>()?;
    let gather = |pick: &dyn Fn(&Row) -> &Vec<Tensor>, k: usize| {
        let cols = per_example.first().map_or(0, |r| pick(r)[k].numel());
        let data: Vec<f64> = per_example.iter().flat_map(|r| pick(r)[k].data().iter().copied()).collect();
        FeatureMatrix::new(per_example.len(), cols, data)
    };
    let pooled = (0..layers.len()).map(|k| gather(&|r: &Row| &r.0, k)).collect();
    let full = include_full.then(|| (0..layers.len()).map(|k| gather(&|r: &Row| &r.1, k)).collect());
    Ok(LayerFeatureBank {
        layers,
        num_classes: data.num_classes,
        labels: source.iter().map(|&i| data.labels[i]).collect(),
        splits: source.iter().map(|&i| data.splits[i]).collect(),
        source,
        pooled,
        full,
    })
}

pub const BANK_MAGIC: &[u8; 8] = b"DAGBANK1";
pub const BANK_VERSION: u32 = 1;

fn split_code(s: Split) -> u8 {
    match s {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    }
}

/// Writes a bank in the `DAGBANK1` layout (little-endian):
///
/// ```text
/// magic "DAGBANK1" | version u32 | classes u32 | rows u32 | layers u32 | has_full u8
/// per row: source index u32 | label u32 | split u8 (0 train, 1 val, 2 test)
/// per layer: layer id u32 | "pooled" blob | "full" blob when has_full
/// ```
///
/// Blobs use the parameter encoding of model files, each a rows × cols tensor.
pub fn write_bank<W: Write>(bank: &LayerFeatureBank, w: &mut W) -> io::Result<()> {
    let u = |v: usize| u32::try_from(v).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "value exceeds u32"));
    w.write_all(BANK_MAGIC)?;
    w.write_u32::<LE>(BANK_VERSION)?;
    w.write_u32::<LE>(u(bank.num_classes)?)?;
    w.write_u32::<LE>(u(bank.rows())?)?;
    w.write_u32::<LE>(u(bank.layers.len())?)?;
    w.write_u8(u8::from(bank.full.is_some()))?;
    for r in 0..bank.rows() {
        w.write_u32::<LE>(u(bank.source[r])?)?;
        w.write_u32::<LE>(u(bank.labels[r])?)?;
        w.write_u8(split_code(bank.splits[r]))?;
    }
    let as_tensor = |m: &FeatureMatrix| {
        Tensor::from_vec(vec![m.rows, m.cols], m.data.clone())
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))
    };
    for (k, &layer) in bank.layers.iter().enumerate() {
        w.write_u32::<LE>(u(layer)?)?;
        write_tensor_blob(w, "pooled", &as_tensor(&bank.pooled[k])?)?;
        if let Some(full) = &bank.full {
            write_tensor_blob(w, "full", &as_tensor(&full[k])?)?;
        }
    }
    Ok(())
}

pub fn read_bank<R: Read>(r: &mut R) -> Result<LayerFeatureBank, ModelFormatError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != BANK_MAGIC {
        return Err(ModelFormatError::BadMagic);
    }
    let version = r.read_u32::<LE>()?;
    if version != BANK_VERSION {
        return Err(ModelFormatError::Version(version));
    }
    let num_classes = r.read_u32::<LE>()? as usize;
    let rows = r.read_u32::<LE>()? as usize;
    let n_layers = r.read_u32::<LE>()? as usize;
    let has_full = match r.read_u8()? {
        0 => false,
        1 => true,
        other => return Err(ModelFormatError::Malformed(format!("bad full-feature flag {other}"))),
    };
    let (mut source, mut labels, mut splits) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..rows {
        source.push(r.read_u32::<LE>()? as usize);
        let label = r.read_u32::<LE>()? as usize;
        if label >= num_classes {
            return Err(ModelFormatError::Malformed(format!("label {label} out of range")));
        }
        labels.push(label);
        splits.push(match r.read_u8()? {
            0 => Split::Train,
            1 => Split::Val,
            2 => Split::Test,
            other => return Err(ModelFormatError::Malformed(format!("bad split code {other}"))),
        });
    }
    let read_matrix = |r: &mut R, expect: &str| -> Result<FeatureMatrix, ModelFormatError> {
        let (name, t) = read_tensor_blob(r)?;
        if name != expect || t.shape().rank() != 2 || t.dims()[0] != rows {
            return Err(ModelFormatError::Malformed(format!("unexpected blob `{name}` with shape {}", t.shape())));
        }
        let cols = t.dims()[1];
        Ok(FeatureMatrix::new(rows, cols, t.into_data()))
    };
    let (mut layers, mut pooled, mut full) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n_layers {
        layers.push(r.read_u32::<LE>()? as usize);
        pooled.push(read_matrix(r, "pooled")?);
        if has_full {
            full.push(read_matrix(r, "full")?);
        }
    }
    if layers.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ModelFormatError::Malformed("layer ids are not strictly ascending".into()));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(ModelFormatError::Malformed("trailing bytes".into()));
    }
    Ok(LayerFeatureBank { layers, num_classes, labels, splits, source, pooled, full: has_full.then_some(full) })
}

pub fn save_bank(bank: &LayerFeatureBank, path: impl AsRef<Path>) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_bank(bank, &mut w)?;
    w.flush()
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<LayerFeatureBank, ModelFormatError> {
    read_bank(&mut BufReader::new(File::open(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearHeadConfig {
    /// Step size in units of `1 / (1 + mean squared centered row norm)`.
    pub lr: f64,
    pub iterations: usize,
    pub weight_decay: f64,
}

impl Default for LinearHeadConfig {
    fn default() -> Self {
        LinearHeadConfig { lr: 4.0, iterations: 300, weight_decay: 0.0 }
    }
}

/// Softmax classifier on mean-centered features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub classes: usize,
    pub mean: Vec<f64>,
    /// `dim × classes`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearHead {
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let k = self.classes;
        let mut s = self.bias.clone();
        for (j, (&xj, &mj)) in x.iter().zip(&self.mean).enumerate() {
            let v = xj - mj;
            if v != 0.0 {
                for (sc, w) in s.iter_mut().zip(&self.weights[j * k..(j + 1) * k]) {
                    *sc += v * w;
                }
            }
        }
        s
    }

    /// Highest-scoring class, ties to the lower id.
    pub fn predict(&self, x: &[f64]) -> usize {
        Tensor::vector(&self.scores(x)).argmax()
    }
}

/// Fits a [`LinearHead`] on the rows `train` of `x` by full-batch gradient
/// descent on the mean cross-entropy, starting from zero weights.
pub fn fit_linear_head(
    x: &FeatureMatrix,
    labels: &[usize],
    train: &[usize],
    classes: usize,
    cfg: &LinearHeadConfig,
) -> Result<LinearHead, SelectError> {
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) || !(cfg.weight_decay >= 0.0) {
        return Err(SelectError::Config(format!("lr {} / weight decay {}", cfg.lr, cfg.weight_decay)));
    }
    if train.is_empty() {
        return Err(SelectError::EmptySplit("train"));
    }
    let (n, d, k) = (train.len(), x.cols, classes);
    let mut mean = vec![0.0; d];
    for &r in train {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    // Centered rows, and their transpose for the weight gradient.
    let mut xc = vec![0.0; n * d];
    for (i, &r) in train.iter().enumerate() {
        for (j, (v, m)) in x.row(r).iter().zip(&mean).enumerate() {
            xc[i * d + j] = v - m;
        }
    }
    let mut xt = vec![0.0; d * n];
    for i in 0..n {
        for j in 0..d {
            xt[j * n + i] = xc[i * d + j];
        }
    }
    let mean_sq = xc.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let step = cfg.lr / (mean_sq + 1.0);
    let y: Vec<usize> = train.iter().map(|&r| labels[r]).collect();

    let mut w = vec![0.0; d * k];
    let mut b = vec![0.0; k];
    let mut resid = vec![0.0; n * k];
    let mut gw = vec![0.0; d * k];
    for _ in 0..cfg.iterations {
        resid.par_chunks_mut(k).enumerate().for_each(|(i, out)| {
            out.copy_from_slice(&b);
            for (j, &v) in xc[i * d..(i + 1) * d].iter().enumerate() {
                if v != 0.0 {
                    for (o, wj) in out.iter_mut().zip(&w[j * k..(j + 1) * k]) {
                        *o += v * wj;
                    }
                }
            }
            let p = softmax(out);
            out.copy_from_slice(&p);
            out[y[i]] -= 1.0;
        });
        gw.par_chunks_mut(k).enumerate().for_each(|(j, g)| {
            g.iter_mut().for_each(|v| *v = 0.0);
            for (i, &v) in xt[j * n..(j + 1) * n].iter().enumerate() {
                if v != 0.0 {
                    for (gc, rc) in g.iter_mut().zip(&resid[i * k..(i + 1) * k]) {
                        *gc += v * rc;
                    }
                }
            }
        });
        let inv_n = 1.0 / n as f64;
        for (wv, g) in w.iter_mut().zip(&gw) {
            *wv -= step * (g * inv_n + cfg.weight_decay * *wv);
        }
        for c in 0..k {
            let gb: f64 = (0..n).map(|i| resid[i * k + c]).sum::<f64>() * inv_n;
            b[c] -= step * gb;
        }
    }
    Ok(LinearHead { classes: k, mean, weights: w, bias: b })
}

fn accuracy_on(head: &LinearHead, x: &FeatureMatrix, labels: &[usize], rows: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let correct = rows.iter().filter(|&&r| head.predict(x.row(r)) == labels[r]).count();
    correct as f64 / rows.len() as f64
}

/// Train and validation accuracy of a probe on one feature matrix.
pub fn probe_accuracy(
    x: &FeatureMatrix,
    bank: &LayerFeatureBank,
    cfg: &LinearHeadConfig,
) -> Result<(f64, f64), SelectError> {
    let train = bank.split_rows(Split::Train);
    let val = bank.split_rows(Split::Val);
    let head = fit_linear_head(x, &bank.labels, &train, bank.num_classes, cfg)?;
    Ok((accuracy_on(&head, x, &bank.labels, &train), accuracy_on(&head, x, &bank.labels, &val)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerScore {
    pub layer: usize,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

/// Validation accuracy of a probe trained on each layer's pooled features.
pub fn per_layer_accuracy(bank: &LayerFeatureBank, cfg: &LinearHeadConfig) -> Result<Vec<LayerScore>, SelectError> {
    bank.check_splits()?;
    bank.layers
        .par_iter()
        .enumerate()
        .map(|(k, &layer)| {
            let (train_accuracy, val_accuracy) = probe_accuracy(&bank.pooled[k], bank, cfg)?;
            Ok(LayerScore { layer, train_accuracy, val_accuracy })
        })
        .collect()
}

pub fn write_layer_scores_csv<W: Write>(scores: &[LayerScore], w: W) -> Result<(), SelectError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["layer", "train_accuracy", "val_accuracy"])?;
    for s in scores {
        out.write_record([s.layer.to_string(), s.train_accuracy.to_string(), s.val_accuracy.to_string()])?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Correct validation detections per class and layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PerClassBest {
    pub layers: Vec<usize>,
    /// `counts[class][layer index]`.
    pub counts: Vec<Vec<usize>>,
    /// Best layer id per class, ties to the lower layer.
    pub best: Vec<usize>,
}

impl PerClassBest {
    /// Columns: `class`, one `layer_<id>` per layer, `best_layer`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SelectError> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["class".to_string()];
        header.extend(self.layers.iter().map(|l| format!("layer_{l}")));
        header.push("best_layer".into());
        out.write_record(&header)?;
        for (c, row) in self.counts.iter().enumerate() {
            let mut rec = vec![c.to_string()];
            rec.extend(row.iter().map(usize::to_string));
            rec.push(self.best[c].to_string());
            out.write_record(&rec)?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

pub fn per_class_best_layer(bank: &LayerFeatureBank, cfg: &LinearHeadConfig) -> Result<PerClassBest, SelectError> {
    if bank.num_classes < 2 {
        return Err(SelectError::SingleClass("train"));
    }
    bank.check_splits()?;
    let train = bank.split_rows(Split::Train);
    let val = bank.split_rows(Split::Val);
    let per_layer: Vec<Vec<usize>> = bank
        .pooled
        .par_iter()
        .map(|x| {
            let head = fit_linear_head(x, &bank.labels, &train, bank.num_classes, cfg)?;
            let mut correct = vec![0usize; bank.num_classes];
            for &r in &val {
                if head.predict(x.row(r)) == bank.labels[r] {
                    correct[bank.labels[r]] += 1;
                }
            }
            Ok(correct)
        })
        .collect::<Result<_, SelectError>>()?;
    let counts: Vec<Vec<usize>> =
        (0..bank.num_classes).map(|c| per_layer.iter().map(|col| col[c]).collect()).collect();
    let best = counts
        .iter()
        .map(|row| {
            let mut arg = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[arg] {
                    arg = k;
                }
            }
            bank.layers[arg]
        })
        .collect();
    Ok(PerClassBest { layers: bank.layers.clone(), counts, best })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The best extension did not strictly beat the current score.
    NoImprovement,
    /// Every candidate was selected.
    Exhausted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionStep {
    pub layer: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionTrace {
    pub steps: Vec<SelectionStep>,
    /// Selected layers, ascending.
    pub selected: Vec<usize>,
    pub stop: StopReason,
}

impl SelectionTrace {
    pub fn score(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.score)
    }

    pub fn tap_set(&self, backbone: &BackboneSpec) -> Result<TapSet, MultiscaleError> {
        TapSet::new(self.selected.clone(), backbone)
    }

    /// Columns: `step,layer,score`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SelectError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "layer", "score"])?;
        for (i, s) in self.steps.iter().enumerate() {
            out.write_record([(i + 1).to_string(), s.layer.to_string(), s.score.to_string()])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ForwardSelectError<E> {
    #[error("no candidate layers")]
    NoCandidates,
    #[error("scoring layers {subset:?} failed: {error}")]
    Scorer { subset: Vec<usize>, error: E },
}

/// Greedy forward selection. Starting from the empty set (score 0), each
/// round scores every remaining candidate added to the current set and keeps
/// the best (ties to the lower id); it stops once the best extension does not
/// strictly improve the score. Subsets are passed to `scorer` sorted.
pub fn forward_select<E, F>(candidates: &[usize], scorer: F) -> Result<SelectionTrace, ForwardSelectError<E>>
where
    E: Send,
    F: Fn(&[usize]) -> Result<f64, E> + Sync,
{
    let mut remaining = candidates.to_vec();
    remaining.sort_unstable();
    remaining.dedup();
    if remaining.is_empty() {
        return Err(ForwardSelectError::NoCandidates);
    }
    let mut current: Vec<usize> = Vec::new();
    let mut score = 0.0;
    let mut steps = Vec::new();
    loop {
        if remaining.is_empty() {
            return Ok(SelectionTrace { steps, selected: current, stop: StopReason::Exhausted });
        }
        let scores = remaining
            .par_iter()
            .map(|&c| {
                let mut subset = current.clone();
                subset.push(c);
                subset.sort_unstable();
                scorer(&subset).map_err(|error| ForwardSelectError::Scorer { subset, error })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        let mut best = 0;
        for (k, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = k;
            }
        }
        if !(scores[best] > score) {
            return Ok(SelectionTrace { steps, selected: current, stop: StopReason::NoImprovement });
        }
        score = scores[best];
        let layer = remaining.remove(best);
        current.push(layer);
        current.sort_unstable();
        steps.push(SelectionStep { layer, score });
    }
}

/// Validation accuracy of a probe on the concatenated pooled features of `layers`.
pub fn subset_accuracy(bank: &LayerFeatureBank, layers: &[usize], cfg: &LinearHeadConfig) -> Result<f64, SelectError> {
    let x = bank.concat_pooled(layers)?;
    Ok(probe_accuracy(&x, bank, cfg)?.1)
}

/// Forward selection over every layer of the bank, scored by [`subset_accuracy`].
pub fn select_taps(bank: &LayerFeatureBank, cfg: &LinearHeadConfig) -> Result<SelectionTrace, ForwardSelectError<SelectError>> {
    bank.check_splits().map_err(|error| ForwardSelectError::Scorer { subset: vec![], error })?;
    forward_select(&bank.layers, |s| subset_accuracy(bank, s, cfg))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolingComparison {
    pub layer: usize,
    pub pooled_train: f64,
    pub pooled_val: f64,
    pub full_train: f64,
    pub full_val: f64,
}

pub fn pooled_vs_full(bank: &LayerFeatureBank, cfg: &LinearHeadConfig) -> Result<Vec<PoolingComparison>, SelectError> {
    let full = bank.full.as_ref().ok_or(SelectError::NoFullFeatures)?;
    bank.check_splits()?;
    bank.layers
        .par_iter()
        .enumerate()
        .map(|(k, &layer)| {
            let (pooled_train, pooled_val) = probe_accuracy(&bank.pooled[k], bank, cfg)?;
            let (full_train, full_val) = probe_accuracy(&full[k], bank, cfg)?;
            Ok(PoolingComparison { layer, pooled_train, pooled_val, full_train, full_val })
        })
        .collect()
}

pub fn write_pooling_csv<W: Write>(rows: &[PoolingComparison], w: W) -> Result<(), SelectError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["layer", "pooled_train", "pooled_val", "full_train", "full_val"])?;
    for r in rows {
        out.write_record([
            r.layer.to_string(),
            r.pooled_train.to_string(),
            r.pooled_val.to_string(),
            r.full_train.to_string(),
            r.full_val.to_string(),
        ])?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

/// The `m` gallery rows closest to `query` in L2 distance, ascending, ties to
/// the lower row index.
pub fn retrieve_nearest(query: &[f64], gallery: &FeatureMatrix, m: usize) -> Result<Vec<Neighbor>, SelectError> {
    if m > gallery.rows {
        return Err(SelectError::TooManyNeighbors { m, gallery: gallery.rows });
    }
    if query.len() != gallery.cols {
        return Err(SelectError::Dimension { query: query.len(), gallery: gallery.cols });
    }
    let mut d: Vec<(f64, usize)> = (0..gallery.rows)
        .map(|i| (gallery.row(i).iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(), i))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(d.into_iter().take(m).map(|(distance, index)| Neighbor { index, distance }).collect())
}
