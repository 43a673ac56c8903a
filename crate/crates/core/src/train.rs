//! Minibatch SGD with momentum, off-the-shelf training, evaluation,
//! finite-difference gradient checks and the gradient-magnitude trace.

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Split};
use crate::graph::{BackwardMode, ExecContext, Gradients, Graph, GraphError, LayerKind, NodeId};
use crate::init::rng_for;
use crate::multiscale::{build_chain, build_multiscale, BackboneSpec, InitScheme, MultiscaleError, TapSet};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("graph predicts {graph} classes but the dataset has {data}")]
    Classes { graph: usize, data: usize },
    #[error("dataset images are {data}, graph expects {graph}")]
    InputShape { graph: String, data: String },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("non-finite value in epoch {epoch}, iteration {iteration}: {source}")]
    NonFinite { epoch: usize, iteration: usize, source: GraphError },
    #[error("non-finite gradient for node {node}")]
    NonFiniteGradient { node: NodeId },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Multiscale(#[from] MultiscaleError),
    #[error("thread pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Every parameter is updated.
    #[default]
    FineTune,
    /// Only fully-connected heads are updated; the backbone stays frozen.
    Ots,
}

impl std::str::FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "finetune" | "ft" => Ok(TrainMode::FineTune),
            "ots" => Ok(TrainMode::Ots),
            other => Err(format!("unknown mode `{other}` (expected ots or finetune)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub grad_trace: bool,
    pub weight_decay: f64,
    /// Worker threads; 0 uses the global pool.
    #[serde(skip)]
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            mode: TrainMode::FineTune,
            grad_trace: false,
            weight_decay: 0.0,
            jobs: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::Config("weight decay must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Runs `f` on a pool of `jobs` threads, or on the global pool when `jobs` is 0.
pub fn with_jobs<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> Result<R, TrainError> {
    if jobs == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| TrainError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

/// One classical-momentum update: `v ← m·v − lr·g`, `p ← p + v`.
pub fn sgd_step(param: &mut [f64], velocity: &mut [f64], grad: &[f64], lr: f64, momentum: f64) -> Result<(), TrainError> {
    if param.len() != velocity.len() || param.len() != grad.len() {
        return Err(TrainError::Config(format!(
            "sgd_step lengths differ: param {}, velocity {}, grad {}",
            param.len(),
            velocity.len(),
            grad.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::Config("non-finite gradient".into()));
    }
    for ((p, v), g) in param.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v - lr * g;
        *p += *v;
    }
    Ok(())
}

/// Momentum buffers for every parameter of a graph.
#[derive(Debug, Clone)]
pub struct SgdState {
    velocity: Vec<Vec<Tensor>>,
}

impl SgdState {
    pub fn new(graph: &Graph) -> Self {
        SgdState {
            velocity: graph
                .nodes()
                .iter()
                .map(|n| n.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect())
                .collect(),
        }
    }

    pub fn velocity(&self, node: NodeId, index: usize) -> &Tensor {
        &self.velocity[node][index]
    }

    /// Updates the listed parameter slots in place.
    pub fn step(
        &mut self,
        graph: &mut Graph,
        grads: &Gradients,
        slots: &[(NodeId, usize)],
        config: &TrainConfig,
    ) -> Result<(), TrainError> {
        for &(node, k) in slots {
            let decay = graph.node(node).params()[k].name == "weight" && config.weight_decay > 0.0;
            let g = grads.get(node, k);
            let grad: Vec<f64> = if decay {
                let p = &graph.node(node).params()[k].value;
                g.data().iter().zip(p.data()).map(|(g, p)| g + config.weight_decay * p).collect()
            } else {
                g.data().to_vec()
            };
            let param = graph.param_mut(node, k);
            sgd_step(param.data_mut(), self.velocity[node][k].data_mut(), &grad, config.lr, config.momentum)
                .map_err(|_| TrainError::NonFiniteGradient { node })?;
        }
        Ok(())
    }
}

/// Parameter slots updated under `mode`.
pub fn trainable_slots(graph: &Graph, mode: TrainMode) -> Vec<(NodeId, usize)> {
    graph
        .param_slots()
        .into_iter()
        .filter(|&(node, _)| match mode {
            TrainMode::FineTune => true,
            TrainMode::Ots => matches!(graph.node(node).kind(), LayerKind::FullyConnected { .. }),
        })
        .collect()
}

/// Accuracy figures over one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    /// `None` for classes without examples in the split.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Evaluation {
    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        (0..self.confusion.len()).map(|k| self.confusion[k][k]).sum()
    }
}

/// Tallies predictions into an [`Evaluation`]. `losses` may be empty.
pub fn summarize(predictions: &[usize], labels: &[usize], losses: &[f64], classes: usize) -> Result<Evaluation, TrainError> {
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= classes {
            return Err(TrainError::Label { label: y, classes });
        }
        confusion[y][p.min(classes - 1)] += 1;
    }
    let total = labels.len();
    let correct: usize = (0..classes).map(|k| confusion[k][k]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let support: usize = row.iter().sum();
            (support > 0).then(|| row[k] as f64 / support as f64)
        })
        .collect();
    Ok(Evaluation {
        loss: if losses.is_empty() { f64::NAN } else { losses.iter().sum::<f64>() / losses.len() as f64 },
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        per_class_accuracy,
        confusion,
    })
}

fn check_compatible(graph: &Graph, data: &Dataset) -> Result<usize, TrainError> {
    let classes = graph.num_classes().ok_or(GraphError::Missing("softmax loss"))?;
    if classes != data.num_classes {
        return Err(TrainError::Classes { graph: classes, data: data.num_classes });
    }
    let expected = graph.input_shape().ok_or(GraphError::Missing("input"))?;
    if let Some(shape) = data.image_shape() {
        if shape != expected {
            return Err(TrainError::InputShape { graph: expected.to_string(), data: shape.to_string() });
        }
    }
    Ok(classes)
}

/// Loss, accuracy and confusion counts over the examples `indices`.
pub fn evaluate_indices(graph: &Graph, data: &Dataset, indices: &[usize]) -> Result<Evaluation, TrainError> {
    let classes = check_compatible(graph, data)?;
    if let Some(&i) = indices.iter().find(|&&i| data.labels[i] >= classes) {
        return Err(TrainError::Label { label: data.labels[i], classes });
    }
    let results = indices
        .par_iter()
        .map_init(
            || graph.new_context(),
            |ctx, &i| -> Result<(f64, usize), GraphError> {
                let loss = graph.forward(ctx, &data.images[i], data.labels[i])?;
                Ok((loss, graph.logits(ctx)?.argmax()))
            },
        )
        .collect::<Result<Vec<_>, _>>()?;
    let (losses, preds): (Vec<f64>, Vec<usize>) = results.into_iter().unzip();
    let labels: Vec<usize> = indices.iter().map(|&i| data.labels[i]).collect();
    summarize(&preds, &labels, &losses, classes)
}

/// Evaluates a whole split. Predictions are the argmax of the class scores,
/// ties resolving to the lower class id.
pub fn evaluate(graph: &Graph, data: &Dataset, split: Split) -> Result<Evaluation, TrainError> {
    let idx = data.indices(split);
    if idx.is_empty() {
        return Err(TrainError::EmptySplit(split.name()));
    }
    evaluate_indices(graph, data, &idx)
}

/// Mean |gradient| of one parameter tensor, recorded per epoch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradTrace {
    pub node: NodeId,
    /// Average over the epoch's minibatches.
    pub epoch_mean: Vec<f64>,
    /// Value at the epoch's final minibatch.
    pub last: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub trace: Option<GradTrace>,
}

impl TrainReport {
    /// CSV columns: `epoch,split,loss,accuracy,grad_mean_abs_layer1,grad_mean_abs_layer1_last`.
    /// Gradient columns are filled on train rows when tracing was on.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), TrainError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "split", "loss", "accuracy", "grad_mean_abs_layer1", "grad_mean_abs_layer1_last"])?;
        for (e, m) in self.epochs.iter().enumerate() {
            let (g, gl) = match &self.trace {
                Some(t) => (t.epoch_mean[e].to_string(), t.last[e].to_string()),
                None => (String::new(), String::new()),
            };
            out.write_record([m.epoch.to_string(), "train".into(), m.train_loss.to_string(), m.train_accuracy.to_string(), g, gl])?;
            if let (Some(l), Some(a)) = (m.val_loss, m.val_accuracy) {
                out.write_record([m.epoch.to_string(), "val".into(), l.to_string(), a.to_string(), String::new(), String::new()])?;
            }
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

fn example_gradients(graph: &Graph, ctx: &mut ExecContext, x: &Tensor, y: usize) -> Result<(f64, Gradients), GraphError> {
    let loss = graph.forward(ctx, x, y)?;
    let grads = graph.backward(ctx)?;
    Ok((loss, grads))
}

/// Mean loss and mean parameter gradient over `batch`, reduced in ascending
/// example order so the result does not depend on thread scheduling.
pub fn batch_gradient(graph: &Graph, data: &Dataset, batch: &[usize]) -> Result<(f64, Gradients), GraphError> {
    let mut sorted = batch.to_vec();
    sorted.sort_unstable();
    let per_example = sorted
        .par_iter()
        .map_init(|| graph.new_context(), |ctx, &i| example_gradients(graph, ctx, &data.images[i], data.labels[i]))
        .collect::<Result<Vec<_>, _>>()?;
    let mut iter = per_example.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        grads.accumulate(&g);
    }
    let n = sorted.len() as f64;
    grads.scale(1.0 / n);
    Ok((loss / n, grads))
}

/// First convolution's weight tensor, the default trace target.
pub fn first_conv(graph: &Graph) -> Option<NodeId> {
    graph.first_of(|k| matches!(k, LayerKind::Conv { .. }))
}

/// Trains in place. Each epoch shuffles the training split with a seed
/// derived from `(config.seed, epoch)`, then takes one SGD step per
/// minibatch on the mean gradient. Train and validation metrics are
/// measured after every epoch with the updated parameters.
pub fn train(graph: &mut Graph, data: &Dataset, config: &TrainConfig) -> Result<TrainReport, TrainError> {
    config.validate()?;
    check_compatible(graph, data)?;
    let train_idx = data.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    let has_val = !data.indices(Split::Val).is_empty();
    let slots = trainable_slots(graph, config.mode);
    let trace_node = if config.grad_trace { first_conv(graph) } else { None };
    let jobs = config.jobs;
    with_jobs(jobs, move || {
        let mut state = SgdState::new(graph);
        let mut trace = trace_node.map(|node| GradTrace { node, ..Default::default() });
        let mut epochs = Vec::with_capacity(config.epochs);
        let mut order = train_idx;
        for epoch in 0..config.epochs {
            order.shuffle(&mut rng_for(config.seed, epoch as u64));
            let mut trace_sum = 0.0;
            let mut trace_last = 0.0;
            let batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
            for (iteration, batch) in batches.iter().enumerate() {
                let (loss, grads) = batch_gradient(graph, data, batch)
                    .map_err(|source| TrainError::NonFinite { epoch: epoch + 1, iteration, source })?;
                if !loss.is_finite() {
                    return Err(TrainError::NonFinite {
                        epoch: epoch + 1,
                        iteration,
                        source: GraphError::NonFinite { node: graph.loss_id().unwrap_or(0), kind: "softmax_loss", what: "loss" },
                    });
                }
                if let Some(t) = &trace {
                    trace_last = grads.get(t.node, 0).mean_abs();
                    trace_sum += trace_last;
                }
                state.step(graph, &grads, &slots, config)?;
            }
            if let Some(t) = &mut trace {
                t.epoch_mean.push(trace_sum / batches.len() as f64);
                t.last.push(trace_last);
            }
            let tr = evaluate(graph, data, Split::Train)?;
            let val = if has_val { Some(evaluate(graph, data, Split::Val)?) } else { None };
            epochs.push(EpochMetrics {
                epoch: epoch + 1,
                train_loss: tr.loss,
                train_accuracy: tr.accuracy,
                val_loss: val.as_ref().map(|v| v.loss),
                val_accuracy: val.as_ref().map(|v| v.accuracy),
            });
        }
        Ok(TrainReport { epochs, trace })
    })?
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Tensors with more entries than this are checked on a seeded random
    /// subsample of this many entries.
    pub max_entries: usize,
    pub seed: u64,
    /// Also compare `∂z/∂input`.
    pub include_input: bool,
    pub mode: BackwardMode,
    /// Passed to [`ExecContext::set_add_backward_scale`] for fault injection.
    pub add_backward_scale: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_entries: 48,
            seed: 0,
            include_input: true,
            mode: BackwardMode::Fast,
            add_backward_scale: 1.0,
            floor: 1e-8,
        }
    }
}

/// The entry with the largest relative error.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub node: NodeId,
    pub kind: &'static str,
    /// `weight`, `bias` or `input`.
    pub target: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<GradCheckEntry>,
    pub checked: usize,
    /// Entries skipped because a perturbation crossed a ReLU or max-pool kink.
    pub skipped_kinks: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Which side of every kink the current forward pass is on.
fn kink_pattern(graph: &Graph, ctx: &ExecContext) -> Vec<u64> {
    let mut out = Vec::new();
    for node in graph.nodes() {
        match node.kind() {
            LayerKind::Relu => {
                if let Some(x) = ctx.activation(node.parents()[0]) {
                    out.extend(x.data().iter().map(|&v| u64::from(v > 0.0)));
                }
            }
            LayerKind::MaxPool { .. } => {
                if let Some(am) = ctx.pool_argmax(node.id()) {
                    out.extend(am.iter().map(|&i| i as u64));
                }
            }
            _ => {}
        }
    }
    out
}

fn sample_indices(numel: usize, max: usize, seed: u64, stream: u64) -> Vec<usize> {
    if numel <= max {
        return (0..numel).collect();
    }
    let mut idx = rand::seq::index::sample(&mut rng_for(seed, stream), numel, max).into_vec();
    idx.sort_unstable();
    idx
}

/// Compares backpropagated gradients of every parameter (and optionally the
/// input) against central differences `(z(w+h) − z(w−h)) / 2h`.
pub fn gradient_check(graph: &Graph, input: &Tensor, label: usize, opts: &GradCheckOptions) -> Result<GradCheckReport, TrainError> {
    if !(opts.step > 0.0 && opts.step.is_finite()) {
        return Err(TrainError::Config("finite-difference step must be positive".into()));
    }
    let mut g = graph.clone();
    let mut ctx = g.new_context();
    ctx.set_add_backward_scale(opts.add_backward_scale);
    g.forward(&mut ctx, input, label)?;
    let base = kink_pattern(&g, &ctx);
    let analytic = g.backward_with(&mut ctx, opts.mode)?;
    let input_grad = ctx.signal(g.input_id().ok_or(GraphError::Missing("input"))?).cloned();

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0, skipped_kinks: 0 };
    let mut probe = g.new_context();
    let h = opts.step;

    let record = |report: &mut GradCheckReport, entry: GradCheckEntry| {
        report.checked += 1;
        if entry.rel_error > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(entry.rel_error);
            report.worst = Some(entry);
        }
    };

    let slots = g.param_slots();
    for (s, &(node, k)) in slots.iter().enumerate() {
        let kind = g.node(node).kind().name();
        let target = g.node(node).params()[k].name.clone();
        let numel = g.node(node).params()[k].value.numel();
        for i in sample_indices(numel, opts.max_entries, opts.seed, s as u64) {
            let orig = g.node(node).params()[k].value.data()[i];
            let mut eval = |g: &mut Graph, v: f64| -> Result<(f64, bool), TrainError> {
                g.param_mut(node, k).data_mut()[i] = v;
                let loss = g.forward(&mut probe, input, label)?;
                Ok((loss, kink_pattern(g, &probe) == base))
            };
            let plus = eval(&mut g, orig + h);
            let minus = eval(&mut g, orig - h);
            g.param_mut(node, k).data_mut()[i] = orig;
            let ((lp, sp), (lm, sm)) = (plus?, minus?);
            if !(sp && sm) {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic.get(node, k).data()[i];
            let rel_error = relative_error(a, numeric, opts.floor);
            record(&mut report, GradCheckEntry { node, kind, target: target.clone(), index: i, analytic: a, numeric, rel_error });
        }
    }

    if opts.include_input {
        if let Some(ig) = input_grad {
            let input_id = g.input_id().expect("checked above");
            let mut x = input.clone();
            for i in sample_indices(x.numel(), opts.max_entries, opts.seed, slots.len() as u64) {
                let orig = x.data()[i];
                x.data_mut()[i] = orig + h;
                let lp = g.forward(&mut probe, &x, label)?;
                let sp = kink_pattern(&g, &probe) == base;
                x.data_mut()[i] = orig - h;
                let lm = g.forward(&mut probe, &x, label)?;
                let sm = kink_pattern(&g, &probe) == base;
                x.data_mut()[i] = orig;
                if !(sp && sm) {
                    report.skipped_kinks += 1;
                    continue;
                }
                let numeric = (lp - lm) / (2.0 * h);
                let a = ig.data()[i];
                let rel_error = relative_error(a, numeric, opts.floor);
                record(
                    &mut report,
                    GradCheckEntry { node: input_id, kind: "input", target: "input".into(), index: i, analytic: a, numeric, rel_error },
                );
            }
        }
    }
    Ok(report)
}

/// Gradient traces of a chain and a multi-scale network trained from the
/// same initialization, with their per-epoch ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct GradTraceComparison {
    pub chain: GradTrace,
    pub dag: GradTrace,
    /// `dag.epoch_mean[e] / chain.epoch_mean[e]`.
    pub ratio: Vec<f64>,
    /// `dag.last[e] / chain.last[e]`.
    pub ratio_last: Vec<f64>,
    pub chain_report: TrainReport,
    pub dag_report: TrainReport,
}

impl GradTraceComparison {
    /// CSV columns: `epoch,chain,dag,ratio,chain_last,dag_last,ratio_last`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), TrainError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "chain", "dag", "ratio", "chain_last", "dag_last", "ratio_last"])?;
        for e in 0..self.ratio.len() {
            out.write_record([
                (e + 1).to_string(),
                self.chain.epoch_mean[e].to_string(),
                self.dag.epoch_mean[e].to_string(),
                self.ratio[e].to_string(),
                self.chain.last[e].to_string(),
                self.dag.last[e].to_string(),
                self.ratio_last[e].to_string(),
            ])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

pub fn grad_trace_experiment(
    backbone: &BackboneSpec,
    taps: &TapSet,
    data: &Dataset,
    init: &InitScheme,
    config: &TrainConfig,
) -> Result<GradTraceComparison, TrainError> {
    let config = TrainConfig { grad_trace: true, ..config.clone() };
    let mut chain = build_chain(backbone, data.num_classes, init)?;
    let mut dag = build_multiscale(backbone, taps, data.num_classes, init)?;
    let chain_report = train(&mut chain, data, &config)?;
    let dag_report = train(&mut dag, data, &config)?;
    let missing = || TrainError::Config("backbone has no convolution to trace".into());
    let ct = chain_report.trace.clone().ok_or_else(missing)?;
    let dt = dag_report.trace.clone().ok_or_else(missing)?;
    let ratio = dt.epoch_mean.iter().zip(&ct.epoch_mean).map(|(d, c)| d / c).collect();
    let ratio_last = dt.last.iter().zip(&ct.last).map(|(d, c)| d / c).collect();
    Ok(GradTraceComparison { chain: ct, dag: dt, ratio, ratio_last, chain_report, dag_report })
}
