//! Command execution. Every command is first resolved into an
//! [`Invocation`] holding all parameters, so a manifest can replay it.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use dagcnn::data::{self, Dataset, Split, SynthTaskConfig};
use dagcnn::diagnose::{diagnose_matrix, pretrain_backbone, DiagnoseConfig};
use dagcnn::graph::{load_model, save_model, Graph};
use dagcnn::init::uniform_tensor;
use dagcnn::multiscale::{backbone_node, build_multiscale, copy_backbone, pooled_feature, BackboneSpec, TapSet};
use dagcnn::select::{
    extract_bank, per_class_best_layer, per_layer_accuracy, pooled_vs_full, retrieve_nearest, save_bank, select_taps,
    write_layer_scores_csv, write_pooling_csv, SelectionTrace,
};
use dagcnn::train::{evaluate, grad_trace_experiment, gradient_check, train, GradCheckOptions, TrainMode};
use dagcnn::Shape;

use crate::config::{check_square, ExperimentConfig, TapChoice};
use crate::manifest::{digest, FileDigest, Outputs};
use crate::UsageError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiagnoseTask {
    Matrix,
    GradCheck,
    GradTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Invocation {
    GenSynth {
        synth: SynthTaskConfig,
        out: PathBuf,
    },
    Train {
        config: ExperimentConfig,
        data: PathBuf,
        init_model: Option<PathBuf>,
        out: PathBuf,
    },
    Eval {
        config: ExperimentConfig,
        model: PathBuf,
        data: PathBuf,
        split: Split,
        out: PathBuf,
    },
    Select {
        config: ExperimentConfig,
        model: PathBuf,
        data: PathBuf,
        full: bool,
        out: PathBuf,
    },
    Diagnose {
        config: ExperimentConfig,
        data: Option<PathBuf>,
        task: DiagnoseTask,
        out: PathBuf,
    },
    Retrieve {
        config: ExperimentConfig,
        model: PathBuf,
        gallery: PathBuf,
        gallery_split: Split,
        query_data: Option<PathBuf>,
        query_split: Split,
        query_index: usize,
        layers: Vec<usize>,
        m: usize,
        out: PathBuf,
    },
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Invocation::GenSynth { .. } => "gen-synth",
            Invocation::Train { .. } => "train",
            Invocation::Eval { .. } => "eval",
            Invocation::Select { .. } => "select",
            Invocation::Diagnose { .. } => "diagnose",
            Invocation::Retrieve { .. } => "retrieve",
        }
    }

    pub fn out(&self) -> &Path {
        match self {
            Invocation::GenSynth { out, .. }
            | Invocation::Train { out, .. }
            | Invocation::Eval { out, .. }
            | Invocation::Select { out, .. }
            | Invocation::Diagnose { out, .. }
            | Invocation::Retrieve { out, .. } => out,
        }
    }

    pub fn set_out(&mut self, dir: PathBuf) {
        match self {
            Invocation::GenSynth { out, .. }
            | Invocation::Train { out, .. }
            | Invocation::Eval { out, .. }
            | Invocation::Select { out, .. }
            | Invocation::Diagnose { out, .. }
            | Invocation::Retrieve { out, .. } => *out = dir,
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Invocation::GenSynth { synth, .. } => Some(synth.seed),
            Invocation::Train { config, .. }
            | Invocation::Eval { config, .. }
            | Invocation::Select { config, .. }
            | Invocation::Diagnose { config, .. }
            | Invocation::Retrieve { config, .. } => Some(config.seed),
        }
    }
}

/// What a command produced.
pub struct Outcome {
    pub outputs: Outputs,
    pub inputs: Vec<FileDigest>,
    pub summary: serde_json::Value,
    /// Non-zero when the command ran to completion but its check failed.
    pub status: i32,
}

const IDX_NAMES: [&str; 6] =
    ["train-images.idx", "train-labels.idx", "val-images.idx", "val-labels.idx", "test-images.idx", "test-labels.idx"];

fn data_digests(dir: &Path) -> Result<Vec<FileDigest>> {
    IDX_NAMES
        .iter()
        .map(|n| dir.join(n))
        .filter(|p| p.exists())
        .map(|p| digest(&p, p.display().to_string()))
        .collect()
}

fn require_path(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!(UsageError(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

/// Loads an IDX directory and applies the configured preprocessing.
pub fn load_data(dir: &Path, cfg: &ExperimentConfig) -> Result<Dataset> {
    require_path(dir, "dataset path")?;
    let raw = data::load_idx_dir(dir).map_err(|e| UsageError(format!("dataset {}: {e}", dir.display())))?;
    let shape = raw.image_shape().ok_or_else(|| UsageError(format!("dataset {} is empty", dir.display())))?;
    let (h, w, c) = shape.as_hwc().expect("dataset images are H×W×C");
    let target = cfg.data.resize.unwrap_or([h, w]);
    if !cfg.data.subtract_mean && target == [h, w] {
        return Ok(raw);
    }
    let zero = vec![0.0; c];
    let mean = if cfg.data.subtract_mean {
        raw.preprocess_all(target, &zero)?.channel_means(Split::Train)
    } else {
        zero
    };
    Ok(raw.preprocess_all(target, &mean)?)
}

fn load_graph(path: &Path) -> Result<Graph> {
    require_path(path, "model")?;
    load_model(path).map_err(|e| UsageError(format!("model {}: {e}", path.display())).into())
}

fn check_model_data(graph: &Graph, data: &Dataset) -> Result<()> {
    let k = graph.num_classes().ok_or_else(|| anyhow!("model has no softmax loss"))?;
    if k != data.num_classes {
        bail!(UsageError(format!("model predicts {k} classes, dataset has {}", data.num_classes)));
    }
    if graph.input_shape() != data.image_shape() {
        bail!(UsageError(format!(
            "model expects {} images, dataset has {}",
            graph.input_shape().map(Shape::to_string).unwrap_or_default(),
            data.image_shape().map(Shape::to_string).unwrap_or_default()
        )));
    }
    Ok(())
}

fn write_csv(outputs: &mut Outputs, name: &str, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let mut w = outputs.create(name)?;
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Resolves `auto` taps by forward selection on pooled features of `features_from`.
fn resolve_taps(
    cfg: &ExperimentConfig,
    backbone: &BackboneSpec,
    data: &Dataset,
    features_from: &Graph,
) -> Result<(TapSet, Option<SelectionTrace>)> {
    if let Some(t) = cfg.taps.fixed(backbone)? {
        return Ok((t, None));
    }
    let bank = extract_bank(features_from, data, &backbone.relu_layers(), &[Split::Train, Split::Val], false)?;
    let trace = select_taps(&bank, &cfg.probe).map_err(|e| anyhow!("tap selection: {e}"))?;
    if trace.selected.is_empty() {
        bail!("tap selection chose no layer (no subset beat a score of 0)");
    }
    let taps = trace.tap_set(backbone)?;
    Ok((taps, Some(trace)))
}

pub fn execute(inv: &Invocation) -> Result<Outcome> {
    let mut outputs = Outputs::new(inv.out())?;
    let mut inputs = Vec::new();
    let mut status = 0;
    let summary = match inv {
        Invocation::GenSynth { synth, .. } => {
            let ds = data::synth_multiscale(synth).map_err(|e| UsageError(e.to_string()))?;
            for p in data::write_idx_dir(&ds, outputs.dir())? {
                let name = p.file_name().and_then(|n| n.to_str()).context("output file name")?.to_string();
                outputs.path(&name);
            }
            println!("wrote {} images ({} classes) to {}", ds.len(), ds.num_classes, outputs.dir().display());
            json!({ "images": ds.len(), "classes": ds.num_classes })
        }

        Invocation::Train { config, data, init_model, .. } => {
            let ds = load_data(data, config).context("loading data")?;
            inputs.extend(data_digests(data)?);
            let backbone = config.backbone_for(&ds)?;
            let init = config.init();
            let mut base = build_multiscale(&backbone, &TapSet::all(&backbone), ds.num_classes, &init)?;
            let source = match init_model {
                Some(p) => {
                    let src = load_graph(p)?;
                    inputs.push(digest(p, p.display().to_string())?);
                    let src_bb = BackboneSpec::from_graph(&src)?;
                    if src_bb != backbone {
                        bail!(UsageError(format!("--init-model {} has a different backbone", p.display())));
                    }
                    copy_backbone(&src, &mut base, &backbone)?;
                    Some(src)
                }
                None => None,
            };
            let (taps, trace) = resolve_taps(config, &backbone, &ds, &base).context("selecting taps")?;
            if let Some(t) = &trace {
                write_csv(&mut outputs, "selection.csv", |w| Ok(t.write_csv(w)?))?;
            }
            let mut graph = build_multiscale(&backbone, &taps, ds.num_classes, &init)?;
            if let Some(src) = &source {
                copy_backbone(src, &mut graph, &backbone)?;
            }
            let report = train(&mut graph, &ds, &config.train).context("training")?;
            save_model(&graph, outputs.path("model.dagnet"))?;
            write_csv(&mut outputs, "metrics.csv", |w| Ok(report.write_csv(w)?))?;
            outputs.write_string("config.toml", &config.to_toml()?)?;
            let last = report.epochs.last().expect("at least one epoch");
            println!(
                "trained {} epochs, taps {:?}: train accuracy {:.4}, val accuracy {}",
                report.epochs.len(),
                taps.layers(),
                last.train_accuracy,
                last.val_accuracy.map_or("n/a".into(), |v| format!("{v:.4}"))
            );
            json!({
                "taps": taps.layers(),
                "train_accuracy": last.train_accuracy,
                "val_accuracy": last.val_accuracy,
            })
        }

        Invocation::Eval { config, model, data, split, .. } => {
            let graph = load_graph(model)?;
            inputs.push(digest(model, model.display().to_string())?);
            let ds = load_data(data, config).context("loading data")?;
            inputs.extend(data_digests(data)?);
            check_model_data(&graph, &ds)?;
            if ds.indices(*split).is_empty() {
                bail!(UsageError(format!("{} split is empty", split.name())));
            }
            let ev = evaluate(&graph, &ds, *split)?;
            write_csv(&mut outputs, "eval.csv", |w| {
                writeln!(w, "class,support,correct,accuracy")?;
                for (k, row) in ev.confusion.iter().enumerate() {
                    let support: usize = row.iter().sum();
                    let acc = ev.per_class_accuracy[k].map(|a| a.to_string()).unwrap_or_default();
                    writeln!(w, "{k},{support},{},{acc}", row[k])?;
                }
                writeln!(w, "all,{},{},{}", ev.total(), ev.correct(), ev.accuracy)?;
                Ok(())
            })?;
            write_csv(&mut outputs, "confusion.csv", |w| {
                for row in &ev.confusion {
                    let cells: Vec<String> = row.iter().map(usize::to_string).collect();
                    writeln!(w, "{}", cells.join(","))?;
                }
                Ok(())
            })?;
            println!("{} accuracy {:.4} ({} / {}), loss {:.6}", split.name(), ev.accuracy, ev.correct(), ev.total(), ev.loss);
            json!({ "accuracy": ev.accuracy, "loss": ev.loss })
        }

        Invocation::Select { config, model, data, full, .. } => {
            let graph = load_graph(model)?;
            inputs.push(digest(model, model.display().to_string())?);
            let ds = load_data(data, config).context("loading data")?;
            inputs.extend(data_digests(data)?);
            check_model_data(&graph, &ds)?;
            let backbone = BackboneSpec::from_graph(&graph)?;
            let bank = extract_bank(&graph, &ds, &backbone.relu_layers(), &[Split::Train, Split::Val], *full)?;
            save_bank(&bank, outputs.path("bank.dagbank"))?;
            let scores = per_layer_accuracy(&bank, &config.probe).map_err(|e| UsageError(e.to_string()))?;
            write_csv(&mut outputs, "per_layer.csv", |w| Ok(write_layer_scores_csv(&scores, w)?))?;
            let best = per_class_best_layer(&bank, &config.probe)?;
            write_csv(&mut outputs, "per_class.csv", |w| Ok(best.write_csv(w)?))?;
            let trace = select_taps(&bank, &config.probe).map_err(|e| anyhow!("{e}"))?;
            write_csv(&mut outputs, "selection.csv", |w| Ok(trace.write_csv(w)?))?;
            if *full {
                let cmp = pooled_vs_full(&bank, &config.probe)?;
                write_csv(&mut outputs, "pooling.csv", |w| Ok(write_pooling_csv(&cmp, w)?))?;
            }
            for s in &scores {
                println!("layer {:>3}: val accuracy {:.4}", s.layer, s.val_accuracy);
            }
            println!("forward selection: {:?} (val accuracy {:.4})", trace.selected, trace.score());
            json!({ "selected": trace.selected, "selection_score": trace.score() })
        }

        Invocation::Diagnose { config, data, task, .. } => {
            let ds = match data {
                Some(d) => {
                    let ds = load_data(d, config).context("loading data")?;
                    inputs.extend(data_digests(d)?);
                    Some(ds)
                }
                None => None,
            };
            match task {
                DiagnoseTask::GradCheck => {
                    let (input, label, classes) = match &ds {
                        Some(ds) => {
                            let i = *ds.indices(Split::Train).first().ok_or_else(|| UsageError("train split is empty".into()))?;
                            (ds.images[i].clone(), ds.labels[i], ds.num_classes)
                        }
                        None => {
                            let k = config.synth.num_classes();
                            let shape = Shape::new(config.gradcheck.input.to_vec())?;
                            (uniform_tensor(&shape, 1.0, config.seed, 0x6763), config.seed as usize % k, k)
                        }
                    };
                    let (h, w, c) = input.shape().as_hwc().context("input shape")?;
                    let backbone = config.backbone([h, w, c])?;
                    let taps = config.taps.fixed(&backbone)?.unwrap_or_else(|| TapSet::all(&backbone));
                    let graph = build_multiscale(&backbone, &taps, classes, &config.init_with_std(config.gradcheck.head_std))?;
                    let opts = GradCheckOptions {
                        step: config.gradcheck.step,
                        max_entries: config.gradcheck.max_entries,
                        seed: config.seed,
                        ..GradCheckOptions::default()
                    };
                    let rep = gradient_check(&graph, &input, label, &opts)?;
                    let pass = rep.max_rel_error < config.gradcheck.tolerance;
                    let worst = rep.worst.as_ref().map(|w| {
                        json!({
                            "node": w.node, "kind": w.kind, "target": w.target, "index": w.index,
                            "analytic": w.analytic, "numeric": w.numeric,
                        })
                    });
                    let body = json!({
                        "max_rel_error": rep.max_rel_error,
                        "tolerance": config.gradcheck.tolerance,
                        "pass": pass,
                        "checked": rep.checked,
                        "skipped_kinks": rep.skipped_kinks,
                        "worst": worst,
                    });
                    outputs.write_string("gradcheck.json", &(serde_json::to_string_pretty(&body)? + "\n"))?;
                    println!(
                        "max relative error {:e} over {} entries ({} skipped at kinks): {}",
                        rep.max_rel_error,
                        rep.checked,
                        rep.skipped_kinks,
                        if pass { "pass" } else { "FAIL" }
                    );
                    if !pass {
                        status = 1;
                    }
                    body
                }
                DiagnoseTask::GradTrace => {
                    let ds = ds.ok_or_else(|| UsageError("--gradtrace needs --data".into()))?;
                    let backbone = config.backbone_for(&ds)?;
                    let init = config.init();
                    let base = build_multiscale(&backbone, &TapSet::all(&backbone), ds.num_classes, &init)?;
                    let (taps, _) = resolve_taps(config, &backbone, &ds, &base)?;
                    let cmp = grad_trace_experiment(&backbone, &taps, &ds, &init, &config.train)?;
                    write_csv(&mut outputs, "gradtrace.csv", |w| Ok(cmp.write_csv(w)?))?;
                    write_csv(&mut outputs, "chain_metrics.csv", |w| Ok(cmp.chain_report.write_csv(w)?))?;
                    write_csv(&mut outputs, "dag_metrics.csv", |w| Ok(cmp.dag_report.write_csv(w)?))?;
                    for (e, r) in cmp.ratio.iter().enumerate() {
                        println!("epoch {:>3}: dag/chain first-conv |grad| ratio {r:.4}", e + 1);
                    }
                    json!({ "taps": taps.layers(), "ratio": cmp.ratio })
                }
                DiagnoseTask::Matrix => {
                    let ds = ds.ok_or_else(|| UsageError("diagnose needs --data".into()))?;
                    let backbone = config.backbone_for(&ds)?;
                    let init = config.init();
                    let pretrained = if config.pretrain.epochs > 0 {
                        let [h, w, _] = backbone.input;
                        let size = check_square(h, w)?;
                        let seed = config.seed.wrapping_add(config.pretrain.seed_offset);
                        let source = data::synth_multiscale(&SynthTaskConfig { size, seed, ..config.synth.clone() })
                            .map_err(|e| UsageError(format!("pretraining task: {e}")))?;
                        let mut pcfg = config.train.clone();
                        pcfg.epochs = config.pretrain.epochs;
                        let (g, _) = pretrain_backbone(&backbone, &source, &config.init_with_seed(seed), &pcfg)?;
                        Some(g)
                    } else {
                        None
                    };
                    let base_src = match &pretrained {
                        Some(g) => {
                            let mut b = build_multiscale(&backbone, &TapSet::all(&backbone), ds.num_classes, &init)?;
                            copy_backbone(g, &mut b, &backbone)?;
                            b
                        }
                        None => build_multiscale(&backbone, &TapSet::all(&backbone), ds.num_classes, &init)?,
                    };
                    let (taps, _) = resolve_taps(config, &backbone, &ds, &base_src)?;
                    let dcfg = DiagnoseConfig {
                        ots: config.ots.clone(),
                        finetune: dagcnn::train::TrainConfig { mode: TrainMode::FineTune, ..config.train.clone() },
                    };
                    let rep = diagnose_matrix(&backbone, &taps, &ds, &init, &dcfg, pretrained.as_ref())?;
                    write_csv(&mut outputs, "diagnose.csv", |w| Ok(rep.write_csv(w)?))?;
                    let mut cells = serde_json::Map::new();
                    for c in &rep.cells {
                        let mode = if c.mode == TrainMode::Ots { "ots" } else { "finetune" };
                        println!("{:<5} {:<8} test accuracy {:.4}", c.model.name(), mode, c.test_accuracy);
                        cells.insert(format!("{}-{mode}", c.model.name()), json!(c.test_accuracy));
                    }
                    json!({ "taps": taps.layers(), "test_accuracy": cells })
                }
            }
        }

        Invocation::Retrieve { config, model, gallery, gallery_split, query_data, query_split, query_index, layers, m, .. } => {
            let graph = load_graph(model)?;
            inputs.push(digest(model, model.display().to_string())?);
            let backbone = BackboneSpec::from_graph(&graph)?;
            let candidates = backbone.relu_layers();
            if layers.is_empty() {
                bail!(UsageError("give at least one --layer".into()));
            }
            if let Some(bad) = layers.iter().find(|l| !candidates.contains(l)) {
                bail!(UsageError(format!("layer {bad} is not a ReLU tap candidate (candidates: {candidates:?})")));
            }
            let gal = load_data(gallery, config).context("loading gallery")?;
            inputs.extend(data_digests(gallery)?);
            let qds = match query_data {
                Some(q) if q != gallery => {
                    let d = load_data(q, config).context("loading query data")?;
                    inputs.extend(data_digests(q)?);
                    d
                }
                _ => gal.clone(),
            };
            let q_rows = qds.indices(*query_split);
            let &qi = q_rows.get(*query_index).ok_or_else(|| {
                UsageError(format!("query index {query_index} out of range ({} {} examples)", q_rows.len(), query_split.name()))
            })?;
            let bank = extract_bank(&graph, &gal, layers, &[*gallery_split], false)?;
            if *m > bank.rows() {
                bail!(UsageError(format!("-m {m} exceeds the gallery size {}", bank.rows())));
            }
            let mut ctx = graph.new_context();
            graph.infer(&mut ctx, &qds.images[qi]).map_err(|e| UsageError(format!("query image: {e}")))?;
            let mut ranked = serde_json::Map::new();
            let mut sorted_layers = layers.clone();
            sorted_layers.sort_unstable();
            sorted_layers.dedup();
            write_csv(&mut outputs, "retrieval.csv", |w| {
                writeln!(w, "layer,rank,index,label,distance")?;
                for &layer in &sorted_layers {
                    let act = ctx.activation(backbone_node(layer)).context("activation")?;
                    let q = pooled_feature(act)?;
                    let k = bank.layer_index(layer)?;
                    let hits = retrieve_nearest(q.data(), &bank.pooled[k], *m)?;
                    println!("layer {layer}:");
                    let mut list = Vec::new();
                    for (rank, h) in hits.iter().enumerate() {
                        let idx = bank.source[h.index];
                        println!("  {:>2}. example {idx:>6} (label {:>3})  distance {:.6}", rank + 1, gal.labels[idx], h.distance);
                        writeln!(w, "{layer},{},{idx},{},{}", rank + 1, gal.labels[idx], h.distance)?;
                        list.push(json!({ "index": idx, "distance": h.distance }));
                    }
                    ranked.insert(layer.to_string(), json!(list));
                }
                Ok(())
            })?;
            json!({ "query": qi, "neighbors": ranked })
        }
    };
    Ok(Outcome { outputs, inputs, summary, status })
}

impl ExperimentConfig {
    pub fn init_with_std(&self, head_std: f64) -> dagcnn::InitScheme {
        dagcnn::InitScheme::Standard { seed: self.seed, head_std }
    }

    pub fn init_with_seed(&self, seed: u64) -> dagcnn::InitScheme {
        dagcnn::InitScheme::Standard { seed, head_std: self.head_std }
    }
}

pub fn taps_arg(s: &str) -> Result<TapChoice, String> {
    s.parse()
}
