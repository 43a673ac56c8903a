//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Run with `cargo test --release -p dagcnn-cli --test acceptance`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dagcnn::data::{self, synth_multiscale, DataError, IdxArray, Split, SynthTaskConfig};
use dagcnn::diagnose::{diagnose_matrix, DiagnoseConfig, ModelKind};
use dagcnn::fixtures::{random_backbone, random_dag, random_input};
use dagcnn::graph::{load_model, read_model, write_model, ModelFormatError};
use dagcnn::init::uniform_tensor;
use dagcnn::multiscale::{build_chain, build_multiscale, toy_backbone};
use dagcnn::select::{extract_bank, forward_select, pooled_vs_full, LinearHeadConfig, SelectionStep};
use dagcnn::tensor::{self, ConvGeometry, Shape, Tensor};
use dagcnn::train::{grad_trace_experiment, gradient_check, GradCheckOptions, TrainConfig, TrainMode};
use dagcnn::{BackboneLayer, BackboneSpec, InitScheme, LayerKind, TapSet};

const GRAD_TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;
const DENOM_FLOOR: f64 = 1e-8;
const HEAD_STD: f64 = 0.3;

/// Seed and settings frozen for the synthetic-task experiments.
const TASK_SEED: u64 = 1;
const TASK_SIZE: usize = 32;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed.as_secs_f64() < limit_secs as f64
}

// ---------------------------------------------------------------- criterion 1

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(DENOM_FLOOR)
}

fn rand_tensor(dims: &[usize], seed: u64, stream: u64) -> Tensor {
    uniform_tensor(&Shape::new(dims.to_vec()).unwrap(), 1.0, seed, stream)
}

/// Central differences of `z` at up to 64 spread entries of `x`, skipping
/// entries where `kink` reports a non-differentiable point within the step.
fn kernel_check(x: &Tensor, analytic: &Tensor, z: impl Fn(&Tensor) -> f64, kink: impl Fn(&Tensor, usize) -> bool) -> f64 {
    let n = x.numel();
    let stride = n.div_ceil(64).max(1);
    let mut worst: f64 = 0.0;
    let mut p = x.clone();
    for i in (0..n).step_by(stride) {
        if kink(x, i) {
            continue;
        }
        let orig = x.data()[i];
        p.data_mut()[i] = orig + STEP;
        let zp = z(&p);
        p.data_mut()[i] = orig - STEP;
        let zm = z(&p);
        p.data_mut()[i] = orig;
        worst = worst.max(rel(analytic.data()[i], (zp - zm) / (2.0 * STEP)));
    }
    worst
}

fn smooth(_: &Tensor, _: usize) -> bool {
    false
}

/// Max relative error per layer kind, each on a random shape of at most 16×16×8.
fn layer_kind_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, c) = (rng.random_range(1..=16), rng.random_range(1..=16), rng.random_range(1..=8));
    let x = rand_tensor(&[h, w, c], seed, 0);
    let mut out = Vec::new();

    let k = rng.random_range(1..=3usize.min(h).min(w));
    let cout = rng.random_range(1..=8);
    let geo = ConvGeometry { stride: rng.random_range(1..=2), pad: rng.random_range(0..=1) };
    let kern = rand_tensor(&[k, k, c, cout], seed, 1);
    let bias = rand_tensor(&[cout], seed, 2);
    let y = tensor::conv2d(&x, &kern, &bias, geo).unwrap();
    let r = rand_tensor(y.dims(), seed, 3);
    let g = tensor::conv2d_backward(&x, &kern, &r, geo).unwrap();
    let z = |x: &Tensor, k: &Tensor, b: &Tensor| tensor::conv2d(x, k, b, geo).unwrap().dot(&r);
    let e = kernel_check(&x, &g.input, |p| z(p, &kern, &bias), smooth)
        .max(kernel_check(&kern, &g.kernels, |p| z(&x, p, &bias), smooth))
        .max(kernel_check(&bias, &g.bias, |p| z(&x, &kern, p), smooth));
    out.push(("conv", e));

    let r = rand_tensor(x.dims(), seed, 4);
    let g = tensor::relu_backward(&x, &r).unwrap();
    out.push(("relu", kernel_check(&x, &g, |p| tensor::relu(p).dot(&r), |x, i| x.data()[i].abs() <= STEP)));

    let win = rng.random_range(1..=2usize.min(h).min(w));
    let stride = rng.random_range(1..=2usize.min(h).min(w));
    let (y, arg) = tensor::maxpool2d(&x, win, stride).unwrap();
    let r = rand_tensor(y.dims(), seed, 5);
    let g = tensor::maxpool2d_backward(x.shape(), &arg, &r).unwrap();
    let flips = |x: &Tensor, i: usize| {
        let mut p = x.clone();
        [STEP, -STEP].iter().any(|&d| {
            p.data_mut()[i] = x.data()[i] + d;
            tensor::maxpool2d(&p, win, stride).unwrap().1 != arg
        })
    };
    out.push(("maxpool", kernel_check(&x, &g, |p| tensor::maxpool2d(p, win, stride).unwrap().0.dot(&r), flips)));

    let r = rand_tensor(&[1, 1, c], seed, 6);
    let g = tensor::global_avg_pool_backward(x.shape(), &r).unwrap();
    out.push(("global_avg_pool", kernel_check(&x, &g, |p| tensor::global_avg_pool(p).unwrap().dot(&r), smooth)));

    let r = rand_tensor(x.dims(), seed, 7);
    let g = tensor::l2_normalize_backward(&x, &r, 1e-12).unwrap();
    out.push(("l2_normalize", kernel_check(&x, &g, |p| tensor::l2_normalize(p, 1e-12).unwrap().dot(&r), smooth)));

    let classes = rng.random_range(2..=10);
    let wt = rand_tensor(&[x.numel(), classes], seed, 8);
    let b = rand_tensor(&[classes], seed, 9);
    let r = rand_tensor(&[1, 1, classes], seed, 10);
    let g = tensor::fully_connected_backward(&x, &wt, &r).unwrap();
    let z = |x: &Tensor, w: &Tensor, b: &Tensor| tensor::fully_connected(x, w, b).unwrap().dot(&r);
    let e = kernel_check(&x, &g.input, |p| z(p, &wt, &b), smooth)
        .max(kernel_check(&wt, &g.weights, |p| z(&x, p, &b), smooth))
        .max(kernel_check(&b, &g.bias, |p| z(&x, &wt, p), smooth));
    out.push(("fully_connected", e));

    let x2 = rand_tensor(x.dims(), seed, 11);
    let r = rand_tensor(x.dims(), seed, 12);
    let g = tensor::add_n_backward(&r, 2);
    let e = kernel_check(&x, &g[0], |p| tensor::add_n(&[p, &x2]).unwrap().dot(&r), smooth)
        .max(kernel_check(&x2, &g[1], |p| tensor::add_n(&[&x, p]).unwrap().dot(&r), smooth));
    out.push(("add", e));

    let logits = rand_tensor(&[1, 1, classes], seed, 13).scale(3.0);
    let label = rng.random_range(0..classes);
    let (_, g) = tensor::softmax_cross_entropy(&logits, label).unwrap();
    out.push(("softmax_loss", kernel_check(&logits, &g, |p| tensor::softmax_cross_entropy(p, label).unwrap().0, smooth)));
    out
}

fn four_layer_chain(seed: u64) -> BackboneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc4a1);
    let input = [rng.random_range(3..=16), rng.random_range(3..=16), rng.random_range(1..=8)];
    let conv = |c| BackboneLayer::Conv { kernel: 3, out_channels: c, stride: 1, pad: 1 };
    let layers = vec![conv(rng.random_range(1..=8)), BackboneLayer::Relu, conv(rng.random_range(1..=8)), BackboneLayer::Relu];
    BackboneSpec::new(input, layers).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst: HashMap<String, f64> = HashMap::new();
    let mut note = |name: String, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    };
    for seed in 0..5 {
        for (kind, e) in layer_kind_errors(seed) {
            note(kind.to_string(), e);
        }
        let bb = four_layer_chain(seed);
        let classes = 2 + seed as usize % 5;
        let g = build_chain(&bb, classes, &InitScheme::Standard { seed, head_std: HEAD_STD }).unwrap();
        let opts = GradCheckOptions { seed, step: STEP, floor: DENOM_FLOOR, ..Default::default() };
        let rep = gradient_check(&g, &random_input(&g, seed), seed as usize % classes, &opts).unwrap();
        note("chain".into(), rep.max_rel_error);
        for taps in 2..=5 {
            let bb = random_backbone(seed * 10 + taps as u64, 5, 16, 8);
            let relus = bb.relu_layers();
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 100 + taps as u64);
            let mut chosen = relus.clone();
            while chosen.len() > taps {
                chosen.remove(rng.random_range(0..chosen.len()));
            }
            let g = build_multiscale(&bb, &TapSet::new(chosen, &bb).unwrap(), 5, &InitScheme::Standard { seed, head_std: HEAD_STD })
                .unwrap();
            let opts = GradCheckOptions { seed, step: STEP, floor: DENOM_FLOOR, max_entries: 24, ..Default::default() };
            let rep = gradient_check(&g, &random_input(&g, seed), seed as usize % 5, &opts).unwrap();
            note(format!("dag-{taps}taps"), rep.max_rel_error);
        }
    }
    let elapsed = start.elapsed();
    let max = worst.values().copied().fold(0.0, f64::max);
    let mut names: Vec<_> = worst.iter().collect();
    names.sort_by(|a, b| a.0.cmp(b.0));
    let listing: Vec<String> = names.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    outcome(
        max < GRAD_TOL && within(elapsed, 120),
        format!("max rel. error {max:.2e} (< {GRAD_TOL:e}) in {:.1}s; {}", elapsed.as_secs_f64(), listing.join(", ")),
    )
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut largest = 0;
    for seed in 0..50 {
        let g = random_dag(seed, 12, 4);
        largest = largest.max(g.len());
        let mut ctx = g.new_context();
        g.forward(&mut ctx, &random_input(&g, seed), seed as usize % 4).unwrap();
        let fast = g.backward(&mut ctx).unwrap();
        let reference = g.backward_reference(&mut ctx).unwrap();
        worst = worst.max(fast.max_abs_diff(&reference));
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-12 && largest <= 12 && within(elapsed, 60),
        format!("max |fast - reference| = {worst:.1e} (<= 1e-12) over 50 DAGs of <= {largest} nodes in {:.2}s", elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Outcome {
    let mut loss_diff: f64 = 0.0;
    let mut grad_diff: f64 = 0.0;
    for seed in 0..10 {
        let bb = random_backbone(seed + 500, 1 + seed as usize % 4, 16, 8);
        let init = InitScheme::Uniform { seed, scale: 0.5 };
        let dag = build_multiscale(&bb, &TapSet::last(&bb), 6, &init).unwrap();
        let chain = build_chain(&bb, 6, &init).unwrap();
        let x = random_input(&chain, seed);
        let (mut cd, mut cc) = (dag.new_context(), chain.new_context());
        let label = seed as usize % 6;
        loss_diff = loss_diff.max((dag.forward(&mut cd, &x, label).unwrap() - chain.forward(&mut cc, &x, label).unwrap()).abs());
        let gd = dag.backward(&mut cd).unwrap();
        let gc = chain.backward(&mut cc).unwrap();
        for (node, k) in chain.param_slots() {
            grad_diff = grad_diff.max(gd.get(node, k).max_abs_diff(gc.get(node, k)).unwrap());
        }
    }
    outcome(
        loss_diff <= 1e-12 && grad_diff <= 1e-12,
        format!("10 instantiations: max loss diff {loss_diff:.1e}, max shared-gradient diff {grad_diff:.1e} (<= 1e-12)"),
    )
}

// ---------------------------------------------------------------- criterion 4

type Table = HashMap<Vec<usize>, f64>;

fn lookup(t: &Table, s: &[usize]) -> f64 {
    t.get(s).copied().unwrap_or(0.0)
}

fn brute_force_greedy(candidates: &[usize], t: &Table) -> Vec<(usize, f64)> {
    let mut remaining: Vec<usize> = candidates.to_vec();
    remaining.sort();
    let mut current: Vec<usize> = Vec::new();
    let mut score = 0.0;
    let mut trace = Vec::new();
    while !remaining.is_empty() {
        let mut options: Vec<(f64, usize)> = remaining
            .iter()
            .map(|&c| {
                let mut s = current.clone();
                s.push(c);
                s.sort();
                (lookup(t, &s), c)
            })
            .collect();
        options.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let (v, c) = options[0];
        if v <= score {
            break;
        }
        score = v;
        trace.push((c, v));
        current.push(c);
        remaining.retain(|&r| r != c);
    }
    trace
}

fn subsets(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (1..(1usize << n)).map(move |m| (0..n).filter(|b| m >> b & 1 == 1).collect())
}

fn criterion_4() -> Outcome {
    let t = |e: &[(&[usize], f64)]| -> Table { e.iter().map(|(k, v)| (k.to_vec(), *v)).collect() };
    let (a, b, c) = (1, 2, 3);
    let mut cases: Vec<(&str, Vec<usize>, Table)> = vec![
        ("worked example", vec![a, b, c], t(&[(&[a], 0.5), (&[b], 0.6), (&[a, b], 0.7), (&[b, c], 0.55), (&[a, b, c], 0.65)])),
        ("single positive", vec![4], t(&[(&[4], 0.3)])),
        ("single zero", vec![4], t(&[])),
        ("constant", vec![0, 1, 2, 3, 4], subsets(5).map(|s| (s, 0.4)).collect()),
        ("size-proportional", vec![0, 1, 2, 3, 4], subsets(5).map(|s| { let v = s.len() as f64; (s, v) }).collect()),
        ("ties", vec![1, 3, 6], t(&[(&[1], 0.5), (&[3], 0.5), (&[6], 0.5), (&[1, 3], 0.5), (&[1, 6], 0.6), (&[3, 6], 0.6)])),
        ("late gain", vec![2, 5, 7, 9], t(&[(&[9], 0.4), (&[2, 9], 0.41), (&[2, 7, 9], 0.9), (&[2, 5, 7, 9], 0.95)])),
    ];
    for seed in 0..40u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=5);
        let table = subsets(n).map(|s| (s, f64::from(rng.random_range(0..6u8)) / 5.0)).collect();
        cases.push(("quantized random", (0..n).collect(), table));
    }
    let mut mismatches = Vec::new();
    for (name, cands, table) in &cases {
        let trace = forward_select::<(), _>(cands, |s| Ok(lookup(table, s))).unwrap();
        let got: Vec<(usize, f64)> = trace.steps.iter().map(|&SelectionStep { layer, score }| (layer, score)).collect();
        if got != brute_force_greedy(cands, table) {
            mismatches.push(*name);
        }
    }
    let worked = forward_select::<(), _>(&cases[0].1, |s| Ok(lookup(&cases[0].2, s))).unwrap();
    let worked_ok = worked.steps == [SelectionStep { layer: b, score: 0.6 }, SelectionStep { layer: a, score: 0.7 }];
    outcome(
        mismatches.is_empty() && worked_ok,
        format!("{} scorers, {} mismatches {mismatches:?}; worked example trace {:?}", cases.len(), mismatches.len(), worked.steps),
    )
}

// ------------------------------------------------------------ criteria 5 to 7

fn task() -> (BackboneSpec, dagcnn::data::Dataset) {
    let data = synth_multiscale(&SynthTaskConfig { size: TASK_SIZE, seed: TASK_SEED, ..Default::default() }).unwrap();
    (toy_backbone([TASK_SIZE, TASK_SIZE, 1]).unwrap(), data)
}

fn finetune_config() -> TrainConfig {
    TrainConfig { lr: 0.01, momentum: 0.9, batch_size: 32, epochs: 10, seed: TASK_SEED, ..Default::default() }
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let (bb, data) = task();
    let convs = bb.conv_layers().len();
    let cmp = grad_trace_experiment(&bb, &TapSet::all(&bb), &data, &InitScheme::standard(TASK_SEED), &finetune_config()).unwrap();
    let elapsed = start.elapsed();
    let series: Vec<String> = cmp.ratio.iter().map(|r| format!("{r:.2}")).collect();
    let min = cmp.ratio.iter().copied().fold(f64::INFINITY, f64::min);
    outcome(
        convs >= 6 && cmp.ratio.len() == 10 && min > 1.0 && within(elapsed, 600),
        format!("{convs}-conv backbone, DAG/chain first-conv |grad| ratio per epoch [{}], min {min:.2} (> 1) in {:.0}s", series.join(", "), elapsed.as_secs_f64()),
    )
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let (bb, data) = task();
    let ft = finetune_config();
    let ots = TrainConfig { lr: 0.5, mode: TrainMode::Ots, ..ft.clone() };
    let cfg = DiagnoseConfig { ots, finetune: ft };
    let rep = diagnose_matrix(&bb, &TapSet::all(&bb), &data, &InitScheme::standard(TASK_SEED), &cfg, None).unwrap();
    let elapsed = start.elapsed();
    let acc = |m, mode| rep.cell(m, mode).test_accuracy;
    let ft_margin = acc(ModelKind::Dag, TrainMode::FineTune) - acc(ModelKind::Chain, TrainMode::FineTune);
    let ots_margin = acc(ModelKind::Dag, TrainMode::Ots) - acc(ModelKind::Chain, TrainMode::Ots);
    outcome(
        ft_margin >= 0.0 && ots_margin >= 0.0 && within(elapsed, 900),
        format!(
            "test accuracy chain-ots {:.3}, chain-ft {:.3}, dag-ots {:.3}, dag-ft {:.3}; margins ft {ft_margin:+.3}, ots {ots_margin:+.3} in {:.0}s",
            acc(ModelKind::Chain, TrainMode::Ots),
            acc(ModelKind::Chain, TrainMode::FineTune),
            acc(ModelKind::Dag, TrainMode::Ots),
            acc(ModelKind::Dag, TrainMode::FineTune),
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_7() -> Outcome {
    let (bb, data) = task();
    let g = build_multiscale(&bb, &TapSet::all(&bb), data.num_classes, &InitScheme::standard(TASK_SEED)).unwrap();
    let bank = extract_bank(&g, &data, &bb.relu_layers(), &[Split::Train, Split::Val], true).unwrap();
    let rows = pooled_vs_full(&bank, &LinearHeadConfig::default()).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for r in &rows {
        let ok = r.pooled_val >= r.full_val && r.full_train >= r.pooled_train;
        pass &= ok;
        parts.push(format!(
            "L{} val {:.3}/{:.3} train {:.3}/{:.3}{}",
            r.layer,
            r.pooled_val,
            r.full_val,
            r.full_train,
            r.pooled_train,
            if ok { "" } else { " (violated)" }
        ));
    }
    outcome(pass, format!("pooled/full val, full/pooled train: {}", parts.join("; ")))
}

// ---------------------------------------------------------------- criterion 8

fn dagcnn(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_dagcnn")).args(args).output().expect("running dagcnn");
    let text = format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    (out.status.code().unwrap_or(-1), text)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Every file in an output directory except the manifest, by name.
fn output_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file() && p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn write_small_config(dir: &Path) -> PathBuf {
    let cfg = dir.join("small.toml");
    fs::write(
        &cfg,
        "seed = 5\ntaps = \"auto\"\n[synth]\nsize = 16\ntrain_per_class = 2\nval_per_class = 2\ntest_per_class = 2\n\
         [train]\nepochs = 2\nbatch_size = 8\n[ots]\nepochs = 1\nbatch_size = 8\n[probe]\niterations = 50\n",
    )
    .unwrap();
    cfg
}

fn criterion_8(work: &Path) -> Outcome {
    let cfg = write_small_config(work);
    let data = work.join("data");
    let runs: Vec<(&str, Vec<String>)> = vec![
        ("gen-synth", vec!["gen-synth".into(), "--config".into(), p(&cfg).into()]),
        ("train", vec!["train".into(), "--config".into(), p(&cfg).into(), "--data".into(), p(&data).into()]),
        ("select", vec!["select".into(), "--config".into(), p(&cfg).into(), "--data".into(), p(&data).into(), "--full".into()]),
        ("eval", vec!["eval".into(), "--data".into(), p(&data).into(), "--split".into(), "val".into()]),
        ("retrieve", vec!["retrieve".into(), "--data".into(), p(&data).into(), "--layer".into(), "3".into(), "--layer".into(), "13".into()]),
        ("diagnose", vec!["diagnose".into(), "--config".into(), p(&cfg).into(), "--data".into(), p(&data).into()]),
        ("gradtrace", vec!["diagnose".into(), "--gradtrace".into(), "--config".into(), p(&cfg).into(), "--data".into(), p(&data).into()]),
        ("gradcheck", vec!["diagnose".into(), "--gradcheck".into(), "--seed".into(), "7".into()]),
    ];
    let mut failures = Vec::new();
    let mut compared = 0;
    for jobs in ["1", "2"] {
        for (name, args) in &runs {
            let out = work.join(format!("{name}-j{jobs}"));
            let mut full: Vec<String> = vec!["--jobs".into(), jobs.into()];
            full.extend(args.iter().cloned());
            full.extend(["--out".into(), p(&out).into()]);
            if matches!(*name, "select" | "eval" | "retrieve") {
                full.extend(["--model".into(), p(&work.join("train-j1/model.dagnet")).into()]);
            }
            if *name == "gen-synth" && jobs == "1" {
                fs::create_dir_all(&data).unwrap();
            }
            let args: Vec<&str> = full.iter().map(String::as_str).collect();
            let (code, text) = dagcnn(&args);
            if code != 0 {
                failures.push(format!("{name} --jobs {jobs} exited {code}: {}", text.lines().last().unwrap_or("")));
                continue;
            }
            if *name == "gen-synth" && jobs == "1" {
                for f in fs::read_dir(&out).unwrap() {
                    let f = f.unwrap().path();
                    if f.extension().is_some_and(|e| e == "idx") {
                        fs::copy(&f, data.join(f.file_name().unwrap())).unwrap();
                    }
                }
            }
            if jobs == "1" {
                let (code, text) = dagcnn(&["rerun", "--manifest", p(&out.join("manifest.json"))]);
                compared += 1;
                if code != 0 || output_files(&out) != output_files(&out.join("rerun")) {
                    failures.push(format!("{name} rerun exited {code}: {}", text.lines().last().unwrap_or("")));
                }
            } else if output_files(&out) != output_files(&work.join(format!("{name}-j1"))) {
                failures.push(format!("{name}: --jobs 1 and --jobs 2 outputs differ"));
            }
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{compared} commands rerun from manifests bit-identically; --jobs 1 and --jobs 2 outputs identical")
        } else {
            failures.join("; ")
        },
    )
}

// ---------------------------------------------------------------- criterion 9

fn criterion_9(work: &Path) -> Outcome {
    let mut problems = Vec::new();
    let mut models = 0;
    for seed in 0..20 {
        let g = random_dag(seed, 12, 3);
        let mut bytes = Vec::new();
        write_model(&g, &mut bytes).unwrap();
        let back = read_model(&mut bytes.as_slice()).unwrap();
        let mut again = Vec::new();
        write_model(&back, &mut again).unwrap();
        if again != bytes || back != g {
            problems.push(format!("model seed {seed} not byte-exact"));
        }
        models += 1;
        let mut bad = bytes.clone();
        bad[1] ^= 0x20;
        if !matches!(read_model(&mut bad.as_slice()), Err(ModelFormatError::BadMagic)) {
            problems.push(format!("model seed {seed}: corrupted magic accepted"));
        }
        for cut in [0, 7, bytes.len() / 3, bytes.len() - 1] {
            if !matches!(read_model(&mut &bytes[..cut]), Err(ModelFormatError::Truncated)) {
                problems.push(format!("model seed {seed}: truncation at {cut} not reported"));
            }
        }
    }

    let ds = synth_multiscale(&SynthTaskConfig { size: 12, train_per_class: 1, val_per_class: 1, test_per_class: 1, seed: 9, ..Default::default() })
        .unwrap();
    let (d1, d2) = (work.join("idx1"), work.join("idx2"));
    let written = data::write_idx_dir(&ds, &d1).unwrap();
    let back = data::load_idx_dir(&d1).unwrap();
    data::write_idx_dir(&back, &d2).unwrap();
    for f in &written {
        let name = f.file_name().unwrap();
        if fs::read(f).unwrap() != fs::read(d2.join(name)).unwrap() {
            problems.push(format!("IDX {name:?} not byte-exact"));
        }
    }
    let arr = IdxArray { dims: vec![2, 4, 4], data: (0..32).collect() };
    let mut bytes = Vec::new();
    data::write_idx(&mut bytes, &arr).unwrap();
    if data::read_idx(&mut bytes.as_slice(), "mem").unwrap() != arr {
        problems.push("IDX array round trip".into());
    }
    let mut bad = bytes.clone();
    bad[1] = 0x55;
    if !matches!(data::read_idx(&mut bad.as_slice(), "mem"), Err(DataError::BadMagic { .. })) {
        problems.push("IDX corrupted magic accepted".into());
    }
    for cut in [2, 8, bytes.len() - 1] {
        if !matches!(data::read_idx(&mut &bytes[..cut], "mem"), Err(DataError::Truncated { .. })) {
            problems.push(format!("IDX truncation at {cut} not reported"));
        }
    }

    let model = work.join("corrupt.dagnet");
    let mut bytes = Vec::new();
    write_model(&random_dag(1, 10, 3), &mut bytes).unwrap();
    bytes[0] = b'X';
    fs::write(&model, &bytes).unwrap();
    let (code, text) = dagcnn(&["eval", "--model", p(&model), "--data", p(&d1), "--out", p(&work.join("corrupt-eval"))]);
    if code != 2 || !text.contains("bad magic") {
        problems.push(format!("CLI on corrupted model exited {code}: {}", text.trim()));
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!("{models} models and {} IDX files byte-exact; bad magic and truncation rejected (CLI exit 2)", written.len())
        } else {
            problems.join("; ")
        },
    )
}

// --------------------------------------------------------------- criterion 10

fn criterion_10(work: &Path) -> Outcome {
    let cfg = write_small_config(work);
    let data = work.join("data");
    if !data.join("train-images.idx").exists() {
        let (code, text) = dagcnn(&["gen-synth", "--config", p(&cfg), "--out", p(&data)]);
        if code != 0 {
            return outcome(false, format!("gen-synth exited {code}: {}", text.trim()));
        }
    }
    let out = work.join("ots");
    let (code, text) = dagcnn(&[
        "train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out), "--mode", "ots", "--taps", "3,8,13", "--lr", "0.5",
    ]);
    if code != 0 {
        return outcome(false, format!("train --mode ots exited {code}: {}", text.trim()));
    }
    let trained = load_model(out.join("model.dagnet")).unwrap();
    let bb = BackboneSpec::from_graph(&trained).unwrap();
    let taps = TapSet::new(vec![3, 8, 13], &bb).unwrap();
    let init = build_multiscale(&bb, &taps, trained.num_classes().unwrap(), &InitScheme::standard(5)).unwrap();
    let mut backbone_changed = Vec::new();
    let mut heads_changed = 0;
    let mut backbone_params = 0;
    for (a, b) in init.nodes().iter().zip(trained.nodes()) {
        let same = a.params().iter().zip(b.params()).all(|(x, y)| {
            x.value.data().iter().zip(y.value.data()).all(|(u, v)| u.to_bits() == v.to_bits())
        });
        match a.kind() {
            LayerKind::FullyConnected { .. } => heads_changed += usize::from(!same),
            LayerKind::Conv { .. } => {
                backbone_params += 1;
                if !same {
                    backbone_changed.push(a.id());
                }
            }
            _ => {}
        }
    }
    outcome(
        backbone_changed.is_empty() && heads_changed == taps.len() && init.len() == trained.len(),
        format!(
            "{backbone_params} conv layers bit-identical to init (changed: {backbone_changed:?}); {heads_changed}/{} FC heads updated",
            taps.len()
        ),
    )
}

type Criterion<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn main() {
    let work = tempfile::tempdir().expect("temporary directory");
    let criteria: Vec<(&str, Criterion)> = vec![
        ("gradient correctness", Box::new(criterion_1)),
        ("fast-path equivalence", Box::new(criterion_2)),
        ("chain recovery", Box::new(criterion_3)),
        ("greedy-selection oracle", Box::new(criterion_4)),
        ("vanishing-gradient analog", Box::new(criterion_5)),
        ("multi-scale benefit analog", Box::new(criterion_6)),
        ("pooling trend", Box::new(criterion_7)),
        ("determinism", Box::new(|| criterion_8(work.path()))),
        ("format round-trips", Box::new(|| criterion_9(work.path()))),
        ("OTS freeze contract", Box::new(|| criterion_10(work.path()))),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(run))
            .unwrap_or_else(|e| outcome(false, format!("panicked: {:?}", e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())))));
        failed += usize::from(!result.pass);
        println!("[{}] {n:>2}. {name}: {}", if result.pass { "PASS" } else { "FAIL" }, result.detail);
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
