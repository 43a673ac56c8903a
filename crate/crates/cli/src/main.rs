//! `dagcnn`: command-line front end for multi-scale DAG networks.

mod commands;
mod config;
mod manifest;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use dagcnn::data::Split;
use dagcnn::train::TrainMode;

use commands::{execute, DiagnoseTask, Invocation};
use config::{parse_mode, ExperimentConfig, Overrides, TapChoice};
use manifest::{digest, RunManifest, MANIFEST_NAME};

/// An error caused by bad arguments or unusable inputs (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "dagcnn", version, about = "Multi-scale DAG convolutional networks")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// all, last, auto, or a comma-separated list of backbone ReLU layers.
    #[arg(long, value_parser = commands::taps_arg)]
    taps: Option<TapChoice>,
    /// finetune or ots.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<TrainMode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(self.config.as_deref())?.resolve(&Overrides {
            seed: self.seed,
            taps: self.taps.clone(),
            mode: self.mode,
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
        })
    }
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split `{s}` (expected train, val or test)")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic coarse/fine task as IDX files.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Image side length.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train a network and write model.dagnet and metrics.csv.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Copy backbone parameters from this model before training.
        #[arg(long)]
        init_model: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a model on one split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Per-layer probes, per-class best layers and greedy tap selection.
    Select {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also compare pooled against full (unpooled) features.
        #[arg(long)]
        full: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Chain/DAG comparison, gradient check or gradient-magnitude trace.
    Diagnose {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, conflicts_with = "gradtrace")]
        gradcheck: bool,
        #[arg(long)]
        gradtrace: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Nearest neighbours of a query image by pooled features.
    Retrieve {
        #[arg(long)]
        model: PathBuf,
        /// Gallery dataset.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "train", value_parser = parse_split)]
        split: Split,
        /// Dataset holding the query (default: the gallery dataset).
        #[arg(long)]
        query_data: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        query_split: Split,
        /// Index of the query within its split.
        #[arg(long, default_value_t = 0)]
        query: usize,
        /// Backbone ReLU layer; repeat for several.
        #[arg(long = "layer", required = true)]
        layers: Vec<usize>,
        #[arg(short, default_value_t = 7)]
        m: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Re-execute a run from its manifest and compare output digests.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for the rerun (default: a sibling `rerun` directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn plain_config(path: Option<PathBuf>) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path.as_deref())?.resolve(&Overrides::default())
}

fn invocation(cmd: Command) -> Result<Invocation> {
    Ok(match cmd {
        Command::GenSynth { out, config, seed, size } => {
            let mut cfg = ExperimentConfig::load(config.as_deref())?;
            let mut synth = cfg.synth.clone();
            if let Some(s) = seed.or(config.is_some().then_some(cfg.seed)) {
                synth.seed = s;
            }
            if let Some(s) = size {
                synth.size = s;
            }
            cfg.synth = synth.clone();
            Invocation::GenSynth { synth, out }
        }
        Command::Train { data, out, init_model, common } => {
            Invocation::Train { config: common.resolve()?, data, init_model, out }
        }
        Command::Eval { model, data, split, out, config } => {
            Invocation::Eval { config: plain_config(config)?, model, data, split, out }
        }
        Command::Select { model, data, out, full, common } => {
            Invocation::Select { config: common.resolve()?, model, data, full, out }
        }
        Command::Diagnose { data, out, gradcheck, gradtrace, common } => {
            let task = if gradcheck {
                DiagnoseTask::GradCheck
            } else if gradtrace {
                DiagnoseTask::GradTrace
            } else {
                DiagnoseTask::Matrix
            };
            Invocation::Diagnose { config: common.resolve()?, data, task, out }
        }
        Command::Retrieve { model, data, split, query_data, query_split, query, layers, m, out, config } => {
            Invocation::Retrieve {
                config: plain_config(config)?,
                model,
                gallery: data,
                gallery_split: split,
                query_data,
                query_split,
                query_index: query,
                layers,
                m,
                out,
            }
        }
        Command::Rerun { .. } => unreachable!("rerun has no invocation"),
    })
}

/// Runs one invocation and writes its manifest; returns the manifest and exit status.
fn run(inv: &Invocation, jobs: usize) -> Result<(RunManifest, i32)> {
    let start = Instant::now();
    let outcome = execute(inv)?;
    let mut outputs = outcome.outputs;
    if let Invocation::Train { .. } | Invocation::Select { .. } | Invocation::Diagnose { .. } = inv {
        if !outputs.dir().join("config.toml").exists() {
            let cfg = match inv {
                Invocation::Select { config, .. } | Invocation::Diagnose { config, .. } => config,
                _ => unreachable!(),
            };
            outputs.write_string("config.toml", &cfg.to_toml()?)?;
        }
    }
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: inv.name().to_string(),
        seed: inv.seed(),
        invocation: inv.clone(),
        inputs: outcome.inputs,
        outputs: outputs.digests()?,
        summary: outcome.summary,
        jobs,
        duration_secs: start.elapsed().as_secs_f64(),
    };
    manifest.save(outputs.dir())?;
    Ok((manifest, outcome.status))
}

fn rerun(path: &Path, out: Option<PathBuf>, jobs: usize) -> Result<i32> {
    let path = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
    if !path.exists() {
        bail!(UsageError(format!("manifest {} does not exist", path.display())));
    }
    let original = RunManifest::load(&path).map_err(|e| UsageError(format!("{e:#}")))?;
    for input in &original.inputs {
        let p = Path::new(&input.path);
        if !p.exists() {
            bail!(UsageError(format!("input {} is missing", input.path)));
        }
        if digest(p, input.path.clone())?.sha256 != input.sha256 {
            bail!(UsageError(format!("input {} changed since the recorded run", input.path)));
        }
    }
    let mut inv = original.invocation.clone();
    let out = out.unwrap_or_else(|| inv.out().join("rerun"));
    inv.set_out(out.clone());
    let (fresh, _) = run(&inv, jobs)?;
    let mut mismatches = 0;
    for o in &original.outputs {
        match fresh.outputs.iter().find(|f| f.path == o.path) {
            Some(f) if f.sha256 == o.sha256 => println!("match     {}", o.path),
            Some(_) => {
                println!("MISMATCH  {}", o.path);
                mismatches += 1;
            }
            None => {
                println!("MISSING   {}", o.path);
                mismatches += 1;
            }
        }
    }
    for f in fresh.outputs.iter().filter(|f| !original.outputs.iter().any(|o| o.path == f.path)) {
        println!("EXTRA     {}", f.path);
        mismatches += 1;
    }
    if mismatches == 0 {
        println!("rerun reproduced all {} outputs in {}", original.outputs.len(), out.display());
        Ok(0)
    } else {
        println!("{mismatches} output(s) differ");
        Ok(1)
    }
}

fn real_main(cli: Cli) -> Result<i32> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            bail!(UsageError("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global()?;
    }
    let jobs = rayon::current_num_threads();
    match cli.cmd {
        Command::Rerun { manifest, out } => rerun(&manifest, out, jobs),
        cmd => {
            let inv = invocation(cmd)?;
            let (_, status) = run(&inv, jobs)?;
            Ok(status)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match real_main(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<UsageError>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
