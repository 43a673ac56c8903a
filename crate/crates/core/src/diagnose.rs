//! The chain/DAG × off-the-shelf/fine-tuned comparison.
//!
//! All four networks start from one backbone: either a fresh initialization
//! or the backbone of a supplied pretrained network. Off-the-shelf cells then
//! train only the fully-connected heads; fine-tuned cells train everything.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::graph::Graph;
use crate::multiscale::{build_chain, build_multiscale, copy_backbone, BackboneSpec, InitScheme, TapSet};
use crate::train::{evaluate, train, TrainConfig, TrainError, TrainMode, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Chain,
    Dag,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Chain => "chain",
            ModelKind::Dag => "dag",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnoseCell {
    pub model: ModelKind,
    pub mode: TrainMode,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: f64,
    pub report: TrainReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnoseReport {
    /// Chain-OTS, Chain-FT, DAG-OTS, DAG-FT.
    pub cells: Vec<DiagnoseCell>,
}

impl DiagnoseReport {
    pub fn cell(&self, model: ModelKind, mode: TrainMode) -> &DiagnoseCell {
        self.cells.iter().find(|c| c.model == model && c.mode == mode).expect("all four cells are present")
    }

    /// Columns: `model,mode,train_accuracy,val_accuracy,test_accuracy`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), TrainError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["model", "mode", "train_accuracy", "val_accuracy", "test_accuracy"])?;
        for c in &self.cells {
            let mode = match c.mode {
                TrainMode::Ots => "ots",
                TrainMode::FineTune => "finetune",
            };
            out.write_record([
                c.model.name().to_string(),
                mode.to_string(),
                c.train_accuracy.to_string(),
                c.val_accuracy.map(|v| v.to_string()).unwrap_or_default(),
                c.test_accuracy.to_string(),
            ])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnoseConfig {
    pub ots: TrainConfig,
    pub finetune: TrainConfig,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        DiagnoseConfig {
            ots: TrainConfig { mode: TrainMode::Ots, ..TrainConfig::default() },
            finetune: TrainConfig::default(),
        }
    }
}

/// Trains a chain network end to end, typically on a source task, to serve
/// as the starting backbone of [`diagnose_matrix`].
pub fn pretrain_backbone(
    backbone: &BackboneSpec,
    source: &Dataset,
    init: &InitScheme,
    config: &TrainConfig,
) -> Result<(Graph, TrainReport), TrainError> {
    let mut g = build_chain(backbone, source.num_classes, init)?;
    let config = TrainConfig { mode: TrainMode::FineTune, ..config.clone() };
    let report = train(&mut g, source, &config)?;
    Ok((g, report))
}

pub fn diagnose_matrix(
    backbone: &BackboneSpec,
    taps: &TapSet,
    data: &Dataset,
    init: &InitScheme,
    config: &DiagnoseConfig,
    pretrained: Option<&Graph>,
) -> Result<DiagnoseReport, TrainError> {
    let has_val = !data.indices(Split::Val).is_empty();
    let mut cells = Vec::with_capacity(4);
    for model in [ModelKind::Chain, ModelKind::Dag] {
        for mode in [TrainMode::Ots, TrainMode::FineTune] {
            let mut g = match model {
                ModelKind::Chain => build_chain(backbone, data.num_classes, init)?,
                ModelKind::Dag => build_multiscale(backbone, taps, data.num_classes, init)?,
            };
            if let Some(src) = pretrained {
                copy_backbone(src, &mut g, backbone)?;
            }
            let base = match mode {
                TrainMode::Ots => &config.ots,
                TrainMode::FineTune => &config.finetune,
            };
            let report = train(&mut g, data, &TrainConfig { mode, ..base.clone() })?;
            cells.push(DiagnoseCell {
                model,
                mode,
                train_accuracy: evaluate(&g, data, Split::Train)?.accuracy,
                val_accuracy: if has_val { Some(evaluate(&g, data, Split::Val)?.accuracy) } else { None },
                test_accuracy: evaluate(&g, data, Split::Test)?.accuracy,
                report,
            });
        }
    }
    Ok(DiagnoseReport { cells })
}
