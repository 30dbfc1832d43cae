//! The configuration ladder: baseline, edge branch with binary or distance
//! supervision, each with and without cross feature fusion.

use serde::{Deserialize, Serialize};

use super::EdgeTarget;
use super::{train_stage, Case, Stage, TrainConfig, TrainingSet};
use crate::e2net::E2NetConfig;
use crate::error::Result;
use crate::ingest::SliceSample;
use crate::metrics::{dice_per_case, CaseMetrics};
use crate::model::{Model, ModelConfig};
use crate::nn::EncoderConfig;
use crate::pipeline::{segment_volume, InferenceOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationVariant {
    Baseline,
    Edge,
    Dist,
    EdgeDcff,
    DistDcff,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::Baseline,
        AblationVariant::Edge,
        AblationVariant::Dist,
        AblationVariant::EdgeDcff,
        AblationVariant::DistDcff,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Baseline => "baseline",
            AblationVariant::Edge => "+edge",
            AblationVariant::Dist => "+dist",
            AblationVariant::EdgeDcff => "+edge+DCFF",
            AblationVariant::DistDcff => "+dist+DCFF",
        }
    }

    pub fn network(self, encoder: &EncoderConfig) -> E2NetConfig {
        let base = match self {
            AblationVariant::Baseline => E2NetConfig::baseline(),
            AblationVariant::Edge | AblationVariant::Dist => E2NetConfig::two_branch(),
            AblationVariant::EdgeDcff | AblationVariant::DistDcff => E2NetConfig::default(),
        };
        E2NetConfig { encoder: encoder.clone(), ..base }
    }

    pub fn edge_target(self) -> EdgeTarget {
        match self {
            AblationVariant::Edge | AblationVariant::EdgeDcff => EdgeTarget::Binary,
            _ => EdgeTarget::Distance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub liver_dice: f64,
    pub tumor_dice: f64,
    pub parameters: usize,
    pub epochs: usize,
    pub best_val: f64,
}

/// Trains the second stage once per variant with identical seed and budget
/// and scores each through the full pipeline on `eval_cases`.
pub fn run_ablation(
    train_slices: &[SliceSample],
    val_slices: &[SliceSample],
    eval_cases: &[Case],
    stage1: &mut Model,
    encoder: &EncoderConfig,
    cfg: &TrainConfig,
    opts: &InferenceOptions,
) -> Result<Vec<AblationRow>> {
    let train = TrainingSet::new(Stage::Two, train_slices.to_vec())?;
    let mut rows = Vec::new();
    for variant in AblationVariant::ALL {
        let vcfg = TrainConfig { edge_target: variant.edge_target(), ..cfg.clone() };
        let val = TrainingSet::validation_examples(Stage::Two, val_slices, &vcfg)?;
        let mut model = Model::new(ModelConfig::E2net(variant.network(encoder)), cfg.seed)?;
        let report = train_stage(&mut model, &train, &val, &vcfg, None)?;
        let mut metrics = Vec::new();
        for case in eval_cases {
            let seg = segment_volume(&case.ct, stage1, &mut model, opts)?;
            metrics.push(CaseMetrics::evaluate(&seg.to_labels(), &case.labels)?);
        }
        let liver: Vec<_> = metrics.iter().map(|m| m.liver).collect();
        let tumor: Vec<_> = metrics.iter().map(|m| m.tumor).collect();
        let row = AblationRow {
            variant: variant.name().to_string(),
            liver_dice: dice_per_case(&liver)?,
            tumor_dice: dice_per_case(&tumor)?,
            parameters: model.num_trainable(),
            epochs: report.epochs.len(),
            best_val: report.best_val,
        };
        log::info!("ablation {}: liver {:.4} tumor {:.4}", row.variant, row.liver_dice, row.tumor_dice);
        rows.push(row);
    }
    Ok(rows)
}

/// Comma-separated table with one row per variant.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,liver_dice,tumor_dice,parameters,epochs,best_val\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.6},{:.6},{},{},{:.6}\n",
            r.variant, r.liver_dice, r.tumor_dice, r.parameters, r.epochs, r.best_val
        ));
    }
    s
}
