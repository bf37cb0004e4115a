//! Two-stage training: per-scale supervised pretraining, alignment-regularised
//! fusion training, and few-shot fine-tuning with replay.

mod model;
mod optim;
mod run;

pub use model::{init_rng, EncoderPreset, M3Net, ModelConfig, ModelOutput};
pub use optim::{cosine_lr, l2_term, AdamW};
pub use run::{
    accuracy_of, batch_ranges, check_disjoint, encode_features, encode_values, few_shot_finetune, predict,
    select_pairs, stage1_pretrain, stage2_fuse, stage2_objective, FeatureCache, LossParts, Predictions,
    ScaleFeatures, Stage1Summary, Stage2Summary,
};

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::AlignWeights;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub fewshot_epochs: usize,
    pub batch_size: usize,
    /// Peak of the cosine schedule in stage 1.
    pub lr_max: f64,
    /// Peak for stage 2 and few-shot runs; `None` reuses `lr_max`.
    pub lr_fusion: Option<f64>,
    pub lr_min: f64,
    /// Decoupled AdamW decay.
    pub weight_decay: f64,
    /// Coefficient `λ` of the explicit `½λ‖p‖²` term.
    pub l2: f64,
    pub augment: bool,
    /// Keep every encoder and per-scale head fixed in stage 2. When false,
    /// the stages left trainable by the stage-1 partial freeze and the heads
    /// are optimised too.
    pub freeze_backbone: bool,
    /// Drop the per-scale cross-entropy terms from the stage-2 objective.
    pub fused_only_ce: bool,
    /// Number of positive–negative pairs drawn for few-shot replay and target sets.
    pub fewshot_pairs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_epochs: 40,
            stage2_epochs: 40,
            fewshot_epochs: 20,
            batch_size: 8,
            lr_max: 1e-4,
            lr_fusion: None,
            lr_min: 0.0,
            weight_decay: 1e-5,
            l2: 1e-3,
            augment: true,
            freeze_backbone: true,
            fused_only_ce: false,
            fewshot_pairs: 20,
        }
    }
}

impl TrainConfig {
    /// The full-length schedule: 200 epochs at batch 32.
    pub fn full() -> Self {
        TrainConfig {
            stage1_epochs: 200,
            stage2_epochs: 200,
            batch_size: 32,
            ..Self::default()
        }
    }

    pub fn fusion_lr(&self) -> f64 {
        self.lr_fusion.unwrap_or(self.lr_max)
    }

    pub fn validate(&self) -> Result<()> {
        let lrs = [self.lr_max, self.fusion_lr()];
        if lrs.iter().any(|&lr| !(lr.is_finite() && lr > 0.0)) {
            return Err(Error::Config(format!("learning rates must be positive, got {lrs:?}")));
        }
        if !(self.lr_min.is_finite() && self.lr_min >= 0.0 && self.lr_min <= self.lr_max.min(self.fusion_lr())) {
            return Err(Error::Config(format!("lr_min {} outside [0, lr_max]", self.lr_min)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size 0".into()));
        }
        for (name, v) in [("weight_decay", self.weight_decay), ("l2", self.l2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} = {v}")));
            }
        }
        Ok(())
    }

    /// [`validate`](Self::validate) plus the checks that depend on the loss weights.
    pub fn validate_with(&self, align: &AlignWeights) -> Result<()> {
        self.validate()?;
        align.validate()?;
        if align.uses_nce() && self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size {} with InfoNCE enabled; contrastive terms need at least 2 rows",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// One line of the metric log. Loss fields are the weighted contributions, so
/// `loss_total = loss_ce + loss_align + loss_attnreg + loss_l2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: String,
    pub model: String,
    pub epoch: usize,
    pub split: String,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_align: f64,
    pub loss_attnreg: f64,
    pub loss_l2: f64,
    pub acc: f64,
}

pub fn write_log(records: &[LogRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
