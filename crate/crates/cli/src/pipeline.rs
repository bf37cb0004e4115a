//! Model construction, the two training stages and evaluation, shared by the
//! commands and the ablation harness.

use std::collections::HashMap;

use m3net_core::encoders::{Encoder, Head};
use m3net_core::metrics::{evaluate, MetricsReport, PredictionRow, PredictionSet};
use m3net_core::numerics::ParamStore;
use m3net_core::training::{
    predict, stage1_pretrain, stage2_fuse, LogRecord, M3Net, ModelConfig, Predictions, Stage1Summary, Stage2Summary,
};
use m3net_core::volume_io::NestedPatchSet;
use m3net_core::Result;

use crate::config::RunConfig;
use crate::data::Dataset;

pub fn build(cfg: &RunConfig, seed: u64) -> Result<(M3Net, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let net = M3Net::new(&cfg.encoders, &cfg.fusion, &mut store, seed)?;
    Ok((net, store))
}

/// Stage-1 weights of single scales, reused across runs that would train
/// them identically.
///
/// A scale's stage-1 result depends only on its own initialisation stream,
/// the training settings, the data and the seed, never on which other scales
/// share the model, so a variant that only changes fusion, loss weights or
/// the set of scales can start from the cached encoder and head. Callers keep
/// one cache per dataset.
#[derive(Default)]
pub struct Stage1Cache {
    entries: HashMap<String, (ParamStore<f32>, Stage1Summary)>,
}

impl Stage1Cache {
    fn key(cfg: &RunConfig, scale: usize, seed: u64) -> String {
        let t = &cfg.training;
        format!(
            "{scale}|{seed}|{:?}|{}|{}|{}|{}|{}|{}|{}|{}",
            cfg.encoders.preset,
            t.stage1_epochs,
            t.batch_size,
            t.lr_max,
            t.lr_min,
            t.weight_decay,
            t.l2,
            t.augment,
            cfg.encoders.freeze_fraction
        )
    }

    /// Bring every scale of `net` to its stage-1 state, training only the
    /// scales not cached yet. Returns summaries in ascending scale order.
    pub fn pretrain(
        &mut self,
        cfg: &RunConfig,
        net: &M3Net,
        store: &mut ParamStore<f32>,
        data: &Dataset,
        seed: u64,
        log: &mut Vec<LogRecord>,
    ) -> Result<Vec<Stage1Summary>> {
        let mut out = Vec::new();
        for &s in net.scales() {
            let key = Self::key(cfg, s, seed);
            if !self.entries.contains_key(&key) {
                let single = RunConfig {
                    encoders: ModelConfig {
                        scales: vec![s],
                        ..cfg.encoders.clone()
                    },
                    ..cfg.clone()
                };
                let (one, mut one_store) = build(&single, seed)?;
                let summary = stage1_pretrain(
                    &one,
                    &mut one_store,
                    &single.encoders,
                    &cfg.training,
                    &data.train,
                    &data.val,
                    seed,
                    log,
                )?;
                self.entries.insert(key.clone(), (one_store, summary[0].clone()));
            }
            let (kept, summary) = &self.entries[&key];
            store.load_values(&kept.subset(&Encoder::prefix(s)))?;
            store.load_values(&kept.subset(&Head::prefix(s)))?;
            out.push(summary.clone());
        }
        Ok(out)
    }
}

/// A model after stage 2 with its training record.
pub struct Fitted {
    pub net: M3Net,
    pub store: ParamStore<f32>,
    pub log: Vec<LogRecord>,
    pub stage1: Vec<Stage1Summary>,
    pub stage2: Stage2Summary,
}

/// Both training stages from fresh initialisation. With a cache, stage 1 is
/// skipped for scales trained before under the same settings.
pub fn fit(cfg: &RunConfig, data: &Dataset, seed: u64, cache: Option<&mut Stage1Cache>) -> Result<Fitted> {
    let (net, mut store) = build(cfg, seed)?;
    let mut log = Vec::new();
    let stage1 = match cache {
        Some(c) => c.pretrain(cfg, &net, &mut store, data, seed, &mut log)?,
        None => stage1_pretrain(
            &net,
            &mut store,
            &cfg.encoders,
            &cfg.training,
            &data.train,
            &data.val,
            seed,
            &mut log,
        )?,
    };
    let stage2 = stage2_fuse(
        &net,
        &mut store,
        &cfg.encoders,
        &cfg.training,
        &cfg.alignment,
        &data.train,
        &data.val,
        seed,
        &mut log,
    )?;
    Ok(Fitted {
        net,
        store,
        log,
        stage1,
        stage2,
    })
}

/// Fused and per-scale predictions with their metric reports.
pub struct Evaluation {
    pub predictions: Predictions,
    pub fused: MetricsReport,
    /// `(scale, report)` in ascending scale order.
    pub per_scale: Vec<(usize, MetricsReport)>,
}

impl Evaluation {
    pub fn rows(&self) -> Vec<PredictionRow> {
        let p = &self.predictions;
        p.source_ids
            .iter()
            .zip(&p.labels)
            .zip(&p.fused)
            .map(|((id, &label), &score)| PredictionRow {
                source_id: id.clone(),
                label,
                score,
            })
            .collect()
    }
}

pub fn evaluate_model(
    cfg: &RunConfig,
    net: &M3Net,
    store: &ParamStore<f32>,
    samples: &[NestedPatchSet],
) -> Result<Evaluation> {
    let predictions = predict(net, store, samples, cfg.training.batch_size)?;
    let report = |scores: &[f64]| {
        let set = PredictionSet::with_threshold(scores.to_vec(), predictions.labels.clone(), cfg.metrics.threshold)?;
        evaluate(&set)
    };
    let fused = report(&predictions.fused)?;
    let per_scale = predictions
        .per_scale
        .iter()
        .map(|(s, scores)| Ok((*s, report(scores)?)))
        .collect::<Result<_>>()?;
    Ok(Evaluation {
        predictions,
        fused,
        per_scale,
    })
}
