use std::collections::HashSet;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::model::{init_rng, M3Net, ModelConfig, ModelOutput};
use super::optim::{cosine_lr, l2_term, AdamW};
use super::{LogRecord, TrainConfig};
use crate::alignment::{align_loss, AlignWeights};
use crate::encoders::{freeze_lower, Encoder, Head, ScaleEmbedding};
use crate::error::{Error, Result};
use crate::fusion::attn_reg;
use crate::numerics::{Bound, ParamStore, Real, Tape, Tensor, Var};
use crate::volume_io::{NestedPatchSet, Transform};

const STREAM_STAGE1: u64 = 10 << 16;
const STREAM_STAGE2: u64 = 11 << 16;
const STREAM_FEWSHOT: u64 = 12 << 16;

/// Consecutive batches of `size`. For `size ≥ 2` a trailing batch of one is
/// merged into the previous batch so every batch has negatives for the
/// contrastive terms.
pub fn batch_ranges(n: usize, size: usize) -> Vec<Range<usize>> {
    let size = size.max(1);
    let mut out: Vec<Range<usize>> = (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
    if size >= 2 && out.len() >= 2 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("len >= 2");
        out.last_mut().expect("len >= 1").end = last.end;
    }
    out
}

fn label_of(p: &NestedPatchSet) -> Result<usize> {
    p.label
        .map(|l| l.index())
        .ok_or_else(|| Error::Manifest(format!("sample `{}` has no label", p.source_id)))
}

fn crop_of(p: &NestedPatchSet, scale: usize) -> Result<&Tensor<f32>> {
    p.crop(scale)
        .ok_or_else(|| Error::Config(format!("sample `{}` has no {scale}-voxel crop", p.source_id)))
}

/// Turn a non-finite value inside a step into a divergence report.
fn at_step(e: Error, stage: &str, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged {
            epoch,
            step,
            detail: format!("{stage}: non-finite value from `{op}`"),
        },
        other => other,
    }
}

fn count_correct<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Weighted loss contributions of one batch; `total` is their sum.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub ce: Var,
    pub align: Var,
    pub attnreg: Var,
    pub l2: Var,
}

impl LossParts {
    fn values<T: Real>(&self, tape: &Tape<T>) -> [f64; 5] {
        [self.total, self.ce, self.align, self.attnreg, self.l2].map(|v| tape.value(v).item().as_f64())
    }
}

/// Sample-weighted means over one epoch.
#[derive(Clone, Debug, Default)]
struct EpochStats {
    n: usize,
    correct: usize,
    sums: [f64; 5],
}

impl EpochStats {
    fn add(&mut self, values: [f64; 5], n: usize, correct: usize) {
        self.n += n;
        self.correct += correct;
        for (s, v) in self.sums.iter_mut().zip(values) {
            *s += v * n as f64;
        }
    }

    fn mean(&self, i: usize) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.sums[i] / self.n as f64
        }
    }

    fn acc(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.correct as f64 / self.n as f64
        }
    }

    fn loss(&self) -> f64 {
        self.mean(0)
    }

    fn record(&self, stage: &str, model: &str, epoch: usize, split: &str) -> LogRecord {
        LogRecord {
            stage: stage.into(),
            model: model.into(),
            epoch,
            split: split.into(),
            loss_total: self.mean(0),
            loss_ce: self.mean(1),
            loss_align: self.mean(2),
            loss_attnreg: self.mean(3),
            loss_l2: self.mean(4),
            acc: self.acc(),
        }
    }
}

/// Best-so-far tracking: higher validation accuracy wins, ties go to the
/// lower validation loss.
struct Best {
    epoch: usize,
    acc: f64,
    loss: f64,
    snapshot: ParamStore<f32>,
}

impl Best {
    fn improves(best: &Option<Best>, acc: f64, loss: f64) -> bool {
        match best {
            None => true,
            Some(b) => acc > b.acc || (acc == b.acc && loss < b.loss),
        }
    }
}

fn zero<T: Real>(tape: &mut Tape<T>) -> Var {
    tape.constant(Tensor::scalar(T::zero()))
}

#[allow(clippy::too_many_arguments)]
fn stage1_loss<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    store: &ParamStore<T>,
    enc: &Encoder,
    head: &Head,
    x: Var,
    labels: &[usize],
    l2: f64,
) -> Result<(Var, LossParts)> {
    let emb = enc.forward(tape, p, x)?;
    let logits = head.forward(tape, p, emb.pooled)?;
    let ce = tape.cross_entropy(logits, labels)?;
    let l2 = l2_term(tape, p, store, l2)?;
    let total = tape.add(ce, l2)?;
    let (align, attnreg) = (zero(tape), zero(tape));
    Ok((
        logits,
        LossParts {
            total,
            ce,
            align,
            attnreg,
            l2,
        },
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Summary {
    pub scale: usize,
    /// 0 when no epoch ran and the initial weights were kept.
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub best_val_loss: f64,
    /// Per-stage trainability left by the partial freeze.
    pub trainable_stages: Vec<bool>,
}

/// Train every scale's encoder and head on its own crop stream, keep the
/// best-validation weights, then freeze the lower encoder stages.
#[allow(clippy::too_many_arguments)]
pub fn stage1_pretrain(
    net: &M3Net,
    store: &mut ParamStore<f32>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    train: &[NestedPatchSet],
    val: &[NestedPatchSet],
    seed: u64,
    log: &mut Vec<LogRecord>,
) -> Result<Vec<Stage1Summary>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for i in 0..net.scales().len() {
        out.push(stage1_scale(net, i, store, model, cfg, train, val, seed, log)?);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn stage1_scale(
    net: &M3Net,
    i: usize,
    store: &mut ParamStore<f32>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    train: &[NestedPatchSet],
    val: &[NestedPatchSet],
    seed: u64,
    log: &mut Vec<LogRecord>,
) -> Result<Stage1Summary> {
    let (enc, head) = (&net.encoders[i], &net.heads[i]);
    let s = enc.scale();
    let name = format!("scale{s}");
    let (enc_prefix, head_prefix) = (Encoder::prefix(s), Head::prefix(s));
    for id in store.ids().collect::<Vec<_>>() {
        store.set_trainable(id, false);
    }
    store.set_trainable_prefix(&enc_prefix, true);
    store.set_trainable_prefix(&head_prefix, true);

    let labels: Vec<usize> = train.iter().map(label_of).collect::<Result<_>>()?;
    let mut rng = init_rng(seed, STREAM_STAGE1 + s as u64);
    let batches = batch_ranges(train.len(), cfg.batch_size);
    let total_steps = cfg.stage1_epochs * batches.len();
    let mut opt = AdamW::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<Best> = None;
    let mut step = 0;
    for epoch in 1..=cfg.stage1_epochs {
        order.shuffle(&mut rng);
        let mut stats = EpochStats::default();
        for r in &batches {
            let idx = &order[r.clone()];
            let owned: Vec<Tensor<f32>>;
            let crops: Vec<&Tensor<f32>> = if cfg.augment {
                owned = idx
                    .iter()
                    .map(|&k| Ok(Transform::sample(&mut rng).apply_crop(crop_of(&train[k], s)?)))
                    .collect::<Result<_>>()?;
                owned.iter().collect()
            } else {
                idx.iter().map(|&k| crop_of(&train[k], s)).collect::<Result<_>>()?
            };
            let y: Vec<usize> = idx.iter().map(|&k| labels[k]).collect();
            let lr = cosine_lr(step, total_steps, cfg.lr_max, cfg.lr_min);
            let run = |store: &mut ParamStore<f32>, opt: &mut AdamW<f32>| -> Result<([f64; 5], usize)> {
                let mut tape = Tape::new();
                let p = store.bind(&mut tape);
                let x = tape.constant(enc.batch(&crops)?);
                let (logits, parts) = stage1_loss(&mut tape, &p, store, enc, head, x, &y, cfg.l2)?;
                let grads = tape.backward(parts.total)?;
                opt.step(store, &grads, lr, cfg.weight_decay)?;
                Ok((parts.values(&tape), count_correct(tape.value(logits), &y)))
            };
            let (values, correct) = run(store, &mut opt).map_err(|e| at_step(e, "stage1", epoch, step))?;
            stats.add(values, idx.len(), correct);
            step += 1;
        }
        log.push(stats.record("stage1", &name, epoch, "train"));
        let v = eval_scale(net, i, store, cfg, val)?;
        log.push(v.record("stage1", &name, epoch, "val"));
        if Best::improves(&best, v.acc(), v.loss()) {
            best = Some(Best {
                epoch,
                acc: v.acc(),
                loss: v.loss(),
                snapshot: store.clone(),
            });
        }
    }
    let (best_epoch, best_val_acc, best_val_loss) = match best {
        Some(b) => {
            *store = b.snapshot;
            (b.epoch, b.acc, b.loss)
        }
        None => {
            let v = eval_scale(net, i, store, cfg, val)?;
            (0, v.acc(), v.loss())
        }
    };
    let trainable_stages = freeze_lower(store, enc, model.freeze_fraction)?;
    Ok(Stage1Summary {
        scale: s,
        best_epoch,
        best_val_acc,
        best_val_loss,
        trainable_stages,
    })
}

fn eval_scale(
    net: &M3Net,
    i: usize,
    store: &ParamStore<f32>,
    cfg: &TrainConfig,
    samples: &[NestedPatchSet],
) -> Result<EpochStats> {
    let (enc, head) = (&net.encoders[i], &net.heads[i]);
    let mut stats = EpochStats::default();
    for r in batch_ranges(samples.len(), cfg.batch_size) {
        let part = &samples[r];
        let crops: Vec<&Tensor<f32>> = part.iter().map(|p| crop_of(p, enc.scale())).collect::<Result<_>>()?;
        let y: Vec<usize> = part.iter().map(label_of).collect::<Result<_>>()?;
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(enc.batch(&crops)?);
        let (logits, parts) = stage1_loss(&mut tape, &p, store, enc, head, x, &y, cfg.l2)?;
        stats.add(parts.values(&tape), part.len(), count_correct(tape.value(logits), &y));
    }
    Ok(stats)
}

/// Pooled `[C]` and token `[L, C]` encoder outputs of one sample at one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleFeatures {
    pub pooled: Tensor<f32>,
    pub tokens: Tensor<f32>,
}

/// Encoder outputs per sample, then per scale in ascending order.
pub type FeatureCache = Vec<Vec<ScaleFeatures>>;

/// Run every encoder on `patches` without recording gradients; returns per
/// scale the pooled `[B, C]` and token `[B, L, C]` values.
pub fn encode_values(
    net: &M3Net,
    store: &ParamStore<f32>,
    patches: &[&NestedPatchSet],
) -> Result<Vec<(Tensor<f32>, Tensor<f32>)>> {
    let frozen = {
        let mut s = store.clone();
        for id in s.ids().collect::<Vec<_>>() {
            s.set_trainable(id, false);
        }
        s
    };
    let mut out = Vec::with_capacity(net.encoders.len());
    for enc in &net.encoders {
        let mut tape = Tape::new();
        let p = frozen.bind(&mut tape);
        let crops: Vec<&Tensor<f32>> = patches.iter().map(|q| crop_of(q, enc.scale())).collect::<Result<_>>()?;
        let x = tape.constant(enc.batch(&crops)?);
        let emb = enc.forward(&mut tape, &p, x)?;
        out.push((tape.value(emb.pooled).clone(), tape.value(emb.tokens).clone()));
    }
    Ok(out)
}

fn split_rows(t: &Tensor<f32>, b: usize) -> Result<Tensor<f32>> {
    let shape = &t.shape()[1..];
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), t.data()[b * n..(b + 1) * n].to_vec())
}

pub fn encode_features(net: &M3Net, store: &ParamStore<f32>, patches: &[&NestedPatchSet], batch: usize) -> Result<FeatureCache> {
    let mut cache = Vec::with_capacity(patches.len());
    for r in batch_ranges(patches.len(), batch) {
        let values = encode_values(net, store, &patches[r.clone()])?;
        for b in 0..r.len() {
            cache.push(
                values
                    .iter()
                    .map(|(pooled, tokens)| {
                        Ok(ScaleFeatures {
                            pooled: split_rows(pooled, b)?,
                            tokens: split_rows(tokens, b)?,
                        })
                    })
                    .collect::<Result<_>>()?,
            );
        }
    }
    Ok(cache)
}

fn stack<'a, T: Real>(rows: impl ExactSizeIterator<Item = &'a Tensor<f32>>) -> Result<Tensor<T>> {
    let n = rows.len();
    let mut shape = Vec::new();
    let mut data = Vec::new();
    for r in rows {
        if shape.is_empty() {
            shape = r.shape().to_vec();
        } else if shape != r.shape() {
            return Err(Error::shape(format!("cannot stack {:?} with {:?}", shape, r.shape())));
        }
        data.extend(r.data().iter().map(|&v| T::from_f64_lossy(f64::from(v))));
    }
    shape.insert(0, n);
    Tensor::new(shape, data)
}

/// Put cached features of the samples `idx` on the tape as constants.
fn cached_embeddings<T: Real>(
    tape: &mut Tape<T>,
    net: &M3Net,
    cache: &FeatureCache,
    idx: &[usize],
) -> Result<Vec<ScaleEmbedding>> {
    (0..net.scales().len())
        .map(|i| {
            let pooled = stack::<T>(idx.iter().map(|&k| &cache[k][i].pooled))?;
            let tokens = stack::<T>(idx.iter().map(|&k| &cache[k][i].tokens))?;
            Ok(ScaleEmbedding {
                scale: net.scales()[i],
                pooled: tape.constant(pooled),
                tokens: tape.constant(tokens),
            })
        })
        .collect()
}

fn value_embeddings<T: Real>(
    tape: &mut Tape<T>,
    net: &M3Net,
    values: Vec<(Tensor<f32>, Tensor<f32>)>,
) -> Vec<ScaleEmbedding> {
    values
        .into_iter()
        .zip(net.scales())
        .map(|((pooled, tokens), &scale)| ScaleEmbedding {
            scale,
            pooled: tape.constant(pooled.cast()),
            tokens: tape.constant(tokens.cast()),
        })
        .collect()
}

/// The stage-2 objective on one batch: per-scale and fused cross-entropy,
/// `β·L_align`, the weighted attention penalty and the L2 term.
#[allow(clippy::too_many_arguments)]
pub fn stage2_objective<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    store: &ParamStore<T>,
    net: &M3Net,
    feats: &[ScaleEmbedding],
    labels: &[usize],
    align: &AlignWeights,
    l2: f64,
    fused_only_ce: bool,
) -> Result<(ModelOutput, LossParts)> {
    let out = net.forward_fused(tape, p, feats)?;
    let mut ce_terms = vec![tape.cross_entropy(out.fusion.logits, labels)?];
    if !fused_only_ce {
        for &h in &out.head_logits {
            ce_terms.push(tape.cross_entropy(h, labels)?);
        }
    }
    let ce = tape.add_all(&ce_terms)?;
    let terms = align_loss(tape, &out.z, align)?;
    let align_w = tape.scale(terms.total, T::from_f64_lossy(align.beta))?;
    let reg = attn_reg(tape, &out.fusion.maps)?;
    let reg_w = tape.scale(reg, T::from_f64_lossy(net.fusion.config().attn_reg))?;
    let l2 = l2_term(tape, p, store, l2)?;
    let total = tape.add_all(&[ce, align_w, reg_w, l2])?;
    Ok((
        out,
        LossParts {
            total,
            ce,
            align: align_w,
            attnreg: reg_w,
            l2,
        },
    ))
}

fn set_stage2_trainable(net: &M3Net, store: &mut ParamStore<f32>, model: &ModelConfig, freeze_backbone: bool) -> Result<()> {
    for id in store.ids().collect::<Vec<_>>() {
        store.set_trainable(id, false);
    }
    for prefix in M3Net::fusion_prefixes() {
        store.set_trainable_prefix(prefix, true);
    }
    if !freeze_backbone {
        for enc in &net.encoders {
            store.set_trainable_prefix(&Encoder::prefix(enc.scale()), true);
            freeze_lower(store, enc, model.freeze_fraction)?;
            store.set_trainable_prefix(&Head::prefix(enc.scale()), true);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Summary {
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub best_val_loss: f64,
}

/// Shared optimisation loop of stage 2 and few-shot fine-tuning.
struct FuseRun<'a> {
    stage: &'static str,
    net: &'a M3Net,
    cfg: &'a TrainConfig,
    align: &'a AlignWeights,
    epochs: usize,
}

impl FuseRun<'_> {
    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        store: &mut ParamStore<f32>,
        samples: &[&NestedPatchSet],
        val: Option<&[NestedPatchSet]>,
        steps_per_epoch: usize,
        rng: &mut ChaCha8Rng,
        plan: &mut dyn FnMut(&mut ChaCha8Rng) -> Vec<Vec<usize>>,
        log: &mut Vec<LogRecord>,
    ) -> Result<Stage2Summary> {
        let (net, cfg) = (self.net, self.cfg);
        let frozen = cfg.freeze_backbone;
        let labels: Vec<usize> = samples.iter().map(|p| label_of(p)).collect::<Result<_>>()?;
        let cache = if frozen && !cfg.augment {
            Some(encode_features(net, store, samples, cfg.batch_size)?)
        } else {
            None
        };
        let val_refs: Option<Vec<&NestedPatchSet>> = val.map(|v| v.iter().collect());
        let val_cache = match (&val_refs, frozen) {
            (Some(v), true) => Some(encode_features(net, store, v, cfg.batch_size)?),
            _ => None,
        };
        let total_steps = self.epochs * steps_per_epoch;
        let lr_max = cfg.fusion_lr();
        let mut opt = AdamW::new();
        let mut best: Option<Best> = None;
        let mut step = 0;
        for epoch in 1..=self.epochs {
            let mut stats = EpochStats::default();
            for idx in plan(rng) {
                let y: Vec<usize> = idx.iter().map(|&k| labels[k]).collect();
                let augmented: Option<Vec<NestedPatchSet>> = (cfg.augment && cache.is_none())
                    .then(|| idx.iter().map(|&k| Transform::sample(rng).apply(samples[k])).collect());
                let lr = cosine_lr(step, total_steps, lr_max, cfg.lr_min);
                let mut go = || -> Result<([f64; 5], usize)> {
                    let mut tape = Tape::new();
                    let p = store.bind(&mut tape);
                    let batch: Vec<&NestedPatchSet> = match &augmented {
                        Some(a) => a.iter().collect(),
                        None => idx.iter().map(|&k| samples[k]).collect(),
                    };
                    let feats = if let Some(c) = &cache {
                        cached_embeddings(&mut tape, net, c, &idx)?
                    } else if frozen {
                        let values = encode_values(net, store, &batch)?;
                        value_embeddings(&mut tape, net, values)
                    } else {
                        live_embeddings(&mut tape, &p, net, &batch)?
                    };
                    let (out, parts) = stage2_objective(
                        &mut tape,
                        &p,
                        store,
                        net,
                        &feats,
                        &y,
                        self.align,
                        cfg.l2,
                        cfg.fused_only_ce,
                    )?;
                    let grads = tape.backward(parts.total)?;
                    let correct = count_correct(tape.value(out.fusion.logits), &y);
                    let values = parts.values(&tape);
                    opt.step(store, &grads, lr, cfg.weight_decay)?;
                    Ok((values, correct))
                };
                let (values, correct) = go().map_err(|e| at_step(e, self.stage, epoch, step))?;
                stats.add(values, idx.len(), correct);
                step += 1;
            }
            log.push(stats.record(self.stage, "fused", epoch, "train"));
            if let Some(v) = &val_refs {
                let vs = self.eval(store, v, val_cache.as_ref())?;
                log.push(vs.record(self.stage, "fused", epoch, "val"));
                if Best::improves(&best, vs.acc(), vs.loss()) {
                    best = Some(Best {
                        epoch,
                        acc: vs.acc(),
                        loss: vs.loss(),
                        snapshot: store.clone(),
                    });
                }
            }
        }
        match best {
            Some(b) => {
                *store = b.snapshot;
                Ok(Stage2Summary {
                    best_epoch: b.epoch,
                    best_val_acc: b.acc,
                    best_val_loss: b.loss,
                })
            }
            None => {
                let (acc, loss) = match &val_refs {
                    Some(v) => {
                        let vs = self.eval(store, v, val_cache.as_ref())?;
                        (vs.acc(), vs.loss())
                    }
                    None => (f64::NAN, f64::NAN),
                };
                Ok(Stage2Summary {
                    best_epoch: self.epochs,
                    best_val_acc: acc,
                    best_val_loss: loss,
                })
            }
        }
    }

    fn eval(&self, store: &ParamStore<f32>, samples: &[&NestedPatchSet], cache: Option<&FeatureCache>) -> Result<EpochStats> {
        let net = self.net;
        let mut stats = EpochStats::default();
        for r in batch_ranges(samples.len(), self.cfg.batch_size) {
            let idx: Vec<usize> = r.clone().collect();
            let y: Vec<usize> = samples[r.clone()].iter().map(|p| label_of(p)).collect::<Result<_>>()?;
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let feats = match cache {
                Some(c) => cached_embeddings(&mut tape, net, c, &idx)?,
                None => {
                    let values = encode_values(net, store, &samples[r])?;
                    value_embeddings(&mut tape, net, values)
                }
            };
            let (out, parts) = stage2_objective(
                &mut tape,
                &p,
                store,
                net,
                &feats,
                &y,
                self.align,
                self.cfg.l2,
                self.cfg.fused_only_ce,
            )?;
            stats.add(parts.values(&tape), y.len(), count_correct(tape.value(out.fusion.logits), &y));
        }
        Ok(stats)
    }
}

/// Encoders recorded on `tape` so gradients reach their trainable stages.
fn live_embeddings<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    net: &M3Net,
    batch: &[&NestedPatchSet],
) -> Result<Vec<ScaleEmbedding>> {
    net.encoders
        .iter()
        .map(|enc| {
            let crops: Vec<&Tensor<f32>> = batch.iter().map(|q| crop_of(q, enc.scale())).collect::<Result<_>>()?;
            let x = tape.constant(enc.batch(&crops)?);
            enc.forward(tape, p, x)
        })
        .collect()
}

/// Train projections, fusion blocks and classifier (and, when the backbone is
/// not frozen, the upper encoder stages and heads) under the joint objective.
#[allow(clippy::too_many_arguments)]
pub fn stage2_fuse(
    net: &M3Net,
    store: &mut ParamStore<f32>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    align: &AlignWeights,
    train: &[NestedPatchSet],
    val: &[NestedPatchSet],
    seed: u64,
    log: &mut Vec<LogRecord>,
) -> Result<Stage2Summary> {
    cfg.validate_with(align)?;
    set_stage2_trainable(net, store, model, cfg.freeze_backbone)?;
    let samples: Vec<&NestedPatchSet> = train.iter().collect();
    let batches = batch_ranges(samples.len(), cfg.batch_size);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut plan = |rng: &mut ChaCha8Rng| {
        order.shuffle(rng);
        batches.iter().map(|r| order[r.clone()].to_vec()).collect()
    };
    let run = FuseRun {
        stage: "stage2",
        net,
        cfg,
        align,
        epochs: cfg.stage2_epochs,
    };
    let mut rng = init_rng(seed, STREAM_STAGE2);
    run.run(store, &samples, Some(val), batches.len(), &mut rng, &mut plan, log)
}

/// Fail if any fine-tuning sample shares its source id with a test sample.
pub fn check_disjoint<'a>(finetune: impl IntoIterator<Item = &'a str>, test_ids: &[String]) -> Result<()> {
    let test: HashSet<&str> = test_ids.iter().map(String::as_str).collect();
    for id in finetune {
        if test.contains(id) {
            return Err(Error::Leakage(id.to_string()));
        }
    }
    Ok(())
}

/// Up to `pairs` benign and `pairs` malignant samples, in input order,
/// interleaved benign/malignant.
pub fn select_pairs(samples: &[NestedPatchSet], pairs: usize) -> Result<Vec<&NestedPatchSet>> {
    let mut by_label: [Vec<&NestedPatchSet>; 2] = [Vec::new(), Vec::new()];
    for s in samples {
        let l = label_of(s)?;
        if by_label[l].len() < pairs {
            by_label[l].push(s);
        }
    }
    if by_label.iter().any(|v| v.len() < pairs) {
        return Err(Error::Config(format!(
            "need {pairs} samples of each label, found {} benign and {} malignant",
            by_label[0].len(),
            by_label[1].len()
        )));
    }
    Ok(by_label[0].iter().zip(&by_label[1]).flat_map(|(a, b)| [*a, *b]).collect())
}

/// Fine-tune the fusion part on batches drawn half from `replay` and half
/// from `target`. Fails before any update if a fine-tuning sample appears in
/// `test_ids`.
#[allow(clippy::too_many_arguments)]
pub fn few_shot_finetune(
    net: &M3Net,
    store: &mut ParamStore<f32>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    align: &AlignWeights,
    replay: &[&NestedPatchSet],
    target: &[&NestedPatchSet],
    test_ids: &[String],
    seed: u64,
    log: &mut Vec<LogRecord>,
) -> Result<()> {
    cfg.validate_with(align)?;
    check_disjoint(replay.iter().chain(target).map(|p| p.source_id.as_str()), test_ids)?;
    if replay.is_empty() || target.is_empty() {
        return Err(Error::Config("few-shot fine-tuning needs replay and target samples".into()));
    }
    set_stage2_trainable(net, store, model, cfg.freeze_backbone)?;
    let samples: Vec<&NestedPatchSet> = replay.iter().chain(target).copied().collect();
    let (nr, nt) = (replay.len(), target.len());
    let half = (cfg.batch_size / 2).max(1);
    let steps = nr.max(nt).div_ceil(half);
    let mut r_order: Vec<usize> = (0..nr).collect();
    let mut t_order: Vec<usize> = (nr..nr + nt).collect();
    let mut plan = |rng: &mut ChaCha8Rng| {
        r_order.shuffle(rng);
        t_order.shuffle(rng);
        (0..steps)
            .map(|b| {
                (0..half)
                    .map(|j| r_order[(b * half + j) % nr])
                    .chain((0..half).map(|j| t_order[(b * half + j) % nt]))
                    .collect()
            })
            .collect()
    };
    let run = FuseRun {
        stage: "fewshot",
        net,
        cfg,
        align,
        epochs: cfg.fewshot_epochs,
    };
    let mut rng = init_rng(seed, STREAM_FEWSHOT);
    run.run(store, &samples, None, steps, &mut rng, &mut plan, log)?;
    Ok(())
}

/// Class-1 probabilities of the fused classifier and of every per-scale head.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub source_ids: Vec<String>,
    pub labels: Vec<u8>,
    pub fused: Vec<f64>,
    /// `(scale, scores)` in ascending scale order.
    pub per_scale: Vec<(usize, Vec<f64>)>,
}

fn class1_probs(tape: &mut Tape<f32>, logits: Var) -> Result<Vec<f64>> {
    let probs = tape.softmax(logits)?;
    Ok(tape.value(probs).data().chunks(2).map(|r| f64::from(r[1])).collect())
}

pub fn accuracy_of(scores: &[f64], labels: &[u8]) -> f64 {
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| u8::from(s >= 0.5) == l)
        .count();
    hits as f64 / scores.len().max(1) as f64
}

impl Predictions {
    pub fn fused_accuracy(&self) -> f64 {
        accuracy_of(&self.fused, &self.labels)
    }

    pub fn scale_accuracy(&self, scale: usize) -> Option<f64> {
        self.per_scale
            .iter()
            .find(|(s, _)| *s == scale)
            .map(|(_, scores)| accuracy_of(scores, &self.labels))
    }
}

pub fn predict(net: &M3Net, store: &ParamStore<f32>, samples: &[NestedPatchSet], batch: usize) -> Result<Predictions> {
    let mut out = Predictions {
        source_ids: samples.iter().map(|s| s.source_id.clone()).collect(),
        labels: samples.iter().map(|s| label_of(s).map(|l| l as u8)).collect::<Result<_>>()?,
        fused: Vec::with_capacity(samples.len()),
        per_scale: net.scales().iter().map(|&s| (s, Vec::with_capacity(samples.len()))).collect(),
    };
    let refs: Vec<&NestedPatchSet> = samples.iter().collect();
    for r in batch_ranges(samples.len(), batch) {
        let values = encode_values(net, store, &refs[r])?;
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let feats = value_embeddings(&mut tape, net, values);
        let o = net.forward_fused(&mut tape, &p, &feats)?;
        out.fused.extend(class1_probs(&mut tape, o.fusion.logits)?);
        for (i, &h) in o.head_logits.iter().enumerate() {
            let probs = class1_probs(&mut tape, h)?;
            out.per_scale[i].1.extend(probs);
        }
    }
    Ok(out)
}
