//! One function per subcommand. Every run directory has the same layout:
//!
//! ```text
//! OUT/resolved_config.json         the configuration actually used
//! OUT/data/                        volumes, manifest.csv, nodules.json, split.csv
//! OUT/stage1.ckpt  stage1_log.jsonl  stage1_summary.json
//! OUT/model.ckpt   stage2_log.jsonl  stage2_summary.json
//! OUT/predictions.csv  metrics.json  metrics.csv  metrics_per_scale.csv
//! OUT/fewshot.ckpt  fewshot_log.jsonl  fewshot_metrics.json
//! OUT/ablation_<kind>.csv
//! OUT/gradcheck.json  params.json
//! OUT/gradcam/<id>.m3nsal  <id>_peak.csv  summary.csv
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use m3net_core::alignment::Projection;
use m3net_core::attribution::{gradcam, mass_inside, nodule_mask, GradCamConfig, Readout};
use m3net_core::encoders::{count_flops, linear_flops, read_checkpoint, write_checkpoint, Encoder, Head};
use m3net_core::fusion::{fusion_flops, CLASSIFIER_PREFIX, FUSION_PREFIX};
use m3net_core::metrics::{evaluate, prediction_set, read_predictions, write_predictions, MetricsReport, CSV_COLUMNS};
use m3net_core::numerics::ParamStore;
use m3net_core::training::{
    few_shot_finetune, select_pairs, stage1_pretrain, stage2_fuse, write_log, M3Net, Stage1Summary,
};
use m3net_core::volume_io::synth::{synth_generate, MANIFEST_FILE};
use m3net_core::volume_io::{split_dataset, Manifest, NestedPatchSet, Split};
use serde_json::json;

use crate::ablation::{run_ablation, AblationKind};
use crate::checks::{run_suite, DEFAULT_SEEDS};
use crate::config::RunConfig;
use crate::data::{load_dataset, synth_patches, Dataset};
use crate::pipeline::{build, evaluate_model};
use crate::CheckFailed;

pub const DATA_DIR: &str = "data";
pub const SPLIT_FILE: &str = "split.csv";
pub const STAGE1_CKPT: &str = "stage1.ckpt";
pub const MODEL_CKPT: &str = "model.ckpt";
pub const FEWSHOT_CKPT: &str = "fewshot.ckpt";

/// Resolved inputs shared by every command.
#[derive(Clone, Debug)]
pub struct Ctx {
    pub cfg: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

impl Ctx {
    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join(DATA_DIR)
    }

    pub fn split_manifest(&self) -> PathBuf {
        self.data_dir().join(SPLIT_FILE)
    }

    fn checkpoint_or(&self, default: &str) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.path(default))
    }

    /// Print the seed and configuration and keep a copy next to the outputs.
    pub fn echo(&self) -> anyhow::Result<()> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let text = self.cfg.to_json();
        println!("seed: {}", self.seed);
        println!("config: {text}");
        std::fs::write(self.path("resolved_config.json"), text + "\n")?;
        Ok(())
    }

    fn load_data(&self) -> anyhow::Result<Dataset> {
        let sizes = self.cfg.encoders.sorted_scales()?;
        let path = self.split_manifest();
        load_dataset(&path, &sizes).with_context(|| format!("reading split manifest {}", path.display()))
    }

    /// A freshly built model with every value from the checkpoint.
    fn load_model(&self, ckpt: &Path) -> anyhow::Result<(M3Net, ParamStore<f32>)> {
        let (net, mut store) = build(&self.cfg, self.seed)?;
        let saved = read_checkpoint(ckpt).with_context(|| format!("reading checkpoint {}", ckpt.display()))?;
        store.load_values(&saved)?;
        Ok((net, store))
    }
}

pub fn synth(ctx: &Ctx) -> anyhow::Result<()> {
    let dir = ctx.data_dir();
    let m = synth_generate(&ctx.cfg.data.synth, ctx.seed, &dir)?;
    println!("wrote {} volumes to {}", m.entries.len(), dir.display());
    Ok(())
}

pub fn split(ctx: &Ctx) -> anyhow::Result<()> {
    let src = ctx.data_dir().join(MANIFEST_FILE);
    let m = Manifest::read(&src).with_context(|| format!("reading {}", src.display()))?;
    let tagged = split_dataset(&m, ctx.cfg.data.split, ctx.seed)?;
    tagged.write(ctx.split_manifest())?;
    println!(
        "split {} entries: train {}, val {}, test {}",
        tagged.entries.len(),
        tagged.count(Split::Train),
        tagged.count(Split::Val),
        tagged.count(Split::Test)
    );
    Ok(())
}

fn stage1_json(s: &[Stage1Summary]) -> serde_json::Value {
    s.iter()
        .map(|s| {
            json!({
                "scale": s.scale,
                "best_epoch": s.best_epoch,
                "best_val_acc": s.best_val_acc,
                "best_val_loss": s.best_val_loss,
                "trainable_stages": s.trainable_stages,
            })
        })
        .collect()
}

fn write_json(path: PathBuf, value: &serde_json::Value) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn train1(ctx: &Ctx) -> anyhow::Result<()> {
    let data = ctx.load_data()?;
    let (net, mut store) = build(&ctx.cfg, ctx.seed)?;
    let mut log = Vec::new();
    let summary = stage1_pretrain(
        &net,
        &mut store,
        &ctx.cfg.encoders,
        &ctx.cfg.training,
        &data.train,
        &data.val,
        ctx.seed,
        &mut log,
    )?;
    write_checkpoint(&store, ctx.path(STAGE1_CKPT))?;
    write_log(&log, ctx.path("stage1_log.jsonl"))?;
    write_json(ctx.path("stage1_summary.json"), &stage1_json(&summary))?;
    for s in &summary {
        println!(
            "scale {}: best epoch {}, val acc {:.4}",
            s.scale, s.best_epoch, s.best_val_acc
        );
    }
    Ok(())
}

pub fn train2(ctx: &Ctx) -> anyhow::Result<()> {
    let data = ctx.load_data()?;
    let (net, mut store) = ctx.load_model(&ctx.checkpoint_or(STAGE1_CKPT))?;
    let mut log = Vec::new();
    let s = stage2_fuse(
        &net,
        &mut store,
        &ctx.cfg.encoders,
        &ctx.cfg.training,
        &ctx.cfg.alignment,
        &data.train,
        &data.val,
        ctx.seed,
        &mut log,
    )?;
    write_checkpoint(&store, ctx.path(MODEL_CKPT))?;
    write_log(&log, ctx.path("stage2_log.jsonl"))?;
    write_json(
        ctx.path("stage2_summary.json"),
        &json!({
            "best_epoch": s.best_epoch,
            "best_val_acc": s.best_val_acc,
            "best_val_loss": s.best_val_loss,
        }),
    )?;
    println!("stage 2: best epoch {}, val acc {:.4}", s.best_epoch, s.best_val_acc);
    Ok(())
}

fn print_report(name: &str, r: &MetricsReport) {
    let cells: Vec<String> = CSV_COLUMNS
        .iter()
        .zip(r.csv_row())
        .map(|(c, v)| format!("{c}={v}"))
        .collect();
    println!("{name}: {}", cells.join(" "));
}

fn write_report(ctx: &Ctx, r: &MetricsReport) -> anyhow::Result<()> {
    r.write_json(ctx.path("metrics.json"))?;
    r.write_csv(ctx.path("metrics.csv"))?;
    print_report("fused", r);
    Ok(())
}

/// Evaluate a checkpoint on the test split, or score an existing predictions
/// file when one is given.
pub fn eval(ctx: &Ctx, predictions: Option<&Path>) -> anyhow::Result<()> {
    if let Some(path) = predictions {
        let rows = read_predictions(path).with_context(|| format!("reading predictions {}", path.display()))?;
        let report = evaluate(&prediction_set(&rows, ctx.cfg.metrics.threshold)?)?;
        return write_report(ctx, &report);
    }
    let data = ctx.load_data()?;
    let (net, store) = ctx.load_model(&ctx.checkpoint_or(MODEL_CKPT))?;
    let ev = evaluate_model(&ctx.cfg, &net, &store, &data.test)?;
    write_predictions(&ev.rows(), ctx.path("predictions.csv"))?;
    write_report(ctx, &ev.fused)?;
    let mut w = csv::Writer::from_path(ctx.path("metrics_per_scale.csv"))?;
    w.write_record(std::iter::once("scale").chain(CSV_COLUMNS))?;
    for (s, r) in &ev.per_scale {
        w.write_record(std::iter::once(s.to_string()).chain(r.csv_row()))?;
        print_report(&format!("scale {s}"), r);
    }
    w.flush()?;
    Ok(())
}

/// Fine-tune on `fewshot_pairs` benign/malignant pairs of the shifted target
/// set plus as many replayed source training pairs, and report target metrics
/// on the remaining target samples before and after.
pub fn fewshot(ctx: &Ctx) -> anyhow::Result<()> {
    let cfg = &ctx.cfg;
    let data = ctx.load_data()?;
    let sizes = cfg.encoders.sorted_scales()?;
    let target = synth_patches(&cfg.data.fewshot, ctx.seed, &sizes)?;
    let pairs = cfg.training.fewshot_pairs;
    let tuned = select_pairs(&target, pairs)?;
    let tuned_ids: Vec<&str> = tuned.iter().map(|p| p.source_id.as_str()).collect();
    let held_out: Vec<NestedPatchSet> = target
        .iter()
        .filter(|p| !tuned_ids.contains(&p.source_id.as_str()))
        .cloned()
        .collect();
    if held_out.is_empty() {
        bail!(m3net_core::Error::Config(format!(
            "few-shot set of {} samples leaves nothing to evaluate after {pairs} pairs",
            target.len()
        )));
    }
    let replay = select_pairs(&data.train, pairs)?;
    let mut test_ids = data.test_ids();
    test_ids.extend(held_out.iter().map(|p| p.source_id.clone()));

    let (net, mut store) = ctx.load_model(&ctx.checkpoint_or(MODEL_CKPT))?;
    let before = evaluate_model(cfg, &net, &store, &held_out)?.fused;
    let mut log = Vec::new();
    few_shot_finetune(
        &net,
        &mut store,
        &cfg.encoders,
        &cfg.training,
        &cfg.alignment,
        &replay,
        &tuned,
        &test_ids,
        ctx.seed,
        &mut log,
    )?;
    let after = evaluate_model(cfg, &net, &store, &held_out)?.fused;
    let source_after = evaluate_model(cfg, &net, &store, &data.test)?.fused;
    write_checkpoint(&store, ctx.path(FEWSHOT_CKPT))?;
    write_log(&log, ctx.path("fewshot_log.jsonl"))?;
    write_json(
        ctx.path("fewshot_metrics.json"),
        &json!({ "target_before": before, "target_after": after, "source_test_after": source_after }),
    )?;
    print_report("target before", &before);
    print_report("target after", &after);
    print_report("source test after", &source_after);
    Ok(())
}

pub fn ablate(ctx: &Ctx, kind: AblationKind, seeds: usize) -> anyhow::Result<()> {
    let train_seeds: Vec<u64> = (ctx.seed..ctx.seed + seeds as u64).collect();
    let table = run_ablation(kind, &ctx.cfg, ctx.seed, &train_seeds, |line| eprintln!("{line}"))?;
    let path = ctx.path(&format!("ablation_{}.csv", kind.name()));
    table.write_csv(&path)?;
    println!(
        "{} ablation: {} variants x {} seeds -> {}",
        kind.name(),
        table.variant_ids().len(),
        seeds,
        path.display()
    );
    Ok(())
}

pub fn gradcheck(ctx: &Ctx, seeds: Option<usize>) -> anyhow::Result<()> {
    let outcomes = run_suite(ctx.seed, seeds.unwrap_or(DEFAULT_SEEDS))?;
    for o in &outcomes {
        println!(
            "{:<18} {} seeds={} max_rel_err={:.3e} tol={:.0e}",
            o.name,
            if o.passed() { "PASS" } else { "FAIL" },
            o.seeds,
            o.max_rel_err,
            o.tol
        );
    }
    write_json(ctx.path("gradcheck.json"), &serde_json::to_value(&outcomes)?)?;
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.name).collect();
    if !failed.is_empty() {
        bail!(CheckFailed(format!("gradient check failed for {}", failed.join(", "))));
    }
    Ok(())
}

/// Parameter counts per component and multiply-add counts of one forward
/// pass at batch 1.
pub fn params(ctx: &Ctx) -> anyhow::Result<()> {
    let (net, store) = build(&ctx.cfg, ctx.seed)?;
    let mut scales = Vec::new();
    let mut tokens = Vec::new();
    let mut flops = 0u64;
    for &s in net.scales() {
        let enc_cfg = net.encoder(s)?.config().clone();
        let (c, l) = (enc_cfg.feature_dim(), enc_cfg.token_count());
        let enc_flops = count_flops(&enc_cfg, 1);
        let proj_flops = linear_flops(c, ctx.cfg.fusion.dim, l + 1);
        let head_flops = linear_flops(c, 2, 1);
        flops += enc_flops + proj_flops + head_flops;
        tokens.push(l);
        scales.push(json!({
            "scale": s,
            "encoder_params": store.count_prefix(&Encoder::prefix(s), false),
            "head_params": store.count_prefix(&Head::prefix(s), false),
            "projection_params": store.count_prefix(&Projection::prefix(s), false),
            "tokens": l,
            "feature_dim": c,
            "encoder_flops": enc_flops,
            "projection_flops": proj_flops,
            "head_flops": head_flops,
        }));
    }
    let fuse_flops = fusion_flops(&ctx.cfg.fusion, &tokens, 1)?;
    flops += fuse_flops;
    let report = json!({
        "total_params": store.count(false),
        "fusion_params": store.count_prefix(FUSION_PREFIX, false),
        "classifier_params": store.count_prefix(CLASSIFIER_PREFIX, false),
        "scales": scales,
        "fusion_flops": fuse_flops,
        "total_flops": flops,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    write_json(ctx.path("params.json"), &report)?;
    Ok(())
}

/// Saliency volumes for the test split (or one sample), with the peak slice
/// dumped as CSV and a summary of mass inside the nodule per sample.
pub fn gradcam_cmd(ctx: &Ctx, cam: &GradCamConfig, sample: Option<&str>) -> anyhow::Result<()> {
    let data = ctx.load_data()?;
    let (net, store) = ctx.load_model(&ctx.checkpoint_or(MODEL_CKPT))?;
    let samples: Vec<&NestedPatchSet> = match sample {
        Some(id) => {
            let all = data.train.iter().chain(&data.val).chain(&data.test);
            let found: Vec<_> = all.filter(|p| p.source_id == id).collect();
            if found.is_empty() {
                bail!(m3net_core::Error::Manifest(format!("no sample `{id}` in {}", ctx.split_manifest().display())));
            }
            found
        }
        None => data.test.iter().collect(),
    };
    let dir = ctx.path("gradcam");
    std::fs::create_dir_all(&dir)?;
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record([
        "source_id",
        "label",
        "target",
        "probability",
        "correct",
        "peak_slice",
        "mass_fraction",
        "volume_fraction",
        "beats_baseline",
    ])?;
    let (mut beats, mut correct) = (0usize, 0usize);
    for p in samples {
        let sal = gradcam(&net, &store, p, cam)?;
        let id = &p.source_id;
        sal.write(dir.join(format!("{id}.m3nsal")))?;
        let peak = sal.peak_slice();
        sal.write_slice_csv(peak, dir.join(format!("{id}_peak.csv")))?;
        let label = p.label.map(|l| l.index());
        let p1 = if sal.target == 1 { sal.probability } else { 1.0 - sal.probability };
        let is_correct = label == Some(usize::from(p1 >= ctx.cfg.metrics.threshold));
        let inside = match (data.truths.get(id), data.centroids.get(id)) {
            (Some(t), Some(&c)) => Some(mass_inside(&sal, &nodule_mask(t, c, sal.dims))?),
            _ => None,
        };
        if is_correct {
            correct += 1;
            beats += usize::from(inside.is_some_and(|m| m.beats_baseline()));
        }
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
        w.write_record([
            id.clone(),
            label.map_or_else(String::new, |l| l.to_string()),
            sal.target.to_string(),
            format!("{:.6}", sal.probability),
            u8::from(is_correct).to_string(),
            peak.to_string(),
            opt(inside.map(|m| m.mass_fraction)),
            opt(inside.map(|m| m.volume_fraction)),
            inside.map_or_else(String::new, |m| u8::from(m.beats_baseline()).to_string()),
        ])?;
    }
    w.flush()?;
    let readout = match cam.readout {
        Readout::Head => format!("head {}", cam.scale),
        Readout::Fused => "fused".into(),
    };
    println!("gradcam ({readout}): {beats} of {correct} correctly classified samples beat the volume baseline");
    Ok(())
}
