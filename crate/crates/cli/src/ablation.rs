//! Ablation lattices and the table writer.
//!
//! Every kind expands the run configuration into named variants. Each variant
//! is trained and evaluated once per seed on one shared dataset, and the
//! table gets a row per (variant, seed) followed by a `mean` row per variant.
//!
//! Column order is frozen:
//!
//! | kind           | columns                                                        |
//! |----------------|----------------------------------------------------------------|
//! | all            | `kind, variant, setting, <flags>, seed, n, acc, acc_std, bacc, pre, rec, spec, f1, roc_auc, pr_auc` |
//! | `crop`         | flags `size`                                                   |
//! | `modules`      | flags `lsf, hsf, transformer`                                  |
//! | `inputs`       | flags `x32, x64, x96`                                          |
//! | `losses`       | flags `l_align, l_cov, l_orth, l_nuc`                          |
//! | `augmentation` | flags `augment`                                                |
//!
//! Flags are `1`/`0` except `size`. Metric cells are written with six decimals.

use std::path::Path;

use clap::ValueEnum;
use m3net_core::alignment::{AlignWeights, PairWeights};
use m3net_core::fusion::FusionModules;
use m3net_core::metrics::{MetricsReport, CSV_COLUMNS};
use m3net_core::Result;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{synth_dataset, Dataset};
use crate::pipeline::{evaluate_model, fit, Stage1Cache};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AblationKind {
    /// Single-scale models over five crop sizes.
    Crop,
    /// LSF / HSF / Transformer toggles on the three-scale model.
    Modules,
    /// The non-empty subsets of the three input scales.
    Inputs,
    /// One alignment component at a time, then all four.
    Losses,
    /// Training without and with augmentation.
    Augmentation,
}

impl AblationKind {
    pub fn name(self) -> &'static str {
        match self {
            AblationKind::Crop => "crop",
            AblationKind::Modules => "modules",
            AblationKind::Inputs => "inputs",
            AblationKind::Losses => "losses",
            AblationKind::Augmentation => "augmentation",
        }
    }

    pub fn flag_columns(self) -> &'static [&'static str] {
        match self {
            AblationKind::Crop => &["size"],
            AblationKind::Modules => &["lsf", "hsf", "transformer"],
            AblationKind::Inputs => &["x32", "x64", "x96"],
            AblationKind::Losses => &["l_align", "l_cov", "l_orth", "l_nuc"],
            AblationKind::Augmentation => &["augment"],
        }
    }

    pub fn columns(self) -> Vec<&'static str> {
        let mut c = vec!["kind", "variant", "setting"];
        c.extend(self.flag_columns());
        c.push("seed");
        c.extend(CSV_COLUMNS);
        c
    }
}

pub const CROP_SIZES: [usize; 5] = [32, 48, 64, 80, 96];
const INPUT_SCALES: [usize; 3] = [32, 64, 96];

/// The seven non-empty subsets of three toggles in table order: the three
/// singletons, the three pairs, then all three.
pub const TRIPLE_LATTICE: [[bool; 3]; 7] = [
    [true, false, false],
    [false, true, false],
    [false, false, true],
    [true, true, false],
    [true, false, true],
    [false, true, true],
    [true, true, true],
];

/// One alignment component alone (`L_align` is the InfoNCE term), then all four.
pub const LOSS_LATTICE: [[bool; 4]; 5] = [
    [true, false, false, false],
    [false, true, false, false],
    [false, false, true, false],
    [false, false, false, true],
    [true, true, true, true],
];

#[derive(Clone, Debug)]
pub struct Variant {
    pub id: String,
    pub setting: String,
    /// Values of [`AblationKind::flag_columns`], in order.
    pub flags: Vec<String>,
    pub cfg: RunConfig,
}

fn letter(i: usize) -> String {
    char::from(b'a' + i as u8).to_string()
}

fn bit(b: bool) -> String {
    if b { "1" } else { "0" }.to_string()
}

fn joined(names: &[&str], on: &[bool]) -> String {
    let picked: Vec<&str> = names.iter().zip(on).filter(|(_, &b)| b).map(|(n, _)| *n).collect();
    picked.join("+")
}

pub fn variants(kind: AblationKind, base: &RunConfig) -> Vec<Variant> {
    match kind {
        AblationKind::Crop => CROP_SIZES
            .iter()
            .map(|&s| {
                let mut cfg = base.clone();
                cfg.encoders.scales = vec![s];
                Variant {
                    id: s.to_string(),
                    setting: format!("{s}x{s}x56"),
                    flags: vec![s.to_string()],
                    cfg,
                }
            })
            .collect(),
        AblationKind::Modules => TRIPLE_LATTICE
            .iter()
            .enumerate()
            .map(|(i, on)| {
                let mut cfg = base.clone();
                cfg.encoders.scales = INPUT_SCALES.to_vec();
                cfg.fusion.modules = FusionModules {
                    lsf: on[0],
                    hsf: on[1],
                    transformer: on[2],
                };
                Variant {
                    id: letter(i),
                    setting: joined(&["LSF", "HSF", "Transformer"], on),
                    flags: on.iter().map(|&b| bit(b)).collect(),
                    cfg,
                }
            })
            .collect(),
        AblationKind::Inputs => TRIPLE_LATTICE
            .iter()
            .enumerate()
            .map(|(i, on)| {
                let mut cfg = base.clone();
                cfg.encoders.scales = INPUT_SCALES.iter().zip(on).filter(|(_, &b)| b).map(|(&s, _)| s).collect();
                Variant {
                    id: letter(i),
                    setting: joined(&["X32", "X64", "X96"], on),
                    flags: on.iter().map(|&b| bit(b)).collect(),
                    cfg,
                }
            })
            .collect(),
        AblationKind::Losses => LOSS_LATTICE
            .iter()
            .enumerate()
            .map(|(i, on)| {
                let mut cfg = base.clone();
                cfg.encoders.scales = INPUT_SCALES.to_vec();
                cfg.alignment = keep_losses(&base.alignment, on);
                Variant {
                    id: letter(i),
                    setting: joined(&["L_align", "L_cov", "L_orth", "L_nuc"], on),
                    flags: on.iter().map(|&b| bit(b)).collect(),
                    cfg,
                }
            })
            .collect(),
        AblationKind::Augmentation => [false, true]
            .iter()
            .map(|&aug| {
                let mut cfg = base.clone();
                cfg.encoders.scales = INPUT_SCALES.to_vec();
                cfg.training.augment = aug;
                Variant {
                    id: if aug { "with" } else { "without" }.into(),
                    setting: if aug { "With Augmentation" } else { "Without Augmentation" }.into(),
                    flags: vec![bit(aug)],
                    cfg,
                }
            })
            .collect(),
    }
}

/// Zero the weights of the components not kept; kept ones retain their
/// configured weight.
fn keep_losses(w: &AlignWeights, on: &[bool]) -> AlignWeights {
    let pick = |keep: bool, v: f64| if keep { v } else { 0.0 };
    AlignWeights {
        lambda_nce: if on[0] {
            w.lambda_nce.clone()
        } else {
            PairWeights::Uniform(0.0)
        },
        lambda_cov: pick(on[1], w.lambda_cov),
        lambda_orth: pick(on[2], w.lambda_orth),
        lambda_nuc: pick(on[3], w.lambda_nuc),
        ..w.clone()
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: String,
    pub setting: String,
    pub flags: Vec<String>,
    /// `None` on the per-variant mean row.
    pub seed: Option<u64>,
    pub report: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub kind: AblationKind,
    pub rows: Vec<AblationRow>,
}

/// Sizes every variant of `kind` needs cropped.
pub fn crop_sizes(kind: AblationKind, base: &RunConfig) -> Vec<usize> {
    let mut sizes: Vec<usize> = variants(kind, base)
        .iter()
        .flat_map(|v| v.cfg.encoders.scales.clone())
        .collect();
    sizes.sort_unstable();
    sizes.dedup();
    sizes.reverse();
    sizes
}

/// Render the source set once with `data_seed`, then train and evaluate each
/// variant under each training seed.
pub fn run_ablation(
    kind: AblationKind,
    base: &RunConfig,
    data_seed: u64,
    seeds: &[u64],
    mut progress: impl FnMut(&str),
) -> Result<AblationTable> {
    let data = synth_dataset(&base.data.synth, base.data.split, data_seed, &crop_sizes(kind, base))?;
    run_on(kind, base, &data, seeds, &mut progress)
}

pub fn run_on(
    kind: AblationKind,
    base: &RunConfig,
    data: &Dataset,
    seeds: &[u64],
    progress: &mut impl FnMut(&str),
) -> Result<AblationTable> {
    let mut cache = Stage1Cache::default();
    let mut rows = Vec::new();
    for v in variants(kind, base) {
        v.cfg.validate()?;
        let mut reports = Vec::new();
        for &seed in seeds {
            let fitted = fit(&v.cfg, data, seed, Some(&mut cache))?;
            let eval = evaluate_model(&v.cfg, &fitted.net, &fitted.store, &data.test)?;
            progress(&format!(
                "{} {} ({}) seed {seed}: acc {:.4}",
                kind.name(),
                v.id,
                v.setting,
                eval.fused.acc
            ));
            rows.push(AblationRow {
                variant: v.id.clone(),
                setting: v.setting.clone(),
                flags: v.flags.clone(),
                seed: Some(seed),
                report: eval.fused.clone(),
            });
            reports.push(eval.fused);
        }
        rows.push(AblationRow {
            variant: v.id.clone(),
            setting: v.setting.clone(),
            flags: v.flags.clone(),
            seed: None,
            report: mean_report(&reports),
        });
    }
    Ok(AblationTable { kind, rows })
}

/// Field-wise mean of the scalar metrics; counts and flags come from the first report.
fn mean_report(reports: &[MetricsReport]) -> MetricsReport {
    let k = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
    MetricsReport {
        acc: mean(|r| r.acc),
        acc_std: mean(|r| r.acc_std),
        bacc: mean(|r| r.bacc),
        pre: mean(|r| r.pre),
        rec: mean(|r| r.rec),
        spec: mean(|r| r.spec),
        f1: mean(|r| r.f1),
        roc_auc: mean(|r| r.roc_auc),
        pr_auc: mean(|r| r.pr_auc),
        ..reports[0].clone()
    }
}

impl AblationTable {
    pub fn records(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                let mut rec = vec![self.kind.name().to_string(), r.variant.clone(), r.setting.clone()];
                rec.extend(r.flags.iter().cloned());
                rec.push(r.seed.map_or_else(|| "mean".to_string(), |s| s.to_string()));
                rec.extend(r.report.csv_row());
                rec
            })
            .collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(self.kind.columns())?;
        for rec in self.records() {
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Distinct variant ids in table order.
    pub fn variant_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for r in &self.rows {
            if ids.last() != Some(&r.variant) {
                ids.push(r.variant.clone());
            }
        }
        ids
    }
}
