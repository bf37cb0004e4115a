use std::path::Path;
use std::process::Command;

use m3net_cli::ablation::{variants, AblationKind, CROP_SIZES};
use m3net_cli::checks::case_names;
use m3net_cli::config::RunConfig;
use m3net_cli::{EXIT_CONFIG, EXIT_DATA, EXIT_OK};
use m3net_core::metrics::CSV_COLUMNS;
use m3net_core::Error;
use proptest::prelude::*;

const BIN: &str = env!("CARGO_BIN_EXE_m3net");

/// Small enough for a full pipeline in seconds.
fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.synth.count = 24;
    cfg.data.fewshot.count = 12;
    cfg.data.split.val = 0.2;
    cfg.data.split.test = 0.25;
    cfg.encoders.scales = vec![64, 32];
    cfg.fusion.dim = 8;
    cfg.fusion.heads = 2;
    cfg.fusion.ffn_hidden = 16;
    cfg.training.stage1_epochs = 1;
    cfg.training.stage2_epochs = 1;
    cfg.training.fewshot_epochs = 1;
    cfg.training.batch_size = 4;
    cfg.training.fewshot_pairs = 2;
    cfg.training.augment = false;
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn m3net(config: &Path, out: &Path, args: &[&str]) -> (u8, String) {
    let o = Command::new(BIN)
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap();
    let code = o.status.code().unwrap() as u8;
    let text = String::from_utf8_lossy(&o.stdout).into_owned() + &String::from_utf8_lossy(&o.stderr);
    (code, text)
}

#[test]
fn config_round_trips_and_rejects_unknown_keys() {
    let cfg = tiny_config();
    assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    assert!(matches!(RunConfig::from_json(r#"{"training": {"epochs": 3}}"#), Err(Error::Config(_))));
    assert!(matches!(RunConfig::from_json(r#"{"extra": 1}"#), Err(Error::Config(_))));
    // Partial files fill in defaults.
    let partial = RunConfig::from_json(r#"{"metrics": {"threshold": 0.3}}"#).unwrap();
    assert_eq!(partial.metrics.threshold, 0.3);
    assert_eq!(partial.encoders, RunConfig::default().encoders);
}

#[test]
fn contradictory_configs_are_rejected() {
    let mut cfg = tiny_config();
    cfg.metrics.threshold = 1.5;
    assert!(cfg.validate().is_err());
    let mut cfg = tiny_config();
    cfg.data.fewshot.prefix = cfg.data.synth.prefix.clone();
    assert!(cfg.validate().is_err());
    let mut cfg = tiny_config();
    cfg.data.synth.count = 1;
    assert!(cfg.validate().is_err());
    // A contrastive term needs at least two samples per batch.
    let mut cfg = tiny_config();
    cfg.training.batch_size = 1;
    assert!(cfg.validate().is_err());
}

#[test]
fn exit_codes_distinguish_config_and_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut bad = tiny_config();
    bad.training.batch_size = 1;
    let bad_path = dir.path().join("bad.json");
    std::fs::write(&bad_path, bad.to_json()).unwrap();
    let (code, text) = m3net(&bad_path, &dir.path().join("run"), &["params"]);
    assert_eq!(code, EXIT_CONFIG, "{text}");

    let good = write_config(dir.path(), &tiny_config());
    // Training before the data has been split.
    let (code, text) = m3net(&good, &dir.path().join("empty"), &["train1"]);
    assert_eq!(code, EXIT_DATA, "{text}");

    let (code, _) = m3net(&good, &dir.path().join("run"), &["params"]);
    assert_eq!(code, EXIT_OK);
    let params: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/params.json")).unwrap()).unwrap();
    assert!(params["total_params"].as_u64().unwrap() > 0);
    assert!(params["total_flops"].as_u64().unwrap() > 0);
}

#[test]
fn eval_scores_a_predictions_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let preds = dir.path().join("p.csv");
    std::fs::write(&preds, "source_id,label,score\na,0,0.1\nb,1,0.9\nc,0,0.2\nd,1,0.8\n").unwrap();
    let out = dir.path().join("run");
    let (code, text) = m3net(&cfg, &out, &["eval", "--predictions", preds.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK, "{text}");
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    for key in ["acc", "bacc", "roc_auc", "pr_auc", "f1"] {
        assert_eq!(m[key].as_f64(), Some(1.0), "{key}");
    }
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), CSV_COLUMNS.join(","));

    std::fs::write(&preds, "source_id,label,score\na,0,1.5\n").unwrap();
    let (code, _) = m3net(&cfg, &out, &["eval", "--predictions", preds.to_str().unwrap()]);
    assert_eq!(code, EXIT_DATA);
}

#[test]
fn ablation_lattices_have_the_expected_shape() {
    let base = RunConfig::default();
    let expect = [
        (AblationKind::Crop, 5),
        (AblationKind::Modules, 7),
        (AblationKind::Inputs, 7),
        (AblationKind::Losses, 5),
        (AblationKind::Augmentation, 2),
    ];
    for (kind, n) in expect {
        let vs = variants(kind, &base);
        assert_eq!(vs.len(), n, "{}", kind.name());
        for v in &vs {
            assert_eq!(v.flags.len(), kind.flag_columns().len());
            v.cfg.validate().unwrap();
        }
        let mut ids: Vec<&str> = vs.iter().map(|v| v.id.as_str()).collect();
        ids.dedup();
        assert_eq!(ids.len(), n);
        let cols = kind.columns();
        assert_eq!(&cols[..3], ["kind", "variant", "setting"]);
        assert_eq!(cols.len(), 3 + kind.flag_columns().len() + 1 + CSV_COLUMNS.len());
    }
    let crop: Vec<Vec<usize>> = variants(AblationKind::Crop, &base).iter().map(|v| v.cfg.encoders.scales.clone()).collect();
    assert_eq!(crop, CROP_SIZES.map(|s| vec![s]));
    let all_inputs = variants(AblationKind::Inputs, &base).pop().unwrap();
    assert_eq!(all_inputs.flags, ["1", "1", "1"]);
}

#[test]
fn gradcheck_cases_are_named_and_unique() {
    let mut names = case_names();
    assert!(names.len() >= 8);
    names.sort_unstable();
    names.dedup();
    assert_eq!(names.len(), case_names().len());
}

#[test]
fn full_pipeline_writes_the_run_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let out = dir.path().join("run");
    for cmd in ["synth", "split", "train1", "train2", "eval", "fewshot"] {
        let (code, text) = m3net(&cfg, &out, &[cmd]);
        assert_eq!(code, EXIT_OK, "{cmd}: {text}");
    }
    for f in [
        "resolved_config.json",
        "data/manifest.csv",
        "data/split.csv",
        "stage1.ckpt",
        "stage1_log.jsonl",
        "model.ckpt",
        "stage2_log.jsonl",
        "predictions.csv",
        "metrics.json",
        "metrics_per_scale.csv",
        "fewshot.ckpt",
        "fewshot_metrics.json",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let test_rows = std::fs::read_to_string(out.join("predictions.csv")).unwrap().lines().count() - 1;
    assert_eq!(test_rows, 6);

    let (code, text) = m3net(&cfg, &out, &["gradcam", "--scale", "32"]);
    assert_eq!(code, EXIT_OK, "{text}");
    let summary = std::fs::read_to_string(out.join("gradcam/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + test_rows);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn thresholds_validate_iff_in_unit_interval(t in -1.0f64..2.0) {
        let mut cfg = RunConfig::default();
        cfg.metrics.threshold = t;
        prop_assert_eq!(cfg.validate().is_ok(), (0.0..=1.0).contains(&t));
    }
}
