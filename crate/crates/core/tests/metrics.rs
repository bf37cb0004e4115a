use m3net_core::metrics::{
    confusion, evaluate, pr_auc_binary, prediction_set, read_predictions, roc_auc, roc_auc_binary,
    write_predictions, PredictionRow, PredictionSet,
};
use m3net_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-9;

/// A set with both labels present; scores on a coarse grid half of the time
/// so that ties are common.
fn random_set(seed: u64) -> (Vec<f64>, Vec<u8>, f64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let n = r.random_range(2..=50);
        let grid = r.random_bool(0.5);
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if grid {
                    f64::from(r.random_range(0..=10u8)) / 10.0
                } else {
                    r.random::<f64>()
                }
            })
            .collect();
        let labels: Vec<u8> = (0..n).map(|_| u8::from(r.random_bool(0.4))).collect();
        let threshold = [0.5, 0.3, 0.7][r.random_range(0..3)];
        if labels.contains(&0) && labels.contains(&1) {
            return (scores, labels, threshold);
        }
    }
}

/// Per-class (tp, fp, tn, fn) by direct counting.
fn loop_counts(scores: &[f64], labels: &[u8], threshold: f64, class: u8) -> [usize; 4] {
    let mut c = [0; 4];
    for (&s, &l) in scores.iter().zip(labels) {
        let pred = u8::from(s >= threshold);
        let i = match (pred == class, l == class) {
            (true, true) => 0,
            (true, false) => 1,
            (false, false) => 2,
            (false, true) => 3,
        };
        c[i] += 1;
    }
    c
}

fn safe(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Ranking statistic: share of (positive, negative) pairs ordered correctly,
/// ties counting one half.
fn mann_whitney(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut u, mut pairs) = (0.0, 0usize);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if positive[i] && !positive[j] {
                pairs += 1;
                if si > sj {
                    u += 1.0;
                } else if si == sj {
                    u += 0.5;
                }
            }
        }
    }
    u / pairs as f64
}

/// Average precision over distinct thresholds, tied scores admitted together.
fn average_precision(scores: &[f64], positive: &[bool]) -> f64 {
    let p_total = positive.iter().filter(|&&b| b).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut ap = 0.0;
    for t in thresholds {
        let at = scores.iter().zip(positive).filter(|(&s, &p)| s == t && p).count() as f64;
        let above = scores.iter().filter(|&&s| s >= t).count() as f64;
        let tp = scores.iter().zip(positive).filter(|(&s, &p)| s >= t && p).count() as f64;
        ap += at / p_total * tp / above;
    }
    ap
}

#[test]
fn metrics_match_independent_oracles_on_random_sets() {
    for seed in 0..200 {
        let (scores, labels, threshold) = random_set(seed);
        let set = PredictionSet::with_threshold(scores.clone(), labels.clone(), threshold).unwrap();
        let report = evaluate(&set).unwrap();
        let n = scores.len() as f64;

        let mut w_sum = [0.0; 4];
        let mut recalls = [0.0; 2];
        let mut roc_w = 0.0;
        let mut pr_w = 0.0;
        for class in 0..2u8 {
            let [tp, fp, tn, fn_] = loop_counts(&scores, &labels, threshold, class);
            let k = report.counts[class as usize];
            assert_eq!([k.tp, k.fp, k.tn, k.fn_], [tp, fp, tn, fn_], "seed {seed} class {class}");
            let w = labels.iter().filter(|&&l| l == class).count() as f64 / n;
            assert!((report.weights[class as usize] - w).abs() < TOL);
            let (p, r, s) = (safe(tp, tp + fp), safe(tp, tp + fn_), safe(tn, tn + fp));
            let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            for (acc, v) in w_sum.iter_mut().zip([p, r, s, f]) {
                *acc += w * v;
            }
            recalls[class as usize] = r;
            let cs: Vec<f64> = scores.iter().map(|&x| if class == 1 { x } else { 1.0 - x }).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == class).collect();
            roc_w += w * mann_whitney(&cs, &pos);
            pr_w += w * average_precision(&cs, &pos);
        }
        let hits = scores
            .iter()
            .zip(&labels)
            .filter(|(&s, &l)| u8::from(s >= threshold) == l)
            .count() as f64;
        let acc = hits / n;
        let close = |a: f64, b: f64, what: &str| assert!((a - b).abs() < TOL, "seed {seed} {what}: {a} vs {b}");
        close(report.acc, acc, "acc");
        close(report.acc_std, (acc * (1.0 - acc)).sqrt(), "acc_std");
        close(report.bacc, (recalls[0] + recalls[1]) / 2.0, "bacc");
        close(report.pre, w_sum[0], "pre");
        close(report.rec, w_sum[1], "rec");
        close(report.spec, w_sum[2], "spec");
        close(report.f1, w_sum[3], "f1");
        close(report.roc_auc, roc_w, "roc_auc");
        close(report.pr_auc, pr_w, "pr_auc");

        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        close(roc_auc_binary(&scores, &pos).unwrap(), mann_whitney(&scores, &pos), "mann-whitney");
        close(pr_auc_binary(&scores, &pos).unwrap(), average_precision(&scores, &pos), "ap");
        let plain = roc_auc_binary(&scores, &pos).unwrap();
        assert!((roc_auc(&set).unwrap() - plain).abs() < 1e-12, "seed {seed}: weighted OvR vs plain");
    }
}

#[test]
fn majority_predictor_on_a_skewed_set() {
    let labels: Vec<u8> = (0..100).map(|i| u8::from(i >= 75)).collect();
    let set = PredictionSet::new(vec![0.2; 100], labels).unwrap();
    let r = evaluate(&set).unwrap();
    assert!((r.acc - 0.75).abs() < 1e-12);
    assert!((r.bacc - 0.5).abs() < 1e-12);
    assert!((r.roc_auc - 0.5).abs() < 1e-12);
    assert!(r.flags.iter().any(|f| f.starts_with("precision_class1")));
}

#[test]
fn all_positive_on_balanced_labels() {
    let labels: Vec<u8> = (0..10).map(|i| (i % 2) as u8).collect();
    let r = evaluate(&PredictionSet::new(vec![0.9; 10], labels).unwrap()).unwrap();
    assert!((r.rec - 0.5).abs() < 1e-12);
    assert!((r.acc - 0.5).abs() < 1e-12);
}

#[test]
fn two_sample_confusion() {
    let set = PredictionSet::new(vec![0.9, 0.1], vec![1, 0]).unwrap();
    let c = confusion(&set).counts[1];
    assert_eq!((c.tp, c.tn, c.fp, c.fn_), (1, 1, 0, 0));
    let r = evaluate(&set).unwrap();
    assert_eq!(r.values(), [1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn invalid_sets_are_rejected() {
    assert!(matches!(PredictionSet::new(vec![], vec![]), Err(Error::EmptyScores)));
    assert!(matches!(PredictionSet::new(vec![0.5], vec![0, 1]), Err(Error::Metrics(_))));
    assert!(PredictionSet::new(vec![1.5], vec![1]).is_err());
    assert!(PredictionSet::new(vec![0.5], vec![2]).is_err());
    assert!(PredictionSet::with_threshold(vec![0.5], vec![1], 1.5).is_err());
    let one_class = PredictionSet::new(vec![0.2, 0.8], vec![1, 1]).unwrap();
    assert!(matches!(evaluate(&one_class), Err(Error::Metrics(_))));
}

#[test]
fn prediction_file_round_trip() {
    let rows: Vec<PredictionRow> = (0..5)
        .map(|i| PredictionRow {
            source_id: format!("vol_{i:04}"),
            label: (i % 2) as u8,
            score: i as f64 / 7.0,
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("predictions.csv");
    write_predictions(&rows, &path).unwrap();
    let back = read_predictions(&path).unwrap();
    assert_eq!(back, rows);
    let set = prediction_set(&back, 0.5).unwrap();
    assert_eq!(set.labels(), [0, 1, 0, 1, 0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn equal_scores_give_chance_auc(s in 0.0f64..=1.0, n in 2usize..40) {
        let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let r = evaluate(&PredictionSet::new(vec![s; n], labels).unwrap()).unwrap();
        prop_assert!((r.roc_auc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn metrics_stay_in_unit_interval_and_ignore_order(seed in 0u64..100_000, rot in 1usize..10) {
        let (scores, labels, threshold) = random_set(seed);
        let r = evaluate(&PredictionSet::with_threshold(scores.clone(), labels.clone(), threshold).unwrap()).unwrap();
        prop_assert!(r.values().iter().all(|v| (0.0..=1.0).contains(v)));
        let k = rot % scores.len();
        let (mut s2, mut l2) = (scores, labels);
        s2.rotate_left(k);
        l2.rotate_left(k);
        let r2 = evaluate(&PredictionSet::with_threshold(s2, l2, threshold).unwrap()).unwrap();
        for (a, b) in r.values().iter().zip(r2.values()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn swapping_classes_preserves_weighted_auc(seed in 0u64..100_000) {
        let (scores, labels, _) = random_set(seed);
        let a = roc_auc(&PredictionSet::new(scores.clone(), labels.clone()).unwrap()).unwrap();
        let flipped = PredictionSet::new(
            scores.iter().map(|s| 1.0 - s).collect(),
            labels.iter().map(|l| 1 - l).collect(),
        )
        .unwrap();
        prop_assert!((roc_auc(&flipped).unwrap() - a).abs() < 1e-9);
    }
}
