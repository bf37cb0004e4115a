use m3net_core::numerics::Tensor;
use m3net_core::volume_io::synth::{synth_generate, synth_samples, SynthConfig, MANIFEST_FILE};
use m3net_core::volume_io::{
    augment, binarize_label, central_window, extract_crop, extract_nested, read_volume, split_dataset, write_volume,
    Label, Manifest, ManifestEntry, NestedPatchSet, Split, SplitFractions, Transform, Volume, CROP_DEPTH, FILL_HU,
};
use m3net_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn linear_volume(dims: [usize; 3], centroid: [usize; 3]) -> Volume {
    let n: usize = dims.iter().product();
    Volume::new(dims, [1.0, 1.0, 1.0], centroid, (0..n).map(|i| (i % 30000) as i16).collect()).unwrap()
}

#[test]
fn zero_volume_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("z.m3nvol");
    let v = Volume::new([2, 2, 2], [0.5, 0.5, 1.0], [1, 1, 1], vec![0; 8]).unwrap();
    write_volume(&v, &path).unwrap();
    assert_eq!(read_volume(&path).unwrap(), v);
}

#[test]
fn linear_index_volume_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lin.m3nvol");
    let v = linear_volume([7, 5, 3], [3, 2, 1]);
    write_volume(&v, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let back = read_volume(&path).unwrap();
    assert_eq!(back, v);
    assert_eq!(back.to_bytes(), bytes);
}

#[test]
fn malformed_files_give_distinct_errors() {
    let v = linear_volume([4, 4, 4], [0, 0, 0]);
    let bytes = v.to_bytes();

    let short = &bytes[..bytes.len() - 2];
    assert!(matches!(Volume::from_bytes(short), Err(Error::Truncated { .. })));
    assert!(matches!(Volume::from_bytes(&bytes[..20]), Err(Error::Truncated { .. })));

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(Volume::from_bytes(&magic), Err(Error::BadMagic { .. })));

    let mut long = bytes.clone();
    long.extend_from_slice(&[0, 0]);
    assert!(matches!(Volume::from_bytes(&long), Err(Error::CountMismatch { .. })));
}

#[test]
fn centered_crops_need_no_fill() {
    let v = linear_volume([200, 200, 200], [100, 100, 100]);
    let p = extract_nested(&v, "c");
    for (s, crop) in &p.crops {
        assert_eq!(crop.shape(), &[*s, *s, CROP_DEPTH]);
        assert!(crop.data().iter().all(|&x| x != FILL_HU));
    }
}

#[test]
fn corner_centroid_fills_with_air() {
    let v = linear_volume([10, 10, 10], [0, 0, 0]);
    let p = extract_nested(&v, "corner");
    let x32 = p.x32().unwrap();
    assert_eq!(x32.shape(), &[32, 32, 56]);
    // voxel (16, 16, 28) is the centroid; everything before it on an axis is outside
    assert_eq!(x32.at(&[16, 16, 28]), 0.0);
    assert_eq!(x32.at(&[15, 16, 28]), FILL_HU);
    assert_eq!(x32.at(&[17, 17, 29]), f32::from(v.get(1, 1, 1)));
    assert_eq!(x32.at(&[31, 31, 55]), FILL_HU);
}

#[test]
fn crops_match_brute_force_indexing() {
    let v = linear_volume([40, 30, 20], [11, 25, 4]);
    for s in [32, 48, 64] {
        let crop = extract_crop(&v, s, CROP_DEPTH);
        for i in 0..s {
            for j in 0..s {
                for k in 0..CROP_DEPTH {
                    let (x, y, z) = (11 + i as isize - (s / 2) as isize, 25 + j as isize - (s / 2) as isize, 4 + k as isize - 28);
                    let inside = (0..40).contains(&x) && (0..30).contains(&y) && (0..20).contains(&z);
                    let want = if inside { f32::from(v.get(x as usize, y as usize, z as usize)) } else { FILL_HU };
                    assert_eq!(crop.at(&[i, j, k]), want);
                }
            }
        }
    }
}

fn assert_nested(p: &NestedPatchSet) {
    let (x96, x64, x32) = (p.x96().unwrap(), p.x64().unwrap(), p.x32().unwrap());
    assert_eq!(&central_window(x64, 32).unwrap(), x32);
    assert_eq!(&central_window(x96, 64).unwrap(), x64);
}

#[test]
fn nested_crops_agree_on_shared_region() {
    assert_nested(&extract_nested(&linear_volume([120, 90, 70], [60, 40, 35]), "a"));
    assert_nested(&extract_nested(&linear_volume([50, 50, 50], [3, 47, 10]), "b"));
}

#[test]
fn label_rule() {
    assert_eq!(binarize_label(&[5, 5, 4, 4]).unwrap(), Label::Malignant);
    assert_eq!(binarize_label(&[3, 3, 3, 3]).unwrap(), Label::Benign);
    assert_eq!(binarize_label(&[2]).unwrap(), Label::Benign);
    assert!(matches!(binarize_label(&[]), Err(Error::EmptyScores)));
    assert!(matches!(binarize_label(&[0, 3]), Err(Error::ScoreOutOfRange(0))));
}

fn sphere_patch() -> NestedPatchSet {
    let dims = [100, 100, 60];
    let c = [50usize, 50, 30];
    let mut voxels = Vec::new();
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let d2 = [x, y, z].iter().zip(&c).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>();
                voxels.push(if d2 <= 64.0 { 40 } else { -1000 });
            }
        }
    }
    let v = Volume::new(dims, [1.0; 3], c, voxels).unwrap();
    let mut p = extract_nested(&v, "sphere");
    p.label = Some(Label::Malignant);
    p
}

#[test]
fn identity_transform_is_a_no_op() {
    let p = sphere_patch();
    assert_eq!(Transform::IDENTITY.apply(&p), p);
}

#[test]
fn half_turn_of_a_centered_sphere_is_invariant() {
    let p = sphere_patch();
    let t = Transform { flip: false, rotation_deg: Some(180.0) };
    let out = t.apply(&p);
    for ((_, a), (_, b)) in p.crops.iter().zip(&out.crops) {
        assert!(a.max_abs_diff(b) < 1e-4);
    }
}

#[test]
fn augmentation_is_seeded_and_preserves_shape_and_label() {
    let p = sphere_patch();
    let a = augment(&p, &mut ChaCha8Rng::seed_from_u64(4));
    let b = augment(&p, &mut ChaCha8Rng::seed_from_u64(4));
    assert_eq!(a, b);
    assert_eq!(a.label, p.label);
    assert_eq!(a.sizes(), p.sizes());
    for ((_, x), (_, y)) in a.crops.iter().zip(&p.crops) {
        assert_eq!(x.shape(), y.shape());
    }
}

#[test]
fn both_branches_fire_about_half_the_time() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let draws: Vec<Transform> = (0..2000).map(|_| Transform::sample(&mut rng)).collect();
    let flips = draws.iter().filter(|t| t.flip).count();
    let rots = draws.iter().filter(|t| t.rotation_deg.is_some()).count();
    assert!((900..1100).contains(&flips));
    assert!((900..1100).contains(&rots));
    assert!(draws.iter().filter_map(|t| t.rotation_deg).all(|a| (0.0..=180.0).contains(&a)));
}

fn entries(labels: &[u8]) -> Manifest {
    Manifest {
        entries: labels
            .iter()
            .enumerate()
            .map(|(i, &l)| ManifestEntry {
                path: format!("v{i}.m3nvol").into(),
                centroid: [0, 0, 0],
                scores: vec![if l == 1 { 5 } else { 1 }],
                split: None,
            })
            .collect(),
        root: Default::default(),
    }
}

fn counts(m: &Manifest) -> [usize; 3] {
    Split::ALL.map(|s| m.count(s))
}

#[test]
fn hundred_balanced_entries_split_70_10_20_with_both_labels() {
    let labels: Vec<u8> = (0..100).map(|i| (i % 2) as u8).collect();
    let m = split_dataset(&entries(&labels), SplitFractions::default(), 0).unwrap();
    assert_eq!(counts(&m), [70, 10, 20]);
    for s in Split::ALL {
        let labels: std::collections::BTreeSet<Label> = m.in_split(s).map(|e| e.label().unwrap()).collect();
        assert_eq!(labels.len(), 2, "{s}");
    }
}

#[test]
fn ten_entries_split_7_1_2() {
    let labels: Vec<u8> = (0..10).map(|i| (i % 2) as u8).collect();
    let m = split_dataset(&entries(&labels), SplitFractions::default(), 3).unwrap();
    assert_eq!(counts(&m), [7, 1, 2]);
}

#[test]
fn split_is_seeded_and_stratification_needs_three_per_class() {
    let labels: Vec<u8> = (0..40).map(|i| u8::from(i % 3 == 0)).collect();
    let a = split_dataset(&entries(&labels), SplitFractions::default(), 9).unwrap();
    let b = split_dataset(&entries(&labels), SplitFractions::default(), 9).unwrap();
    assert_eq!(a, b);
    let err = split_dataset(&entries(&[0, 0, 0, 0, 1, 1]), SplitFractions::default(), 0);
    assert!(matches!(err, Err(Error::TooFewToStratify { label: 1, count: 2 })));
}

#[test]
fn acceptance_fractions_give_200_40_60() {
    let labels: Vec<u8> = (0..300).map(|i| (i % 2) as u8).collect();
    let f = SplitFractions { val: 40.0 / 300.0, test: 0.2 };
    let m = split_dataset(&entries(&labels), f, 0).unwrap();
    assert_eq!(counts(&m), [200, 40, 60]);
}

#[test]
fn manifest_round_trips_through_csv() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = entries(&[0, 1, 1, 0]);
    m.entries[1].scores = vec![4, 5, 3];
    m.entries[2].split = Some(Split::Val);
    let path = dir.path().join("m.csv");
    m.write(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("path,cx,cy,cz,scores,split\n"));
    assert!(text.contains("4|5|3"));
    let back = Manifest::read(&path).unwrap();
    assert_eq!(back.entries, m.entries);
}

#[test]
fn generator_writes_balanced_reproducible_sets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { count: 4, dims: [40, 40, 30], ..Default::default() };
    let m = synth_generate(&cfg, 5, dir.path()).unwrap();
    assert_eq!(m.entries.len(), 4);
    let malignant = m.entries.iter().filter(|e| e.label().unwrap() == Label::Malignant).count();
    assert_eq!(malignant, 2);
    let again = Manifest::read(dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(again.entries, m.entries);

    let a = synth_samples(&cfg, 5).unwrap();
    let b = synth_samples(&cfg, 5).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.volume.to_bytes(), y.volume.to_bytes());
    }
    let on_disk = read_volume(m.resolve(&m.entries[0])).unwrap();
    assert_eq!(on_disk, a[0].volume);
}

fn sq_dist(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| f64::from(x - y).powi(2)).sum()
}

#[test]
fn nearest_neighbor_separates_easy_micro_crops() {
    let cfg = SynthConfig { count: 24, difficulty: 0.0, ..Default::default() };
    let samples = synth_samples(&cfg, 11).unwrap();
    let crops: Vec<(Tensor<f32>, Label)> = samples
        .iter()
        .map(|s| (extract_crop(&s.volume, 32, CROP_DEPTH), s.truth.label))
        .collect();
    let (reference, held_out) = crops.split_at(16);
    for (x, label) in held_out {
        let nearest = reference
            .iter()
            .min_by(|a, b| sq_dist(x, &a.0).total_cmp(&sq_dist(x, &b.0)))
            .unwrap();
        assert_eq!(nearest.1, *label);
    }
}

proptest! {
    #[test]
    fn label_ignores_score_order(mut scores in prop::collection::vec(1u8..=5, 1..8), seed in any::<u64>()) {
        let a = binarize_label(&scores).unwrap();
        use rand::seq::SliceRandom;
        scores.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(a, binarize_label(&scores).unwrap());
    }

    #[test]
    fn split_partitions_every_entry(labels in prop::collection::vec(0u8..2, 12..60), seed in any::<u64>()) {
        let ones = labels.iter().filter(|&&l| l == 1).count();
        prop_assume!(!(1..3).contains(&ones) && !(1..3).contains(&(labels.len() - ones)));
        let m = split_dataset(&entries(&labels), SplitFractions::default(), seed).unwrap();
        prop_assert!(m.entries.iter().all(|e| e.split.is_some()));
        prop_assert_eq!(counts(&m).iter().sum::<usize>(), labels.len());
    }
}
