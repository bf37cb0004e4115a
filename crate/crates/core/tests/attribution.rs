use m3net_core::attribution::{
    gradcam, mass_inside, nodule_mask, parse_saliency, trilinear, weighted_map, GradCamConfig, Readout,
    SaliencyVolume,
};
use m3net_core::fusion::FusionConfig;
use m3net_core::numerics::{ParamStore, Tensor};
use m3net_core::training::{M3Net, ModelConfig};
use m3net_core::volume_io::synth::{synth_samples, SynthConfig};
use m3net_core::volume_io::{extract_patches, NestedPatchSet};
use m3net_core::Error;
use proptest::prelude::*;

fn model(seed: u64) -> (M3Net, ParamStore<f32>) {
    let cfg = ModelConfig {
        scales: vec![64, 32],
        ..ModelConfig::default()
    };
    let fusion = FusionConfig {
        dim: 8,
        heads: 2,
        ffn_hidden: 16,
        ..FusionConfig::default()
    };
    let mut store = ParamStore::new();
    let net = M3Net::new(&cfg, &fusion, &mut store, seed).unwrap();
    (net, store)
}

fn sample(seed: u64) -> (NestedPatchSet, m3net_core::volume_io::synth::NoduleTruth, [usize; 3]) {
    let cfg = SynthConfig {
        count: 2,
        ..SynthConfig::default()
    };
    let s = synth_samples(&cfg, seed).unwrap().remove(0);
    let patch = extract_patches(&s.volume, &[64, 32], &s.truth.source_id);
    (patch, s.truth, s.volume.centroid())
}

fn cam(net: &M3Net, store: &ParamStore<f32>, patch: &NestedPatchSet, scale: usize, readout: Readout) -> SaliencyVolume {
    let cfg = GradCamConfig {
        scale,
        readout,
        ..GradCamConfig::default()
    };
    gradcam(net, store, patch, &cfg).unwrap()
}

#[test]
fn map_covers_the_crop_and_is_max_normalised() {
    let (net, store) = model(0);
    let (patch, _, _) = sample(1);
    for (scale, readout) in [(64, Readout::Head), (32, Readout::Head), (64, Readout::Fused)] {
        let s = cam(&net, &store, &patch, scale, readout);
        assert_eq!(s.dims, [scale, scale, 56]);
        assert_eq!(s.values.len(), scale * scale * 56);
        assert!(s.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        if !s.is_zero() {
            assert_eq!(s.values.iter().copied().fold(0.0f32, f32::max), 1.0);
        }
        assert!((0.0..=1.0).contains(&s.probability));
        assert_eq!(s.stage, net.encoder(scale).unwrap().num_stages() - 1);
    }
}

#[test]
fn zero_head_gives_an_all_zero_map() {
    let (net, mut store) = model(0);
    let idx = net.index_of(64).unwrap();
    for id in net.heads[idx].params() {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::zeros(shape);
    }
    let (patch, _, _) = sample(2);
    let s = cam(&net, &store, &patch, 64, Readout::Head);
    assert!(s.is_zero());
    assert_eq!(s.probability, 0.5);
}

#[test]
fn explicit_target_and_invalid_requests() {
    let (net, store) = model(3);
    let (patch, _, _) = sample(3);
    for target in [0, 1] {
        let cfg = GradCamConfig {
            target: Some(target),
            stage: Some(1),
            ..GradCamConfig::default()
        };
        let s = gradcam(&net, &store, &patch, &cfg).unwrap();
        assert_eq!((s.target, s.stage), (target, 1));
    }
    let bad = |cfg: GradCamConfig| gradcam(&net, &store, &patch, &cfg);
    assert!(matches!(bad(GradCamConfig { stage: Some(9), ..GradCamConfig::default() }), Err(Error::Attribution(_))));
    assert!(matches!(bad(GradCamConfig { target: Some(2), ..GradCamConfig::default() }), Err(Error::Attribution(_))));
    assert!(bad(GradCamConfig { scale: 96, ..GradCamConfig::default() }).is_err());
}

#[test]
fn channel_weighting_by_hand() {
    // Two channels on a 2×1×1 grid.
    let activ = Tensor::new([1, 2, 2, 1, 1], vec![1.0, 2.0, 3.0, -1.0]).unwrap();
    let grad = Tensor::new([1, 2, 2, 1, 1], vec![1.0, 1.0, -2.0, 0.0]).unwrap();
    // Weights 1 and −1: [1 − 3, 2 + 1] rectified.
    assert_eq!(weighted_map(&activ, &grad).unwrap(), [0.0, 3.0]);
    assert!(weighted_map(&activ, &Tensor::zeros([1, 2, 1, 1, 1])).is_err());
}

#[test]
fn trilinear_preserves_constants_and_identity() {
    let map: Vec<f32> = (0..24).map(|i| i as f32).collect();
    assert_eq!(trilinear(&map, [2, 3, 4], [2, 3, 4]), map);
    let flat = vec![0.25f32; 8];
    assert!(trilinear(&flat, [2, 2, 2], [7, 5, 9]).iter().all(|&v| (v - 0.25).abs() < 1e-7));
    // Along one axis: cell centres map to 0.25 and 0.75 of the source spacing.
    let up = trilinear(&[0.0, 1.0], [2, 1, 1], [4, 1, 1]);
    assert_eq!(up, [0.0, 0.25, 0.75, 1.0]);
}

#[test]
fn saliency_file_round_trip() {
    let s = SaliencyVolume {
        dims: [3, 2, 4],
        spacing: [0.7, 0.7, 1.25],
        values: (0..24).map(|i| i as f32 / 23.0).collect(),
        scale: 3,
        stage: 0,
        target: 1,
        probability: 0.8,
    };
    let bytes = s.to_bytes();
    let (dims, spacing, values) = parse_saliency(&bytes).unwrap();
    assert_eq!((dims, spacing, values), (s.dims, s.spacing, s.values.clone()));
    assert!(matches!(parse_saliency(&bytes[..bytes.len() - 4]), Err(Error::CountMismatch { .. })));
    assert!(matches!(parse_saliency(b"M3NVOL1\0"), Err(Error::BadMagic { .. })));
    assert_eq!(s.peak_slice(), 3);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("slice.csv");
    s.write_slice_csv(2, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 1 + 6);
    assert!(s.write_slice_csv(4, &path).is_err());
}

#[test]
fn mask_matches_the_nodule_and_uniform_saliency_is_the_baseline() {
    let (patch, truth, centroid) = sample(5);
    let dims = [64, 64, 56];
    let mask = nodule_mask(&truth, centroid, dims);
    let inside = mask.iter().filter(|&&m| m).count();
    let expected = 4.0 / 3.0 * std::f64::consts::PI * truth.radii.iter().product::<f64>();
    assert!((inside as f64 / expected - 1.0).abs() < 0.25, "{inside} voxels vs {expected:.0}");
    // The crop centre sits in the nodule.
    assert!(mask[(32 * 64 + 32) * 56 + 28]);

    let uniform = SaliencyVolume {
        dims,
        spacing: [1.0; 3],
        values: vec![1.0; dims.iter().product()],
        scale: 64,
        stage: 0,
        target: 1,
        probability: 1.0,
    };
    let m = mass_inside(&uniform, &mask).unwrap();
    assert!((m.mass_fraction - m.volume_fraction).abs() < 1e-12);
    assert!(!m.beats_baseline());
    assert!(mass_inside(&uniform, &mask[1..]).is_err());
    assert_eq!(patch.crop(64).unwrap().shape(), dims);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn upsampling_stays_within_source_range(vals in prop::collection::vec(0.0f32..1.0, 8), out in prop::array::uniform3(1usize..9)) {
        let up = trilinear(&vals, [2, 2, 2], out);
        prop_assert_eq!(up.len(), out.iter().product::<usize>());
        let (lo, hi) = vals.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        prop_assert!(up.iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
    }

    #[test]
    fn concentrating_mass_in_the_mask_beats_the_baseline(n in 8usize..200, k in 1usize..7, bump in 0.01f32..5.0) {
        let mask: Vec<bool> = (0..n).map(|i| i % 8 < k).collect();
        let values: Vec<f32> = mask.iter().map(|&m| if m { 1.0 + bump } else { 1.0 }).collect();
        let s = SaliencyVolume {
            dims: [n, 1, 1],
            spacing: [1.0; 3],
            values,
            scale: n,
            stage: 0,
            target: 0,
            probability: 0.5,
        };
        let m = mass_inside(&s, &mask).unwrap();
        prop_assert!(m.beats_baseline());
    }
}
