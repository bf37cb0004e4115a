use m3net_core::alignment::{
    align_loss, cov_align, info_nce, nuclear_penalty, orth_penalty, project, AlignWeights, PairWeights,
};
use m3net_core::numerics::{covariance_value, svd, Tape, Tensor, Var};
use m3net_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Value of a scalar loss of constant inputs.
fn eval<F>(inputs: &[Tensor<f64>], f: F) -> m3net_core::Result<f64>
where
    F: FnOnce(&mut Tape<f64>, &[Var]) -> m3net_core::Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

fn nce(zi: &Tensor<f64>, zj: &Tensor<f64>, tau: f64) -> f64 {
    eval(&[zi.clone(), zj.clone()], |t, v| info_nce(t, v[0], v[1], tau)).unwrap()
}

fn random(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    Tensor::uniform([rows, cols], 1.0, &mut rng(seed))
}

#[test]
fn projection_identity_zero_input_and_loop_oracle() {
    let f = random(4, 3, 1);
    let z = eval(&[f.clone(), Tensor::eye(3), Tensor::zeros([3])], |t, v| {
        let z = project(t, v[0], v[1], v[2])?;
        t.sum(z)
    })
    .unwrap();
    assert!((z - f.sum()).abs() < 1e-12);

    let mut tape = Tape::<f64>::new();
    let (w, b) = (random(3, 5, 2), random(1, 5, 3).reshape([5]).unwrap());
    let fv = tape.constant(f.clone());
    let zero = tape.constant(Tensor::zeros([4, 3]));
    let (wv, bv) = (tape.constant(w.clone()), tape.constant(b.clone()));
    let out = project(&mut tape, fv, wv, bv).unwrap();
    let from_zero = project(&mut tape, zero, wv, bv).unwrap();
    let (out, from_zero) = (tape.value(out).clone(), tape.value(from_zero).clone());
    for r in 0..4 {
        for c in 0..5 {
            let mut s = b.data()[c];
            for k in 0..3 {
                s += f.at(&[r, k]) * w.at(&[k, c]);
            }
            assert!((out.at(&[r, c]) - s).abs() < 1e-6);
            assert_eq!(from_zero.at(&[r, c]), b.data()[c]);
        }
    }
}

#[test]
fn info_nce_on_orthogonal_unit_rows() {
    let z = Tensor::eye(4);
    // −ln(e / (e + 3)) per anchor, the same in both directions.
    let expected = -(1f64.exp() / (1f64.exp() + 3.0)).ln();
    assert!((expected - 0.7437).abs() < 5e-5);
    assert!((nce(&z, &z, 1.0) - expected).abs() < 1e-12);
}

#[test]
fn info_nce_of_identical_rows_is_ln_b() {
    for (b, tau) in [(2, 0.1), (4, 1.0), (7, 3.5)] {
        let row = Tensor::from_fn([b, 3], |i| [0.3, -1.2, 2.0][i % 3]);
        assert!((nce(&row, &row, tau) - (b as f64).ln()).abs() < 1e-9);
    }
}

#[test]
fn info_nce_rejects_bad_inputs() {
    let mut z = random(3, 4, 0);
    assert!(matches!(
        eval(&[random(1, 4, 0), random(1, 4, 1)], |t, v| info_nce(t, v[0], v[1], 0.1)),
        Err(Error::Config(_))
    ));
    assert!(eval(&[z.clone(), z.clone()], |t, v| info_nce(t, v[0], v[1], 0.0)).is_err());
    assert!(eval(&[z.clone(), random(3, 5, 1)], |t, v| info_nce(t, v[0], v[1], 0.1)).is_err());
    z.data_mut()[4..8].fill(0.0);
    assert!(eval(&[z.clone(), z.clone()], |t, v| info_nce(t, v[0], v[1], 0.1)).is_err());
}

#[test]
fn info_nce_decreases_as_the_positive_gets_closer() {
    // Anchor e0, positive rotates towards e0, the negative stays at e1.
    let mut last = f64::INFINITY;
    for step in 0..=10 {
        let a = std::f64::consts::FRAC_PI_2 * (1.0 - step as f64 / 10.0);
        let zi = Tensor::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]]);
        let zj = Tensor::from_rows(&[&[a.cos(), 0.0, a.sin()], &[0.0, 1.0, 0.0]]);
        let l = eval(&[zi, zj], |t, v| info_nce(t, v[0], v[1], 0.5)).unwrap();
        assert!(l < last, "step {step}: {l} !< {last}");
        last = l;
    }
}

#[test]
fn covariance_alignment_closed_forms() {
    let a = Tensor::from_rows(&[&[1.0, 0.0], &[-1.0, 0.0]]);
    let b = Tensor::from_rows(&[&[0.0, 1.0], &[0.0, -1.0]]);
    assert_eq!(covariance_value(&a).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    let two = eval(&[a.clone(), b], cov_align).unwrap();
    assert!((two - 2.0).abs() < 1e-12);

    let z = random(6, 3, 4);
    assert_eq!(eval(&[z.clone(), z.clone(), z], cov_align).unwrap(), 0.0);
}

#[test]
fn three_scale_covariance_is_the_pairwise_sum() {
    for seed in 0..20 {
        let zs: Vec<Tensor<f64>> = (0..3).map(|i| random(5, 4, seed * 3 + i)).collect();
        let covs: Vec<Tensor<f64>> = zs.iter().map(|z| covariance_value(z).unwrap()).collect();
        let mut oracle = 0.0;
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            oracle += covs[i]
                .data()
                .iter()
                .zip(covs[j].data())
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>();
        }
        let got = eval(&zs, cov_align).unwrap();
        assert!((got - oracle).abs() < 1e-12 * oracle.max(1.0));
    }
}

#[test]
fn orthogonality_closed_forms() {
    let orth = |z: Tensor<f64>| eval(&[z], |t, v| orth_penalty(t, v[0])).unwrap();
    assert_eq!(orth(Tensor::eye(3)), 0.0);
    assert_eq!(orth(Tensor::eye(2).map(|v| 2.0 * v)), 18.0);
    assert_eq!(orth(Tensor::zeros([4, 3])), 3.0);
}

#[test]
fn nuclear_closed_forms() {
    let nuc = |z: Tensor<f64>| eval(&[z], |t, v| nuclear_penalty(t, v[0])).unwrap();
    assert!((nuc(Tensor::eye(3)) - 3.0).abs() < 1e-12);
    let u = [2.0 / 3f64.sqrt(); 3];
    let v = [0.0, 3.0 * 0.6, 3.0 * 0.8];
    let uv = Tensor::from_fn([3, 3], |i| u[i / 3] * v[i % 3]);
    assert!((nuc(uv) - 6.0).abs() < 1e-9);
    for seed in 0..10 {
        let z = random(5, 3, seed);
        let oracle: f64 = svd(&z).unwrap().s.iter().sum();
        assert!((nuc(z) - oracle).abs() < 1e-5);
    }
}

fn weights(nce: f64, cov: f64, orth: f64, nuc: f64) -> AlignWeights {
    AlignWeights {
        lambda_nce: PairWeights::Uniform(nce),
        lambda_cov: cov,
        lambda_orth: orth,
        lambda_nuc: nuc,
        tau: 0.3,
        beta: 1.0,
    }
}

#[test]
fn align_loss_is_the_weighted_component_sum() {
    for seed in 0..10 {
        let zs: Vec<Tensor<f64>> = (0..3).map(|i| random(4, 5, 100 + seed * 3 + i)).collect();
        let w = weights(0.7, 0.2, 0.05, 0.01);
        let mut tape = Tape::new();
        let vars: Vec<Var> = zs.iter().map(|z| tape.constant(z.clone())).collect();
        let terms = align_loss(&mut tape, &vars, &w).unwrap();
        let v = |x: Var| tape.value(x).item();

        let mut nce = 0.0;
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            nce += 0.7 * self::nce(&zs[i], &zs[j], 0.3);
        }
        let cov = eval(&zs, cov_align).unwrap();
        let orth: f64 = zs.iter().map(|z| eval(std::slice::from_ref(z), |t, x| orth_penalty(t, x[0])).unwrap()).sum();
        let nuc: f64 = zs.iter().map(|z| svd(z).unwrap().s.iter().sum::<f64>()).sum();

        assert!((v(terms.nce) - nce).abs() < 1e-6);
        assert!((v(terms.cov) - cov).abs() < 1e-6);
        assert!((v(terms.orth) - orth).abs() < 1e-6);
        assert!((v(terms.nuc) - nuc).abs() < 1e-6);
        let total = nce + 0.2 * cov + 0.05 * orth + 0.01 * nuc;
        assert!((v(terms.total) - total).abs() < 1e-6);
    }
}

#[test]
fn per_pair_weights_follow_pair_order() {
    let zs: Vec<Tensor<f64>> = (0..3).map(|i| random(4, 5, 7 + i)).collect();
    let w = AlignWeights {
        lambda_nce: PairWeights::PerPair(vec![0.0, 1.0, 0.0]),
        ..weights(0.0, 0.0, 0.0, 0.0)
    };
    let got = eval(&zs, |t, v| Ok(align_loss(t, v, &w)?.total)).unwrap();
    assert!((got - nce(&zs[0], &zs[2], 0.3)).abs() < 1e-12);

    let short = AlignWeights {
        lambda_nce: PairWeights::PerPair(vec![1.0]),
        ..w
    };
    assert!(matches!(eval(&zs, |t, v| Ok(align_loss(t, v, &short)?.total)), Err(Error::Config(_))));
}

#[test]
fn zero_weights_give_exact_zeros() {
    let zs: Vec<Tensor<f64>> = (0..2).map(|i| random(3, 4, i)).collect();
    let got = eval(&zs, |t, v| Ok(align_loss(t, v, &AlignWeights::zero())?.total)).unwrap();
    assert_eq!(got, 0.0);
    assert!(AlignWeights { tau: -1.0, ..AlignWeights::default() }.validate().is_err());
    assert!(AlignWeights { lambda_cov: -0.1, ..AlignWeights::default() }.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn info_nce_ignores_row_scaling(seed in 0u64..10_000, scales in prop::collection::vec(0.1f64..10.0, 8)) {
        let zi = random(4, 3, seed);
        let zj = random(4, 3, seed + 1);
        let scaled = |z: &Tensor<f64>, s: &[f64]| Tensor::from_fn([4, 3], |i| z.data()[i] * s[i / 3]);
        let a = nce(&zi, &zj, 0.2);
        let b = nce(&scaled(&zi, &scales[..4]), &scaled(&zj, &scales[4..]), 0.2);
        prop_assert!((a - b).abs() < 1e-9);
        prop_assert!((nce(&zi, &zj, 0.2) - nce(&zj, &zi, 0.2)).abs() < 1e-12);
    }

    #[test]
    fn nuclear_norm_is_absolutely_homogeneous(seed in 0u64..10_000, c in -5.0f64..5.0) {
        let z = random(4, 3, seed);
        let n = |z: Tensor<f64>| eval(&[z], |t, v| nuclear_penalty(t, v[0])).unwrap();
        let base = n(z.clone());
        prop_assert!((n(z.map(|v| c * v)) - c.abs() * base).abs() < 1e-9 * (1.0 + base * c.abs()));
    }

    #[test]
    fn penalties_are_non_negative(seed in 0u64..10_000) {
        let zs: Vec<Tensor<f64>> = (0..3).map(|i| random(5, 3, seed * 3 + i)).collect();
        prop_assert!(eval(&zs, cov_align).unwrap() >= 0.0);
        prop_assert!(eval(&zs[..1], |t, v| orth_penalty(t, v[0])).unwrap() >= 0.0);
        // Shifting every row by a constant leaves each covariance unchanged.
        let shifted: Vec<Tensor<f64>> = zs.iter().map(|z| z.map(|v| v + 3.0)).collect();
        let (a, b) = (eval(&zs, cov_align).unwrap(), eval(&shifted, cov_align).unwrap());
        prop_assert!((a - b).abs() < 1e-9);
    }
}
