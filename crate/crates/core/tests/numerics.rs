use m3net_core::numerics::{covariance, covariance_value, grad_check, svd, Tape, Tensor, Var};
use m3net_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn check<F>(f: F, params: &[Tensor<f64>], tol: f64)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> m3net_core::Result<Var>,
{
    let report = grad_check(f, params, 1e-5, tol).unwrap();
    assert!(report.passed(), "max rel err {:e}", report.max_rel_err());
}

#[test]
fn sum_gradient_is_ones() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_fn([4], |i| i as f64), 0);
    let y = tape.sum(x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.param(0).unwrap().data(), &[1.0; 4]);
}

#[test]
fn sum_of_squares_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::new([3], vec![1.0, -2.0, 3.0]).unwrap(), 0);
    let y = tape.sum_sq(x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.param(0).unwrap().data(), &[2.0, -4.0, 6.0]);
}

#[test]
fn shared_input_accumulates() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::ones([5]), 0);
    let a = tape.sum(x).unwrap();
    let b = tape.sum(x).unwrap();
    let y = tape.add(a, b).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.param(0).unwrap().data(), &[2.0; 5]);
}

#[test]
fn unreachable_param_gets_zero_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::ones([2]), 0);
    let _unused = tape.param(Tensor::ones([3]), 1);
    let y = tape.sum(x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.param(1).unwrap().data(), &[0.0; 3]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::ones([2]), 0);
    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn non_finite_results_are_errors() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full([2], f64::MAX));
    assert!(matches!(tape.add(x, x), Err(Error::NonFinite { op: "add" })));
}

#[test]
fn quadratic_form_checks_tightly() {
    let report = grad_check(
        |t, p| t.sum_sq(p[0]),
        &[Tensor::new([2], vec![1.0, 2.0]).unwrap()],
        1e-5,
        1e-9,
    )
    .unwrap();
    assert!(report.passed());
    assert!(report.max_rel_err() < 1e-9);
}

#[test]
fn non_deterministic_function_is_caught() {
    use std::cell::Cell;
    let calls = Cell::new(0.0);
    let result = grad_check(
        |t, p| {
            calls.set(calls.get() + 1.0);
            let s = t.sum(p[0])?;
            t.scale(s, calls.get())
        },
        &[Tensor::ones([2])],
        1e-5,
        1e-4,
    );
    assert!(matches!(result, Err(Error::NonDeterministic { .. })));
}

#[test]
fn cross_entropy_of_softmax_layer_matches_fd() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let w = Tensor::<f64>::uniform([3, 3], 1.0, &mut r);
        let x = Tensor::<f64>::uniform([2, 3], 1.0, &mut r);
        check(
            |t, p| {
                let logits = t.matmul(p[1], p[0], false, true)?;
                t.cross_entropy(logits, &[0, 2])
            },
            &[w, x],
            1e-4,
        );
    }
}

#[test]
fn elementwise_and_broadcast_ops_match_fd() {
    for seed in 0..5 {
        let mut r = rng(100 + seed);
        let x = Tensor::<f64>::uniform([2, 3, 4], 1.0, &mut r);
        let v = Tensor::<f64>::uniform([3], 1.0, &mut r);
        let u = Tensor::<f64>::uniform([4], 1.0, &mut r);
        let y = Tensor::<f64>::uniform([2, 3, 4], 1.0, &mut r);
        check(
            |t, p| {
                let a = t.mul_axis(p[0], p[1], 1)?;
                let b = t.add_axis(a, p[2], 2)?;
                let c = t.mul(b, p[3])?;
                let d = t.sub(c, p[0])?;
                let e = t.gelu(d)?;
                let f = t.swap_last2(e)?;
                let ys = t.swap_last2(p[3])?;
                let g = t.concat(f, ys, 1)?;
                let h = t.mean_axis(g, 1)?;
                let i = t.layer_norm(h)?;
                let j = t.mul(i, i)?;
                let k = t.log_softmax(j)?;
                let m = t.softmax(k)?;
                let n = t.mul(m, h)?;
                t.sum(n)
            },
            &[x, v, u, y],
            1e-4,
        );
    }
}

#[test]
fn matmul_transpose_variants_match_fd() {
    let mut r = rng(7);
    for &(ta, tb) in &[(false, false), (false, true), (true, false), (true, true)] {
        let a = if ta { Tensor::<f64>::uniform([3, 2], 1.0, &mut r) } else { Tensor::uniform([2, 3], 1.0, &mut r) };
        let b = if tb { Tensor::<f64>::uniform([4, 3], 1.0, &mut r) } else { Tensor::uniform([3, 4], 1.0, &mut r) };
        check(
            |t, p| {
                let c = t.matmul(p[0], p[1], ta, tb)?;
                let s = t.gelu(c)?;
                t.sum_sq(s)
            },
            &[a, b],
            1e-4,
        );
    }
}

#[test]
fn normalize_rows_matches_fd_and_rejects_zero_rows() {
    let mut r = rng(3);
    let x = Tensor::<f64>::uniform([3, 4], 1.0, &mut r);
    let y = Tensor::<f64>::uniform([3, 4], 1.0, &mut r);
    check(
        |t, p| {
            let n = t.normalize_rows(p[0])?;
            let c = t.mul(n, p[1])?;
            t.sum(c)
        },
        &[x, y],
        1e-4,
    );
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]));
    assert!(matches!(tape.normalize_rows(z), Err(Error::ZeroNorm { row: 1 })));
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize) -> Tensor<f64> {
    let (b, cin, dims) = (x.shape()[0], x.shape()[1], [x.shape()[2], x.shape()[3], x.shape()[4]]);
    let cout = w.shape()[0];
    let od: Vec<usize> = dims.iter().map(|&n| (n - 1) / stride + 1).collect();
    let mut out = Tensor::zeros([b, cout, od[0], od[1], od[2]]);
    for bi in 0..b {
        for co in 0..cout {
            for ox in 0..od[0] {
                for oy in 0..od[1] {
                    for oz in 0..od[2] {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for kx in 0..3 {
                                for ky in 0..3 {
                                    for kz in 0..3 {
                                        let ix = (ox * stride + kx) as isize - 1;
                                        let iy = (oy * stride + ky) as isize - 1;
                                        let iz = (oz * stride + kz) as isize - 1;
                                        let inside = [ix, iy, iz]
                                            .iter()
                                            .zip(&dims)
                                            .all(|(&i, &n)| i >= 0 && (i as usize) < n);
                                        if inside {
                                            acc += x.at(&[bi, ci, ix as usize, iy as usize, iz as usize])
                                                * w.at(&[co, ci, kx, ky, kz]);
                                        }
                                    }
                                }
                            }
                        }
                        let o = out.offset(&[bi, co, ox, oy, oz]);
                        out.data_mut()[o] = acc;
                    }
                }
            }
        }
    }
    out
}

#[test]
fn conv3d_matches_naive_loops() {
    let mut r = rng(11);
    for &stride in &[1, 2] {
        let x = Tensor::<f64>::uniform([2, 2, 5, 4, 6], 1.0, &mut r);
        let w = Tensor::<f64>::uniform([3, 2, 3, 3, 3], 1.0, &mut r);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let y = tape.conv3d(xv, wv, stride).unwrap();
        let want = naive_conv(&x, &w, stride);
        assert_eq!(tape.shape(y), want.shape());
        assert!(tape.value(y).max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn conv3d_matches_fd() {
    let mut r = rng(12);
    for &stride in &[1, 2] {
        let x = Tensor::<f64>::uniform([1, 2, 4, 3, 5], 1.0, &mut r);
        let w = Tensor::<f64>::uniform([2, 2, 3, 3, 3], 0.5, &mut r);
        let b = Tensor::<f64>::uniform([2], 0.5, &mut r);
        check(
            |t, p| {
                let y = t.conv3d(p[0], p[1], stride)?;
                let y = t.add_axis(y, p[2], 1)?;
                let y = t.gelu(y)?;
                t.sum_sq(y)
            },
            &[x, w, b],
            1e-4,
        );
    }
}

#[test]
fn attention_ops_match_fd() {
    for seed in 0..5 {
        let mut r = rng(200 + seed);
        let q = Tensor::<f64>::uniform([2, 3, 4], 1.0, &mut r);
        let k = Tensor::<f64>::uniform([2, 5, 4], 1.0, &mut r);
        let v = Tensor::<f64>::uniform([2, 5, 4], 1.0, &mut r);
        let lt = Tensor::<f64>::uniform([2], 0.5, &mut r);
        let probe = Tensor::<f64>::uniform([2, 3, 4], 1.0, &mut r);
        check(
            |t, p| {
                let a = t.attn_scores(p[0], p[1], p[3], 2)?;
                let o = t.attn_apply(a, p[2])?;
                let o = t.mul(o, p[4])?;
                let s = t.sum(o)?;
                let reg = t.sum_sq(a)?;
                t.add(s, reg)
            },
            &[q, k, v, lt, probe],
            1e-4,
        );
    }
}

#[test]
fn attention_rows_are_distributions() {
    let mut r = rng(5);
    let mut tape = Tape::<f32>::new();
    let q = tape.constant(Tensor::uniform([2, 7, 8], 3.0, &mut r));
    let k = tape.constant(Tensor::uniform([2, 9, 8], 3.0, &mut r));
    let lt = tape.constant(Tensor::zeros([4]));
    let a = tape.attn_scores(q, k, lt, 4).unwrap();
    for row in tape.value(a).data().chunks(9) {
        let s: f32 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-5);
        assert!(row.iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn nuclear_norm_matches_fd_on_separated_spectrum() {
    for seed in 0..20 {
        let mut r = rng(300 + seed);
        let m = Tensor::<f64>::uniform([3, 3], 1.0, &mut r);
        let d = svd(&m).unwrap();
        let gaps = d.s.windows(2).all(|w| w[0] - w[1] > 0.05) && d.s[2] > 0.05;
        if !gaps {
            continue;
        }
        check(|t, p| t.nuclear_norm(p[0]), &[m], 1e-3);
    }
}

#[test]
fn covariance_closed_forms() {
    let c = covariance_value(&Tensor::<f64>::from_rows(&[&[1.0, 0.0], &[-1.0, 0.0]])).unwrap();
    assert_eq!(c.data(), &[1.0, 0.0, 0.0, 0.0]);
    let same = Tensor::<f64>::from_rows(&[&[0.3, -2.0, 5.0][..]; 4]);
    assert!(covariance_value(&same).unwrap().data().iter().all(|&v| v.abs() < 1e-15));
}

fn loop_covariance(z: &Tensor<f64>) -> Vec<f64> {
    let (b, d) = z.dims2().unwrap();
    let mean: Vec<f64> = (0..d).map(|j| (0..b).map(|i| z.at(&[i, j])).sum::<f64>() / b as f64).collect();
    let mut out = vec![0.0; d * d];
    for p in 0..d {
        for q in 0..d {
            let s: f64 = (0..b).map(|i| (z.at(&[i, p]) - mean[p]) * (z.at(&[i, q]) - mean[q])).sum();
            out[p * d + q] = s / b as f64;
        }
    }
    out
}

#[test]
fn covariance_matches_loop_oracle_and_fd() {
    let mut r = rng(9);
    let z = Tensor::<f64>::uniform([8, 4], 2.0, &mut r);
    let c = covariance_value(&z).unwrap();
    for (a, b) in c.data().iter().zip(loop_covariance(&z)) {
        assert!((a - b).abs() < 1e-6);
    }
    let probe = Tensor::<f64>::uniform([4, 4], 1.0, &mut r);
    check(
        |t, p| {
            let c = covariance(t, p[0])?;
            let c = t.mul(c, p[1])?;
            t.sum(c)
        },
        &[z, probe],
        1e-4,
    );
}

proptest! {
    #[test]
    fn covariance_is_symmetric_psd_and_row_permutation_invariant(
        vals in prop::collection::vec(-3.0f64..3.0, 15),
        shift in 0usize..5,
    ) {
        let z = Tensor::new([5, 3], vals).unwrap();
        let c = covariance_value(&z).unwrap();
        let rows: Vec<Vec<f64>> = z.data().chunks(3).map(|r| r.to_vec()).collect();
        let rotated: Vec<f64> = (0..5).flat_map(|i| rows[(i + shift) % 5].clone()).collect();
        let c2 = covariance_value(&Tensor::new([5, 3], rotated).unwrap()).unwrap();
        prop_assert!(c.max_abs_diff(&c2) < 1e-12);
        prop_assert!(c.max_abs_diff(&c.t().unwrap()) < 1e-15);
        // PSD: xᵀ C x >= 0 for the basis and a few mixed vectors
        for x in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, -1.0, 0.5], [0.2, 0.7, -1.0]] {
            let mut q = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    q += x[i] * c.at(&[i, j]) * x[j];
                }
            }
            prop_assert!(q >= -1e-6);
        }
    }

    #[test]
    fn svd_energy_matches_frobenius(vals in prop::collection::vec(-5.0f64..5.0, 12), wide in any::<bool>()) {
        let shape = if wide { [3, 4] } else { [4, 3] };
        let m = Tensor::new(shape, vals).unwrap();
        let d = svd(&m).unwrap();
        let energy: f64 = d.s.iter().map(|s| s * s).sum();
        let fro = m.frobenius_norm().powi(2);
        prop_assert!((energy - fro).abs() <= 1e-6 * fro.max(1e-12));
        prop_assert!(d.reconstruct().max_abs_diff(&m) <= 1e-5 * m.frobenius_norm().max(1e-12));
    }
}
