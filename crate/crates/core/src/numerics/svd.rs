//! Thin singular value decomposition by one-sided (Hestenes) Jacobi rotations.
//!
//! Columns of a working copy are rotated pairwise until mutually orthogonal; the
//! column norms are then the singular values. The work is done in `f64` whatever
//! the tensor precision.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// `M = U · diag(S) · Vᵀ` with `U: m×k`, `S: k`, `V: n×k`, `k = min(m, n)`.
#[derive(Clone, Debug)]
pub struct Svd<T> {
    pub u: Tensor<T>,
    pub s: Vec<T>,
    pub v: Tensor<T>,
}

const ROTATION_TOL: f64 = 1e-15;

pub fn svd<T: Real>(m: &Tensor<T>) -> Result<Svd<T>> {
    let (rows, cols) = m.dims2()?;
    if !m.is_finite() {
        return Err(Error::NonFinite { op: "svd" });
    }
    let a: Vec<f64> = m.data().iter().map(|v| v.as_f64()).collect();
    let (u, s, v) = if rows >= cols {
        jacobi_tall(&a, rows, cols)?
    } else {
        // Mᵀ = U' S V'ᵀ  =>  M = V' S U'ᵀ
        let at: Vec<f64> = (0..cols * rows)
            .map(|i| a[(i % rows) * cols + i / rows])
            .collect();
        let (u2, s2, v2) = jacobi_tall(&at, cols, rows)?;
        (v2, s2, u2)
    };
    let k = rows.min(cols);
    Ok(Svd {
        u: Tensor::from_fn([rows, k], |i| T::from_f64_lossy(u[i])),
        s: s.into_iter().map(T::from_f64_lossy).collect(),
        v: Tensor::from_fn([cols, k], |i| T::from_f64_lossy(v[i])),
    })
}

/// SVD of a row-major `m×n` matrix with `m >= n`. Returns row-major `U (m×n)`,
/// descending `S`, row-major `V (n×n)`.
fn jacobi_tall(a: &[f64], m: usize, n: usize) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    // column-major working copies make the column rotations contiguous
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a[i * n + j]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let max_sweeps = 100 * n.max(1);
    let mut converged = n < 2;
    let mut residual = 0.0;
    let mut sweeps = 0;
    while !converged && sweeps < max_sweeps {
        sweeps += 1;
        residual = 0.0f64;
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha: f64 = w[p].iter().map(|x| x * x).sum();
                let beta: f64 = w[q].iter().map(|x| x * x).sum();
                let gamma: f64 = w[p].iter().zip(&w[q]).map(|(x, y)| x * y).sum();
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(off);
                if off <= ROTATION_TOL {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::SvdNoConvergence { sweeps, residual });
    }

    let norms: Vec<f64> = w.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let smax = norms.iter().copied().fold(0.0, f64::max);
    let floor = smax * 1e-13 * m as f64;
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        if norms[j] > floor && norms[j] > 0.0 {
            u_cols.push(w[j].iter().map(|x| x / norms[j]).collect());
        } else {
            u_cols.push(vec![0.0; m]);
            missing.push(slot);
        }
    }
    complete_orthonormal(&mut u_cols, &missing, m);

    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let mut u = vec![0.0; m * n];
    let mut vv = vec![0.0; n * n];
    for (slot, &j) in order.iter().enumerate() {
        for i in 0..m {
            u[i * n + slot] = u_cols[slot][i];
        }
        for i in 0..n {
            vv[i * n + slot] = v[j][i];
        }
    }
    Ok((u, s, vv))
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fill the `missing` columns with unit vectors orthogonal to all others
/// (Gram-Schmidt against the standard basis).
fn complete_orthonormal(cols: &mut [Vec<f64>], missing: &[usize], m: usize) {
    let mut basis = 0;
    for &slot in missing {
        while basis < m {
            let mut cand = vec![0.0; m];
            cand[basis] = 1.0;
            basis += 1;
            for _ in 0..2 {
                for (other, col) in cols.iter().enumerate() {
                    if other == slot || col.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    let dot: f64 = col.iter().zip(&cand).map(|(a, b)| a * b).sum();
                    for (c, a) in cand.iter_mut().zip(col) {
                        *c -= dot * a;
                    }
                }
            }
            let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                cols[slot] = cand.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

impl<T: Real> Svd<T> {
    /// `U · Vᵀ`, the (sub)gradient of the nuclear norm.
    pub fn polar_factor(&self) -> Tensor<T> {
        let (m, k) = (self.u.shape()[0], self.u.shape()[1]);
        let n = self.v.shape()[0];
        Tensor::from_fn([m, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            (0..k).map(|l| self.u.data()[i * k + l] * self.v.data()[j * k + l]).sum()
        })
    }

    pub fn reconstruct(&self) -> Tensor<T> {
        let (m, k) = (self.u.shape()[0], self.u.shape()[1]);
        let n = self.v.shape()[0];
        Tensor::from_fn([m, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            (0..k)
                .map(|l| self.u.data()[i * k + l] * self.s[l] * self.v.data()[j * k + l])
                .sum()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn orthonormality_error(q: &Tensor<f64>) -> f64 {
        let (r, c) = q.dims2().unwrap();
        let mut worst = 0.0f64;
        for a in 0..c {
            for b in 0..c {
                let dot: f64 = (0..r).map(|i| q.at(&[i, a]) * q.at(&[i, b])).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        worst
    }

    fn relative_residual(m: &Tensor<f64>, d: &Svd<f64>) -> f64 {
        let r = d.reconstruct();
        let diff: f64 = m
            .data()
            .iter()
            .zip(r.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        diff / m.frobenius_norm().max(1e-12)
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let d = svd(&Tensor::<f64>::eye(3)).unwrap();
        assert_eq!(d.s, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn rank_one_outer_product() {
        // |u| = 2, |v| = 3
        let u = [2.0 / 3.0_f64.sqrt(); 3];
        let v = [3.0 / 2.0_f64.sqrt(), 0.0, -3.0 / 2.0_f64.sqrt()];
        let m = Tensor::<f64>::from_fn([3, 3], |i| u[i / 3] * v[i % 3]);
        let d = svd(&m).unwrap();
        assert!((d.s[0] - 6.0).abs() < 1e-12);
        assert!(d.s[1].abs() < 1e-12 && d.s[2].abs() < 1e-12);
        assert!(orthonormality_error(&d.u) < 1e-10);
        assert!(orthonormality_error(&d.v) < 1e-10);
        assert!(relative_residual(&m, &d) < 1e-12);
    }

    #[test]
    fn random_shapes_reconstruct_and_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(r, c) in &[(4, 3), (3, 4), (6, 6), (1, 5), (5, 1), (8, 4)] {
            let m = Tensor::<f64>::uniform([r, c], 1.0, &mut rng);
            let d = svd(&m).unwrap();
            assert!(relative_residual(&m, &d) < 1e-5, "{r}x{c}");
            assert!(orthonormality_error(&d.u) < 1e-5);
            assert!(orthonormality_error(&d.v) < 1e-5);
            assert!(d.s.windows(2).all(|p| p[0] >= p[1]));
            assert!(d.s.iter().all(|&s| s >= 0.0));
            let energy: f64 = d.s.iter().map(|s| s * s).sum();
            let fro = m.frobenius_norm().powi(2);
            assert!(((energy - fro) / fro).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_matrix_gets_completed_bases() {
        let d = svd(&Tensor::<f64>::zeros([3, 2])).unwrap();
        assert_eq!(d.s, vec![0.0, 0.0]);
        assert!(orthonormality_error(&d.u) < 1e-12);
    }
}
