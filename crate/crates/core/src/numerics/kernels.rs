//! Raw loops behind the tape operations. Everything here works on flat slices.

use super::tensor::Real;

/// Stored row-major matrix with an optional transpose applied at use.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T: Real> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize, transposed: bool) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            transposed,
        }
    }

    /// Logical (rows, cols) after the transpose flag.
    pub fn dims(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out (+)= a·b` where `out` is a dense row-major `m×n` buffer.
pub fn matmul_into<T: Real>(a: MatRef<'_, T>, b: MatRef<'_, T>, out: &mut [T], accumulate: bool) {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    assert_eq!(k, k2, "inner dimensions differ");
    assert_eq!(out.len(), m * n);
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a.data,
        rsa,
        csa,
        b.data,
        rsb,
        csb,
        beta,
        out,
        n as isize,
        1,
    );
}

pub fn matmul<T: Real>(a: MatRef<'_, T>, b: MatRef<'_, T>) -> Vec<T> {
    let (m, _) = a.dims();
    let (_, n) = b.dims();
    let mut out = vec![T::zero(); m * n];
    matmul_into(a, b, &mut out, false);
    out
}

/// Output extent of a kernel-3, padding-1 convolution along one axis.
pub fn conv_out_dim(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
    pub stride: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, cout: usize, in_dims: [usize; 3], stride: usize) -> Self {
        Self {
            cin,
            cout,
            in_dims,
            out_dims: in_dims.map(|d| conv_out_dim(d, stride)),
            stride,
        }
    }

    pub fn in_voxels(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn out_voxels(&self) -> usize {
        self.out_dims.iter().product()
    }

    pub fn patch_len(&self) -> usize {
        self.cin * 27
    }
}

/// Source coordinate for output index `o` and kernel tap `k` (0..3), if inside.
#[inline]
fn tap(o: usize, k: usize, stride: usize, n: usize) -> Option<usize> {
    let i = (o * stride + k) as isize - 1;
    (i >= 0 && (i as usize) < n).then_some(i as usize)
}

/// Output indices `lo..hi` whose tap `k` lands inside `0..n`.
#[inline]
fn tap_range(k: usize, stride: usize, n: usize, out_n: usize) -> (usize, usize) {
    let lo = usize::from(k == 0);
    let hi = if n >= k { ((n - k) / stride + 1).min(out_n) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfold one sample `[cin, X, Y, Z]` into `[cin·27, out_voxels]`.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let [nx, ny, nz] = g.in_dims;
    let [ox_n, oy_n, oz_n] = g.out_dims;
    let nout = g.out_voxels();
    let s = g.stride;
    for ci in 0..g.cin {
        let xc = &x[ci * nx * ny * nz..(ci + 1) * nx * ny * nz];
        for kx in 0..3 {
            for ky in 0..3 {
                for kz in 0..3 {
                    let row = ci * 27 + kx * 9 + ky * 3 + kz;
                    let dst = &mut col[row * nout..(row + 1) * nout];
                    for ox in 0..ox_n {
                        for oy in 0..oy_n {
                            let base = (ox * oy_n + oy) * oz_n;
                            let line = &mut dst[base..base + oz_n];
                            match (tap(ox, kx, s, nx), tap(oy, ky, s, ny)) {
                                (Some(ix), Some(iy)) => {
                                    let src = &xc[(ix * ny + iy) * nz..(ix * ny + iy + 1) * nz];
                                    let (lo, hi) = tap_range(kz, s, nz, oz_n);
                                    line[..lo].iter_mut().for_each(|v| *v = T::zero());
                                    line[hi..].iter_mut().for_each(|v| *v = T::zero());
                                    for (oz, v) in (lo..hi).zip(&mut line[lo..hi]) {
                                        *v = src[oz * s + kz - 1];
                                    }
                                }
                                _ => line.iter_mut().for_each(|v| *v = T::zero()),
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `[cin·27, out_voxels]` back into `[cin, X, Y, Z]`.
pub fn col2im<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let [nx, ny, nz] = g.in_dims;
    let [ox_n, oy_n, oz_n] = g.out_dims;
    let nout = g.out_voxels();
    let s = g.stride;
    for ci in 0..g.cin {
        let xc = &mut dx[ci * nx * ny * nz..(ci + 1) * nx * ny * nz];
        for kx in 0..3 {
            for ky in 0..3 {
                for kz in 0..3 {
                    let row = ci * 27 + kx * 9 + ky * 3 + kz;
                    let src = &col[row * nout..(row + 1) * nout];
                    for ox in 0..ox_n {
                        let Some(ix) = tap(ox, kx, s, nx) else { continue };
                        for oy in 0..oy_n {
                            let Some(iy) = tap(oy, ky, s, ny) else { continue };
                            let base = (ox * oy_n + oy) * oz_n;
                            let dst = &mut xc[(ix * ny + iy) * nz..(ix * ny + iy + 1) * nz];
                            let (lo, hi) = tap_range(kz, s, nz, oz_n);
                            for (oz, &v) in (lo..hi).zip(&src[base + lo..base + hi]) {
                                dst[oz * s + kz - 1] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `y[b] = W · im2col(x[b])` for every sample; no bias.
pub fn conv3d_forward<T: Real>(x: &[T], batch: usize, w: &[T], g: &ConvGeom) -> Vec<T> {
    let xin = g.cin * g.in_voxels();
    let yout = g.cout * g.out_voxels();
    let k = g.patch_len();
    let mut col = vec![T::zero(); k * g.out_voxels()];
    let mut y = vec![T::zero(); batch * yout];
    for b in 0..batch {
        im2col(&x[b * xin..(b + 1) * xin], g, &mut col);
        matmul_into(
            MatRef::new(w, g.cout, k, false),
            MatRef::new(&col, k, g.out_voxels(), false),
            &mut y[b * yout..(b + 1) * yout],
            false,
        );
    }
    y
}

/// Gradients of [`conv3d_forward`] with respect to the input and/or the weights.
pub fn conv3d_backward<T: Real>(
    x: &[T],
    batch: usize,
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let xin = g.cin * g.in_voxels();
    let yout = g.cout * g.out_voxels();
    let k = g.patch_len();
    let nout = g.out_voxels();
    let mut col = vec![T::zero(); k * nout];
    let mut dx = want_dx.then(|| vec![T::zero(); batch * xin]);
    let mut dw = want_dw.then(|| vec![T::zero(); g.cout * k]);
    for b in 0..batch {
        let dyb = &dy[b * yout..(b + 1) * yout];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[b * xin..(b + 1) * xin], g, &mut col);
            matmul_into(
                MatRef::new(dyb, g.cout, nout, false),
                MatRef::new(&col, k, nout, true),
                dw,
                true,
            );
        }
        if let Some(dx) = dx.as_mut() {
            matmul_into(
                MatRef::new(w, g.cout, k, true),
                MatRef::new(dyb, g.cout, nout, false),
                &mut col,
                false,
            );
            col2im(&col, g, &mut dx[b * xin..(b + 1) * xin]);
        }
    }
    (dx, dw)
}

/// Attention geometry: `q [B, Lq, D]`, `k`/`v` `[B, Lk, D]`, `heads` dividing `D`.
#[derive(Clone, Copy, Debug)]
pub struct AttnGeom {
    pub batch: usize,
    pub lq: usize,
    pub lk: usize,
    pub dim: usize,
    pub heads: usize,
}

impl AttnGeom {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Raw per-head scores `q_h · k_hᵀ` laid out `[B, h, Lq, Lk]` (unscaled).
pub fn attn_raw_scores<T: Real>(q: &[T], k: &[T], g: &AttnGeom) -> Vec<T> {
    let dh = g.head_dim();
    let mut s = vec![T::zero(); g.batch * g.heads * g.lq * g.lk];
    for b in 0..g.batch {
        for h in 0..g.heads {
            let out = &mut s[((b * g.heads + h) * g.lq) * g.lk..((b * g.heads + h + 1) * g.lq) * g.lk];
            let qo = b * g.lq * g.dim + h * dh;
            let ko = b * g.lk * g.dim + h * dh;
            // strided views of the head slices: row stride D, column stride 1
            T::gemm(
                g.lq,
                dh,
                g.lk,
                T::one(),
                &q[qo..],
                g.dim as isize,
                1,
                &k[ko..],
                1,
                g.dim as isize,
                T::zero(),
                out,
                g.lk as isize,
                1,
            );
        }
    }
    s
}

/// Row-wise softmax over the last axis of a `[rows, cols]` buffer, in place.
pub fn softmax_rows<T: Real>(x: &mut [T], cols: usize) {
    for row in x.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

/// `o[b, i, h·dh + e] = Σ_j p[b, h, i, j] · v[b, j, h·dh + e]`.
pub fn attn_apply<T: Real>(p: &[T], v: &[T], g: &AttnGeom) -> Vec<T> {
    let dh = g.head_dim();
    let mut o = vec![T::zero(); g.batch * g.lq * g.dim];
    for b in 0..g.batch {
        for h in 0..g.heads {
            let po = ((b * g.heads + h) * g.lq) * g.lk;
            let vo = b * g.lk * g.dim + h * dh;
            let oo = b * g.lq * g.dim + h * dh;
            T::gemm(
                g.lq,
                g.lk,
                dh,
                T::one(),
                &p[po..],
                g.lk as isize,
                1,
                &v[vo..],
                g.dim as isize,
                1,
                T::zero(),
                &mut o[oo..],
                g.dim as isize,
                1,
            );
        }
    }
    o
}

/// Gradients of [`attn_apply`]: `(dp, dv)`.
pub fn attn_apply_backward<T: Real>(p: &[T], v: &[T], dout: &[T], g: &AttnGeom) -> (Vec<T>, Vec<T>) {
    let dh = g.head_dim();
    let mut dp = vec![T::zero(); p.len()];
    let mut dv = vec![T::zero(); v.len()];
    for b in 0..g.batch {
        for h in 0..g.heads {
            let po = ((b * g.heads + h) * g.lq) * g.lk;
            let vo = b * g.lk * g.dim + h * dh;
            let oo = b * g.lq * g.dim + h * dh;
            // dp_bh [lq, lk] = do_bh [lq, dh] · v_bhᵀ [dh, lk]
            T::gemm(
                g.lq,
                dh,
                g.lk,
                T::one(),
                &dout[oo..],
                g.dim as isize,
                1,
                &v[vo..],
                1,
                g.dim as isize,
                T::zero(),
                &mut dp[po..],
                g.lk as isize,
                1,
            );
            // dv_bh [lk, dh] = p_bhᵀ [lk, lq] · do_bh [lq, dh]
            T::gemm(
                g.lk,
                g.lq,
                dh,
                T::one(),
                &p[po..],
                1,
                g.lk as isize,
                &dout[oo..],
                g.dim as isize,
                1,
                T::one(),
                &mut dv[vo..],
                g.dim as isize,
                1,
            );
        }
    }
    (dp, dv)
}
