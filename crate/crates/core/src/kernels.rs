//! Inner loops shared by the array and autodiff layers.
//!
//! All reductions run in a fixed order so results are bit-reproducible.

/// Copy `src` into `out` (shape `out_shape`, row-major) reading `src` through
/// arbitrary per-axis strides. Zero strides implement broadcasting.
pub fn strided_copy(src: &[f64], out_shape: &[usize], src_strides: &[usize], out: &mut [f64]) {
    let nd = out_shape.len();
    if nd == 0 {
        out[0] = src[0];
        return;
    }
    let last = out_shape[nd - 1];
    let last_stride = src_strides[nd - 1];
    let mut idx = vec![0usize; nd - 1];
    let mut base = 0usize;
    for row in out.chunks_exact_mut(last) {
        if last_stride == 1 {
            row.copy_from_slice(&src[base..base + last]);
        } else {
            for (j, o) in row.iter_mut().enumerate() {
                *o = src[base + j * last_stride];
            }
        }
        // odometer over the leading axes
        for ax in (0..nd - 1).rev() {
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

/// `out[strided(i)] += src[i]` for every element of `src` (shape `src_shape`).
/// The adjoint of [`strided_copy`].
pub fn strided_accumulate(src: &[f64], src_shape: &[usize], out_strides: &[usize], out: &mut [f64]) {
    let nd = src_shape.len();
    if nd == 0 {
        out[0] += src[0];
        return;
    }
    let last = src_shape[nd - 1];
    if last == 0 {
        return;
    }
    let last_stride = out_strides[nd - 1];
    let mut idx = vec![0usize; nd - 1];
    let mut base = 0usize;
    for row in src.chunks_exact(last) {
        if last_stride == 1 {
            for (o, s) in out[base..base + last].iter_mut().zip(row) {
                *o += s;
            }
        } else {
            for (j, s) in row.iter().enumerate() {
                out[base + j * last_stride] += s;
            }
        }
        for ax in (0..nd - 1).rev() {
            idx[ax] += 1;
            base += out_strides[ax];
            if idx[ax] < src_shape[ax] {
                break;
            }
            base -= out_strides[ax] * src_shape[ax];
            idx[ax] = 0;
        }
    }
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dot product with eight independent partial sums (fixed association order).
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

const COL_BLOCK: usize = 256;
const ROW_BLOCK: usize = 4;

/// `c (+)= a @ b` with `a: m x k`, `b: k x n`, `c: m x n`, all row-major.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    if !accumulate {
        c[..m * n].fill(0.0);
    }
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + COL_BLOCK).min(n);
        let mut i0 = 0;
        while i0 < m {
            let i1 = (i0 + ROW_BLOCK).min(m);
            if i1 - i0 == ROW_BLOCK {
                let (c0, rest) = c[i0 * n..].split_at_mut(n);
                let (c1, rest) = rest.split_at_mut(n);
                let (c2, rest) = rest.split_at_mut(n);
                let c3 = &mut rest[..n];
                let (c0, c1, c2, c3) = (&mut c0[j0..j1], &mut c1[j0..j1], &mut c2[j0..j1], &mut c3[j0..j1]);
                for p in 0..k {
                    let brow = &b[p * n + j0..p * n + j1];
                    let a0 = a[i0 * k + p];
                    let a1 = a[(i0 + 1) * k + p];
                    let a2 = a[(i0 + 2) * k + p];
                    let a3 = a[(i0 + 3) * k + p];
                    for (j, &bv) in brow.iter().enumerate() {
                        c0[j] += a0 * bv;
                        c1[j] += a1 * bv;
                        c2[j] += a2 * bv;
                        c3[j] += a3 * bv;
                    }
                }
            } else {
                for i in i0..i1 {
                    let crow = &mut c[i * n + j0..i * n + j1];
                    for p in 0..k {
                        let av = a[i * k + p];
                        if av != 0.0 {
                            axpy(av, &b[p * n + j0..p * n + j1], crow);
                        }
                    }
                }
            }
            i0 = i1;
        }
        j0 = j1;
    }
}

/// `c += a^T @ b` with `a: m x k`, `b: m x n`, `c: k x n`.
pub fn gemm_tn_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for p in 0..m {
        let brow = &b[p * n..(p + 1) * n];
        let arow = &a[p * k..(p + 1) * k];
        for (i, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                axpy(av, brow, &mut c[i * n..(i + 1) * n]);
            }
        }
    }
}

/// `c (+)= a @ b^T` with `a: m x k`, `b: n x k`, `c: m x n`.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    let bt = transpose2(b, n, k);
    gemm_nn(m, k, n, a, &bt, c, accumulate);
}

/// Transpose of a row-major `rows x cols` matrix.
pub fn transpose2(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    const T: usize = 32;
    for r0 in (0..rows).step_by(T) {
        for c0 in (0..cols).step_by(T) {
            for r in r0..(r0 + T).min(rows) {
                for c in c0..(c0 + T).min(cols) {
                    out[c * rows + r] = x[r * cols + c];
                }
            }
        }
    }
    out
}

/// Geometry of a stride-1 "same"-padded 3D convolution.
#[derive(Clone, Copy, Debug)]
pub struct Conv3dGeom {
    pub cin: usize,
    pub cout: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub kz: usize,
    pub ky: usize,
    pub kx: usize,
}

impl Conv3dGeom {
    fn vox(&self) -> usize {
        self.d * self.h * self.w
    }
    fn ksize(&self) -> usize {
        self.kz * self.ky * self.kx
    }
    /// Output range of `o` such that `o + k - pad` stays within `[0, len)`.
    #[inline]
    fn valid(len: usize, k: usize, pad: usize) -> (usize, usize) {
        let lo = pad.saturating_sub(k);
        let hi = (len + pad).saturating_sub(k).min(len);
        (lo, hi.max(lo))
    }
}

/// One sample: `out[co] = bias[co] + sum_{ci,k} w[co,ci,k] * shift_k(inp[ci])`.
pub fn conv3d_forward(g: &Conv3dGeom, inp: &[f64], weight: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    let (pz, py, px) = (g.kz / 2, g.ky / 2, g.kx / 2);
    let vox = g.vox();
    let plane = g.h * g.w;
    let ks = g.ksize();
    for co in 0..g.cout {
        let b = bias.map_or(0.0, |b| b[co]);
        out[co * vox..(co + 1) * vox].fill(b);
    }
    for z in 0..g.d {
        for y in 0..g.h {
            let orow_off = z * plane + y * g.w;
            for co in 0..g.cout {
                let orow_base = co * vox + orow_off;
                for ci in 0..g.cin {
                    let wbase = (co * g.cin + ci) * ks;
                    for dz in 0..g.kz {
                        let iz = z + dz;
                        if iz < pz || iz - pz >= g.d {
                            continue;
                        }
                        let iz = iz - pz;
                        for dy in 0..g.ky {
                            let iy = y + dy;
                            if iy < py || iy - py >= g.h {
                                continue;
                            }
                            let iy = iy - py;
                            let irow = ci * vox + iz * plane + iy * g.w;
                            for dx in 0..g.kx {
                                let wv = weight[wbase + (dz * g.ky + dy) * g.kx + dx];
                                if wv == 0.0 {
                                    continue;
                                }
                                let (x0, x1) = Conv3dGeom::valid(g.w, dx, px);
                                let src = &inp[irow + x0 + dx - px..irow + x1 + dx - px];
                                let dst = &mut out[orow_base + x0..orow_base + x1];
                                axpy(wv, src, dst);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient w.r.t. the input (accumulated into `gin`).
pub fn conv3d_backward_input(g: &Conv3dGeom, gout: &[f64], weight: &[f64], gin: &mut [f64]) {
    let (pz, py, px) = (g.kz / 2, g.ky / 2, g.kx / 2);
    let vox = g.vox();
    let plane = g.h * g.w;
    let ks = g.ksize();
    for z in 0..g.d {
        for y in 0..g.h {
            let orow_off = z * plane + y * g.w;
            for co in 0..g.cout {
                let orow = &gout[co * vox + orow_off..co * vox + orow_off + g.w];
                for ci in 0..g.cin {
                    let wbase = (co * g.cin + ci) * ks;
                    for dz in 0..g.kz {
                        let iz = z + dz;
                        if iz < pz || iz - pz >= g.d {
                            continue;
                        }
                        let iz = iz - pz;
                        for dy in 0..g.ky {
                            let iy = y + dy;
                            if iy < py || iy - py >= g.h {
                                continue;
                            }
                            let iy = iy - py;
                            let irow = ci * vox + iz * plane + iy * g.w;
                            for dx in 0..g.kx {
                                let wv = weight[wbase + (dz * g.ky + dy) * g.kx + dx];
                                if wv == 0.0 {
                                    continue;
                                }
                                let (x0, x1) = Conv3dGeom::valid(g.w, dx, px);
                                let dst = &mut gin[irow + x0 + dx - px..irow + x1 + dx - px];
                                axpy(wv, &orow[x0..x1], dst);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient w.r.t. the weights (accumulated into `gw`).
pub fn conv3d_backward_weight(g: &Conv3dGeom, gout: &[f64], inp: &[f64], gw: &mut [f64]) {
    let (pz, py, px) = (g.kz / 2, g.ky / 2, g.kx / 2);
    let vox = g.vox();
    let plane = g.h * g.w;
    let ks = g.ksize();
    for co in 0..g.cout {
        for ci in 0..g.cin {
            let wbase = (co * g.cin + ci) * ks;
            for dz in 0..g.kz {
                for dy in 0..g.ky {
                    for dx in 0..g.kx {
                        let (x0, x1) = Conv3dGeom::valid(g.w, dx, px);
                        let mut acc = 0.0;
                        for z in 0..g.d {
                            let iz = z + dz;
                            if iz < pz || iz - pz >= g.d {
                                continue;
                            }
                            let iz = iz - pz;
                            for y in 0..g.h {
                                let iy = y + dy;
                                if iy < py || iy - py >= g.h {
                                    continue;
                                }
                                let iy = iy - py;
                                let o = co * vox + z * plane + y * g.w;
                                let i = ci * vox + iz * plane + iy * g.w;
                                acc += dot(
                                    &gout[o + x0..o + x1],
                                    &inp[i + x0 + dx - px..i + x1 + dx - px],
                                );
                            }
                        }
                        gw[wbase + (dz * g.ky + dy) * g.kx + dx] += acc;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn gemm_variants_agree() {
        let mut rng = Rng::new(1);
        let (m, k, n) = (9, 13, 301);
        let a = rng.normal_vec(m * k, 1.0);
        let b = rng.normal_vec(k * n, 1.0);
        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c, false);
        let mut c2 = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &transpose2(&b, k, n), &mut c2, false);
        let at = transpose2(&a, m, k);
        let mut c3 = vec![0.0; m * n];
        gemm_tn_acc(k, m, n, &at, &b, &mut c3);
        for i in 0..m * n {
            assert!((c[i] - c2[i]).abs() < 1e-12);
            assert!((c[i] - c3[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn conv3d_matches_direct_sum() {
        let mut rng = Rng::new(2);
        let g = Conv3dGeom { cin: 2, cout: 3, d: 3, h: 4, w: 5, kz: 3, ky: 3, kx: 3 };
        let inp = rng.normal_vec(2 * 60, 1.0);
        let wt = rng.normal_vec(3 * 2 * 27, 1.0);
        let mut out = vec![0.0; 3 * 60];
        conv3d_forward(&g, &inp, &wt, None, &mut out);
        for co in 0..3 {
            for z in 0..3i64 {
                for y in 0..4i64 {
                    for x in 0..5i64 {
                        let mut s = 0.0;
                        for ci in 0..2 {
                            for dz in 0..3i64 {
                                for dy in 0..3i64 {
                                    for dx in 0..3i64 {
                                        let (iz, iy, ix) = (z + dz - 1, y + dy - 1, x + dx - 1);
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= 3 || iy >= 4 || ix >= 5 {
                                            continue;
                                        }
                                        let wi = ((co * 2 + ci) * 27) as i64 + dz * 9 + dy * 3 + dx;
                                        let ii = ci as i64 * 60 + iz * 20 + iy * 5 + ix;
                                        s += wt[wi as usize] * inp[ii as usize];
                                    }
                                }
                            }
                        }
                        let o = co * 60 + (z * 20 + y * 5 + x) as usize;
                        assert!((out[o] - s).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
