//! Raw compute kernels shared by the tape ops and by oracle-free callers
//! (merged-artifact inference, benchmarks).
//!
//! Every kernel accumulates each output element in a fixed order, so results
//! are bitwise deterministic regardless of the rayon thread count: rows are
//! partitioned across threads but never split.

use rayon::prelude::*;

use super::Scalar;

/// Below this many multiply-accumulates the rayon dispatch overhead wins.
const PAR_MIN_MACS: usize = 1 << 16;

/// C[M,N] = A[M,K] * B[K,N], row-major. Inner loop is an axpy over
/// contiguous rows of B, which vectorizes well.
pub fn matmul_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut c = vec![S::ZERO; m * n];
    let row = |ci: &mut [S], i: usize| {
        for l in 0..k {
            let alk = a[i * k + l];
            let brow = &b[l * n..(l + 1) * n];
            for (cj, &bj) in ci.iter_mut().zip(brow) {
                *cj = *cj + alk * bj;
            }
        }
    };
    if m * k * n >= PAR_MIN_MACS {
        c.par_chunks_mut(n).enumerate().for_each(|(i, ci)| row(ci, i));
    } else {
        for (i, ci) in c.chunks_mut(n).enumerate() {
            row(ci, i);
        }
    }
    c
}

/// C[M,N] = A[M,K] * B[N,K]^T: each output is a dot of two contiguous rows.
pub fn matmul_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    let mut c = vec![S::ZERO; m * n];
    let row = |ci: &mut [S], i: usize| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cj) in ci.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::ZERO;
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            *cj = acc;
        }
    };
    if m * k * n >= PAR_MIN_MACS {
        c.par_chunks_mut(n).enumerate().for_each(|(i, ci)| row(ci, i));
    } else {
        for (i, ci) in c.chunks_mut(n).enumerate() {
            row(ci, i);
        }
    }
    c
}

/// C[K,N] = A[M,K]^T * B[M,N].
pub fn matmul_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), m * n);
    let mut c = vec![S::ZERO; k * n];
    let row = |ci: &mut [S], l: usize| {
        for i in 0..m {
            let ail = a[i * k + l];
            let brow = &b[i * n..(i + 1) * n];
            for (cj, &bj) in ci.iter_mut().zip(brow) {
                *cj = *cj + ail * bj;
            }
        }
    };
    if m * k * n >= PAR_MIN_MACS {
        c.par_chunks_mut(n).enumerate().for_each(|(l, ci)| row(ci, l));
    } else {
        for (l, ci) in c.chunks_mut(n).enumerate() {
            row(ci, l);
        }
    }
    c
}

/// Spatial geometry of a convolution. Output dims must divide exactly; the
/// caller-facing validation happens in the tape op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn infer(
        input_shape: &[usize],
        filter_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self, String> {
        if input_shape.len() != 4 || filter_shape.len() != 4 {
            return Err(format!(
                "conv2d wants 4-d input and filters, got {input_shape:?} and {filter_shape:?}"
            ));
        }
        let (n, ci, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
        let (co, fi, kh, kw) = (filter_shape[0], filter_shape[1], filter_shape[2], filter_shape[3]);
        if ci != fi {
            return Err(format!(
                "conv2d channel mismatch: input {input_shape:?} has {ci} channels, filters {filter_shape:?} expect {fi}"
            ));
        }
        if stride == 0 {
            return Err("conv2d stride must be >= 1".into());
        }
        let span_h = h + 2 * pad;
        let span_w = w + 2 * pad;
        if span_h < kh || span_w < kw || (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0
        {
            return Err(format!(
                "conv2d geometry not exact: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
            ));
        }
        Ok(ConvGeom {
            batch: n,
            in_channels: ci,
            in_h: h,
            in_w: w,
            out_channels: co,
            kh,
            kw,
            stride,
            pad,
            out_h: (span_h - kh) / stride + 1,
            out_w: (span_w - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    pub fn out_positions(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// col[(i*kh*kw + fy*kw + fx), ((n*out_h + oy)*out_w + ox)]; out-of-bounds
/// taps (padding) stay zero.
pub fn im2col<S: Scalar>(input: &[S], g: &ConvGeom) -> Vec<S> {
    let l = g.patch_len();
    let cols = g.out_positions();
    let mut col = vec![S::ZERO; l * cols];
    for n in 0..g.batch {
        for i in 0..g.in_channels {
            for fy in 0..g.kh {
                for fx in 0..g.kw {
                    let r = (i * g.kh + fy) * g.kw + fx;
                    for oy in 0..g.out_h {
                        let y = (oy * g.stride + fy) as isize - g.pad as isize;
                        if y < 0 || y >= g.in_h as isize {
                            continue;
                        }
                        for ox in 0..g.out_w {
                            let x = (ox * g.stride + fx) as isize - g.pad as isize;
                            if x < 0 || x >= g.in_w as isize {
                                continue;
                            }
                            let src = ((n * g.in_channels + i) * g.in_h + y as usize) * g.in_w
                                + x as usize;
                            let dst = r * cols + (n * g.out_h + oy) * g.out_w + ox;
                            col[dst] = input[src];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add transpose of `im2col`.
pub fn col2im<S: Scalar>(col: &[S], g: &ConvGeom) -> Vec<S> {
    let cols = g.out_positions();
    let mut input = vec![S::ZERO; g.batch * g.in_channels * g.in_h * g.in_w];
    for n in 0..g.batch {
        for i in 0..g.in_channels {
            for fy in 0..g.kh {
                for fx in 0..g.kw {
                    let r = (i * g.kh + fy) * g.kw + fx;
                    for oy in 0..g.out_h {
                        let y = (oy * g.stride + fy) as isize - g.pad as isize;
                        if y < 0 || y >= g.in_h as isize {
                            continue;
                        }
                        for ox in 0..g.out_w {
                            let x = (ox * g.stride + fx) as isize - g.pad as isize;
                            if x < 0 || x >= g.in_w as isize {
                                continue;
                            }
                            let dst = ((n * g.in_channels + i) * g.in_h + y as usize) * g.in_w
                                + x as usize;
                            let src = r * cols + (n * g.out_h + oy) * g.out_w + ox;
                            input[dst] += col[src];
                        }
                    }
                }
            }
        }
    }
    input
}

/// Forward convolution via im2col + matmul; returns [N,K,out_h,out_w] data.
pub fn conv2d_forward<S: Scalar>(input: &[S], filters: &[S], g: &ConvGeom) -> Vec<S> {
    let col = im2col(input, g);
    let out_mat = matmul_nn(filters, &col, g.out_channels, g.patch_len(), g.out_positions());
    // [K, N*oh*ow] -> [N, K, oh, ow]
    let per_img = g.out_h * g.out_w;
    let mut out = vec![S::ZERO; g.batch * g.out_channels * per_img];
    for kf in 0..g.out_channels {
        for n in 0..g.batch {
            let src = kf * g.out_positions() + n * per_img;
            let dst = (n * g.out_channels + kf) * per_img;
            out[dst..dst + per_img].copy_from_slice(&out_mat[src..src + per_img]);
        }
    }
    out
}

/// Gradients w.r.t. input and filters given the upstream gradient
/// [N,K,out_h,out_w]. The im2col buffer is recomputed rather than saved.
pub fn conv2d_backward<S: Scalar>(
    input: &[S],
    filters: &[S],
    grad_out: &[S],
    g: &ConvGeom,
) -> (Vec<S>, Vec<S>) {
    let per_img = g.out_h * g.out_w;
    // [N,K,oh,ow] -> [K, N*oh*ow]
    let mut gmat = vec![S::ZERO; g.out_channels * g.out_positions()];
    for kf in 0..g.out_channels {
        for n in 0..g.batch {
            let src = (n * g.out_channels + kf) * per_img;
            let dst = kf * g.out_positions() + n * per_img;
            gmat[dst..dst + per_img].copy_from_slice(&grad_out[src..src + per_img]);
        }
    }
    let col = im2col(input, g);
    let grad_filters = matmul_nt(&gmat, &col, g.out_channels, g.out_positions(), g.patch_len());
    let grad_col = matmul_tn(filters, &gmat, g.out_channels, g.patch_len(), g.out_positions());
    let grad_input = col2im(&grad_col, g);
    (grad_input, grad_filters)
}

/// Row-wise softmax of [rows, cols] logits, max-subtracted for stability.
pub fn softmax_rows<S: Scalar>(logits: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; rows * cols];
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let mx = row.iter().fold(row[0], |m, &x| m.max_s(x));
        let mut sum = S::ZERO;
        for (o, &x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            let e = (x - mx).exp();
            *o = e;
            sum = sum + e;
        }
        for o in &mut out[r * cols..(r + 1) * cols] {
            *o = *o / sum;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-loop convolution used as the independent oracle.
    pub fn conv2d_naive(input: &[f64], filters: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.batch * g.out_channels * g.out_h * g.out_w];
        for n in 0..g.batch {
            for kf in 0..g.out_channels {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = 0.0;
                        for i in 0..g.in_channels {
                            for fy in 0..g.kh {
                                for fx in 0..g.kw {
                                    let y = (oy * g.stride + fy) as isize - g.pad as isize;
                                    let x = (ox * g.stride + fx) as isize - g.pad as isize;
                                    if y < 0
                                        || x < 0
                                        || y >= g.in_h as isize
                                        || x >= g.in_w as isize
                                    {
                                        continue;
                                    }
                                    let iv = input[((n * g.in_channels + i) * g.in_h + y as usize)
                                        * g.in_w
                                        + x as usize];
                                    let fv = filters
                                        [((kf * g.in_channels + i) * g.kh + fy) * g.kw + fx];
                                    acc += iv * fv;
                                }
                            }
                        }
                        out[((n * g.out_channels + kf) * g.out_h + oy) * g.out_w + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64) / ((1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut seed = 42u64;
        let g = ConvGeom::infer(&[2, 3, 8, 8], &[4, 3, 3, 3], 1, 1).unwrap();
        let input: Vec<f64> = (0..2 * 3 * 8 * 8).map(|_| lcg(&mut seed)).collect();
        let filters: Vec<f64> = (0..4 * 3 * 3 * 3).map(|_| lcg(&mut seed)).collect();
        let fast = conv2d_forward(&input, &filters, &g);
        let slow = conv2d_naive(&input, &filters, &g);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn conv_matches_naive_on_small_shape_grid() {
        let mut seed = 7u64;
        for (h, w) in [(1, 1), (3, 4), (5, 5), (8, 7)] {
            for (kh, kw) in [(1, 1), (2, 2), (3, 3)] {
                for stride in [1, 2] {
                    for pad in [0, 1] {
                        let geom = ConvGeom::infer(&[2, 2, h, w], &[3, 2, kh, kw], stride, pad);
                        let Ok(g) = geom else { continue };
                        let input: Vec<f64> = (0..2 * 2 * h * w).map(|_| lcg(&mut seed)).collect();
                        let filters: Vec<f64> =
                            (0..3 * 2 * kh * kw).map(|_| lcg(&mut seed)).collect();
                        let fast = conv2d_forward(&input, &filters, &g);
                        let slow = conv2d_naive(&input, &filters, &g);
                        for (a, b) in fast.iter().zip(&slow) {
                            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn geometry_rejects_channel_mismatch_naming_both_shapes() {
        let err = ConvGeom::infer(&[1, 3, 4, 4], &[2, 4, 3, 3], 1, 1).unwrap_err();
        assert!(err.contains("[1, 3, 4, 4]") && err.contains("[2, 4, 3, 3]"), "{err}");
    }

    #[test]
    fn matmul_variants_agree() {
        let mut seed = 9u64;
        let (m, k, n) = (5, 7, 6);
        let a: Vec<f64> = (0..m * k).map(|_| lcg(&mut seed)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| lcg(&mut seed)).collect();
        let c = matmul_nn(&a, &b, m, k, n);
        // b transposed into [n,k] then matmul_nt should agree
        let mut bt = vec![0.0; n * k];
        for i in 0..k {
            for j in 0..n {
                bt[j * k + i] = b[i * n + j];
            }
        }
        let c2 = matmul_nt(&a, &bt, m, k, n);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
        // a transposed into [k,m]: matmul_tn(at) == matmul_nn(a)
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for j in 0..k {
                at[j * m + i] = a[i * k + j];
            }
        }
        let c3 = matmul_tn(&at, &b, k, m, n);
        // c3 is [m, n] since at is [k, m]: A^T with A=[k,m] gives [m,k]*[k,n]
        for (x, y) in c.iter().zip(&c3) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
