//! Raw forward kernels and their adjoints.
//!
//! Kernels parallelize only over independent outputs (samples or planes) and
//! reduce every output element in a fixed order, so results are bitwise
//! identical for any thread count. Convolutions run as im2col plus a
//! single-threaded GEMM.

use std::any::TypeId;

use rayon::prelude::*;

use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Range of output columns whose tap `k` lands inside the input row.
    #[inline]
    fn valid_range(&self, k: usize, in_extent: usize, out_extent: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        // first o with o*s + k >= p
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        // last o with o*s + k - p <= in_extent - 1
        let hi = if in_extent + p > k {
            ((in_extent - 1 + p - k) / s + 1).min(out_extent)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// Row-major view of a matrix inside a slice: `(row stride, column stride)`.
type Strides = (usize, usize);

fn extent(rows: usize, cols: usize, (rs, cs): Strides) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// `c = a b` (or `c += a b` with `accumulate`), `a: [m,k]`, `b: [k,n]`,
/// `c: [m,n]` contiguous.
fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], sa: Strides, b: &[T], sb: Strides, c: &mut [T], accumulate: bool) {
    assert!(a.len() >= extent(m, k, sa) && b.len() >= extent(k, n, sb) && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = (sa.0 as isize, sa.1 as isize);
    let (rsb, csb) = (sb.0 as isize, sb.1 as isize);
    let beta = if accumulate { 1.0 } else { 0.0 };
    let id = TypeId::of::<T>();
    // SAFETY: extents were checked above and `T` is exactly the element type
    // named in each branch.
    unsafe {
        if id == TypeId::of::<f32>() {
            let (a, b, c) = (a.as_ptr() as *const f32, b.as_ptr() as *const f32, c.as_mut_ptr() as *mut f32);
            matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta as f32, c, n as isize, 1);
        } else if id == TypeId::of::<f64>() {
            let (a, b, c) = (a.as_ptr() as *const f64, b.as_ptr() as *const f64, c.as_mut_ptr() as *mut f64);
            matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
        } else {
            unreachable!("Scalar is implemented only for f32 and f64");
        }
    }
}

impl ConvGeometry {
    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Unfolds one sample into `[Ci*Kh*Kw, Ho*Wo]` columns.
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut Vec<T>) {
        let out_plane = self.out_h * self.out_w;
        let in_plane = self.in_h * self.in_w;
        // every call writes the same in-range slots, so padding stays zero
        // across samples of one call
        let needed = self.patch_len() * out_plane;
        if cols.len() != needed {
            cols.clear();
            cols.resize(needed, T::zero());
        }
        for ci in 0..self.in_channels {
            let src = &x[ci * in_plane..][..in_plane];
            for ky in 0..self.kernel_h {
                let (oy_lo, oy_hi) = self.valid_range(ky, self.in_h, self.out_h);
                for kx in 0..self.kernel_w {
                    let (ox_lo, ox_hi) = self.valid_range(kx, self.in_w, self.out_w);
                    let row = (ci * self.kernel_h + ky) * self.kernel_w + kx;
                    let dst = &mut cols[row * out_plane..][..out_plane];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * self.stride + ky - self.padding;
                        let srow = &src[iy * self.in_w..][..self.in_w];
                        let drow = &mut dst[oy * self.out_w..][..self.out_w];
                        let start = ox_lo * self.stride + kx - self.padding;
                        if self.stride == 1 {
                            drow[ox_lo..ox_hi].copy_from_slice(&srow[start..start + ox_hi - ox_lo]);
                        } else {
                            for (d, s) in drow[ox_lo..ox_hi].iter_mut().zip(srow[start..].iter().step_by(self.stride)) {
                                *d = *s;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatter-adds columns into one sample.
    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let out_plane = self.out_h * self.out_w;
        let in_plane = self.in_h * self.in_w;
        for ci in 0..self.in_channels {
            let dst = &mut dx[ci * in_plane..][..in_plane];
            for ky in 0..self.kernel_h {
                let (oy_lo, oy_hi) = self.valid_range(ky, self.in_h, self.out_h);
                for kx in 0..self.kernel_w {
                    let (ox_lo, ox_hi) = self.valid_range(kx, self.in_w, self.out_w);
                    let row = (ci * self.kernel_h + ky) * self.kernel_w + kx;
                    let src = &cols[row * out_plane..][..out_plane];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * self.stride + ky - self.padding;
                        let drow = &mut dst[iy * self.in_w..][..self.in_w];
                        let srow = &src[oy * self.out_w..][..self.out_w];
                        let start = ox_lo * self.stride + kx - self.padding;
                        if self.stride == 1 {
                            for (d, s) in drow[start..start + ox_hi - ox_lo].iter_mut().zip(&srow[ox_lo..ox_hi]) {
                                *d += *s;
                            }
                        } else {
                            for (d, s) in drow[start..].iter_mut().step_by(self.stride).zip(&srow[ox_lo..ox_hi]) {
                                *d += *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Samples per parallel job: one job per worker so scratch buffers are
/// reused across samples.
fn samples_per_job(batch: usize) -> usize {
    batch.div_ceil(rayon::current_num_threads()).max(1)
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeometry, input: &[T], kernel: &[T]) -> Vec<T> {
    let in_len = g.in_channels * g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let out_len = g.out_channels * out_plane;
    let pl = g.patch_len();
    let per_job = samples_per_job(g.batch);
    let mut out = vec![T::zero(); g.batch * out_len];
    out.par_chunks_mut(out_len * per_job).enumerate().for_each(|(job, chunk)| {
        let mut cols = Vec::new();
        for (i, dst) in chunk.chunks_mut(out_len).enumerate() {
            let x = &input[(job * per_job + i) * in_len..][..in_len];
            let b = if g.is_pointwise() {
                x
            } else {
                g.im2col(x, &mut cols);
                cols.as_slice()
            };
            gemm(g.out_channels, pl, out_plane, kernel, (pl, 1), b, (out_plane, 1), dst, false);
        }
    });
    out
}

/// Adjoint of [`conv2d_forward`] with respect to the input.
pub fn conv2d_input_grad<T: Scalar>(g: &ConvGeometry, grad_out: &[T], kernel: &[T]) -> Vec<T> {
    let in_len = g.in_channels * g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let out_len = g.out_channels * out_plane;
    let pl = g.patch_len();
    let per_job = samples_per_job(g.batch);
    let mut dx = vec![T::zero(); g.batch * in_len];
    dx.par_chunks_mut(in_len * per_job).enumerate().for_each(|(job, chunk)| {
        let mut cols = Vec::new();
        for (i, dst) in chunk.chunks_mut(in_len).enumerate() {
            let dy = &grad_out[(job * per_job + i) * out_len..][..out_len];
            if g.is_pointwise() {
                gemm(pl, g.out_channels, out_plane, kernel, (1, pl), dy, (out_plane, 1), dst, false);
            } else {
                // fully overwritten by the product
                cols.resize(pl * out_plane, T::zero());
                gemm(pl, g.out_channels, out_plane, kernel, (1, pl), dy, (out_plane, 1), &mut cols, false);
                g.col2im(&cols, dst);
            }
        }
    });
    dx
}

/// Adjoint of [`conv2d_forward`] with respect to the kernel. Samples are
/// accumulated in batch order.
pub fn conv2d_weight_grad<T: Scalar>(g: &ConvGeometry, input: &[T], grad_out: &[T]) -> Vec<T> {
    let in_len = g.in_channels * g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let out_len = g.out_channels * out_plane;
    let pl = g.patch_len();
    let mut dw = vec![T::zero(); g.out_channels * pl];
    let mut cols = Vec::new();
    for n in 0..g.batch {
        let x = &input[n * in_len..][..in_len];
        let b = if g.is_pointwise() {
            x
        } else {
            g.im2col(x, &mut cols);
            cols.as_slice()
        };
        let dy = &grad_out[n * out_len..][..out_len];
        gemm(g.out_channels, out_plane, pl, dy, (out_plane, 1), b, (1, out_plane), &mut dw, n > 0);
    }
    dw
}

/// Per-axis interpolation taps for half-pixel-center bilinear resizing.
#[derive(Debug, Clone)]
pub(crate) struct AxisTaps<T> {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<T>,
}

pub(crate) fn axis_taps<T: Scalar>(in_len: usize, out_len: usize) -> AxisTaps<T> {
    let scale = in_len as f64 / out_len as f64;
    let max = (in_len - 1) as f64;
    let mut taps = AxisTaps {
        lo: Vec::with_capacity(out_len),
        hi: Vec::with_capacity(out_len),
        frac: Vec::with_capacity(out_len),
    };
    for i in 0..out_len {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(in_len - 1);
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.frac.push(T::from_f64_lossy(src - lo as f64));
    }
    taps
}

pub fn resize_bilinear_forward<T: Scalar>(
    input: &[T],
    planes: usize,
    (in_h, in_w): (usize, usize),
    (out_h, out_w): (usize, usize),
) -> Vec<T> {
    if (in_h, in_w) == (out_h, out_w) {
        return input.to_vec();
    }
    let ty = axis_taps::<T>(in_h, out_h);
    let tx = axis_taps::<T>(in_w, out_w);
    let mut out = vec![T::zero(); planes * out_h * out_w];
    out.par_chunks_mut(out_h * out_w)
        .zip(input.par_chunks(in_h * in_w))
        .for_each(|(dst, src)| {
            for oy in 0..out_h {
                let fy = ty.frac[oy];
                let r0 = &src[ty.lo[oy] * in_w..][..in_w];
                let r1 = &src[ty.hi[oy] * in_w..][..in_w];
                for ox in 0..out_w {
                    let fx = tx.frac[ox];
                    let (x0, x1) = (tx.lo[ox], tx.hi[ox]);
                    let top = r0[x0] + fx * (r0[x1] - r0[x0]);
                    let bot = r1[x0] + fx * (r1[x1] - r1[x0]);
                    dst[oy * out_w + ox] = top + fy * (bot - top);
                }
            }
        });
    out
}

/// Adjoint (transpose) of [`resize_bilinear_forward`].
pub fn resize_bilinear_adjoint<T: Scalar>(
    grad_out: &[T],
    planes: usize,
    (in_h, in_w): (usize, usize),
    (out_h, out_w): (usize, usize),
) -> Vec<T> {
    if (in_h, in_w) == (out_h, out_w) {
        return grad_out.to_vec();
    }
    let ty = axis_taps::<T>(in_h, out_h);
    let tx = axis_taps::<T>(in_w, out_w);
    let one = T::one();
    let mut dx = vec![T::zero(); planes * in_h * in_w];
    dx.par_chunks_mut(in_h * in_w)
        .zip(grad_out.par_chunks(out_h * out_w))
        .for_each(|(dst, src)| {
            for oy in 0..out_h {
                let fy = ty.frac[oy];
                let (y0, y1) = (ty.lo[oy], ty.hi[oy]);
                for ox in 0..out_w {
                    let fx = tx.frac[ox];
                    let (x0, x1) = (tx.lo[ox], tx.hi[ox]);
                    let gv = src[oy * out_w + ox];
                    let top = gv * (one - fy);
                    let bot = gv * fy;
                    dst[y0 * in_w + x0] += top * (one - fx);
                    dst[y0 * in_w + x1] += top * fx;
                    dst[y1 * in_w + x0] += bot * (one - fx);
                    dst[y1 * in_w + x1] += bot * fx;
                }
            }
        });
    dx
}

/// `[n,k] x [k,m] -> [n,m]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    gemm(n, k, m, a, (k, 1), b, (m, 1), &mut out, false);
    out
}

pub fn transpose2<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// 2x2 average pooling with stride 2 over `planes` planes of `h x w`.
pub fn avg_pool2<T: Scalar>(input: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &input[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let s = src[2 * y * w + 2 * x]
                    + src[2 * y * w + 2 * x + 1]
                    + src[(2 * y + 1) * w + 2 * x]
                    + src[(2 * y + 1) * w + 2 * x + 1];
                dst[y * ow + x] = s * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2_adjoint<T: Scalar>(grad_out: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &grad_out[p * oh * ow..][..oh * ow];
        let dst = &mut out[p * h * w..][..h * w];
        for y in 0..oh {
            for x in 0..ow {
                let g = src[y * ow + x] * quarter;
                dst[2 * y * w + 2 * x] = g;
                dst[2 * y * w + 2 * x + 1] = g;
                dst[(2 * y + 1) * w + 2 * x] = g;
                dst[(2 * y + 1) * w + 2 * x + 1] = g;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geometry(n: usize, ci: usize, co: usize, h: usize, w: usize, k: usize, s: usize, p: usize) -> ConvGeometry {
        ConvGeometry {
            batch: n,
            in_channels: ci,
            out_channels: co,
            in_h: h,
            in_w: w,
            kernel_h: k,
            kernel_w: k,
            stride: s,
            padding: p,
            out_h: (h + 2 * p - k) / s + 1,
            out_w: (w + 2 * p - k) / s + 1,
        }
    }

    fn naive_conv(g: &ConvGeometry, x: &[f64], k: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.batch * g.out_channels * g.out_h * g.out_w];
        for n in 0..g.batch {
            for co in 0..g.out_channels {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = 0.0;
                        for ci in 0..g.in_channels {
                            for ky in 0..g.kernel_h {
                                for kx in 0..g.kernel_w {
                                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                        continue;
                                    }
                                    acc += k[((co * g.in_channels + ci) * g.kernel_h + ky) * g.kernel_w + kx]
                                        * x[((n * g.in_channels + ci) * g.in_h + iy as usize) * g.in_w + ix as usize];
                                }
                            }
                        }
                        out[((n * g.out_channels + co) * g.out_h + oy) * g.out_w + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(len: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        (0..len)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s % 2001) as f64 / 1000.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn forward_matches_sliding_window_for_all_supported_geometries() {
        for &(h, w, k, s, p) in &[(5, 7, 3, 1, 1), (6, 6, 3, 2, 1), (7, 5, 1, 1, 0), (8, 8, 3, 2, 0), (4, 4, 1, 2, 0)] {
            let g = geometry(2, 3, 4, h, w, k, s, p);
            let x = pseudo(2 * 3 * h * w, 1);
            let kern = pseudo(4 * 3 * k * k, 2);
            let fast = conv2d_forward(&g, &x, &kern);
            let slow = naive_conv(&g, &x, &kern);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b} for {h}x{w} k{k} s{s} p{p}");
            }
        }
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        // <conv(x, k), y> == <x, conv_input_grad(y, k)> == <k, conv_weight_grad(x, y)>
        for &(h, w, k, s, p) in &[(5, 7, 3, 1, 1), (6, 6, 3, 2, 1), (7, 5, 1, 1, 0), (9, 9, 3, 2, 1)] {
            let g = geometry(2, 3, 2, h, w, k, s, p);
            let x = pseudo(2 * 3 * h * w, 3);
            let kern = pseudo(2 * 3 * k * k, 4);
            let y = pseudo(2 * 2 * g.out_h * g.out_w, 5);
            let fwd = conv2d_forward(&g, &x, &kern);
            let lhs: f64 = fwd.iter().zip(&y).map(|(a, b)| a * b).sum();
            let dx = conv2d_input_grad(&g, &y, &kern);
            let mid: f64 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();
            let dw = conv2d_weight_grad(&g, &x, &y);
            let rhs: f64 = dw.iter().zip(&kern).map(|(a, b)| a * b).sum();
            assert!((lhs - mid).abs() < 1e-10);
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn resize_adjoint_is_transpose() {
        for &(ih, iw, oh, ow) in &[(2, 2, 4, 4), (8, 6, 4, 3), (5, 5, 7, 3), (1, 1, 2, 2)] {
            let x = pseudo(2 * ih * iw, 6);
            let y = pseudo(2 * oh * ow, 7);
            let fwd = resize_bilinear_forward(&x, 2, (ih, iw), (oh, ow));
            let adj = resize_bilinear_adjoint(&y, 2, (ih, iw), (oh, ow));
            let lhs: f64 = fwd.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = adj.iter().zip(&x).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn pooling_adjoint_is_transpose() {
        let x = pseudo(3 * 4 * 6, 8);
        let y = pseudo(3 * 2 * 3, 9);
        let lhs: f64 = avg_pool2(&x, 3, 4, 6).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = avg_pool2_adjoint(&y, 3, 4, 6).iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        assert_eq!(matmul(&a, &b, 2, 3, 2), vec![4.0, 5.0, 10.0, 11.0]);
        assert_eq!(matmul(&a, &[1.0, 1.0, 1.0], 2, 3, 1), vec![6.0, 15.0]);
    }
}
