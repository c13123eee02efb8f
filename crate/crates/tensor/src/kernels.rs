//! Raw slice kernels. Accumulation order inside every kernel is fixed and
//! independent of the position of an output element, so permuting the rows
//! of one operand permutes the output bitwise.

use crate::par;

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Dot product with four fixed interleaved partial sums.
#[inline]
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let chunks = x.len() / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..chunks {
        let b = c * 4;
        s0 += x[b] * y[b];
        s1 += x[b + 1] * y[b + 1];
        s2 += x[b + 2] * y[b + 2];
        s3 += x[b + 3] * y[b + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for i in chunks * 4..x.len() {
        s += x[i] * y[i];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `a[m×k] · b[k×n]`
pub fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    par::for_each_row(&mut out, n, m * k * n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            axpy(a_ip, &b[p * n..(p + 1) * n], row);
        }
    });
    out
}

/// `a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0; m * n];
    par::for_each_row(&mut out, n, m * k * n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    });
    out
}

/// `a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    par::for_each_row(&mut out, n, m * k * n, |p, row| {
        for i in 0..k {
            let a_ip = a[i * m + p];
            axpy(a_ip, &b[i * n..(i + 1) * n], row);
        }
    });
    out
}

/// Sum of `terms` taken in ascending total order. The result depends only
/// on the multiset of values, not on their arrangement.
pub fn sorted_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

/// `a[m×k] · b[k×n]` where every output element sums its `k` products in
/// canonical sorted order.
pub fn gemm_sorted(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    par::for_each_row(&mut out, n, m * k * n * 4, |i, row| {
        let mut terms = vec![0.0; k];
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            for p in 0..k {
                terms[p] = a_row[p] * b[p * n + j];
            }
            *o = sorted_sum(&mut terms);
        }
    });
    out
}

/// Geometry of a 2-D convolution over a `[channels, height, width]` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Unfolds `[c, h, w]` into `[c·k·k, out_h·out_w]` columns.
pub fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let cols = oh * ow;
    let mut out = vec![0.0; g.patch_len() * cols];
    par::for_each_row(&mut out, cols, g.patch_len() * cols, |r, row| {
        let c = r / (g.kernel * g.kernel);
        let ky = (r / g.kernel) % g.kernel;
        let kx = r % g.kernel;
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for oy in 0..oh {
            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
            if iy < 0 || iy >= g.height as isize {
                continue;
            }
            let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
            let dst = &mut row[oy * ow..(oy + 1) * ow];
            for (ox, d) in dst.iter_mut().enumerate() {
                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                if ix >= 0 && ix < g.width as isize {
                    *d = src[ix as usize];
                }
            }
        }
    });
    out
}

/// Adjoint of [`im2col`]: folds columns back into a `[c, h, w]` map.
pub fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane_len = g.height * g.width;
    let mut out = vec![0.0; g.in_channels * plane_len];
    let kk = g.kernel * g.kernel;
    par::for_each_row(&mut out, plane_len, g.patch_len() * oh * ow, |c, plane| {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let r = c * kk + ky * g.kernel + kx;
                let row = &cols[r * oh * ow..(r + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            plane[iy as usize * g.width + ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    });
    out
}
