use crate::kernels::{self, ConvGeometry};
use crate::{Tensor, Var};

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn col_sums(g: &Tensor) -> Vec<f64> {
    let (m, n) = dims2(g);
    let mut s = vec![0.0; n];
    for i in 0..m {
        for (acc, v) in s.iter_mut().zip(g.row(i)) {
            *acc += v;
        }
    }
    s
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Summation order used by row reductions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SumOrder {
    /// Left to right.
    Sequential,
    /// Ascending value order; invariant to permutations of the reduced axis.
    Sorted,
}

fn softmax_row(x: &[f64], out: &mut [f64], order: SumOrder) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
    }
    let sum = match order {
        SumOrder::Sequential => out.iter().sum::<f64>(),
        SumOrder::Sorted => kernels::sorted_sum(&mut out.to_vec()),
    };
    for o in out.iter_mut() {
        *o /= sum;
    }
}

impl<'g> Var<'g> {
    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x + y);
        self.graph().op(
            out,
            &[self, other],
            Box::new(|g, m| vec![m[0].then(|| g.clone()), m[1].then(|| g.clone())]),
        )
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x - y);
        self.graph().op(
            out,
            &[self, other],
            Box::new(|g, m| vec![m[0].then(|| g.clone()), m[1].then(|| g.scale(-1.0))]),
        )
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x * y);
        self.graph().op(
            out,
            &[self, other],
            Box::new(move |g, m| {
                vec![
                    m[0].then(|| g.zip_map(&b, |u, v| u * v)),
                    m[1].then(|| g.zip_map(&a, |u, v| u * v)),
                ]
            }),
        )
    }

    /// Adds a length-`n` row (any shape with `n` elements) to every row.
    pub fn add_row(self, row: Var<'g>) -> Var<'g> {
        let (a, r) = (self.value(), row.value());
        let (m, n) = dims2(&a);
        assert_eq!(r.len(), n, "add_row: row of {} vs {n} columns", r.len());
        let mut out = (*a).clone();
        for i in 0..m {
            for (o, v) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += v;
            }
        }
        let row_shape = r.shape().to_vec();
        self.graph().op(
            out,
            &[self, row],
            Box::new(move |g, msk| {
                vec![
                    msk[0].then(|| g.clone()),
                    msk[1].then(|| Tensor::from_vec(&row_shape, col_sums(g))),
                ]
            }),
        )
    }

    /// Multiplies every row elementwise by a length-`n` row.
    pub fn mul_row(self, row: Var<'g>) -> Var<'g> {
        let (a, r) = (self.value(), row.value());
        let (m, n) = dims2(&a);
        assert_eq!(r.len(), n, "mul_row: row of {} vs {n} columns", r.len());
        let mut out = (*a).clone();
        for i in 0..m {
            for (o, v) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o *= v;
            }
        }
        self.graph().op(
            out,
            &[self, row],
            Box::new(move |g, msk| {
                let ga = msk[0].then(|| {
                    let mut ga = g.clone();
                    for i in 0..m {
                        for (o, v) in ga.row_mut(i).iter_mut().zip(r.data()) {
                            *o *= v;
                        }
                    }
                    ga
                });
                let gr = msk[1].then(|| {
                    let prod = g.zip_map(&a, |u, v| u * v);
                    Tensor::from_vec(r.shape(), col_sums(&prod))
                });
                vec![ga, gr]
            }),
        )
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        let out = self.value().scale(s);
        self.graph()
            .op(out, &[self], Box::new(move |g, _| vec![Some(g.scale(s))]))
    }

    pub fn add_scalar(self, s: f64) -> Var<'g> {
        let out = self.value().map(|x| x + s);
        self.graph().op(out, &[self], Box::new(|g, _| vec![Some(g.clone())]))
    }

    /// `self[m×k] · other[k×n]`
    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = dims2(&a);
        let (k2, n) = dims2(&b);
        assert_eq!(k, k2, "matmul: {:?} x {:?}", a.shape(), b.shape());
        let out = Tensor::from_vec(&[m, n], kernels::gemm_nn(a.data(), b.data(), m, k, n));
        self.graph().op(
            out,
            &[self, other],
            Box::new(move |g, msk| {
                vec![
                    msk[0].then(|| Tensor::from_vec(&[m, k], kernels::gemm_nt(g.data(), b.data(), m, n, k))),
                    msk[1].then(|| Tensor::from_vec(&[k, n], kernels::gemm_tn(a.data(), g.data(), m, k, n))),
                ]
            }),
        )
    }

    /// `self[m×k] · other[n×k]ᵀ`
    pub fn matmul_nt(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = dims2(&a);
        let (n, k2) = dims2(&b);
        assert_eq!(k, k2, "matmul_nt: {:?} x {:?}ᵀ", a.shape(), b.shape());
        let out = Tensor::from_vec(&[m, n], kernels::gemm_nt(a.data(), b.data(), m, k, n));
        self.graph().op(
            out,
            &[self, other],
            Box::new(move |g, msk| {
                vec![
                    msk[0].then(|| Tensor::from_vec(&[m, k], kernels::gemm_nn(g.data(), b.data(), m, n, k))),
                    msk[1].then(|| Tensor::from_vec(&[n, k], kernels::gemm_tn(g.data(), a.data(), m, n, k))),
                ]
            }),
        )
    }

    /// Matrix product whose inner sums run in canonical sorted order, so that
    /// jointly permuting the columns of `self` and the rows of `other` leaves
    /// the result bitwise unchanged.
    pub fn matmul_sorted(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = dims2(&a);
        let (k2, n) = dims2(&b);
        assert_eq!(k, k2, "matmul_sorted: {:?} x {:?}", a.shape(), b.shape());
        let out = Tensor::from_vec(&[m, n], kernels::gemm_sorted(a.data(), b.data(), m, k, n));
        self.graph().op(
            out,
            &[self, other],
            Box::new(move |g, msk| {
                vec![
                    msk[0].then(|| Tensor::from_vec(&[m, k], kernels::gemm_nt(g.data(), b.data(), m, n, k))),
                    msk[1].then(|| Tensor::from_vec(&[k, n], kernels::gemm_tn(a.data(), g.data(), m, k, n))),
                ]
            }),
        )
    }

    pub fn transpose(self) -> Var<'g> {
        let out = self.value().transpose();
        self.graph()
            .op(out, &[self], Box::new(|g, _| vec![Some(g.transpose())]))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let src = self.shape();
        let out = (*self.value()).clone().reshape(shape);
        self.graph()
            .op(out, &[self], Box::new(move |g, _| vec![Some(g.clone().reshape(&src))]))
    }

    pub fn sigmoid(self) -> Var<'g> {
        let y = self.value().map(sigmoid);
        let y2 = y.clone();
        self.graph().op(
            y,
            &[self],
            Box::new(move |g, _| vec![Some(g.zip_map(&y2, |u, s| u * s * (1.0 - s)))]),
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'g> {
        let x = self.value();
        let out = x.map(gelu);
        self.graph().op(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(g.zip_map(&x, |u, v| u * gelu_grad(v)))]),
        )
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(self, order: SumOrder) -> Var<'g> {
        let x = self.value();
        let (m, n) = dims2(&x);
        let mut y = Tensor::zeros(&[m, n]);
        for i in 0..m {
            softmax_row(x.row(i), y.row_mut(i), order);
        }
        let y2 = y.clone();
        self.graph().op(
            y,
            &[self],
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    let (yr, gr) = (y2.row(i), g.row(i));
                    let s = kernels::dot(yr, gr);
                    for ((o, &yy), &gg) in gx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = yy * (gg - s);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of length `n`.
    pub fn layer_norm(self, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Var<'g> {
        let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
        let (m, n) = dims2(&x);
        assert_eq!(gm.len(), n);
        assert_eq!(bt.len(), n);
        let mut xhat = Tensor::zeros(&[m, n]);
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let r = x.row(i);
            let mean = r.iter().sum::<f64>() / n as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for (o, v) in xhat.row_mut(i).iter_mut().zip(r) {
                *o = (v - mean) * is;
            }
        }
        let mut out = xhat.clone();
        for i in 0..m {
            for ((o, gg), bb) in out.row_mut(i).iter_mut().zip(gm.data()).zip(bt.data()) {
                *o = *o * gg + bb;
            }
        }
        let gshape = gm.shape().to_vec();
        let bshape = bt.shape().to_vec();
        self.graph().op(
            out,
            &[self, gamma, beta],
            Box::new(move |g, msk| {
                let gx = msk[0].then(|| {
                    let mut gx = Tensor::zeros(&[m, n]);
                    let mut gxh = vec![0.0; n];
                    for i in 0..m {
                        for ((o, gg), w) in gxh.iter_mut().zip(g.row(i)).zip(gm.data()) {
                            *o = gg * w;
                        }
                        let xr = xhat.row(i);
                        let mean_g = gxh.iter().sum::<f64>() / n as f64;
                        let mean_gx = kernels::dot(&gxh, xr) / n as f64;
                        for ((o, gh), xh) in gx.row_mut(i).iter_mut().zip(&gxh).zip(xr) {
                            *o = inv_std[i] * (gh - mean_g - xh * mean_gx);
                        }
                    }
                    gx
                });
                let ggamma = msk[1].then(|| {
                    let prod = g.zip_map(&xhat, |u, v| u * v);
                    Tensor::from_vec(&gshape, col_sums(&prod))
                });
                let gbeta = msk[2].then(|| Tensor::from_vec(&bshape, col_sums(g)));
                vec![gx, ggamma, gbeta]
            }),
        )
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(self, start: usize, end: usize) -> Var<'g> {
        let x = self.value();
        let (m, n) = dims2(&x);
        assert!(start <= end && end <= n, "slice_cols {start}..{end} of {n}");
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&x.row(i)[start..end]);
        }
        self.graph().op(
            Tensor::from_vec(&[m, w], data),
            &[self],
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    gx.row_mut(i)[start..end].copy_from_slice(g.row(i));
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(parts: &[Var<'g>]) -> Var<'g> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let m = vals[0].rows();
        let widths: Vec<usize> = vals.iter().map(|v| v.cols()).collect();
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for v in &vals {
                assert_eq!(v.rows(), m, "concat_cols row mismatch");
                data.extend_from_slice(v.row(i));
            }
        }
        parts[0].graph().op(
            Tensor::from_vec(&[m, n], data),
            parts,
            Box::new(move |g, msk| {
                let mut off = 0;
                widths
                    .iter()
                    .zip(msk)
                    .map(|(&w, &need)| {
                        let start = off;
                        off += w;
                        need.then(|| {
                            let mut d = Vec::with_capacity(m * w);
                            for i in 0..m {
                                d.extend_from_slice(&g.row(i)[start..start + w]);
                            }
                            Tensor::from_vec(&[m, w], d)
                        })
                    })
                    .collect()
            }),
        )
    }

    /// Stacks 2-D tensors with equal column counts along rows.
    pub fn concat_rows(parts: &[Var<'g>]) -> Var<'g> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let n = vals[0].cols();
        let heights: Vec<usize> = vals.iter().map(|v| v.rows()).collect();
        let mut data = Vec::new();
        for v in &vals {
            assert_eq!(v.cols(), n, "concat_rows column mismatch");
            data.extend_from_slice(v.data());
        }
        let m: usize = heights.iter().sum();
        parts[0].graph().op(
            Tensor::from_vec(&[m, n], data),
            parts,
            Box::new(move |g, msk| {
                let mut off = 0;
                heights
                    .iter()
                    .zip(msk)
                    .map(|(&h, &need)| {
                        let start = off;
                        off += h;
                        need.then(|| Tensor::from_vec(&[h, n], g.data()[start * n..(start + h) * n].to_vec()))
                    })
                    .collect()
            }),
        )
    }

    /// Gathers rows by index; repeated indices accumulate in the backward.
    pub fn select_rows(self, idx: &[usize]) -> Var<'g> {
        let x = self.value();
        let (m, n) = dims2(&x);
        let out = x.select_rows(idx);
        let idx = idx.to_vec();
        self.graph().op(
            out,
            &[self],
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(&[m, n]);
                for (r, &i) in idx.iter().enumerate() {
                    for (o, v) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum_all(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.graph().op(
            Tensor::scalar(x.sum()),
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    /// Column means of a 2-D tensor as `[1×n]`.
    pub fn mean_rows(self) -> Var<'g> {
        let x = self.value();
        let (m, n) = dims2(&x);
        let s: Vec<f64> = col_sums(&x).into_iter().map(|v| v / m as f64).collect();
        self.graph().op(
            Tensor::from_vec(&[1, n], s),
            &[self],
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    for (o, v) in gx.row_mut(i).iter_mut().zip(g.data()) {
                        *o = v / m as f64;
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Scales each row to unit L2 norm: `x / sqrt(|x|² + eps)`.
    pub fn l2_normalize_rows(self, eps: f64) -> Var<'g> {
        let x = self.value();
        let (m, n) = dims2(&x);
        let norms: Vec<f64> = (0..m)
            .map(|i| (kernels::dot(x.row(i), x.row(i)) + eps).sqrt())
            .collect();
        let mut y = (*x).clone();
        for (i, nrm) in norms.iter().enumerate() {
            for v in y.row_mut(i) {
                *v /= nrm;
            }
        }
        self.graph().op(
            y,
            &[self],
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(&[m, n]);
                for (i, &nrm) in norms.iter().enumerate() {
                    let xr = x.row(i);
                    let xg = kernels::dot(xr, g.row(i));
                    let n3 = nrm * nrm * nrm;
                    for ((o, gg), xx) in gx.row_mut(i).iter_mut().zip(g.row(i)).zip(xr) {
                        *o = gg / nrm - xx * xg / n3;
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Summed softmax cross-entropy of each row against a target column.
    pub fn cross_entropy_rows(self, targets: &[usize]) -> Var<'g> {
        let x = self.value();
        let (m, n) = dims2(&x);
        assert_eq!(targets.len(), m, "cross_entropy_rows: targets per row");
        let mut probs = Tensor::zeros(&[m, n]);
        let mut loss = 0.0;
        for i in 0..m {
            let r = x.row(i);
            let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + r.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - r[targets[i]];
            softmax_row(r, probs.row_mut(i), SumOrder::Sequential);
        }
        let targets = targets.to_vec();
        self.graph().op(
            Tensor::scalar(loss),
            &[self],
            Box::new(move |g, _| {
                let s = g.item();
                let mut gx = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    gx.row_mut(i)[t] -= 1.0;
                }
                vec![Some(gx.scale(s))]
            }),
        )
    }

    /// 2-D convolution of a `[c, h, w]` map with weights
    /// `[out_c, c·k·k]` and bias `[out_c]`.
    pub fn conv2d(self, weight: Var<'g>, bias: Var<'g>, kernel: usize, stride: usize, padding: usize) -> Var<'g> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        assert_eq!(x.ndim(), 3, "conv2d input must be [c, h, w]");
        let geo = ConvGeometry {
            in_channels: x.shape()[0],
            height: x.shape()[1],
            width: x.shape()[2],
            kernel,
            stride,
            padding,
        };
        let out_c = w.rows();
        assert_eq!(w.cols(), geo.patch_len(), "conv2d weight shape {:?}", w.shape());
        assert_eq!(b.len(), out_c);
        let (oh, ow) = (geo.out_height(), geo.out_width());
        let cols = kernels::im2col(x.data(), &geo);
        let kp = geo.patch_len();
        let mut out = kernels::gemm_nn(w.data(), &cols, out_c, kp, oh * ow);
        for (c, plane) in out.chunks_mut(oh * ow).enumerate() {
            let bc = b.data()[c];
            for v in plane {
                *v += bc;
            }
        }
        let wshape = w.shape().to_vec();
        let bshape = b.shape().to_vec();
        self.graph().op(
            Tensor::from_vec(&[out_c, oh, ow], out),
            &[self, weight, bias],
            Box::new(move |g, msk| {
                let gd = g.data();
                let gx = msk[0].then(|| {
                    let gcols = kernels::gemm_tn(w.data(), gd, out_c, kp, oh * ow);
                    Tensor::from_vec(&[geo.in_channels, geo.height, geo.width], kernels::col2im(&gcols, &geo))
                });
                let gw = msk[1].then(|| Tensor::from_vec(&wshape, kernels::gemm_nt(gd, &cols, out_c, oh * ow, kp)));
                let gb = msk[2].then(|| {
                    let s = gd.chunks(oh * ow).map(|p| p.iter().sum()).collect();
                    Tensor::from_vec(&bshape, s)
                });
                vec![gx, gw, gb]
            }),
        )
    }
}
