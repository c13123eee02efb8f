//! Parameterized layers over a [`Session`]. Parameters live in a flat
//! [`ParamStore`] under dotted names.

use corrdet_tensor::init::{fan_in_uniform, xavier_uniform};
use corrdet_tensor::{ParamStore, Session, SumOrder, Tensor, Var};
use rand::Rng;

pub const LN_EPS: f64 = 1e-5;

/// Registers freshly initialized parameters.
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let w = xavier_uniform(&[fan_in, fan_out], fan_in, fan_out, self.rng);
        self.store.insert(format!("{name}.weight"), w);
        self.store.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
    }

    pub fn linear_no_bias(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let w = xavier_uniform(&[fan_in, fan_out], fan_in, fan_out, self.rng);
        self.store.insert(format!("{name}.weight"), w);
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) {
        self.store.insert(format!("{name}.gamma"), Tensor::full(&[d], 1.0));
        self.store.insert(format!("{name}.beta"), Tensor::zeros(&[d]));
    }

    pub fn conv(&mut self, name: &str, in_c: usize, out_c: usize, kernel: usize) {
        let fan_in = in_c * kernel * kernel;
        let w = fan_in_uniform(&[out_c, fan_in], fan_in, self.rng);
        self.store.insert(format!("{name}.weight"), w);
        self.store.insert(format!("{name}.bias"), Tensor::zeros(&[out_c]));
    }

    pub fn mha(&mut self, name: &str, d: usize) {
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{name}.{p}"), d, d);
        }
    }

    pub fn ffn(&mut self, name: &str, d: usize, hidden: usize) {
        self.linear(&format!("{name}.fc1"), d, hidden);
        self.linear(&format!("{name}.fc2"), hidden, d);
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) {
        self.store.insert(name, Tensor::randn(shape, std, self.rng));
    }

    pub fn tensor(&mut self, name: &str, t: Tensor) {
        self.store.insert(name, t);
    }
}

pub fn linear<'g>(s: &Session<'g>, name: &str, x: Var<'g>) -> Var<'g> {
    x.matmul(s.param(&format!("{name}.weight")))
        .add_row(s.param(&format!("{name}.bias")))
}

pub fn linear_no_bias<'g>(s: &Session<'g>, name: &str, x: Var<'g>) -> Var<'g> {
    x.matmul(s.param(&format!("{name}.weight")))
}

pub fn layer_norm<'g>(s: &Session<'g>, name: &str, x: Var<'g>) -> Var<'g> {
    x.layer_norm(
        s.param(&format!("{name}.gamma")),
        s.param(&format!("{name}.beta")),
        LN_EPS,
    )
}

pub fn conv<'g>(s: &Session<'g>, name: &str, x: Var<'g>, kernel: usize, stride: usize, padding: usize) -> Var<'g> {
    x.conv2d(
        s.param(&format!("{name}.weight")),
        s.param(&format!("{name}.bias")),
        kernel,
        stride,
        padding,
    )
}

/// Two affine layers with a GELU between.
pub fn ffn<'g>(s: &Session<'g>, name: &str, x: Var<'g>) -> Var<'g> {
    let h = linear(s, &format!("{name}.fc1"), x).gelu();
    linear(s, &format!("{name}.fc2"), h)
}

/// Multi-head scaled dot-product attention. `q` is `[m, d]`, `k` and `v`
/// are `[n, d]`.
pub fn mha<'g>(s: &Session<'g>, name: &str, heads: usize, q: Var<'g>, k: Var<'g>, v: Var<'g>) -> Var<'g> {
    let d = q.shape()[1];
    assert_eq!(d % heads, 0, "d={d} not divisible by {heads} heads");
    let dh = d / heads;
    let qp = linear(s, &format!("{name}.q"), q);
    let kp = linear(s, &format!("{name}.k"), k);
    let vp = linear(s, &format!("{name}.v"), v);
    let scale = 1.0 / (dh as f64).sqrt();
    let outs: Vec<_> = (0..heads)
        .map(|h| {
            let (a, b) = (h * dh, (h + 1) * dh);
            let att = qp
                .slice_cols(a, b)
                .matmul_nt(kp.slice_cols(a, b))
                .scale(scale)
                .softmax_rows(SumOrder::Sequential);
            att.matmul(vp.slice_cols(a, b))
        })
        .collect();
    let cat = if heads == 1 { outs[0] } else { Var::concat_cols(&outs) };
    linear(s, &format!("{name}.o"), cat)
}

/// Pre-norm self-attention sublayer: `x + MHA(LN(x) + pos, LN(x) + pos, LN(x))`.
pub fn self_attention_block<'g>(
    s: &Session<'g>,
    name: &str,
    heads: usize,
    x: Var<'g>,
    pos: Option<Var<'g>>,
) -> Var<'g> {
    let h = layer_norm(s, &format!("{name}.ln"), x);
    let qk = match pos {
        Some(p) => h.add(p),
        None => h,
    };
    x.add(mha(s, &format!("{name}.attn"), heads, qk, qk, h))
}

/// Pre-norm feed-forward sublayer: `x + FFN(LN(x))`.
pub fn ffn_block<'g>(s: &Session<'g>, name: &str, x: Var<'g>) -> Var<'g> {
    let h = layer_norm(s, &format!("{name}.ln"), x);
    x.add(ffn(s, &format!("{name}.ffn"), h))
}

pub fn init_self_attention_block<R: Rng>(init: &mut Init<'_, R>, name: &str, d: usize) {
    init.layer_norm(&format!("{name}.ln"), d);
    init.mha(&format!("{name}.attn"), d);
}

pub fn init_ffn_block<R: Rng>(init: &mut Init<'_, R>, name: &str, d: usize, hidden: usize) {
    init.layer_norm(&format!("{name}.ln"), d);
    init.ffn(&format!("{name}.ffn"), d, hidden);
}

/// 2-D sinusoidal position encodings for an `h x w` grid, `[h·w, d]`.
/// The first half of the channels encodes rows, the second half columns.
pub fn position_encoding_2d(h: usize, w: usize, d: usize) -> Tensor {
    assert_eq!(d % 4, 0, "2-D position encoding needs d divisible by 4");
    let half = d / 2;
    let mut t = Tensor::zeros(&[h * w, d]);
    for y in 0..h {
        for x in 0..w {
            let row = t.row_mut(y * w + x);
            for k in 0..half / 2 {
                let f = 10000f64.powf(2.0 * k as f64 / half as f64);
                let (py, px) = ((y + 1) as f64 / f, (x + 1) as f64 / f);
                row[2 * k] = py.sin();
                row[2 * k + 1] = py.cos();
                row[half + 2 * k] = px.sin();
                row[half + 2 * k + 1] = px.cos();
            }
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use corrdet_tensor::Graph;
    use rand::SeedableRng;

    #[test]
    fn mha_preserves_shape_and_is_deterministic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        Init {
            store: &mut store,
            rng: &mut rng,
        }
        .mha("a", 8);
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let y = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let run = || {
            let g = Graph::new();
            let s = Session::frozen(&g, &store);
            let (q, kv) = (s.constant(x.clone()), s.constant(y.clone()));
            mha(&s, "a", 2, q, kv, kv).value()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.shape(), &[5, 8]);
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn position_encoding_rows_differ() {
        let p = position_encoding_2d(4, 4, 16);
        assert_eq!(p.shape(), &[16, 16]);
        for i in 0..16 {
            for j in 0..i {
                assert_ne!(p.row(i), p.row(j));
            }
        }
    }
}
