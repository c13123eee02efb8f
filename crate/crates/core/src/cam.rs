//! Correlational aggregation: query features are matched against all
//! support prototypes at once, plus a learnable background prototype.
//!
//! Reductions over the class axis use [`SumOrder::Sorted`], so reordering
//! (prototype, encoding) pairs leaves every output bit unchanged.

use corrdet_tensor::{Session, SumOrder, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Init};
use crate::types::BBox;

/// Ablation switches for the feature-matching branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CamFlags {
    pub apply_sigmoid: bool,
    pub query_multiply: bool,
    pub model_background: bool,
}

impl Default for CamFlags {
    fn default() -> Self {
        Self {
            apply_sigmoid: true,
            query_multiply: true,
            model_background: true,
        }
    }
}

/// How query features are conditioned on the supports.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// All support classes at once through the correlational module.
    #[default]
    Cam,
    /// One class at a time by channel reweighting; requires `C = 1`.
    Reweight,
}

/// `sin`/`cos` encoding of position `p`.
pub fn sinusoid(p: usize, d: usize) -> Vec<f64> {
    let mut row = vec![0.0; d];
    for k in 0..d / 2 {
        let a = p as f64 / 10000f64.powf(2.0 * k as f64 / d as f64);
        row[2 * k] = a.sin();
        row[2 * k + 1] = a.cos();
    }
    row
}

/// `(C+1) x d` task encodings: a zero background row, then positions `1..=C`.
pub fn make_task_encodings(c: usize, d: usize) -> Result<Tensor> {
    task_encodings_for(&(1..=c).collect::<Vec<_>>(), d, true)
}

/// Encoding rows for the given positions, optionally led by the zero
/// background row. Row order follows `positions`, so callers can pair any
/// prototype order with the matching encodings.
pub fn task_encodings_for(positions: &[usize], d: usize, background: bool) -> Result<Tensor> {
    if d % 2 != 0 {
        return Err(Error::OddDimension(d));
    }
    let mut rows = Vec::with_capacity(positions.len() + 1);
    if background {
        rows.push(vec![0.0; d]);
    }
    rows.extend(positions.iter().map(|&p| sinusoid(p, d)));
    Ok(Tensor::from_vec(&[rows.len(), d], rows.concat()))
}

pub fn init_cam<R: Rng>(init: &mut Init<'_, R>, d: usize, hidden: usize) {
    nn::init_self_attention_block(init, "cam.enc", d);
    init.linear_no_bias("cam.proj", d, d);
    init.normal("cam.bg", &[1, d], 1.0 / (d as f64).sqrt());
    nn::init_ffn_block(init, "cam.out", d, hidden);
}

pub fn init_reweight<R: Rng>(init: &mut Init<'_, R>, d: usize, hidden: usize) {
    nn::init_self_attention_block(init, "cam.enc", d);
    init.linear("rw.fuse", 3 * d, d);
    nn::init_ffn_block(init, "rw.out", d, hidden);
}

/// The weight-shared attention applied to query and support maps alike.
pub fn encode<'g>(s: &Session<'g>, heads: usize, x: Var<'g>, pos: Option<Var<'g>>) -> Var<'g> {
    nn::self_attention_block(s, "cam.enc", heads, x, pos)
}

fn axis_weights(lo: f64, hi: f64, cells: usize, grid: usize, samples: usize) -> Vec<f64> {
    let mut w = vec![0.0; cells];
    let n = grid * samples;
    let step = (hi - lo) / n as f64;
    for k in 0..n {
        let u = (lo + (k as f64 + 0.5) * step - 0.5).clamp(0.0, (cells - 1) as f64);
        let i0 = u.floor() as usize;
        let i1 = (i0 + 1).min(cells - 1);
        let f = u - i0 as f64;
        w[i0] += (1.0 - f) / n as f64;
        w[i1] += f / n as f64;
    }
    w
}

/// Region-pooling weights over an `fh x fw` feature grid: bilinear samples
/// on a `grid x grid` lattice with `samples²` points per bin, averaged. The
/// result is a `[1, fh·fw]` row that sums to 1.
pub fn roi_align_weights(b: &BBox, fh: usize, fw: usize, grid: usize, samples: usize) -> Result<Tensor> {
    let r = b.to_xyxy();
    let (x0, x1) = (r.x0.clamp(0.0, 1.0) * fw as f64, r.x1.clamp(0.0, 1.0) * fw as f64);
    let (y0, y1) = (r.y0.clamp(0.0, 1.0) * fh as f64, r.y1.clamp(0.0, 1.0) * fh as f64);
    if x1 <= x0 || y1 <= y0 || fh == 0 || fw == 0 {
        return Err(Error::EmptyRegion);
    }
    let wx = axis_weights(x0, x1, fw, grid, samples);
    let wy = axis_weights(y0, y1, fh, grid, samples);
    let data = wy.iter().flat_map(|a| wx.iter().map(move |b| a * b)).collect();
    Ok(Tensor::from_vec(&[1, fh * fw], data))
}

/// One-hot weights on the cell nearest the box center.
pub fn nearest_cell_weights(b: &BBox, fh: usize, fw: usize) -> Tensor {
    let cx = ((b.cx * fw as f64) as usize).min(fw - 1);
    let cy = ((b.cy * fh as f64) as usize).min(fh - 1);
    let mut t = Tensor::zeros(&[1, fh * fw]);
    t.data_mut()[cy * fw + cx] = 1.0;
    t
}

/// [`roi_align_weights`] falling back to the nearest cell.
pub fn support_pool_weights(b: &BBox, fh: usize, fw: usize, grid: usize, samples: usize) -> Tensor {
    roi_align_weights(b, fh, fw, grid, samples).unwrap_or_else(|_| nearest_cell_weights(b, fh, fw))
}

/// Mean over shots of the region-pooled encoded support maps, `[1, d]`.
pub fn class_prototype<'g>(s: &Session<'g>, encoded: &[Var<'g>], weights: &[Tensor]) -> Var<'g> {
    assert_eq!(encoded.len(), weights.len());
    assert!(!encoded.is_empty(), "prototype from zero shots");
    let mut acc: Option<Var<'g>> = None;
    for (f, w) in encoded.iter().zip(weights) {
        let pooled = s.constant(w.clone()).matmul(*f);
        acc = Some(match acc {
            Some(a) => a.add(pooled),
            None => pooled,
        });
    }
    acc.expect("non-empty").scale(1.0 / encoded.len() as f64)
}

/// `S̃`: the background prototype (when modeled) stacked over class rows.
pub fn assemble_prototypes<'g>(s: &Session<'g>, classes: Option<Var<'g>>, flags: &CamFlags) -> Var<'g> {
    match (flags.model_background, classes) {
        (true, Some(c)) => Var::concat_rows(&[s.param("cam.bg"), c]),
        (true, None) => s.param("cam.bg"),
        (false, Some(c)) => c,
        (false, None) => panic!("no prototypes without background modeling"),
    }
}

/// Returns `(A, Q_F)` with `A = softmax((QW)(S̃W)ᵀ/√d)` and
/// `Q_F = (A·σ(S̃)) ⊙ Q`.
pub fn feature_match<'g>(s: &Session<'g>, q: Var<'g>, s_tilde: Var<'g>, flags: &CamFlags) -> (Var<'g>, Var<'g>) {
    let d = q.shape()[1];
    let qw = nn::linear_no_bias(s, "cam.proj", q);
    let sw = nn::linear_no_bias(s, "cam.proj", s_tilde);
    let a = qw
        .matmul_nt(sw)
        .scale(1.0 / (d as f64).sqrt())
        .softmax_rows(SumOrder::Sorted);
    let filt = if flags.apply_sigmoid {
        s_tilde.sigmoid()
    } else {
        s_tilde
    };
    let mixed = a.matmul_sorted(filt);
    let q_f = if flags.query_multiply { mixed.mul(q) } else { mixed };
    (a, q_f)
}

/// `Q_E = A T̃`.
pub fn encoding_match<'g>(a: Var<'g>, t: Var<'g>) -> Result<Var<'g>> {
    let (ac, tr) = (a.shape()[1], t.shape()[0]);
    if ac != tr {
        return Err(Error::shape("encoding_match: A columns vs encoding rows", ac, tr));
    }
    Ok(a.matmul_sorted(t))
}

pub struct CamOutput<'g> {
    pub out: Var<'g>,
    pub a: Var<'g>,
    pub q_f: Var<'g>,
    pub q_e: Var<'g>,
}

/// Full aggregation on a pre-encoded query map `q` (`[HW, d]`).
/// `encodings` must have one row per row of `S̃`.
pub fn aggregate<'g>(
    s: &Session<'g>,
    q: Var<'g>,
    classes: Option<Var<'g>>,
    encodings: &Tensor,
    flags: &CamFlags,
) -> Result<CamOutput<'g>> {
    let s_tilde = assemble_prototypes(s, classes, flags);
    if s_tilde.shape()[1] != q.shape()[1] {
        return Err(Error::shape("prototype width", q.shape()[1], s_tilde.shape()[1]));
    }
    let (a, q_f) = feature_match(s, q, s_tilde, flags);
    let q_e = encoding_match(a, s.constant(encodings.clone()))?;
    let x = q_f.add(q_e);
    let out = nn::ffn_block(s, "cam.out", x);
    Ok(CamOutput { out, a, q_f, q_e })
}

/// Encodes the raw query map with the shared attention, then aggregates.
pub fn cam_forward<'g>(
    s: &Session<'g>,
    heads: usize,
    q: Var<'g>,
    pos: Option<Var<'g>>,
    classes: Option<Var<'g>>,
    encodings: &Tensor,
    flags: &CamFlags,
) -> Result<CamOutput<'g>> {
    let qe = encode(s, heads, q, pos);
    aggregate(s, qe, classes, encodings, flags)
}

/// Single-class reweighting baseline on a pre-encoded query map:
/// `x = Linear([Q⊙s, Q−s, Q])`, then a feed-forward sublayer.
pub fn reweight<'g>(s: &Session<'g>, q: Var<'g>, proto: Var<'g>) -> Result<Var<'g>> {
    if proto.shape()[0] != 1 {
        return Err(Error::Config(format!(
            "reweighting aggregates one class at a time, got {}",
            proto.shape()[0]
        )));
    }
    let fused = Var::concat_cols(&[q.mul_row(proto), q.add_row(proto.scale(-1.0)), q]);
    let x = nn::linear(s, "rw.fuse", fused);
    Ok(nn::ffn_block(s, "rw.out", x))
}
