//! Multi-head attention over token sequences, with an optional additive mask.
//!
//! Temporal attention runs independently per joint over the frame axis;
//! spatial attention runs independently per frame over the joint axis. The
//! sparse-focused variant adds a `{0, -inf}` mask derived from the per-joint
//! temporal mask, shared by all heads.

use crate::error::{HtpError, Result};
use crate::rng::RngStream;
use crate::tcep::TemporalMask;
use crate::tensor::{fmt_shape, gelu, gemm, layer_norm_in_place, Mat, MatViewMut, Ten3};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNormParams {
    pub fn identity(dim: usize) -> Self {
        LayerNormParams {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }

    /// LayerNorm of every row.
    pub fn apply(&self, x: &Mat) -> Result<Mat> {
        let mut out = x.clone();
        for r in 0..out.rows() {
            layer_norm_in_place(out.row_mut(r), &self.gamma, &self.beta)?;
        }
        Ok(out)
    }
}

/// Query/key/value/output projections, `D × D` each, split over `heads`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnWeights {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_o: Mat,
    pub heads: usize,
}

impl AttnWeights {
    pub fn new(w_q: Mat, w_k: Mat, w_v: Mat, w_o: Mat, heads: usize) -> Result<Self> {
        let d = w_q.rows();
        for (name, m) in [("w_q", &w_q), ("w_k", &w_k), ("w_v", &w_v), ("w_o", &w_o)] {
            if m.shape() != (d, d) {
                return Err(HtpError::shape("AttnWeights", format!("{name} {d}x{d}"), fmt_shape(m.shape())));
            }
            if !m.all_finite() {
                return Err(HtpError::invalid(format!("AttnWeights: {name} has non-finite entries")));
            }
        }
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(HtpError::invalid(format!("model width {d} is not divisible by {heads} heads")));
        }
        Ok(AttnWeights { w_q, w_k, w_v, w_o, heads })
    }

    /// Uniform in `±1/√D`.
    pub fn random(rng: &mut RngStream, dim: usize, heads: usize) -> Result<Self> {
        let b = 1.0 / (dim as f64).sqrt();
        Self::new(
            rng.uniform_mat(dim, dim, b),
            rng.uniform_mat(dim, dim, b),
            rng.uniform_mat(dim, dim, b),
            rng.uniform_mat(dim, dim, b),
            heads,
        )
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }
}

/// Two affine layers with GELU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

impl Mlp {
    pub fn random(rng: &mut RngStream, dim: usize, ratio: usize) -> Self {
        let hidden = dim * ratio;
        let b1 = 1.0 / (dim as f64).sqrt();
        let b2 = 1.0 / (hidden as f64).sqrt();
        Mlp {
            w1: rng.uniform_mat(dim, hidden, b1),
            b1: (0..hidden).map(|_| rng.uniform(-b1, b1)).collect(),
            w2: rng.uniform_mat(hidden, dim, b2),
            b2: (0..dim).map(|_| rng.uniform(-b2, b2)).collect(),
        }
    }

    pub fn zeros(dim: usize, ratio: usize) -> Self {
        Mlp {
            w1: Mat::zeros(dim, dim * ratio),
            b1: vec![0.0; dim * ratio],
            w2: Mat::zeros(dim * ratio, dim),
            b2: vec![0.0; dim],
        }
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        let mut h = x.matmul(&self.w1)?;
        h.add_row_broadcast(&self.b1)?;
        for v in h.data_mut() {
            *v = gelu(*v);
        }
        let mut out = h.matmul(&self.w2)?;
        out.add_row_broadcast(&self.b2)?;
        Ok(out)
    }
}

/// Additive attention mask `J × F × F` with entries in `{0, -inf}`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdditiveMask {
    values: Ten3,
}

impl AdditiveMask {
    /// Accepts any `{0, -inf}` tensor; rows with empty support are caught at use.
    pub fn new(values: Ten3) -> Result<Self> {
        let (_, a, b) = values.shape();
        if a != b {
            return Err(HtpError::shape("AdditiveMask", "J x F x F", format!("{:?}", values.shape())));
        }
        if let Some((i, &v)) = values
            .data()
            .iter()
            .enumerate()
            .find(|(_, &v)| v != 0.0 && v != f64::NEG_INFINITY)
        {
            return Err(HtpError::Format(format!("additive mask entry {v} at {i} is neither 0 nor -inf")));
        }
        Ok(AdditiveMask { values })
    }

    /// All-zero mask (no positions suppressed).
    pub fn zeros(joints: usize, frames: usize) -> Self {
        AdditiveMask {
            values: Ten3::zeros(joints, frames, frames),
        }
    }

    pub fn as_ten3(&self) -> &Ten3 {
        &self.values
    }

    pub fn joints(&self) -> usize {
        self.values.shape().0
    }

    pub fn frames(&self) -> usize {
        self.values.shape().1
    }

    fn joint(&self, j: usize) -> &[f64] {
        self.values.block(j)
    }
}

/// Map a binary temporal mask to its additive form: 1 → 0, 0 → -inf.
pub fn to_additive_mask(mask: &TemporalMask) -> Result<AdditiveMask> {
    binary_to_additive(mask.as_ten3())
}

/// Same as [`to_additive_mask`] on a raw tensor; rejects non-binary entries.
pub fn binary_to_additive(mask: &Ten3) -> Result<AdditiveMask> {
    let (j, f, _) = mask.shape();
    let mut data = Vec::with_capacity(mask.data().len());
    for (i, &v) in mask.data().iter().enumerate() {
        data.push(if v == 1.0 {
            0.0
        } else if v == 0.0 {
            f64::NEG_INFINITY
        } else {
            return Err(HtpError::MaskNotBinary { value: v, index: i });
        });
    }
    AdditiveMask::new(Ten3::new(j, f, f, data)?)
}

/// Multi-head attention of already-normalized queries over keys/values.
///
/// Returns `Concat(head_1..head_h)·W_O` (no residual). `mask` is a row-major
/// `Lq × Lk` additive mask. When `probs` is given it receives each head's
/// post-softmax weights.
pub fn attention(
    queries: &Mat,
    keys_values: &Mat,
    w: &AttnWeights,
    mask: Option<&[f64]>,
    mut probs: Option<&mut Vec<Mat>>,
) -> Result<Mat> {
    let d = w.dim();
    if queries.cols() != d || keys_values.cols() != d {
        return Err(HtpError::shape(
            "attention",
            format!("width {d}"),
            format!("queries {} / keys {}", fmt_shape(queries.shape()), fmt_shape(keys_values.shape())),
        ));
    }
    let (lq, lk) = (queries.rows(), keys_values.rows());
    if lk == 0 {
        return Err(HtpError::EmptySupport);
    }
    if let Some(m) = mask {
        if m.len() != lq * lk {
            return Err(HtpError::shape("attention mask", format!("{lq}x{lk}"), m.len()));
        }
    }
    let q = queries.matmul(&w.w_q)?;
    let k = keys_values.matmul(&w.w_k)?;
    let v = keys_values.matmul(&w.w_v)?;
    let dk = w.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let mut concat = Mat::zeros(lq, d);
    let mut scores = Mat::zeros(lq, lk);
    for h in 0..w.heads {
        let off = h * dk;
        gemm(q.col_block(off, dk)?, k.col_block(off, dk)?.t(), 0.0, MatViewMut::full(&mut scores))?;
        for r in 0..lq {
            let row = scores.row_mut(r);
            match mask {
                Some(m) => {
                    for (s, &a) in row.iter_mut().zip(&m[r * lk..(r + 1) * lk]) {
                        *s = *s * scale + a;
                    }
                }
                None => row.iter_mut().for_each(|s| *s *= scale),
            }
            crate::tensor::softmax_in_place(row)?;
        }
        gemm(scores.view(), v.col_block(off, dk)?, 0.0, MatViewMut::col_block(&mut concat, off, dk)?)?;
        if let Some(p) = probs.as_deref_mut() {
            p.push(scores.clone());
        }
    }
    concat.matmul(&w.w_o)
}

/// Post-softmax attention weights per head, for inspection and tests.
pub fn attention_probs(queries: &Mat, keys_values: &Mat, w: &AttnWeights, mask: Option<&[f64]>) -> Result<Vec<Mat>> {
    let mut probs = Vec::with_capacity(w.heads);
    attention(queries, keys_values, w, mask, Some(&mut probs))?;
    Ok(probs)
}

fn check_tokens(op: &'static str, y: &Ten3, w: &AttnWeights, norm: &LayerNormParams) -> Result<()> {
    let d = y.shape().2;
    if d != w.dim() || norm.gamma.len() != d || norm.beta.len() != d {
        return Err(HtpError::shape(op, format!("token width {d}"), format!("weights {}", w.dim())));
    }
    Ok(())
}

/// Sparse-focused temporal attention: per joint, `Y′ + MHSA(LN(Y′); M′)`.
pub fn sft_mhsa(y: &Ten3, mask: &AdditiveMask, w: &AttnWeights, norm: &LayerNormParams) -> Result<Ten3> {
    let (joints, frames, _) = y.shape();
    check_tokens("sft_mhsa", y, w, norm)?;
    if mask.joints() != joints || mask.frames() != frames {
        return Err(HtpError::shape(
            "sft_mhsa",
            format!("{joints}x{frames}x{frames}"),
            format!("{:?}", mask.as_ten3().shape()),
        ));
    }
    temporal(y, Some(mask), w, norm)
}

/// Unmasked temporal attention with the same residual layout as [`sft_mhsa`].
pub fn dense_temporal_mhsa(y: &Ten3, w: &AttnWeights, norm: &LayerNormParams) -> Result<Ten3> {
    check_tokens("dense_temporal_mhsa", y, w, norm)?;
    temporal(y, None, w, norm)
}

fn temporal(y: &Ten3, mask: Option<&AdditiveMask>, w: &AttnWeights, norm: &LayerNormParams) -> Result<Ten3> {
    let mut out = y.clone();
    for j in 0..y.shape().0 {
        let x = y.slice0(j);
        let n = norm.apply(&x)?;
        let upd = attention(&n, &n, w, mask.map(|m| m.joint(j)), None)?;
        for (o, u) in out.block_mut(j).iter_mut().zip(upd.data()) {
            *o += u;
        }
    }
    Ok(out)
}

/// Attention across joints within each frame, plus residual.
pub fn spatial_attention(y: &Ten3, w: &AttnWeights, norm: &LayerNormParams) -> Result<Ten3> {
    check_tokens("spatial_attention", y, w, norm)?;
    let mut out = y.clone();
    for p in 0..y.shape().1 {
        let x = y.slice1(p);
        let n = norm.apply(&x)?;
        let upd = attention(&n, &n, w, None, None)?;
        out.set_slice1(p, &x.add(&upd)?)?;
    }
    Ok(out)
}

/// `Ỹ + MLP(LN(Ỹ))` applied to every token.
pub fn ffn_block(y: &Ten3, mlp: &Mlp, norm: &LayerNormParams) -> Result<Ten3> {
    let (a, b, d) = y.shape();
    if mlp.w1.rows() != d || mlp.w2.cols() != d || norm.gamma.len() != d {
        return Err(HtpError::shape("ffn_block", format!("token width {d}"), fmt_shape(mlp.w1.shape())));
    }
    let tokens = Mat::new(a * b, d, y.data().to_vec())?;
    let upd = mlp.forward(&norm.apply(&tokens)?)?;
    let mut out = y.clone();
    for (o, u) in out.data_mut().iter_mut().zip(upd.data()) {
        *o += u;
    }
    Ok(out)
}

/// One attention sub-layer followed by its feed-forward sub-layer.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub attn_norm: LayerNormParams,
    pub attn: AttnWeights,
    pub mlp_norm: LayerNormParams,
    pub mlp: Mlp,
}

impl EncoderLayer {
    pub fn random(rng: &mut RngStream, dim: usize, heads: usize, ratio: usize) -> Result<Self> {
        Ok(EncoderLayer {
            attn_norm: LayerNormParams::identity(dim),
            attn: AttnWeights::random(rng, dim, heads)?,
            mlp_norm: LayerNormParams::identity(dim),
            mlp: Mlp::random(rng, dim, ratio),
        })
    }

    pub fn spatial(&self, y: &Ten3) -> Result<Ten3> {
        ffn_block(&spatial_attention(y, &self.attn, &self.attn_norm)?, &self.mlp, &self.mlp_norm)
    }

    /// Temporal attention; `mask = None` is the dense variant.
    pub fn temporal(&self, y: &Ten3, mask: Option<&AdditiveMask>) -> Result<Ten3> {
        let att = match mask {
            Some(m) => sft_mhsa(y, m, &self.attn, &self.attn_norm)?,
            None => dense_temporal_mhsa(y, &self.attn, &self.attn_norm)?,
        };
        ffn_block(&att, &self.mlp, &self.mlp_norm)
    }
}
