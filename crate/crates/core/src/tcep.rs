//! Temporal correlation-enhanced pruning.
//!
//! For every joint the frame-to-frame similarity of its token sequence picks
//! the `η` most correlated partner frames per frame. Those picks become a
//! symmetric binary mask with self-loops, and the masked similarity (softmaxed
//! and weighted by the fused temporal adjacency) drives a residual refinement
//! of the tokens.

use log::warn;

use crate::error::{HtpError, Result};
use crate::tensor::{fmt_shape, gelu, softmax_rows, Mat, Ten3};

/// Base and learnable temporal adjacencies plus their symmetric fusion.
#[derive(Clone, Debug)]
pub struct TemporalAdjacency {
    base: Mat,
    global: Mat,
    fused: Mat,
}

impl TemporalAdjacency {
    pub fn new(base: Mat, global: Mat) -> Result<Self> {
        let fused = fuse_adjacency(&base, &global)?;
        Ok(TemporalAdjacency { base, global, fused })
    }

    /// Chain graph over `frames` with a zero global topology.
    pub fn chain(frames: usize) -> Self {
        let base = chain_adjacency(frames);
        let global = Mat::zeros(frames, frames);
        let fused = fuse_adjacency(&base, &global).expect("square by construction");
        TemporalAdjacency { base, global, fused }
    }

    pub fn base(&self) -> &Mat {
        &self.base
    }

    pub fn global(&self) -> &Mat {
        &self.global
    }

    /// The symmetric fused adjacency `A_T`.
    pub fn fused(&self) -> &Mat {
        &self.fused
    }

    pub fn frames(&self) -> usize {
        self.fused.rows()
    }
}

/// Self-loops plus ±1 temporal neighbours.
pub fn chain_adjacency(frames: usize) -> Mat {
    Mat::from_fn(frames, frames, |p, q| if p.abs_diff(q) <= 1 { 1.0 } else { 0.0 })
}

/// `((A_F + Â_F) + (A_F + Â_F)ᵀ) / 2`.
pub fn fuse_adjacency(base: &Mat, global: &Mat) -> Result<Mat> {
    if !base.is_square() || base.shape() != global.shape() {
        return Err(HtpError::shape("fuse_adjacency", fmt_shape(base.shape()), fmt_shape(global.shape())));
    }
    let sum = base.add(global)?;
    let n = sum.rows();
    // Each unordered pair is computed once and mirrored, so symmetry is bitwise.
    let mut out = Mat::zeros(n, n);
    for p in 0..n {
        for q in 0..=p {
            let v = (sum.get(p, q) + sum.get(q, p)) / 2.0;
            out.set(p, q, v);
            out.set(q, p, v);
        }
    }
    Ok(out)
}

/// Scaled self-similarity `Y·Yᵀ/√D` of one joint's `F × D` tokens.
pub fn frame_similarity(tokens: &Mat) -> Result<Mat> {
    let d = tokens.cols();
    if d == 0 {
        return Err(HtpError::invalid("frame_similarity: feature width must be at least 1"));
    }
    let raw = tokens.matmul_transposed(tokens)?;
    let scale = 1.0 / (d as f64).sqrt();
    let n = raw.rows();
    let mut out = Mat::zeros(n, n);
    for p in 0..n {
        for q in 0..=p {
            let v = raw.get(p, q) * scale;
            out.set(p, q, v);
            out.set(q, p, v);
        }
    }
    Ok(out)
}

/// Effective neighbour count: `η` clamped to `F − 1`.
pub fn effective_eta(eta: usize, frames: usize) -> usize {
    eta.min(frames.saturating_sub(1))
}

/// Indices of the `count` largest off-diagonal scores in row `p`, ties to the lower index.
pub fn top_partners(row: &[f64], p: usize, count: usize) -> Vec<usize> {
    let mut cand: Vec<usize> = (0..row.len()).filter(|&q| q != p).collect();
    // Stable sort keeps ascending index order among equal scores.
    cand.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    cand.truncate(count);
    cand
}

/// Binary top-`η` mask with restored self-loops and OR-symmetrization.
pub fn select_topk_mask(similarity: &Mat, eta: usize) -> Result<Mat> {
    if !similarity.is_square() {
        return Err(HtpError::shape("select_topk_mask", "square", fmt_shape(similarity.shape())));
    }
    let n = similarity.rows();
    if n < 2 {
        return Ok(Mat::filled(n, n, 1.0));
    }
    if eta == 0 {
        return Err(HtpError::invalid("select_topk_mask: η must be at least 1"));
    }
    let k = effective_eta(eta, n);
    let mut mask = Mat::identity(n);
    for p in 0..n {
        for q in top_partners(similarity.row(p), p, k) {
            mask.set(p, q, 1.0);
            mask.set(q, p, 1.0);
        }
    }
    Ok(mask)
}

/// Keep `S` where the mask is 1, `-inf` elsewhere.
pub fn mask_similarity(similarity: &Mat, mask: &Mat) -> Result<Mat> {
    if similarity.shape() != mask.shape() {
        return Err(HtpError::shape("mask_similarity", fmt_shape(similarity.shape()), fmt_shape(mask.shape())));
    }
    Ok(Mat::from_fn(similarity.rows(), similarity.cols(), |p, q| {
        if mask.get(p, q) == 1.0 {
            similarity.get(p, q)
        } else {
            f64::NEG_INFINITY
        }
    }))
}

/// Stack of per-joint binary masks, `J × F × F`.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalMask {
    masks: Ten3,
    eta: usize,
}

impl TemporalMask {
    pub fn new(masks: Ten3, eta: usize) -> Result<Self> {
        let (_, f1, f2) = masks.shape();
        if f1 != f2 {
            return Err(HtpError::shape("TemporalMask", "J x F x F", format!("{:?}", masks.shape())));
        }
        if let Some((i, &v)) = masks.data().iter().enumerate().find(|(_, &v)| v != 0.0 && v != 1.0) {
            return Err(HtpError::MaskNotBinary { value: v, index: i });
        }
        Ok(TemporalMask { masks, eta })
    }

    /// All-ones masks: every frame attends to every frame.
    pub fn full(joints: usize, frames: usize) -> Self {
        TemporalMask {
            masks: Ten3::from_fn(joints, frames, frames, |_, _, _| 1.0),
            eta: frames.saturating_sub(1),
        }
    }

    pub fn joints(&self) -> usize {
        self.masks.shape().0
    }

    pub fn frames(&self) -> usize {
        self.masks.shape().1
    }

    pub fn eta(&self) -> usize {
        self.eta
    }

    pub fn as_ten3(&self) -> &Ten3 {
        &self.masks
    }

    pub fn joint(&self, j: usize) -> Mat {
        self.masks.slice0(j)
    }

    /// Total number of retained (query, key) pairs over all joints.
    pub fn support_total(&self) -> u64 {
        self.masks.data().iter().filter(|&&v| v == 1.0).count() as u64
    }
}

/// Shared projection and neighbour budget.
#[derive(Clone, Debug)]
pub struct TcepParams {
    pub weight: Mat,
    pub eta: usize,
}

/// Mask and refine all joints. Returns `(Y′, M)`.
pub fn tcep_refine(tokens: &Ten3, adj: &TemporalAdjacency, params: &TcepParams) -> Result<(Ten3, TemporalMask)> {
    let (joints, frames, dim) = tokens.shape();
    if adj.frames() != frames {
        return Err(HtpError::shape("tcep_refine", format!("{frames} frames"), format!("adjacency {}", adj.frames())));
    }
    if params.weight.shape() != (dim, dim) {
        return Err(HtpError::shape("tcep_refine", format!("{dim}x{dim}"), fmt_shape(params.weight.shape())));
    }
    if params.eta > frames.saturating_sub(1) && frames > 1 {
        warn!("η = {} exceeds F − 1 = {}; clamping", params.eta, frames - 1);
    }
    let mut refined = Ten3::zeros(joints, frames, dim);
    let mut masks = Ten3::zeros(joints, frames, frames);
    for j in 0..joints {
        let y = tokens.slice0(j);
        let s = frame_similarity(&y)?;
        let m = select_topk_mask(&s, params.eta)?;
        let out = refine_joint(&y, &s, &m, adj.fused(), &params.weight)?;
        refined.set_slice0(j, &out)?;
        masks.set_slice0(j, &m)?;
    }
    Ok((refined, TemporalMask::new(masks, params.eta)?))
}

/// `Y + GELU(((A_T ⊙ softmax(Š)) · Y) · W)` for one joint.
pub(crate) fn refine_joint(y: &Mat, s: &Mat, mask: &Mat, fused: &Mat, w: &Mat) -> Result<Mat> {
    let attn = fused.hadamard(&softmax_rows(&mask_similarity(s, mask)?)?)?;
    let update = attn.matmul(y)?.matmul(w)?;
    let mut out = y.clone();
    for (o, u) in out.data_mut().iter_mut().zip(update.data()) {
        *o += gelu(*u);
    }
    Ok(out)
}

/// Masks only, without the refinement step.
pub fn build_mask(tokens: &Ten3, eta: usize) -> Result<TemporalMask> {
    let (joints, frames, _) = tokens.shape();
    let mut masks = Ten3::zeros(joints, frames, frames);
    for j in 0..joints {
        let s = frame_similarity(&tokens.slice0(j))?;
        masks.set_slice0(j, &select_topk_mask(&s, eta)?)?;
    }
    TemporalMask::new(masks, eta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::tensor::softmax_row;
    use proptest::prelude::*;

    #[test]
    fn fuse_examples() {
        let i = Mat::identity(3);
        assert_eq!(fuse_adjacency(&i, &Mat::zeros(3, 3)).unwrap(), i);
        let g = Mat::from_rows(&[[0.0, 2.0], [0.0, 0.0]]).unwrap();
        let fused = fuse_adjacency(&Mat::zeros(2, 2), &g).unwrap();
        assert_eq!(fused, Mat::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap());
    }

    #[test]
    fn fuse_shape_mismatch() {
        assert!(fuse_adjacency(&Mat::zeros(2, 2), &Mat::zeros(3, 3)).is_err());
    }

    #[test]
    fn similarity_examples() {
        let y = Mat::from_rows(&[[1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(frame_similarity(&y).unwrap(), Mat::filled(2, 2, 0.5));
        let orth = Mat::from_rows(&[[1.0, 0.0], [0.0, 2.0]]).unwrap();
        let s = frame_similarity(&orth).unwrap();
        assert_eq!(s.get(0, 1), 0.0);
        let y = Mat::from_rows(&[[0.3, -1.2, 2.0], [0.7, 0.1, -0.4]]).unwrap();
        let s1 = frame_similarity(&y).unwrap();
        let s3 = frame_similarity(&y.scale(3.0)).unwrap();
        assert!(s3.max_abs_diff(&s1.scale(9.0)) < 1e-12);
    }

    #[test]
    fn topk_hand_example() {
        let s = Mat::from_rows(&[[0.0, 5.0, 1.0], [5.0, 0.0, 2.0], [1.0, 2.0, 0.0]]).unwrap();
        let m = select_topk_mask(&s, 1).unwrap();
        assert_eq!(m, Mat::from_rows(&[[1.0, 1.0, 0.0], [1.0, 1.0, 1.0], [0.0, 1.0, 1.0]]).unwrap());
    }

    #[test]
    fn topk_full_and_degenerate() {
        let s = Mat::from_fn(5, 5, |p, q| (p * 3 + q) as f64);
        assert_eq!(select_topk_mask(&s, 4).unwrap(), Mat::filled(5, 5, 1.0));
        assert_eq!(select_topk_mask(&s, 99).unwrap(), Mat::filled(5, 5, 1.0));
        assert_eq!(select_topk_mask(&Mat::zeros(1, 1), 3).unwrap(), Mat::filled(1, 1, 1.0));
    }

    #[test]
    fn topk_tie_prefers_lower_index() {
        // Row 0 ties between frames 1 and 2; frame 1 wins. Rows 1 and 2 pick frame 0 only
        // when their own scores point there.
        let s = Mat::from_rows(&[[9.0, 4.0, 4.0], [4.0, 9.0, -1.0], [4.0, -1.0, 9.0]]).unwrap();
        let m = select_topk_mask(&s, 1).unwrap();
        assert_eq!(m.get(0, 1), 1.0);
        // frame 2 picks 0 itself, so (0,2) is set by symmetric completion
        assert_eq!(m.get(0, 2), 1.0);
        let s = Mat::from_rows(&[[0.0, 4.0, 4.0], [4.0, 0.0, 8.0], [4.0, 8.0, 0.0]]).unwrap();
        let m = select_topk_mask(&s, 1).unwrap();
        assert_eq!(m.get(0, 1), 1.0);
        assert_eq!(m.get(0, 2), 0.0);
    }

    #[test]
    fn masked_similarity_semantics() {
        let s = Mat::from_fn(3, 3, |p, q| (p + 2 * q) as f64);
        assert_eq!(mask_similarity(&s, &Mat::filled(3, 3, 1.0)).unwrap(), s);
        let only_diag = mask_similarity(&s, &Mat::identity(3)).unwrap();
        for p in 0..3 {
            for q in 0..3 {
                assert_eq!(only_diag.get(p, q).is_finite(), p == q);
            }
            let row = softmax_row(only_diag.row(p)).unwrap();
            assert_eq!(row[p], 1.0);
        }
    }

    fn random_tokens(rng: &mut RngStream, j: usize, f: usize, d: usize) -> Ten3 {
        Ten3::from_fn(j, f, d, |_, _, _| rng.normal())
    }

    #[test]
    fn zero_update_branches_are_identity() {
        let mut rng = RngStream::new(5);
        let y = random_tokens(&mut rng, 2, 6, 3);
        let adj = TemporalAdjacency::chain(6);
        let (out, _) = tcep_refine(&y, &adj, &TcepParams { weight: Mat::zeros(3, 3), eta: 2 }).unwrap();
        assert_eq!(out, y);
        let zero_adj = TemporalAdjacency::new(Mat::zeros(6, 6), Mat::zeros(6, 6)).unwrap();
        let w = rng.uniform_mat(3, 3, 1.0);
        let (out, _) = tcep_refine(&y, &zero_adj, &TcepParams { weight: w, eta: 2 }).unwrap();
        assert_eq!(out, y);
    }

    #[test]
    fn refine_matches_straight_loops() {
        let mut rng = RngStream::new(42);
        let (f, d) = (3, 2);
        let y = random_tokens(&mut rng, 1, f, d);
        let w = rng.uniform_mat(d, d, 1.0);
        let global = rng.uniform_mat(f, f, 0.5);
        let adj = TemporalAdjacency::new(chain_adjacency(f), global.clone()).unwrap();
        let (out, mask) = tcep_refine(&y, &adj, &TcepParams { weight: w.clone(), eta: 1 }).unwrap();

        // Straight-loop oracle.
        let at = |p: usize, q: usize| {
            let base = |a: usize, b: usize| if a.abs_diff(b) <= 1 { 1.0 } else { 0.0 };
            ((base(p, q) + global.get(p, q)) + (base(q, p) + global.get(q, p))) / 2.0
        };
        let s = |p: usize, q: usize| (0..d).map(|k| y.get(0, p, k) * y.get(0, q, k)).sum::<f64>() / (d as f64).sqrt();
        for p in 0..f {
            let mut logits = vec![f64::NEG_INFINITY; f];
            for q in 0..f {
                if mask.as_ten3().get(0, p, q) == 1.0 {
                    logits[q] = s(p, q);
                }
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|&l| if l.is_finite() { (l - mx).exp() } else { 0.0 }).collect();
            let z: f64 = e.iter().sum();
            for c in 0..d {
                let mut acc = 0.0;
                for k in 0..d {
                    let mut ay = 0.0;
                    for q in 0..f {
                        ay += at(p, q) * e[q] / z * y.get(0, q, k);
                    }
                    acc += ay * w.get(k, c);
                }
                let expect = y.get(0, p, c) + gelu(acc);
                assert!((out.get(0, p, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn joint_permutation_equivariance() {
        let mut rng = RngStream::new(9);
        let y = random_tokens(&mut rng, 4, 7, 3);
        let params = TcepParams { weight: rng.uniform_mat(3, 3, 1.0), eta: 2 };
        let adj = TemporalAdjacency::chain(7);
        let (out, mask) = tcep_refine(&y, &adj, &params).unwrap();
        let perm = [2, 0, 3, 1];
        let mut py = Ten3::zeros(4, 7, 3);
        for (dst, &src) in perm.iter().enumerate() {
            py.set_slice0(dst, &y.slice0(src)).unwrap();
        }
        let (pout, pmask) = tcep_refine(&py, &adj, &params).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(pout.slice0(dst), out.slice0(src));
            assert_eq!(pmask.joint(dst), mask.joint(src));
        }
    }

    #[test]
    fn non_binary_mask_rejected() {
        let t = Ten3::from_fn(1, 2, 2, |_, p, q| if p == q { 1.0 } else { 0.5 });
        assert!(matches!(TemporalMask::new(t, 1), Err(HtpError::MaskNotBinary { .. })));
    }

    proptest! {
        #[test]
        fn mask_structure(f in 2usize..40, eta in 1usize..50, seed in any::<u64>()) {
            let mut rng = RngStream::new(seed);
            let s = Mat::from_fn(f, f, |_, _| rng.normal());
            let m = select_topk_mask(&s, eta).unwrap();
            let k = effective_eta(eta, f);
            prop_assert!(m.is_symmetric());
            let mut total = 0;
            for p in 0..f {
                prop_assert_eq!(m.get(p, p), 1.0);
                let support = m.row(p).iter().filter(|&&v| v == 1.0).count();
                prop_assert!(support > k && support <= f);
                total += support;
            }
            // Each row contributes at most 2k off-diagonal ones after symmetrization.
            prop_assert!(total <= f * (2 * k + 1));
        }

        #[test]
        fn raising_a_score_forces_selection(f in 3usize..20, eta in 1usize..6, seed in any::<u64>(), pick in any::<prop::sample::Index>()) {
            let mut rng = RngStream::new(seed);
            let mut s = Mat::from_fn(f, f, |_, _| rng.normal());
            let k = effective_eta(eta, f);
            let p = 0;
            let q = 1 + pick.index(f - 1);
            let mut row: Vec<f64> = (0..f).filter(|&c| c != p).map(|c| s.get(p, c)).collect();
            row.sort_by(|a, b| b.total_cmp(a));
            s.set(p, q, row[k - 1] + 1.0);
            let m = select_topk_mask(&s, eta).unwrap();
            prop_assert_eq!(m.get(p, q), 1.0);
        }
    }
}
