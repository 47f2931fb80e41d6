//! Mask-guided pose token pruning.
//!
//! Tokens and masks are averaged over joints, frames are clustered with a
//! masked density-peaks rule, and the `f` highest-scoring frames are kept in
//! temporal order. Ties resolve to the lower frame index throughout.
//!
//! Means and the `√D` scaling divide rather than multiply by a reciprocal,
//! so every quantity matches a straight-loop evaluation bit for bit and
//! near-ties break the same way.

use crate::error::{HtpError, Result};
use crate::tcep::TemporalMask;
use crate::tensor::{softmax_row, Mat, Ten3};

/// Offset that places masked-out pairs strictly beyond every valid distance.
pub const MASK_EPSILON: f64 = 1e-6;

/// Joint-averaged tokens and mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTokens {
    /// `F × D` mean token per frame.
    pub z: Mat,
    /// `F × F` binarized pooled mask.
    pub pooled_mask: Mat,
    /// `F × F` pooled mask before thresholding.
    pub raw_pool: Mat,
}

pub fn pool_tokens_and_mask(tokens: &Ten3, mask: &TemporalMask, tau: f64) -> Result<FrameTokens> {
    let (joints, frames, dim) = tokens.shape();
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(HtpError::invalid(format!("pooling threshold {tau} outside (0, 1]")));
    }
    if mask.joints() != joints || mask.frames() != frames {
        return Err(HtpError::shape(
            "pool_tokens_and_mask",
            format!("{joints}x{frames}x{frames}"),
            format!("{}x{}x{}", mask.joints(), mask.frames(), mask.frames()),
        ));
    }
    let n = joints as f64;
    let mut z = Mat::zeros(frames, dim);
    let mut raw = Mat::zeros(frames, frames);
    let m = mask.as_ten3();
    for j in 0..joints {
        for (acc, v) in z.data_mut().iter_mut().zip(tokens.block(j)) {
            *acc += v;
        }
        for (acc, v) in raw.data_mut().iter_mut().zip(m.block(j)) {
            *acc += v;
        }
    }
    z.data_mut().iter_mut().for_each(|v| *v /= n);
    raw.data_mut().iter_mut().for_each(|v| *v /= n);
    let pooled = raw.map(|v| if v >= tau { 1.0 } else { 0.0 });
    Ok(FrameTokens { z, pooled_mask: pooled, raw_pool: raw })
}

/// Scaled Euclidean distances with masked pairs pushed to the sentinel `Λ`.
///
/// `Λ` is the largest distance over all pairs plus [`MASK_EPSILON`].
pub fn masked_distance(ft: &FrameTokens) -> Result<(Mat, f64)> {
    let (frames, dim) = ft.z.shape();
    if dim == 0 {
        return Err(HtpError::invalid("masked_distance: token width is zero"));
    }
    let root_dim = (dim as f64).sqrt();
    let mut d = Mat::zeros(frames, frames);
    let mut max = 0.0f64;
    for p in 0..frames {
        for q in p + 1..frames {
            let sq: f64 = ft.z.row(p).iter().zip(ft.z.row(q)).map(|(a, b)| (a - b) * (a - b)).sum();
            let v = sq.sqrt() / root_dim;
            d.set(p, q, v);
            d.set(q, p, v);
            max = max.max(v);
        }
    }
    let lambda = max + MASK_EPSILON;
    for p in 0..frames {
        for q in 0..frames {
            if p != q && ft.pooled_mask.get(p, q) != 1.0 {
                d.set(p, q, lambda);
            }
        }
    }
    Ok((d, lambda))
}

/// Gaussian-kernel density over the `k` nearest non-self frames, ties admitted.
///
/// Squared distances are summed in ascending order, so frames whose
/// neighbourhoods hold the same distances get bitwise-equal densities.
pub fn knn_density(dist: &Mat, k: usize) -> Result<Vec<f64>> {
    let frames = dist.rows();
    if frames < 2 {
        return Ok(vec![1.0; frames]);
    }
    if k == 0 || k > frames - 1 {
        return Err(HtpError::invalid(format!("knn_density: k = {k} outside [1, {}]", frames - 1)));
    }
    let mut row = Vec::with_capacity(frames - 1);
    Ok((0..frames)
        .map(|p| {
            row.clear();
            row.extend((0..frames).filter(|&q| q != p).map(|q| dist.get(p, q)));
            row.sort_by(f64::total_cmp);
            let radius = row[k - 1];
            let sum: f64 = row.iter().take_while(|&&v| v <= radius).map(|v| v * v).sum();
            (-sum / k as f64).exp()
        })
        .collect())
}

/// `φ̂_p = φ_p · softmax(s̃)_p` where `s_p` is the pooled-mask row support.
pub fn response_density(phi: &[f64], pooled_mask: &Mat) -> Result<Vec<f64>> {
    if pooled_mask.shape() != (phi.len(), phi.len()) {
        return Err(HtpError::shape("response_density", phi.len(), format!("{:?}", pooled_mask.shape())));
    }
    let support: Vec<f64> = (0..phi.len())
        .map(|p| {
            let s: f64 = pooled_mask.row(p).iter().sum();
            if s > 0.0 {
                s
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let w = softmax_row(&support)?;
    Ok(phi.iter().zip(w).map(|(a, b)| a * b).collect())
}

/// True when frame `q` outranks frame `p` in density, lower index winning ties.
fn outranks(phi_hat: &[f64], q: usize, p: usize) -> bool {
    phi_hat[q] > phi_hat[p] || (phi_hat[q] == phi_hat[p] && q < p)
}

/// Distance to the nearest higher-density frame; the peak takes its farthest distance.
pub fn separation_distance(dist: &Mat, phi_hat: &[f64]) -> Result<Vec<f64>> {
    let frames = phi_hat.len();
    if dist.shape() != (frames, frames) {
        return Err(HtpError::shape("separation_distance", frames, format!("{:?}", dist.shape())));
    }
    Ok((0..frames)
        .map(|p| {
            let nearest = (0..frames)
                .filter(|&q| q != p && outranks(phi_hat, q, p))
                .map(|q| dist.get(p, q))
                .min_by(f64::total_cmp);
            nearest.unwrap_or_else(|| (0..frames).map(|q| dist.get(p, q)).fold(0.0, f64::max))
        })
        .collect())
}

/// Every intermediate quantity of the clustering step.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterState {
    pub distances: Mat,
    pub lambda: f64,
    pub density: Vec<f64>,
    pub support: Vec<f64>,
    pub response: Vec<f64>,
    pub separation: Vec<f64>,
    pub k: usize,
}

impl ClusterState {
    /// `k` is clamped to `F − 1`.
    pub fn compute(ft: &FrameTokens, k: usize) -> Result<Self> {
        let frames = ft.z.rows();
        let k = k.min(frames.saturating_sub(1)).max(1);
        let (distances, lambda) = masked_distance(ft)?;
        let density = knn_density(&distances, k)?;
        let support = (0..frames).map(|p| ft.pooled_mask.row(p).iter().sum()).collect();
        let response = response_density(&density, &ft.pooled_mask)?;
        let separation = separation_distance(&distances, &response)?;
        Ok(ClusterState { distances, lambda, density, support, response, separation, k })
    }

    /// Saliency `ω_p · φ̂_p`.
    pub fn scores(&self) -> Vec<f64> {
        self.separation.iter().zip(&self.response).map(|(a, b)| a * b).collect()
    }
}

/// Strictly increasing retained frame indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionIndex(Vec<usize>);

impl SelectionIndex {
    pub fn new(indices: Vec<usize>, frames: usize) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) || indices.last().is_some_and(|&i| i >= frames) {
            return Err(HtpError::invalid(format!("selection {indices:?} is not strictly increasing within [0, {frames})")));
        }
        Ok(SelectionIndex(indices))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Top-`f` scores, returned in ascending frame order.
pub fn select_top(scores: &[f64], f: usize) -> Result<SelectionIndex> {
    let frames = scores.len();
    if f == 0 || f > frames {
        return Err(HtpError::invalid(format!("cannot retain {f} of {frames} frames")));
    }
    let mut order: Vec<usize> = (0..frames).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(f);
    order.sort_unstable();
    SelectionIndex::new(order, frames)
}

pub fn select_and_prune(tokens: &Ten3, cluster: &ClusterState, f: usize) -> Result<(Ten3, SelectionIndex)> {
    let frames = tokens.shape().1;
    if cluster.separation.len() != frames {
        return Err(HtpError::shape("select_and_prune", frames, cluster.separation.len()));
    }
    let sel = select_top(&cluster.scores(), f)?;
    Ok((tokens.gather_axis1(sel.indices())?, sel))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MgptpParams {
    pub tau: f64,
    pub k: usize,
    pub retained: usize,
}

impl Default for MgptpParams {
    fn default() -> Self {
        MgptpParams { tau: 0.5, k: 5, retained: 54 }
    }
}

/// Full pruning step: pool, cluster, score, slice.
pub fn mgptp(tokens: &Ten3, mask: &TemporalMask, params: &MgptpParams) -> Result<(Ten3, SelectionIndex, ClusterState)> {
    let ft = pool_tokens_and_mask(tokens, mask, params.tau)?;
    let cluster = ClusterState::compute(&ft, params.k)?;
    let (pruned, sel) = select_and_prune(tokens, &cluster, params.retained)?;
    Ok((pruned, sel, cluster))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    fn line_tokens(z: &[f64]) -> FrameTokens {
        let n = z.len();
        FrameTokens {
            z: Mat::new(n, 1, z.to_vec()).unwrap(),
            pooled_mask: Mat::filled(n, n, 1.0),
            raw_pool: Mat::filled(n, n, 1.0),
        }
    }

    fn random_mask(rng: &mut RngStream, joints: usize, frames: usize, p: f64) -> TemporalMask {
        let mut t = Ten3::zeros(joints, frames, frames);
        for j in 0..joints {
            for a in 0..frames {
                t.set(j, a, a, 1.0);
                for b in 0..a {
                    if rng.uniform(0.0, 1.0) < p {
                        t.set(j, a, b, 1.0);
                        t.set(j, b, a, 1.0);
                    }
                }
            }
        }
        TemporalMask::new(t, frames.saturating_sub(1).max(1)).unwrap()
    }

    #[test]
    fn pooling_examples() {
        let mut rng = RngStream::new(1);
        let y = Ten3::from_fn(1, 4, 3, |_, _, _| rng.normal());
        let m = random_mask(&mut rng, 1, 4, 0.4);
        let ft = pool_tokens_and_mask(&y, &m, 1.0).unwrap();
        assert_eq!(ft.z, y.slice0(0));
        assert_eq!(ft.pooled_mask, m.joint(0));

        let mut t = Ten3::from_fn(2, 2, 2, |_, p, q| if p == q { 1.0 } else { 0.0 });
        t.set(0, 0, 1, 1.0);
        t.set(0, 1, 0, 1.0);
        let m = TemporalMask::new(t, 1).unwrap();
        let y = Ten3::zeros(2, 2, 1);
        let ft = pool_tokens_and_mask(&y, &m, 0.5).unwrap();
        assert_eq!(ft.raw_pool.get(0, 1), 0.5);
        assert_eq!(ft.pooled_mask.get(0, 1), 1.0);
        assert_eq!(pool_tokens_and_mask(&y, &m, 0.6).unwrap().pooled_mask.get(0, 1), 0.0);
        assert!(pool_tokens_and_mask(&y, &m, 0.0).is_err());
    }

    #[test]
    fn distance_examples() {
        let mut ft = line_tokens(&[0.0, 3.0, 4.0]);
        let (d, lambda) = masked_distance(&ft).unwrap();
        assert_eq!((d.get(0, 1), d.get(0, 2), d.get(1, 2)), (3.0, 4.0, 1.0));
        assert_eq!(lambda, 4.0 + 1e-6);
        ft.pooled_mask.set(0, 2, 0.0);
        ft.pooled_mask.set(2, 0, 0.0);
        let (d, _) = masked_distance(&ft).unwrap();
        assert_eq!(d.get(0, 2), 4.0 + 1e-6);
        assert_eq!(d.get(2, 0), 4.0 + 1e-6);

        let (d, lambda) = masked_distance(&line_tokens(&[2.0, 2.0, 2.0])).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
        assert_eq!(lambda, 1e-6);
    }

    #[test]
    fn density_examples() {
        let (d, _) = masked_distance(&line_tokens(&[0.0, 3.0, 4.0])).unwrap();
        let phi = knn_density(&d, 1).unwrap();
        let expect = [(-9.0f64).exp(), (-1.0f64).exp(), (-1.0f64).exp()];
        for (a, b) in phi.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let (d, _) = masked_distance(&line_tokens(&[1.0; 5])).unwrap();
        assert_eq!(knn_density(&d, 3).unwrap(), vec![1.0; 5]);
        assert_eq!(knn_density(&Mat::zeros(1, 1), 5).unwrap(), vec![1.0]);
        assert!(knn_density(&d, 5).is_err());
    }

    #[test]
    fn knn_matches_exhaustive_search() {
        let mut rng = RngStream::new(12);
        for _ in 0..200 {
            let f = 2 + rng.below(7);
            let z: Vec<f64> = (0..f).map(|_| rng.below(4) as f64).collect();
            let (d, _) = masked_distance(&line_tokens(&z)).unwrap();
            let k = 1 + rng.below(f - 1);
            assert_eq!(knn_density(&d, k).unwrap(), oracle::knn_density(&d, k));
        }
    }

    #[test]
    fn response_examples() {
        let phi = [0.2, 0.4, 0.8];
        let r = response_density(&phi, &Mat::filled(3, 3, 1.0)).unwrap();
        for (a, b) in r.iter().zip(phi) {
            assert!((a - b / 3.0).abs() < 1e-15);
        }
        let m = Mat::from_rows(&[[1.0, 1.0], [0.0, 1.0]]).unwrap();
        let r = response_density(&[1.0, 1.0], &m).unwrap();
        assert!((r[0] - 0.7311).abs() < 1e-4 && (r[1] - 0.2689).abs() < 1e-4);
        let e = (2.0f64).exp() + 1.0f64.exp();
        assert!((r[0] - 2.0f64.exp() / e).abs() < 1e-15);
    }

    #[test]
    fn separation_examples() {
        assert_eq!(separation_distance(&Mat::zeros(1, 1), &[0.5]).unwrap(), vec![0.0]);
        let (d, _) = masked_distance(&line_tokens(&[0.0, 3.0, 4.0])).unwrap();
        assert_eq!(separation_distance(&d, &[0.9, 0.5, 0.1]).unwrap(), vec![4.0, 3.0, 1.0]);
        let (d, _) = masked_distance(&line_tokens(&[5.0, 1.0, 2.0, 0.0])).unwrap();
        let w = separation_distance(&d, &[0.3; 4]).unwrap();
        assert_eq!(w, vec![5.0, 4.0, 1.0, 1.0]);
    }

    #[test]
    fn selection_examples() {
        let mut rng = RngStream::new(4);
        let y = Ten3::from_fn(2, 6, 3, |_, _, _| rng.normal());
        let m = random_mask(&mut rng, 2, 6, 0.5);
        let all = MgptpParams { tau: 0.5, k: 2, retained: 6 };
        let (p, sel, _) = mgptp(&y, &m, &all).unwrap();
        assert_eq!(sel.indices(), &[0, 1, 2, 3, 4, 5]);
        assert_eq!(p, y);

        let (p, sel, c) = mgptp(&y, &m, &MgptpParams { retained: 1, ..all }).unwrap();
        let s = c.scores();
        let best = (0..6).fold(0, |b, i| if s[i] > s[b] { i } else { b });
        assert_eq!(sel.indices(), &[best]);
        assert_eq!(p.slice1(0), y.slice1(best));
        assert!(mgptp(&y, &m, &MgptpParams { retained: 7, ..all }).is_err());
    }

    #[test]
    fn oracle_equivalence_500_trials() {
        let mut rng = RngStream::new(500);
        for _ in 0..500 {
            let f = 2 + rng.below(11);
            let j = 1 + rng.below(3);
            let d = 1 + rng.below(4);
            let y = Ten3::from_fn(j, f, d, |_, _, _| rng.normal());
            let density = rng.uniform(0.1, 0.9);
            let m = random_mask(&mut rng, j, f, density);
            let params = MgptpParams { tau: 0.5, k: 1 + rng.below(f - 1), retained: 1 + rng.below(f) };
            let (_, sel, _) = mgptp(&y, &m, &params).unwrap();
            let expect = oracle::mgptp_indices(&y, m.as_ten3(), params.tau, params.k, params.retained);
            assert_eq!(sel.indices(), expect.as_slice());
        }
    }

    proptest! {
        #[test]
        fn cluster_invariants(f in 2usize..14, seed in any::<u64>(), k in 1usize..6) {
            let mut rng = RngStream::new(seed);
            let y = Ten3::from_fn(2, f, 3, |_, _, _| rng.normal());
            let m = random_mask(&mut rng, 2, f, 0.5);
            let ft = pool_tokens_and_mask(&y, &m, 0.5).unwrap();
            let c = ClusterState::compute(&ft, k).unwrap();
            prop_assert!(c.distances.is_symmetric());
            let mut max_valid = 0.0f64;
            for p in 0..f {
                prop_assert_eq!(c.distances.get(p, p), 0.0);
                prop_assert_eq!(ft.pooled_mask.get(p, p), 1.0);
                for q in 0..f {
                    if ft.pooled_mask.get(p, q) == 1.0 {
                        max_valid = max_valid.max(c.distances.get(p, q));
                    }
                }
            }
            prop_assert!(c.lambda > max_valid);
            prop_assert!(c.density.iter().all(|&v| v > 0.0 && v <= 1.0));
            prop_assert!(c.response.iter().all(|&v| v >= 0.0));
            prop_assert!(c.separation.iter().all(|&v| v >= 0.0));
            let scaled: Vec<f64> = c.density.iter().map(|v| v * 3.5).collect();
            let r2 = response_density(&scaled, &ft.pooled_mask).unwrap();
            let arg = |v: &[f64]| (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b });
            prop_assert_eq!(arg(&r2), arg(&c.response));
        }

        #[test]
        fn pruning_slices_bitwise(f in 2usize..20, keep in 1usize..20, seed in any::<u64>()) {
            let keep = keep.min(f);
            let mut rng = RngStream::new(seed);
            let y = Ten3::from_fn(3, f, 2, |_, _, _| rng.normal());
            let m = random_mask(&mut rng, 3, f, 0.3);
            let (p, sel, _) = mgptp(&y, &m, &MgptpParams { tau: 0.5, k: 5, retained: keep }).unwrap();
            prop_assert_eq!(sel.len(), keep);
            prop_assert!(sel.indices().windows(2).all(|w| w[0] < w[1]));
            for (r, &i) in sel.indices().iter().enumerate() {
                prop_assert_eq!(p.slice1(r), y.slice1(i));
            }
        }
    }
}
