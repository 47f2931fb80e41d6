//! The pruned pose-lifting denoiser.
//!
//! Stage order of one forward pass:
//!
//! 1. pose embedding of `[y_t ⊕ x]`, spatial GCN, spatial embeddings
//! 2. first dual block: spatial attention, temporal mask construction and
//!    refinement (plus temporal embeddings), sparse temporal attention
//! 3. timestep embedding, added to every token
//! 4. `n₁` dual blocks with sparse temporal attention
//! 5. frame pruning down to `f` frames
//! 6. `n − 1 − n₁` dual blocks with dense temporal attention on `f` frames
//! 7. cross attention back to `F` frames, prediction head

use std::collections::BTreeMap;

use crate::attention::{attention, to_additive_mask, AttnWeights, EncoderLayer, LayerNormParams};
use crate::error::{HtpError, Result, StageExt};
use crate::htp1::Tensor;
use crate::mgptp::{mgptp, MgptpParams, SelectionIndex};
use crate::rng::RngStream;
use crate::tcep::{build_mask, refine_joint, tcep_refine, TcepParams, TemporalAdjacency, TemporalMask};
use crate::tensor::{fmt_shape, gelu, gemm, Mat, MatViewMut, Ten3};

/// Parent of each joint in the 17-joint Human3.6M skeleton (`-1` for the root).
pub const H36M_PARENTS: [i32; 17] = [-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15];

/// Skeleton adjacency with self-loops: the Human3.6M tree for 17 joints, a chain otherwise.
pub fn default_skeleton(joints: usize) -> Mat {
    if joints == H36M_PARENTS.len() {
        let edges: Vec<(usize, usize)> = H36M_PARENTS
            .iter()
            .enumerate()
            .filter(|(_, &p)| p >= 0)
            .map(|(c, &p)| (c, p as usize))
            .collect();
        skeleton_from_edges(joints, &edges).expect("edges are in range")
    } else {
        Mat::from_fn(joints, joints, |a, b| if a.abs_diff(b) <= 1 { 1.0 } else { 0.0 })
    }
}

pub fn skeleton_from_edges(joints: usize, edges: &[(usize, usize)]) -> Result<Mat> {
    let mut a = Mat::identity(joints);
    for &(u, v) in edges {
        if u >= joints || v >= joints {
            return Err(HtpError::invalid(format!("skeleton edge ({u}, {v}) outside {joints} joints")));
        }
        a.set(u, v, 1.0);
        a.set(v, u, 1.0);
    }
    Ok(a)
}

/// `D^{-1/2} A D^{-1/2}` for a symmetric adjacency with self-loops.
pub fn normalize_adjacency(a: &Mat) -> Result<Mat> {
    if !a.is_square() || !a.is_symmetric() {
        return Err(HtpError::invalid("skeleton adjacency must be square and symmetric"));
    }
    let n = a.rows();
    let deg: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum()).collect();
    if let Some(i) = (0..n).find(|&i| a.get(i, i) == 0.0 || deg[i] <= 0.0) {
        return Err(HtpError::invalid(format!("skeleton adjacency lacks a self-loop at joint {i}")));
    }
    Ok(Mat::from_fn(n, n, |i, j| a.get(i, j) / (deg[i] * deg[j]).sqrt()))
}

/// Base temporal graph fused with the learnable global topology.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemporalGraph {
    /// Self-loops and ±1 frame neighbours.
    #[default]
    Chain,
    /// Every frame connected to every frame.
    Complete,
}

impl TemporalGraph {
    pub fn adjacency(self, frames: usize) -> Mat {
        match self {
            TemporalGraph::Chain => crate::tcep::chain_adjacency(frames),
            TemporalGraph::Complete => Mat::filled(frames, frames, 1.0),
        }
    }
}

/// Architecture and pruning hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub joints: usize,
    pub frames: usize,
    pub dim: usize,
    /// Frames kept by the pruner (`f`).
    pub retained: usize,
    /// Correlated partners per frame in the temporal mask (`η`).
    pub eta: usize,
    /// Dual blocks in total (`n`).
    pub blocks: usize,
    /// Sparse dual blocks between the timestep embedding and the pruner (`n₁`).
    pub sparse_blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Pooled-mask threshold.
    pub tau: f64,
    /// Neighbourhood size of the density estimate.
    pub knn: usize,
    /// Rebuild the temporal mask from the current tokens before every sparse block.
    pub recompute_mask_per_block: bool,
    pub temporal_graph: TemporalGraph,
    pub skeleton: Mat,
}

impl DenoiserConfig {
    /// Full-size defaults for `joints × frames`.
    pub fn full_scale(joints: usize, frames: usize) -> Self {
        DenoiserConfig {
            joints,
            frames,
            dim: 512,
            retained: 54.min(frames),
            eta: 162.min(frames.saturating_sub(1)).max(1),
            blocks: 8,
            sparse_blocks: 3,
            heads: 8,
            mlp_ratio: 2,
            tau: 0.5,
            knn: 5,
            recompute_mask_per_block: false,
            temporal_graph: TemporalGraph::Chain,
            skeleton: default_skeleton(joints),
        }
    }

    /// Number of dense dual blocks after pruning.
    pub fn pruned_blocks(&self) -> usize {
        self.blocks - 1 - self.sparse_blocks
    }

    /// The unpruned counterpart: every frame kept, every pair attended.
    pub fn dense_counterpart(&self) -> Self {
        DenoiserConfig {
            retained: self.frames,
            eta: self.frames.saturating_sub(1).max(1),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field: &'static str, reason: String| Err(HtpError::Config { field, reason });
        if self.joints == 0 {
            return err("joints", "must be at least 1".into());
        }
        if self.frames == 0 {
            return err("frames", "must be at least 1".into());
        }
        if self.dim == 0 {
            return err("dim", "must be at least 1".into());
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return err("heads", format!("{} heads do not divide width {}", self.heads, self.dim));
        }
        if self.retained == 0 || self.retained > self.frames {
            return err("retained", format!("f = {} must lie in [1, F = {}]", self.retained, self.frames));
        }
        if self.eta == 0 {
            return err("eta", "η must be at least 1".into());
        }
        if self.blocks == 0 {
            return err("blocks", "n must be at least 1".into());
        }
        if self.sparse_blocks > self.blocks - 1 {
            return err(
                "sparse_blocks",
                format!("n₁ = {} exceeds n − 1 = {} (the first dual block is always sparse)", self.sparse_blocks, self.blocks - 1),
            );
        }
        if self.mlp_ratio == 0 {
            return err("mlp_ratio", "must be at least 1".into());
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return err("tau", format!("τ = {} outside (0, 1]", self.tau));
        }
        if self.knn == 0 {
            return err("knn", "k must be at least 1".into());
        }
        if self.skeleton.shape() != (self.joints, self.joints) {
            return err("skeleton", format!("expected {0}x{0}, got {1}", self.joints, fmt_shape(self.skeleton.shape())));
        }
        normalize_adjacency(&self.skeleton).map_err(|e| HtpError::Config {
            field: "skeleton",
            reason: e.to_string(),
        })?;
        Ok(())
    }
}

/// Cross attention from the full stream onto the condensed stream.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttention {
    pub query_norm: LayerNormParams,
    pub kv_norm: LayerNormParams,
    pub attn: AttnWeights,
}

/// Every learnable tensor of the denoiser.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub embed_w: Mat,
    pub embed_b: Vec<f64>,
    pub gcn_w: Mat,
    pub spatial_pos: Mat,
    pub temporal_pos: Mat,
    pub first_spatial: EncoderLayer,
    pub tcep_w: Mat,
    pub tcep_global: Mat,
    pub first_temporal: EncoderLayer,
    pub time_w1: Mat,
    pub time_b1: Vec<f64>,
    pub time_w2: Mat,
    pub time_b2: Vec<f64>,
    /// `(spatial, temporal)` layers of the `n₁` sparse blocks.
    pub sparse: Vec<(EncoderLayer, EncoderLayer)>,
    /// `(spatial, temporal)` layers of the post-pruning blocks.
    pub pruned: Vec<(EncoderLayer, EncoderLayer)>,
    pub cross: CrossAttention,
    pub head_norm: LayerNormParams,
    pub head_w: Mat,
    pub head_b: Vec<f64>,
}

type Visit<'a> = dyn FnMut(&str, &[usize], &mut [f64]) -> Result<()> + 'a;

impl DenoiserParams {
    /// Seeded initialization, uniform in `±1/√fan_in`.
    pub fn init(cfg: &DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngStream::new(seed);
        let (j, f, d) = (cfg.joints, cfg.frames, cfg.dim);
        let bd = 1.0 / (d as f64).sqrt();
        let b5 = 1.0 / 5f64.sqrt();
        let layer = |rng: &mut RngStream| EncoderLayer::random(rng, d, cfg.heads, cfg.mlp_ratio);
        let embed_w = rng.uniform_mat(5, d, b5);
        let embed_b = (0..d).map(|_| rng.uniform(-b5, b5)).collect();
        let gcn_w = rng.uniform_mat(d, d, bd);
        let spatial_pos = rng.uniform_mat(j, d, bd);
        let temporal_pos = rng.uniform_mat(f, d, bd);
        let first_spatial = layer(&mut rng)?;
        let tcep_w = rng.uniform_mat(d, d, bd);
        let tcep_global = rng.uniform_mat(f, f, 1.0 / (f as f64).sqrt());
        let first_temporal = layer(&mut rng)?;
        let time_w1 = rng.uniform_mat(d, d, bd);
        let time_b1 = (0..d).map(|_| rng.uniform(-bd, bd)).collect();
        let time_w2 = rng.uniform_mat(d, d, bd);
        let time_b2 = (0..d).map(|_| rng.uniform(-bd, bd)).collect();
        let pair = |rng: &mut RngStream| -> Result<(EncoderLayer, EncoderLayer)> { Ok((layer(rng)?, layer(rng)?)) };
        let sparse = (0..cfg.sparse_blocks).map(|_| pair(&mut rng)).collect::<Result<_>>()?;
        let pruned = (0..cfg.pruned_blocks()).map(|_| pair(&mut rng)).collect::<Result<_>>()?;
        let cross = CrossAttention {
            query_norm: LayerNormParams::identity(d),
            kv_norm: LayerNormParams::identity(d),
            attn: AttnWeights::random(&mut rng, d, cfg.heads)?,
        };
        Ok(DenoiserParams {
            embed_w,
            embed_b,
            gcn_w,
            spatial_pos,
            temporal_pos,
            first_spatial,
            tcep_w,
            tcep_global,
            first_temporal,
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            sparse,
            pruned,
            cross,
            head_norm: LayerNormParams::identity(d),
            head_w: rng.uniform_mat(d, 3, bd),
            head_b: (0..3).map(|_| rng.uniform(-bd, bd)).collect(),
        })
    }

    /// Calls `f(name, dims, values)` for every tensor in a fixed order.
    pub fn visit(&mut self, f: &mut Visit<'_>) -> Result<()> {
        fn mat(f: &mut Visit<'_>, name: &str, m: &mut Mat) -> Result<()> {
            let dims = [m.rows(), m.cols()];
            f(name, &dims, m.data_mut())
        }
        fn vec(f: &mut Visit<'_>, name: &str, v: &mut [f64]) -> Result<()> {
            f(name, &[v.len()], v)
        }
        fn norm(f: &mut Visit<'_>, name: &str, n: &mut LayerNormParams) -> Result<()> {
            vec(f, &format!("{name}.gamma"), &mut n.gamma)?;
            vec(f, &format!("{name}.beta"), &mut n.beta)
        }
        fn attn(f: &mut Visit<'_>, name: &str, a: &mut AttnWeights) -> Result<()> {
            mat(f, &format!("{name}.w_q"), &mut a.w_q)?;
            mat(f, &format!("{name}.w_k"), &mut a.w_k)?;
            mat(f, &format!("{name}.w_v"), &mut a.w_v)?;
            mat(f, &format!("{name}.w_o"), &mut a.w_o)
        }
        fn layer(f: &mut Visit<'_>, name: &str, l: &mut EncoderLayer) -> Result<()> {
            norm(f, &format!("{name}.attn_norm"), &mut l.attn_norm)?;
            attn(f, &format!("{name}.attn"), &mut l.attn)?;
            norm(f, &format!("{name}.mlp_norm"), &mut l.mlp_norm)?;
            mat(f, &format!("{name}.mlp.w1"), &mut l.mlp.w1)?;
            vec(f, &format!("{name}.mlp.b1"), &mut l.mlp.b1)?;
            mat(f, &format!("{name}.mlp.w2"), &mut l.mlp.w2)?;
            vec(f, &format!("{name}.mlp.b2"), &mut l.mlp.b2)
        }
        mat(f, "embed.w", &mut self.embed_w)?;
        vec(f, "embed.b", &mut self.embed_b)?;
        mat(f, "gcn.w", &mut self.gcn_w)?;
        mat(f, "pos.spatial", &mut self.spatial_pos)?;
        mat(f, "pos.temporal", &mut self.temporal_pos)?;
        layer(f, "first.spatial", &mut self.first_spatial)?;
        mat(f, "tcep.w", &mut self.tcep_w)?;
        mat(f, "tcep.global", &mut self.tcep_global)?;
        layer(f, "first.temporal", &mut self.first_temporal)?;
        mat(f, "time.w1", &mut self.time_w1)?;
        vec(f, "time.b1", &mut self.time_b1)?;
        mat(f, "time.w2", &mut self.time_w2)?;
        vec(f, "time.b2", &mut self.time_b2)?;
        for (i, (s, t)) in self.sparse.iter_mut().enumerate() {
            layer(f, &format!("sparse.{i}.spatial"), s)?;
            layer(f, &format!("sparse.{i}.temporal"), t)?;
        }
        for (i, (s, t)) in self.pruned.iter_mut().enumerate() {
            layer(f, &format!("pruned.{i}.spatial"), s)?;
            layer(f, &format!("pruned.{i}.temporal"), t)?;
        }
        norm(f, "cross.query_norm", &mut self.cross.query_norm)?;
        norm(f, "cross.kv_norm", &mut self.cross.kv_norm)?;
        attn(f, "cross.attn", &mut self.cross.attn)?;
        norm(f, "head.norm", &mut self.head_norm)?;
        mat(f, "head.w", &mut self.head_w)?;
        vec(f, "head.b", &mut self.head_b)
    }

    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        let mut copy = self.clone();
        copy.visit(&mut |name, dims, data| {
            out.insert(name.to_string(), Tensor { dims: dims.to_vec(), data: data.to_vec() });
            Ok(())
        })
        .expect("collecting never fails");
        out
    }

    /// Load from named tensors, checking every shape against `cfg`.
    pub fn from_tensors(cfg: &DenoiserConfig, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut params = DenoiserParams::init(cfg, 0)?;
        let mut seen = 0;
        params.visit(&mut |name, dims, data| {
            let t = tensors
                .get(name)
                .ok_or_else(|| HtpError::Format(format!("checkpoint is missing `{name}`")))?;
            if t.dims != dims {
                return Err(HtpError::shape("checkpoint", format!("{name} {dims:?}"), format!("{:?}", t.dims)));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(HtpError::Format(format!("checkpoint tensor `{name}` has non-finite values")));
            }
            data.copy_from_slice(&t.data);
            seen += 1;
            Ok(())
        })?;
        if seen != tensors.len() {
            return Err(HtpError::Format(format!("checkpoint has {} unexpected tensors", tensors.len() - seen)));
        }
        Ok(params)
    }

    pub fn check(&self, cfg: &DenoiserConfig) -> Result<()> {
        DenoiserParams::from_tensors(cfg, &self.to_tensors()).map(|_| ())
    }
}

/// `[y_t ⊕ x] · W + b`, giving `J × F × D`.
pub fn pose_embed(y_t: &Ten3, x: &Ten3, w: &Mat, b: &[f64]) -> Result<Ten3> {
    let (j, f, c) = y_t.shape();
    if c != 3 || x.shape() != (j, f, 2) {
        return Err(HtpError::shape("pose_embed", format!("{j}x{f}x3 and {j}x{f}x2"), format!("{:?} and {:?}", y_t.shape(), x.shape())));
    }
    if w.rows() != 5 || b.len() != w.cols() {
        return Err(HtpError::shape("pose_embed", "5 x D weights", fmt_shape(w.shape())));
    }
    let mut input = Mat::zeros(j * f, 5);
    for (r, (a, uv)) in y_t.data().chunks_exact(3).zip(x.data().chunks_exact(2)).enumerate() {
        input.row_mut(r)[..3].copy_from_slice(a);
        input.row_mut(r)[3..].copy_from_slice(uv);
    }
    let mut out = input.matmul(w)?;
    out.add_row_broadcast(b)?;
    Ten3::new(j, f, w.cols(), out.into_data())
}

/// Per frame `Y + GELU(Â Y W)` with the normalized skeleton `Â`.
pub fn spatial_gcn(y: &Ten3, adjacency: &Mat, w: &Mat) -> Result<Ten3> {
    let (j, f, d) = y.shape();
    if adjacency.shape() != (j, j) || w.shape() != (d, d) {
        return Err(HtpError::shape("spatial_gcn", format!("{j}x{j} / {d}x{d}"), format!("{} / {}", fmt_shape(adjacency.shape()), fmt_shape(w.shape()))));
    }
    let norm = normalize_adjacency(adjacency)?;
    let yw = Mat::new(j * f, d, y.data().to_vec())?.matmul(w)?;
    // Joint-major layout: mixing joints is one product with a J × (F·D) matrix.
    let yw = Mat::new(j, f * d, yw.into_data())?;
    let mixed = norm.matmul(&yw)?;
    let mut out = y.clone();
    for (o, m) in out.data_mut().iter_mut().zip(mixed.data()) {
        *o += gelu(*m);
    }
    Ok(out)
}

/// Sinusoidal encoding of `t`: sines in the first half, cosines in the second.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    out
}

/// Sinusoid, then affine → GELU → affine.
pub fn timestep_embedding(t: usize, params: &DenoiserParams) -> Result<Vec<f64>> {
    let d = params.time_w1.rows();
    let s = Mat::row_vector(sinusoidal_embedding(t as f64, d));
    let mut h = s.matmul(&params.time_w1)?;
    h.add_row_broadcast(&params.time_b1)?;
    let h = h.map(gelu);
    let mut o = h.matmul(&params.time_w2)?;
    o.add_row_broadcast(&params.time_b2)?;
    Ok(o.into_data())
}

/// Per joint: `full + Attn(LN(full), LN(condensed))`, length `F`.
pub fn cross_mhsa(full: &Ten3, condensed: &Ten3, cross: &CrossAttention) -> Result<Ten3> {
    let (j, _, d) = full.shape();
    let (jc, fc, dc) = condensed.shape();
    if fc == 0 {
        return Err(HtpError::EmptySupport);
    }
    if jc != j || dc != d {
        return Err(HtpError::shape("cross_mhsa", format!("{:?}", full.shape()), format!("{:?}", condensed.shape())));
    }
    let mut out = full.clone();
    for a in 0..j {
        let q = cross.query_norm.apply(&full.slice0(a))?;
        let kv = cross.kv_norm.apply(&condensed.slice0(a))?;
        let upd = attention(&q, &kv, &cross.attn, None, None)?;
        for (o, u) in out.block_mut(a).iter_mut().zip(upd.data()) {
            *o += u;
        }
    }
    Ok(out)
}

fn add_spatial(y: &mut Ten3, pos: &Mat) {
    let (j, f, d) = y.shape();
    for a in 0..j {
        let e = pos.row(a);
        for row in y.block_mut(a).chunks_exact_mut(d).take(f) {
            row.iter_mut().zip(e).for_each(|(v, p)| *v += p);
        }
    }
}

fn add_temporal(y: &mut Ten3, pos: &Mat) {
    let d = y.shape().2;
    for a in 0..y.shape().0 {
        for (row, e) in y.block_mut(a).chunks_exact_mut(d).zip(pos.data().chunks_exact(d)) {
            row.iter_mut().zip(e).for_each(|(v, p)| *v += p);
        }
    }
}

fn add_broadcast(y: &mut Ten3, v: &[f64]) {
    for row in y.data_mut().chunks_exact_mut(v.len()) {
        row.iter_mut().zip(v).for_each(|(a, b)| *a += b);
    }
}

fn head(y: &Ten3, params: &DenoiserParams) -> Result<Ten3> {
    let (j, f, d) = y.shape();
    let tokens = params.head_norm.apply(&Mat::new(j * f, d, y.data().to_vec())?)?;
    let mut out = Mat::zeros(j * f, 3);
    gemm(tokens.view(), params.head_w.view(), 0.0, MatViewMut::full(&mut out))?;
    out.add_row_broadcast(&params.head_b)?;
    Ten3::new(j, f, 3, out.into_data())
}

fn check_inputs(y_t: &Ten3, x: &Ten3, cfg: &DenoiserConfig) -> Result<()> {
    let want = (cfg.joints, cfg.frames);
    if (y_t.shape().0, y_t.shape().1) != want || (x.shape().0, x.shape().1) != want {
        return Err(HtpError::shape(
            "denoise_forward",
            format!("{}x{} frames", cfg.joints, cfg.frames),
            format!("{:?} / {:?}", y_t.shape(), x.shape()),
        ));
    }
    Ok(())
}

/// Result of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub y0_hat: Ten3,
    /// The temporal mask built in the first dual block.
    pub mask: TemporalMask,
    pub retained: SelectionIndex,
    /// Summed mask support over every sparse temporal block.
    pub sparse_support: u64,
}

/// The shared embedding front end: pose embed, GCN, spatial embeddings, first spatial layer.
fn front(y_t: &Ten3, x: &Ten3, cfg: &DenoiserConfig, params: &DenoiserParams) -> Result<Ten3> {
    let y = pose_embed(y_t, x, &params.embed_w, &params.embed_b).stage("pose_embed")?;
    let mut y = spatial_gcn(&y, &cfg.skeleton, &params.gcn_w).stage("spatial_gcn")?;
    add_spatial(&mut y, &params.spatial_pos);
    params.first_spatial.spatial(&y).stage("spatial_mhsa")
}

pub fn denoise_forward(y_t: &Ten3, x: &Ten3, t: usize, cfg: &DenoiserConfig, params: &DenoiserParams) -> Result<ForwardOutput> {
    check_inputs(y_t, x, cfg)?;
    let y = front(y_t, x, cfg, params)?;
    let adj = TemporalAdjacency::new(cfg.temporal_graph.adjacency(cfg.frames), params.tcep_global.clone()).stage("tcep")?;
    let tcep = TcepParams { weight: params.tcep_w.clone(), eta: cfg.eta };
    let (mut y, mask) = tcep_refine(&y, &adj, &tcep).stage("tcep")?;
    add_temporal(&mut y, &params.temporal_pos);
    let additive = to_additive_mask(&mask).stage("sft_mhsa")?;
    let mut support = mask.support_total();
    let mut y = params.first_temporal.temporal(&y, Some(&additive)).stage("sft_mhsa")?;

    add_broadcast(&mut y, &timestep_embedding(t, params).stage("timestep_embedding")?);
    let mut current = (mask.clone(), additive);
    for (spatial, temporal) in &params.sparse {
        y = spatial.spatial(&y).stage("spatial_mhsa")?;
        if cfg.recompute_mask_per_block {
            let m = build_mask(&y, cfg.eta).stage("tcep")?;
            let a = to_additive_mask(&m).stage("sft_mhsa")?;
            current = (m, a);
        }
        support += current.0.support_total();
        y = temporal.temporal(&y, Some(&current.1)).stage("sft_mhsa")?;
    }

    let prune = MgptpParams { tau: cfg.tau, k: cfg.knn, retained: cfg.retained };
    let (mut z, retained, _) = mgptp(&y, &current.0, &prune).stage("mgptp")?;
    for (spatial, temporal) in &params.pruned {
        z = spatial.spatial(&z).stage("spatial_mhsa")?;
        z = temporal.temporal(&z, None).stage("temporal_mhsa")?;
    }
    let restored = cross_mhsa(&y, &z, &params.cross).stage("cross_mhsa")?;
    Ok(ForwardOutput {
        y0_hat: head(&restored, params).stage("head")?,
        mask,
        retained,
        sparse_support: support,
    })
}

/// The same network with every mask and the pruner removed.
pub fn dense_reference_forward(y_t: &Ten3, x: &Ten3, t: usize, cfg: &DenoiserConfig, params: &DenoiserParams) -> Result<Ten3> {
    check_inputs(y_t, x, cfg)?;
    let y = front(y_t, x, cfg, params)?;
    let adj = TemporalAdjacency::new(cfg.temporal_graph.adjacency(cfg.frames), params.tcep_global.clone())?;
    let (j, f, _) = y.shape();
    let all = Mat::filled(f, f, 1.0);
    let mut refined = Ten3::zeros(j, f, cfg.dim);
    for a in 0..j {
        let tokens = y.slice0(a);
        let s = crate::tcep::frame_similarity(&tokens)?;
        refined.set_slice0(a, &refine_joint(&tokens, &s, &all, adj.fused(), &params.tcep_w)?)?;
    }
    add_temporal(&mut refined, &params.temporal_pos);
    let mut y = params.first_temporal.temporal(&refined, None)?;
    add_broadcast(&mut y, &timestep_embedding(t, params)?);
    for (spatial, temporal) in &params.sparse {
        y = spatial.spatial(&y)?;
        y = temporal.temporal(&y, None)?;
    }
    let mut z = y.clone();
    for (spatial, temporal) in &params.pruned {
        z = spatial.spatial(&z)?;
        z = temporal.temporal(&z, None)?;
    }
    head(&cross_mhsa(&y, &z, &params.cross)?, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::spatial_attention;
    use crate::htp1::{read_checkpoint, write_checkpoint};

    fn small(joints: usize, frames: usize, dim: usize) -> DenoiserConfig {
        DenoiserConfig {
            dim,
            heads: 2,
            blocks: 4,
            sparse_blocks: 1,
            retained: (frames / 2).max(1),
            eta: (frames / 3).max(1),
            knn: 3,
            ..DenoiserConfig::full_scale(joints, frames)
        }
    }

    fn inputs(rng: &mut RngStream, j: usize, f: usize) -> (Ten3, Ten3) {
        (
            Ten3::from_fn(j, f, 3, |_, _, _| rng.normal()),
            Ten3::from_fn(j, f, 2, |_, _, _| rng.uniform(-1.0, 1.0)),
        )
    }

    #[test]
    fn skeleton_defaults() {
        let a = default_skeleton(17);
        assert!(a.is_symmetric());
        assert_eq!(a.data().iter().filter(|&&v| v == 1.0).count(), 17 + 2 * 16);
        assert!(normalize_adjacency(&default_skeleton(5)).is_ok());
        let mut bad = Mat::identity(3);
        bad.set(0, 1, 1.0);
        assert!(normalize_adjacency(&bad).is_err());
    }

    #[test]
    fn config_validation_names_fields() {
        let base = small(5, 9, 8);
        let field = |c: DenoiserConfig| match c.validate() {
            Err(HtpError::Config { field, .. }) => field,
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(field(DenoiserConfig { retained: 10, ..base.clone() }), "retained");
        assert_eq!(field(DenoiserConfig { sparse_blocks: 4, ..base.clone() }), "sparse_blocks");
        assert_eq!(field(DenoiserConfig { eta: 0, ..base.clone() }), "eta");
        assert_eq!(field(DenoiserConfig { heads: 3, ..base.clone() }), "heads");
        assert_eq!(field(DenoiserConfig { tau: 0.0, ..base.clone() }), "tau");
        assert!(base.validate().is_ok());
    }

    #[test]
    fn pose_embed_examples() {
        let mut rng = RngStream::new(1);
        let (y, x) = inputs(&mut rng, 3, 4);
        let b: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let out = pose_embed(&y, &x, &Mat::zeros(5, 6), &b).unwrap();
        assert_eq!(out.shape(), (3, 4, 6));
        assert!(out.data().chunks_exact(6).all(|r| r == b.as_slice()));

        let w = rng.uniform_mat(5, 6, 1.0);
        let out = pose_embed(&y, &x, &w, &b).unwrap();
        let perm = [2, 0, 3, 1];
        let py = Ten3::from_fn(3, 4, 3, |a, p, c| y.get(a, perm[p], c));
        let px = Ten3::from_fn(3, 4, 2, |a, p, c| x.get(a, perm[p], c));
        let pout = pose_embed(&py, &px, &w, &b).unwrap();
        for p in 0..4 {
            assert_eq!(pout.slice1(p), out.slice1(perm[p]));
        }
        assert!(pose_embed(&y, &Ten3::zeros(3, 5, 2), &w, &b).is_err());
    }

    #[test]
    fn gcn_examples() {
        let mut rng = RngStream::new(2);
        let y = Ten3::from_fn(3, 4, 5, |_, _, _| rng.normal());
        let chain = default_skeleton(3);
        assert_eq!(spatial_gcn(&y, &chain, &Mat::zeros(5, 5)).unwrap(), y);

        let w = rng.uniform_mat(5, 5, 0.5);
        let out = spatial_gcn(&y, &Mat::identity(3), &w).unwrap();
        for a in 0..3 {
            let own = y.slice0(a).matmul(&w).unwrap();
            for p in 0..4 {
                for c in 0..5 {
                    assert!((out.get(a, p, c) - (y.get(a, p, c) + gelu(own.get(p, c)))).abs() < 1e-12);
                }
            }
        }

        // Hand-normalized 3-joint chain: degrees 2, 3, 2.
        let n = [
            [0.5, 1.0 / 6f64.sqrt(), 0.0],
            [1.0 / 6f64.sqrt(), 1.0 / 3.0, 1.0 / 6f64.sqrt()],
            [0.0, 1.0 / 6f64.sqrt(), 0.5],
        ];
        let out = spatial_gcn(&y, &chain, &w).unwrap();
        for a in 0..3 {
            for p in 0..4 {
                for c in 0..5 {
                    let mut acc = 0.0;
                    for b in 0..3 {
                        for k in 0..5 {
                            acc += n[a][b] * y.get(b, p, k) * w.get(k, c);
                        }
                    }
                    assert!((out.get(a, p, c) - (y.get(a, p, c) + gelu(acc))).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_joint_spatial_attention_is_value_path() {
        let mut rng = RngStream::new(3);
        let y = Ten3::from_fn(1, 3, 4, |_, _, _| rng.normal());
        let w = AttnWeights::random(&mut rng, 4, 2).unwrap();
        let norm = LayerNormParams::identity(4);
        let out = spatial_attention(&y, &w, &norm).unwrap();
        let n = norm.apply(&y.slice0(0)).unwrap();
        let expect = y.slice0(0).add(&n.matmul(&w.w_v).unwrap().matmul(&w.w_o).unwrap()).unwrap();
        assert!(out.slice0(0).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn timestep_embedding_examples() {
        let s = sinusoidal_embedding(0.0, 8);
        assert_eq!(s, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let embs: Vec<Vec<f64>> = (0..=1000).map(|t| sinusoidal_embedding(t as f64, 16)).collect();
        for a in 0..embs.len() {
            for b in a + 1..embs.len() {
                assert!(embs[a].iter().zip(&embs[b]).any(|(u, v)| (u - v).abs() > 1e-9), "{a} vs {b}");
            }
        }
        let cfg = small(2, 3, 8);
        let mut p = DenoiserParams::init(&cfg, 1).unwrap();
        p.time_w2 = Mat::zeros(8, 8);
        assert_eq!(timestep_embedding(37, &p).unwrap(), p.time_b2);
    }

    #[test]
    fn cross_attention_examples() {
        let mut rng = RngStream::new(4);
        let full = Ten3::from_fn(2, 5, 4, |_, _, _| rng.normal());
        let cond = Ten3::from_fn(2, 1, 4, |_, _, _| rng.normal());
        let cross = CrossAttention {
            query_norm: LayerNormParams::identity(4),
            kv_norm: LayerNormParams::identity(4),
            attn: AttnWeights::random(&mut rng, 4, 2).unwrap(),
        };
        let out = cross_mhsa(&full, &cond, &cross).unwrap();
        assert_eq!(out.shape(), (2, 5, 4));
        for a in 0..2 {
            let d0: Vec<f64> = (0..4).map(|c| out.get(a, 0, c) - full.get(a, 0, c)).collect();
            for p in 1..5 {
                for c in 0..4 {
                    assert!((out.get(a, p, c) - full.get(a, p, c) - d0[c]).abs() < 1e-12);
                }
            }
        }
        assert!(cross_mhsa(&full, &Ten3::zeros(2, 0, 4), &cross).is_err());
        let same = cross_mhsa(&full, &full, &cross).unwrap();
        let mut expect = full.clone();
        for a in 0..2 {
            let n = cross.query_norm.apply(&full.slice0(a)).unwrap();
            let upd = attention(&n, &n, &cross.attn, None, None).unwrap();
            expect.set_slice0(a, &full.slice0(a).add(&upd).unwrap()).unwrap();
        }
        assert!(same.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn forward_shape_and_purity() {
        for (j, f) in [(5, 9), (17, 27)] {
            let cfg = small(j, f, 16);
            let params = DenoiserParams::init(&cfg, 7).unwrap();
            let mut rng = RngStream::new(8);
            let (y, x) = inputs(&mut rng, j, f);
            let a = denoise_forward(&y, &x, 500, &cfg, &params).unwrap();
            let b = denoise_forward(&y, &x, 500, &cfg, &params).unwrap();
            assert_eq!(a.y0_hat.shape(), (j, f, 3));
            assert_eq!(a.retained.len(), cfg.retained);
            assert!(a.y0_hat.data().iter().zip(b.y0_hat.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }

    #[test]
    fn finite_outputs_for_random_weights() {
        let cfg = small(5, 9, 8);
        let mut rng = RngStream::new(9);
        for trial in 0..100 {
            let params = DenoiserParams::init(&cfg, trial).unwrap();
            let (y, x) = inputs(&mut rng, 5, 9);
            let out = denoise_forward(&y, &x, rng.below(1001), &cfg, &params).unwrap();
            assert!(out.y0_hat.all_finite());
        }
    }

    #[test]
    fn degenerate_pruning_matches_dense_reference() {
        let cfg = small(5, 9, 16).dense_counterpart();
        let params = DenoiserParams::init(&cfg, 11).unwrap();
        let mut rng = RngStream::new(12);
        let (y, x) = inputs(&mut rng, 5, 9);
        let htp = denoise_forward(&y, &x, 250, &cfg, &params).unwrap();
        let dense = dense_reference_forward(&y, &x, 250, &cfg, &params).unwrap();
        assert!(htp.y0_hat.max_abs_diff(&dense) < 1e-10);
        let pruned = DenoiserConfig { retained: 4, ..cfg.clone() };
        let out = denoise_forward(&y, &x, 250, &pruned, &params).unwrap();
        assert!(out.y0_hat.max_abs_diff(&dense) > 1e-6);
    }

    #[test]
    fn frame_permutation_sanity() {
        let cfg = DenoiserConfig { temporal_graph: TemporalGraph::Complete, ..small(3, 8, 8) };
        let mut params = DenoiserParams::init(&cfg, 13).unwrap();
        params.temporal_pos = Mat::zeros(8, 8);
        params.tcep_global = Mat::zeros(8, 8);
        let mut rng = RngStream::new(14);
        let (y, x) = inputs(&mut rng, 3, 8);
        let perm = [5, 2, 7, 0, 3, 6, 1, 4];
        let py = Ten3::from_fn(3, 8, 3, |a, p, c| y.get(a, perm[p], c));
        let px = Ten3::from_fn(3, 8, 2, |a, p, c| x.get(a, perm[p], c));
        let out = denoise_forward(&y, &x, 100, &cfg, &params).unwrap();
        let pout = denoise_forward(&py, &px, 100, &cfg, &params).unwrap();
        for p in 0..8 {
            assert!(pout.y0_hat.slice1(p).max_abs_diff(&out.y0_hat.slice1(perm[p])) < 1e-9);
        }
    }

    #[test]
    fn mask_recomputation_changes_support_only_when_enabled() {
        let cfg = small(4, 12, 8);
        let params = DenoiserParams::init(&cfg, 15).unwrap();
        let mut rng = RngStream::new(16);
        let (y, x) = inputs(&mut rng, 4, 12);
        let a = denoise_forward(&y, &x, 10, &cfg, &params).unwrap();
        assert_eq!(a.sparse_support, 2 * a.mask.support_total());
        let re = DenoiserConfig { recompute_mask_per_block: true, ..cfg };
        let b = denoise_forward(&y, &x, 10, &re, &params).unwrap();
        assert_eq!(b.y0_hat.shape(), a.y0_hat.shape());
    }

    #[test]
    fn checkpoint_round_trip_validates_shapes() {
        let cfg = small(5, 9, 8);
        let params = DenoiserParams::init(&cfg, 17).unwrap();
        let blob = write_checkpoint(&params.to_tensors()).unwrap();
        let back = DenoiserParams::from_tensors(&cfg, &read_checkpoint(&blob).unwrap()).unwrap();
        assert_eq!(back, params);
        let wider = DenoiserConfig { dim: 16, ..cfg.clone() };
        assert!(DenoiserParams::from_tensors(&wider, &params.to_tensors()).is_err());
        let mut extra = params.to_tensors();
        extra.insert("stray".into(), Tensor::new(vec![1], vec![0.0]).unwrap());
        assert!(DenoiserParams::from_tensors(&cfg, &extra).is_err());
    }
}
