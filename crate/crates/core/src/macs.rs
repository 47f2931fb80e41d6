//! Analytic multiply-accumulate counts for the denoiser.
//!
//! One MAC is one multiply-accumulate. Biases, softmax, GELU and LayerNorm
//! cost nothing. The profile walks the same stage order as
//! [`denoise_forward`](crate::denoiser::denoise_forward).
//!
//! Published efficiency tables usually quote `2 × MAC` (one multiply plus one
//! add per MAC) in giga-units; [`MacsReport::published_g`] converts to that
//! convention.

use std::fmt::Write as _;

use serde::Serialize;

use crate::denoiser::DenoiserConfig;
use crate::error::Result;

pub fn macs_linear(tokens: u64, d_in: u64, d_out: u64) -> u64 {
    tokens * d_in * d_out
}

/// Attention over `batch_rows` independent sequences of length `seq`.
///
/// `support_total` is the number of attended (query, key) pairs summed over
/// all sequences; `None` means dense, `seq² · batch_rows`. Per-head
/// scores and context together cost `2 · support · D`.
pub fn macs_attention(seq: u64, batch_rows: u64, dim: u64, heads: u64, support_total: Option<u64>) -> u64 {
    debug_assert!(heads >= 1 && dim.is_multiple_of(heads));
    let tokens = seq * batch_rows;
    let support = support_total.unwrap_or(seq * seq * batch_rows);
    4 * macs_linear(tokens, dim, dim) + 2 * support * dim
}

/// Score plus context MACs of one attention layer.
pub fn macs_attention_core(support_total: u64, dim: u64) -> u64 {
    2 * support_total * dim
}

pub fn macs_ffn(tokens: u64, dim: u64, ratio: u64) -> u64 {
    2 * macs_linear(tokens, dim, dim * ratio)
}

/// How attended pairs of the sparse blocks are counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SparseSupport {
    /// `min(F, η + 1)` pairs per query row, the smallest support a mask can have.
    LowerBound,
    /// Measured support of every sparse block together.
    Measured(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageMacs {
    pub stage: String,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MacsReport {
    pub stages: Vec<StageMacs>,
    /// One forward pass.
    pub single_pass: u64,
    pub frames: u64,
    pub hypotheses: u64,
    pub iterations: u64,
    /// `single_pass / F`.
    pub train_per_frame: f64,
    /// `single_pass · H · K`.
    pub inference_total: u64,
}

impl MacsReport {
    pub fn stage(&self, name: &str) -> Option<u64> {
        self.stages.iter().find(|s| s.stage == name).map(|s| s.macs)
    }

    /// Giga-operations in the `2 × MAC` convention.
    pub fn published_g(macs: u64) -> f64 {
        2.0 * macs as f64 / 1e9
    }
}

/// Report of one configuration next to its unpruned counterpart.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub htp: MacsReport,
    pub dense: MacsReport,
    /// `htp.single_pass / dense.single_pass`.
    pub ratio_to_dense: f64,
    /// `1 − ratio_to_dense`.
    pub reduction_vs_dense: f64,
}

pub fn profile_model(cfg: &DenoiserConfig, hypotheses: u64, iterations: u64) -> Result<MacsReport> {
    profile_with_support(cfg, hypotheses, iterations, SparseSupport::LowerBound)
}

pub fn profile_with_support(
    cfg: &DenoiserConfig,
    hypotheses: u64,
    iterations: u64,
    support: SparseSupport,
) -> Result<MacsReport> {
    cfg.validate()?;
    let (j, f_all, d, f_kept) = (cfg.joints as u64, cfg.frames as u64, cfg.dim as u64, cfg.retained as u64);
    let (h, r) = (cfg.heads as u64, cfg.mlp_ratio as u64);
    let n = j * f_all;
    let sparse_layers = 1 + cfg.sparse_blocks as u64;
    let per_block = match support {
        SparseSupport::LowerBound => j * f_all * f_all.min(cfg.eta as u64 + 1),
        SparseSupport::Measured(total) => total / sparse_layers,
    };
    let spatial = |frames: u64| macs_attention(j, frames, d, h, None) + macs_ffn(j * frames, d, r);
    let temporal = |frames: u64, s: Option<u64>| macs_attention(frames, j, d, h, s) + macs_ffn(j * frames, d, r);

    let mut stages = Vec::new();
    let mut push = |name: &str, macs: u64| stages.push(StageMacs { stage: name.to_string(), macs });
    push("pose_embed", macs_linear(n, 5, d));
    push("spatial_gcn", macs_linear(n, d, d) + j * j * f_all * d);
    push("spatial_mhsa.first", spatial(f_all));
    // Dense similarity, masked aggregation over the support, shared projection.
    push("tcep", j * f_all * f_all * d + per_block * d + macs_linear(n, d, d));
    push("sft_mhsa.first", temporal(f_all, Some(per_block)));
    push("timestep_embedding", 2 * d * d);
    for i in 0..cfg.sparse_blocks {
        push(&format!("sparse.{i}.spatial"), spatial(f_all));
        push(&format!("sparse.{i}.sft_mhsa"), temporal(f_all, Some(per_block)));
    }
    for i in 0..cfg.pruned_blocks() {
        push(&format!("pruned.{i}.spatial"), spatial(f_kept));
        push(&format!("pruned.{i}.temporal"), temporal(f_kept, None));
    }
    push("cross_mhsa", 2 * macs_linear(n, d, d) + 2 * macs_linear(j * f_kept, d, d) + 2 * j * f_all * f_kept * d);
    push("head", macs_linear(n, d, 3));

    let single_pass = stages.iter().map(|s| s.macs).sum();
    Ok(MacsReport {
        stages,
        single_pass,
        frames: f_all,
        hypotheses,
        iterations,
        train_per_frame: single_pass as f64 / f_all as f64,
        inference_total: single_pass * hypotheses * iterations,
    })
}

pub fn compare_to_dense(cfg: &DenoiserConfig, hypotheses: u64, iterations: u64) -> Result<Comparison> {
    let htp = profile_model(cfg, hypotheses, iterations)?;
    let dense = profile_model(&cfg.dense_counterpart(), hypotheses, iterations)?;
    let ratio = htp.single_pass as f64 / dense.single_pass as f64;
    Ok(Comparison { htp, dense, ratio_to_dense: ratio, reduction_vs_dense: 1.0 - ratio })
}

/// Aligned plain-text table of a comparison.
pub fn render_table(cmp: &Comparison) -> String {
    let mut out = String::new();
    let width = cmp.htp.stages.iter().chain(&cmp.dense.stages).map(|s| s.stage.len()).max().unwrap_or(5).max(5);
    let _ = writeln!(out, "{:<width$}  {:>16}  {:>16}", "stage", "htp MACs", "dense MACs");
    let dense_of = |name: &str| cmp.dense.stage(name).map_or_else(|| "-".to_string(), |v| v.to_string());
    for s in &cmp.htp.stages {
        let _ = writeln!(out, "{:<width$}  {:>16}  {:>16}", s.stage, s.macs, dense_of(&s.stage));
    }
    let _ = writeln!(out, "{:<width$}  {:>16}  {:>16}", "single pass", cmp.htp.single_pass, cmp.dense.single_pass);
    let _ = writeln!(
        out,
        "{:<width$}  {:>16.3}  {:>16.3}",
        "per frame (G, 2xMAC)",
        MacsReport::published_g(cmp.htp.single_pass) / cmp.htp.frames as f64,
        MacsReport::published_g(cmp.dense.single_pass) / cmp.dense.frames as f64
    );
    let _ = writeln!(
        out,
        "{:<width$}  {:>16.1}  {:>16.1}",
        format!("x{}x{} (G, 2xMAC)", cmp.htp.hypotheses, cmp.htp.iterations),
        MacsReport::published_g(cmp.htp.inference_total),
        MacsReport::published_g(cmp.dense.inference_total)
    );
    let _ = writeln!(out, "reduction vs dense: {:.1}%", 100.0 * cmp.reduction_vs_dense);
    out.push_str("biases, softmax, GELU and LayerNorm are not counted\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Counts multiply-accumulates of a literal dense attention evaluation.
    fn enumerate_attention(seq: usize, rows: usize, dim: usize, heads: usize) -> u64 {
        let dk = dim / heads;
        let mut count = 0u64;
        for _ in 0..rows {
            for _ in 0..3 {
                for _ in 0..seq * dim * dim {
                    count += 1;
                }
            }
            for _ in 0..heads {
                for _ in 0..seq {
                    for _ in 0..seq {
                        for _ in 0..dk {
                            count += 1; // score
                        }
                    }
                }
                for _ in 0..seq {
                    for _ in 0..seq {
                        for _ in 0..dk {
                            count += 1; // context
                        }
                    }
                }
            }
            for _ in 0..seq * dim * dim {
                count += 1;
            }
        }
        count
    }

    #[test]
    fn linear_examples() {
        assert_eq!(macs_linear(1, 1, 1), 1);
        // 4131 tokens · 262144 weights.
        assert_eq!(macs_linear(17 * 243, 512, 512), 1_082_916_864);
        assert_eq!(macs_linear(2 * 40, 8, 9), 2 * macs_linear(40, 8, 9));
    }

    #[test]
    fn attention_matches_enumeration() {
        assert_eq!(macs_attention(2, 1, 2, 1, None), 48);
        assert_eq!(enumerate_attention(2, 1, 2, 1), 48);
        for (s, r, d, h) in [(3, 2, 4, 2), (5, 1, 6, 3), (4, 3, 8, 4)] {
            assert_eq!(macs_attention(s, r, d, h, None), enumerate_attention(s as usize, r as usize, d as usize, h as usize));
        }
    }

    #[test]
    fn support_linearity() {
        let full = macs_attention(10, 3, 8, 2, Some(300));
        let half = macs_attention(10, 3, 8, 2, Some(150));
        let proj = 4 * macs_linear(30, 8, 8);
        assert_eq!(full - proj, 2 * (half - proj));
        assert_eq!(macs_attention_core(54 * 54 * 17, 512) * 81, macs_attention_core(243 * 243 * 17, 512) * 4);
    }

    #[test]
    fn inference_scales_with_h_and_k() {
        let cfg = DenoiserConfig::full_scale(17, 243);
        let one = profile_model(&cfg, 1, 1).unwrap();
        assert_eq!(one.inference_total, one.single_pass);
        let many = profile_model(&cfg, 20, 10).unwrap();
        assert_eq!(many.inference_total, 200 * many.single_pass);
        assert_eq!(many.single_pass, many.stages.iter().map(|s| s.macs).sum::<u64>());
    }

    #[test]
    fn dense_dominates_pruned() {
        for (f, keep, eta) in [(27, 9, 8), (81, 27, 40), (243, 54, 162), (243, 243, 100), (243, 60, 242)] {
            let cfg = DenoiserConfig { retained: keep, eta, ..DenoiserConfig::full_scale(17, f) };
            let c = compare_to_dense(&cfg, 1, 1).unwrap();
            assert!(c.dense.single_pass >= c.htp.single_pass);
        }
    }

    #[test]
    fn measured_support_replaces_bound() {
        let cfg = DenoiserConfig::full_scale(17, 243);
        let bound = 17 * 243 * 163;
        let a = profile_with_support(&cfg, 1, 1, SparseSupport::Measured(4 * bound)).unwrap();
        assert_eq!(a, profile_model(&cfg, 1, 1).unwrap());
        let b = profile_with_support(&cfg, 1, 1, SparseSupport::Measured(4 * (bound + 1000))).unwrap();
        assert_eq!(b.single_pass - a.single_pass, 1000 * 512 * (1 + 2 * 4));
    }

    #[test]
    fn table_lists_every_stage() {
        let c = compare_to_dense(&DenoiserConfig::full_scale(17, 243), 20, 10).unwrap();
        let t = render_table(&c);
        for s in &c.htp.stages {
            assert!(t.contains(&s.stage));
        }
        assert!(t.contains("reduction vs dense"));
    }
}
