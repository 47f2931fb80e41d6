//! Self-check suites behind `htp verify`.
//!
//! Each property compares a production path against a straight-loop oracle
//! or checks an invariant over seeded random instances. The top-η selector is
//! injectable so a deliberately broken variant can be shown to fail.

use std::fmt::Write as _;

use crate::attention::{attention_probs, binary_to_additive, dense_temporal_mhsa, sft_mhsa, AdditiveMask, AttnWeights, LayerNormParams};
use crate::config::RunConfig;
use crate::denoiser::{dense_reference_forward, denoise_forward, DenoiserConfig, DenoiserParams};
use crate::diffusion::{
    forward_diffuse, jpma_aggregate, sample, sigma, DiffusionSchedule, HypothesisSet, SamplerConfig, ScheduleKind,
};
use crate::error::Result;
use crate::htp1::Tensor;
use crate::macs::{compare_to_dense, macs_attention_core, MacsReport};
use crate::mgptp::{mgptp, MgptpParams};
use crate::oracle;
use crate::poses::PoseFile;
use crate::rng::{gaussian, RngStream};
use crate::synth::{generate_synthetic, SynthOptions};
use crate::tcep::{effective_eta, frame_similarity, select_topk_mask, TemporalMask};
use crate::tensor::{Mat, Ten3};

/// Signature of a top-η mask selector.
pub type TopkFn = dyn Fn(&Mat, usize) -> Result<Mat> + Sync;

#[derive(Clone, Debug, PartialEq)]
pub struct Property {
    pub suite: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default)]
pub struct VerifyReport {
    pub properties: Vec<Property>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.properties.iter().all(|p| p.passed)
    }

    pub fn failures(&self) -> usize {
        self.properties.iter().filter(|p| !p.passed).count()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for p in &self.properties {
            let tag = if p.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "{tag}  {}.{}  {}", p.suite, p.name, p.detail);
        }
        let _ = writeln!(out, "{} properties, {} failed", self.properties.len(), self.failures());
        out
    }
}

pub struct VerifyOptions<'a> {
    pub seed: u64,
    pub topk: &'a TopkFn,
}

impl Default for VerifyOptions<'_> {
    fn default() -> Self {
        VerifyOptions { seed: 0, topk: &select_topk_mask }
    }
}

fn prop(suite: &'static str, name: &'static str, outcome: Result<std::result::Result<String, String>>) -> Property {
    let (passed, detail) = match outcome {
        Ok(Ok(d)) => (true, d),
        Ok(Err(d)) => (false, d),
        Err(e) => (false, format!("error: {e}")),
    };
    Property { suite, name, passed, detail }
}

type Check = Result<std::result::Result<String, String>>;

pub fn run_verify(opts: &VerifyOptions<'_>) -> VerifyReport {
    let root = RngStream::new(opts.seed);
    let properties = vec![
        prop("tcep", "topk_matches_oracle", topk_matches_oracle(opts.topk, &mut root.child(0))),
        prop("tcep", "mask_structure", mask_structure(opts.topk, &mut root.child(1))),
        prop("tcep", "similarity_matches_oracle", similarity_matches_oracle(&mut root.child(2))),
        prop("attention", "full_mask_equals_dense", full_mask_equals_dense(&mut root.child(3))),
        prop("attention", "masked_probabilities", masked_probabilities(&mut root.child(4))),
        prop("mgptp", "oracle_equivalence", mgptp_oracle(&mut root.child(5))),
        prop("diffusion", "deterministic_chain", deterministic_chain(&mut root.child(6))),
        prop("diffusion", "sigma_arithmetic", sigma_arithmetic()),
        prop("diffusion", "forward_statistics", forward_statistics(&mut root.child(7))),
        prop("diffusion", "camera_loop", camera_loop(opts.seed)),
        prop("denoiser", "dense_degenerate_equivalence", dense_equivalence(opts.seed)),
        prop("macs", "retained_ratio", retained_ratio()),
        prop("macs", "default_totals", default_totals()),
        prop("macs", "inference_scaling", inference_scaling()),
        prop("io", "round_trips", round_trips(&mut root.child(8))),
        prop("io", "config_rejection", config_rejection()),
    ];
    VerifyReport { properties }
}

/// Random similarity matrix: Gaussian, or small integers so that ties are common.
pub fn random_similarity(rng: &mut RngStream, f: usize, integer: bool) -> Mat {
    let mut s = Mat::zeros(f, f);
    for a in 0..f {
        for b in 0..=a {
            let v = if integer { rng.below(3) as f64 } else { rng.normal() };
            s.set(a, b, v);
            s.set(b, a, v);
        }
    }
    s
}

fn topk_matches_oracle(topk: &TopkFn, rng: &mut RngStream) -> Check {
    let mut n = 0;
    for trial in 0..400 {
        let f = 1 + rng.below(64);
        let eta = 1 + rng.below(f + 2);
        let s = random_similarity(rng, f, trial % 2 == 1);
        let got = topk(&s, eta)?;
        if got != oracle::topk_mask(&s, eta) {
            return Ok(Err(format!("mismatch at trial {trial} (F={f}, eta={eta})")));
        }
        n += 1;
    }
    Ok(Ok(format!("{n} instances, half with tied scores")))
}

fn mask_structure(topk: &TopkFn, rng: &mut RngStream) -> Check {
    for trial in 0..200 {
        let f = 1 + rng.below(64);
        let eta = 1 + rng.below(f + 2);
        let k = effective_eta(eta, f);
        let m = topk(&random_similarity(rng, f, false), eta)?;
        if !m.is_symmetric() {
            return Ok(Err(format!("asymmetric mask at trial {trial}")));
        }
        let mut total = 0;
        for p in 0..f {
            if m.get(p, p) != 1.0 {
                return Ok(Err(format!("zero diagonal at trial {trial}")));
            }
            let row = m.row(p).iter().filter(|&&v| v == 1.0).count();
            if row < k + 1 || row > f {
                return Ok(Err(format!("row support {row} outside [{}, {f}] at trial {trial}", k + 1)));
            }
            total += row;
        }
        if total > f * (2 * k + 1) {
            return Ok(Err(format!("total support {total} above F(2k+1) at trial {trial}")));
        }
    }
    Ok(Ok("200 instances: symmetric, unit diagonal, row support in [k+1, F], total <= F(2k+1)".into()))
}

fn similarity_matches_oracle(rng: &mut RngStream) -> Check {
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (f, d) = (1 + rng.below(30), 1 + rng.below(16));
        let y = Mat::from_fn(f, d, |_, _| rng.normal());
        worst = worst.max(frame_similarity(&y)?.max_abs_diff(&oracle::similarity(&y)));
    }
    Ok(if worst < 1e-12 { Ok(format!("max diff {worst:.1e}")) } else { Err(format!("max diff {worst:.1e}")) })
}

fn random_layer(rng: &mut RngStream, d: usize, heads: usize) -> Result<(AttnWeights, LayerNormParams)> {
    let w = AttnWeights::random(rng, d, heads)?;
    let norm = LayerNormParams {
        gamma: (0..d).map(|_| rng.uniform(0.5, 1.5)).collect(),
        beta: (0..d).map(|_| rng.uniform(-0.2, 0.2)).collect(),
    };
    Ok((w, norm))
}

fn full_mask_equals_dense(rng: &mut RngStream) -> Check {
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let heads = 1 + rng.below(4);
        let d = heads * (1 + rng.below(4));
        let (j, f) = (1 + rng.below(3), 1 + rng.below(20));
        let y = Ten3::from_fn(j, f, d, |_, _, _| rng.normal());
        let (w, norm) = random_layer(rng, d, heads)?;
        let sparse = sft_mhsa(&y, &AdditiveMask::zeros(j, f), &w, &norm)?;
        worst = worst.max(sparse.max_abs_diff(&dense_temporal_mhsa(&y, &w, &norm)?));
        for a in 0..j {
            let expect = oracle::temporal_attention(&y.slice0(a), &w, &norm, None);
            worst = worst.max(sparse.slice0(a).max_abs_diff(&expect));
        }
    }
    Ok(if worst < 1e-12 { Ok(format!("50 instances, max diff {worst:.1e}")) } else { Err(format!("max diff {worst:.1e}")) })
}

/// Symmetric binary masks with a unit diagonal and random off-diagonal density.
pub fn random_binary_mask(rng: &mut RngStream, joints: usize, frames: usize) -> Ten3 {
    let density = rng.uniform(0.0, 1.0);
    let mut t = Ten3::zeros(joints, frames, frames);
    for j in 0..joints {
        for a in 0..frames {
            t.set(j, a, a, 1.0);
            for b in 0..a {
                if rng.uniform(0.0, 1.0) < density {
                    t.set(j, a, b, 1.0);
                    t.set(j, b, a, 1.0);
                }
            }
        }
    }
    t
}

fn masked_probabilities(rng: &mut RngStream) -> Check {
    let (mut worst_sum, mut worst_out) = (0.0f64, 0.0f64);
    for trial in 0..50 {
        let heads = 1 + rng.below(3);
        let d = heads * (1 + rng.below(4));
        let f = 1 + rng.below(16);
        let bin = random_binary_mask(rng, 1, f);
        let mask = binary_to_additive(&bin)?;
        let y = Ten3::from_fn(1, f, d, |_, _, _| rng.normal());
        let (w, norm) = random_layer(rng, d, heads)?;
        let x = norm.apply(&y.slice0(0))?;
        for p in attention_probs(&x, &x, &w, Some(mask.as_ten3().block(0)))? {
            for r in 0..f {
                worst_sum = worst_sum.max((p.row(r).iter().sum::<f64>() - 1.0).abs());
                for c in 0..f {
                    if bin.get(0, r, c) == 0.0 && p.get(r, c) != 0.0 {
                        return Ok(Err(format!("masked weight {} at trial {trial}", p.get(r, c))));
                    }
                }
            }
        }
        let out = sft_mhsa(&y, &mask, &w, &norm)?;
        let expect = oracle::temporal_attention(&y.slice0(0), &w, &norm, Some(mask.as_ten3().block(0)));
        worst_out = worst_out.max(out.slice0(0).max_abs_diff(&expect));
    }
    let detail = format!("masked weights exactly 0, row-sum error {worst_sum:.1e}, oracle diff {worst_out:.1e}");
    Ok(if worst_sum < 1e-12 && worst_out < 1e-12 { Ok(detail) } else { Err(detail) })
}

fn mgptp_oracle(rng: &mut RngStream) -> Check {
    for trial in 0..500 {
        let f = 2 + rng.below(11);
        let j = 1 + rng.below(3);
        let d = 1 + rng.below(4);
        // Every third instance uses coarse integer tokens so distances and densities tie.
        let coarse = trial % 3 == 0;
        let y = Ten3::from_fn(j, f, d, |_, _, _| if coarse { rng.below(3) as f64 } else { rng.normal() });
        let mask = TemporalMask::new(random_binary_mask(rng, j, f), f - 1)?;
        let params = MgptpParams { tau: rng.uniform(0.05, 0.95), k: 1 + rng.below(f - 1), retained: 1 + rng.below(f) };
        let (_, sel, _) = mgptp(&y, &mask, &params)?;
        let expect = oracle::mgptp_indices(&y, mask.as_ten3(), params.tau, params.k, params.retained);
        if sel.indices() != expect.as_slice() {
            return Ok(Err(format!("trial {trial}: {:?} vs oracle {expect:?}", sel.indices())));
        }
    }
    Ok(Ok("500 instances, identical index sets".into()))
}

fn deterministic_chain(rng: &mut RngStream) -> Check {
    let sched = DiffusionSchedule::new(1000, ScheduleKind::Linear)?;
    let y0 = gaussian(rng, (3, 7, 3))?;
    let norm = y0.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut worst = 0.0f64;
    for k in [1, 5, 10] {
        let cfg = SamplerConfig { hypotheses: 2, iterations: k, eta: 0.0 };
        let set = sample((3, 7, 3), &cfg, &sched, &rng.child(k as u64), |_, _| Ok(y0.clone()))?;
        for p in &set.poses {
            let err = p.data().iter().zip(y0.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() / norm;
            worst = worst.max(err);
        }
    }
    let detail = format!("K in {{1,5,10}}, relative error {worst:.1e}");
    Ok(if worst < 1e-8 { Ok(detail) } else { Err(detail) })
}

fn sigma_arithmetic() -> Check {
    let err = (sigma(0.5, 0.75) - (1.0f64 / 6.0).sqrt()).abs();
    let detail = format!("|sigma(0.5, 0.75) - sqrt(1/6)| = {err:.1e}");
    Ok(if err <= 1e-12 { Ok(detail) } else { Err(detail) })
}

fn forward_statistics(rng: &mut RngStream) -> Check {
    let sched = DiffusionSchedule::new(1000, ScheduleKind::Linear)?;
    let y0 = Ten3::new(1, 1, 3, vec![1.0, -2.0, 0.5])?;
    let n = 100_000;
    let mut worst = 0.0f64;
    for t in [100, 500, 900] {
        let ab = sched.alpha_bar(t)?;
        let mut mean = [0.0; 3];
        for _ in 0..n {
            let y = forward_diffuse(&y0, t, &gaussian(rng, (1, 1, 3))?, &sched)?;
            for (m, v) in mean.iter_mut().zip(y.data()) {
                *m += v / n as f64;
            }
        }
        let tol = 4.0 * ((1.0 - ab) / n as f64).sqrt();
        for (m, v) in mean.iter().zip(y0.data()) {
            worst = worst.max((m - ab.sqrt() * v).abs() / tol);
        }
    }
    let detail = format!("worst deviation {worst:.2} of the 4-sigma band");
    Ok(if worst < 1.0 { Ok(detail) } else { Err(detail) })
}

fn camera_loop(seed: u64) -> Check {
    let opts = SynthOptions::default();
    let seq = generate_synthetic(17, 30, seed, &opts)?;
    let set = HypothesisSet::new(vec![seq.poses_3d.clone(); 5], (0..5).collect())?;
    let (agg, _) = jpma_aggregate(&set, &seq.poses_2d, &opts.camera)?;
    let err = opts.camera.project_pose(&agg)?.max_abs_diff(&seq.poses_2d);
    Ok(if err == 0.0 { Ok("reprojection error 0".into()) } else { Err(format!("reprojection error {err:.1e}")) })
}

fn dense_equivalence(seed: u64) -> Check {
    let cfg = DenoiserConfig { dim: 64, ..DenoiserConfig::full_scale(17, 27) }.dense_counterpart();
    let params = DenoiserParams::init(&cfg, seed)?;
    let mut rng = RngStream::new(seed ^ 0x5eed);
    let y_t = gaussian(&mut rng, (17, 27, 3))?;
    let x = gaussian(&mut rng, (17, 27, 2))?;
    let a = denoise_forward(&y_t, &x, 500, &cfg, &params)?.y0_hat;
    let b = dense_reference_forward(&y_t, &x, 500, &cfg, &params)?;
    let diff = a.max_abs_diff(&b);
    let detail = format!("J=17 F=27 D=64, max diff {diff:.1e}");
    Ok(if diff < 1e-10 { Ok(detail) } else { Err(detail) })
}

fn retained_ratio() -> Check {
    let (j, d) = (17u64, 512u64);
    let kept = macs_attention_core(j * 54 * 54, d);
    let full = macs_attention_core(j * 243 * 243, d);
    // 54² / 243² = 4 / 81 exactly.
    let exact = kept * 81 == full * 4;
    let detail = format!("{kept} / {full} = {:.6}", kept as f64 / full as f64);
    Ok(if exact { Ok(detail) } else { Err(detail) })
}

fn default_totals() -> Check {
    let c = compare_to_dense(&DenoiserConfig::full_scale(17, 243), 1, 1)?;
    let htp = MacsReport::published_g(c.htp.single_pass);
    let dense = MacsReport::published_g(c.dense.single_pass);
    let ok = (htp / 175.3 - 1.0).abs() <= 0.15 && (dense / 278.1 - 1.0).abs() <= 0.15;
    let detail = format!("htp {htp:.1} G (175.3 +-15%), dense {dense:.1} G (278.1 +-15%)");
    Ok(if ok { Ok(detail) } else { Err(detail) })
}

fn inference_scaling() -> Check {
    let cfg = DenoiserConfig { sparse_blocks: 1, ..DenoiserConfig::full_scale(17, 243) };
    let mut details = Vec::new();
    for k in [1u64, 5, 10] {
        let c = compare_to_dense(&cfg, 20, k)?;
        if c.htp.inference_total != c.htp.single_pass * 20 * k || c.dense.inference_total != c.dense.single_pass * 20 * k {
            return Ok(Err(format!("inference total is not single pass x H x K at K={k}")));
        }
        let reduction = 1.0 - c.htp.inference_total as f64 / c.dense.inference_total as f64;
        if (reduction - 0.56).abs() > 0.05 {
            return Ok(Err(format!("reduction {:.1}% at K={k}", reduction * 100.0)));
        }
        details.push(format!("K={k}: {:.1}%", reduction * 100.0));
    }
    Ok(Ok(format!("x H x K exact; reduction {}", details.join(", "))))
}

fn round_trips(rng: &mut RngStream) -> Check {
    let t = Ten3::from_fn(3, 4, 5, |_, _, _| rng.normal() * 1e4);
    let back = Tensor::from_bytes(&Tensor::from(&t).to_bytes())?.0.into_ten3()?;
    if back.shape() != t.shape() || back.data().iter().zip(t.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Ok(Err("HTP1 tensor changed on round trip".into()));
    }
    for c in [2, 3] {
        let poses = Ten3::from_fn(4, 6, c, |_, _, _| rng.normal() * 1e3);
        let mut buf = Vec::new();
        PoseFile::new(poses.clone())?.write_to(&mut buf)?;
        let back = PoseFile::read_from(buf.as_slice())?.poses;
        if back.shape() != poses.shape() || back.data().iter().zip(poses.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Ok(Err(format!("{c}D pose CSV changed on round trip")));
        }
    }
    Ok(Ok("HTP1 tensor and 2D/3D pose CSV bit-exact".into()))
}

fn config_rejection() -> Check {
    let cases = [
        (r#"{"retained": 244}"#, "retained"),
        (r#"{"sparse_blocks": 9}"#, "sparse_blocks"),
        (r#"{"eta": 0}"#, "eta"),
        (r#"{"heads": 7}"#, "heads"),
        (r#"{"hypotheses": 0}"#, "hypotheses"),
        (r#"{"eta_ddim": -0.1}"#, "eta_ddim"),
    ];
    for (json, field) in cases {
        match RunConfig::from_json(json).and_then(|c| c.validate()) {
            Err(crate::HtpError::Config { field: f, .. }) if f == field => {}
            other => return Ok(Err(format!("{json} gave {other:?}, expected a `{field}` error"))),
        }
    }
    Ok(Ok(format!("{} invalid configs rejected with named fields", cases.len())))
}
