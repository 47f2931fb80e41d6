//! End-to-end workflows: synthetic data generation, multi-hypothesis
//! inference, and cost profiling.
//!
//! Files hold camera-frame millimetres (3D) and pixels (2D). The network sees
//! root-relative metres and 2D keypoints in normalized image coordinates
//! `((u − cx)/fx, (v − cy)/fy)`. The root trajectory is taken from ground
//! truth when it is supplied, otherwise from back-projecting the 2D root
//! joint at the configured depth.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use log::{debug, info};
use serde::Serialize;

use crate::config::RunConfig;
use crate::denoiser::{denoise_forward, DenoiserConfig, DenoiserParams};
use crate::diffusion::{jpma_aggregate, mpjpe, sample_chain, CameraModel, HypothesisSet, StepInfo};
use crate::error::{HtpError, Result, StageExt};
use crate::htp1::{read_checkpoint, write_checkpoint, Tensor};
use crate::macs::{compare_to_dense, Comparison};
use crate::poses::PoseFile;
use crate::rng::{derive_seed, RngStream};
use crate::synth::{generate_synthetic, SyntheticSequence};
use crate::tcep::TemporalMask;
use crate::tensor::Ten3;

/// Stream index of the weight initializer under the run seed.
pub const WEIGHT_STREAM: u64 = 0;
/// Stream index of the sampler under the run seed.
pub const SAMPLER_STREAM: u64 = 1;
/// Stream index of the synthetic generator under the run seed.
pub const DATA_STREAM: u64 = 2;

const MM_PER_M: f64 = 1000.0;

pub fn normalize_keypoints(x_px: &Ten3, cam: &CameraModel) -> Result<Ten3> {
    let (j, f, c) = x_px.shape();
    if c != 2 {
        return Err(HtpError::shape("normalize_keypoints", "J x F x 2", format!("{:?}", x_px.shape())));
    }
    Ok(Ten3::from_fn(j, f, 2, |a, p, k| {
        let v = x_px.get(a, p, k);
        if k == 0 { (v - cam.cx) / cam.fx } else { (v - cam.cy) / cam.fy }
    }))
}

/// Per-frame root (joint 0) positions in millimetres, `F` entries.
pub fn root_from_ground_truth(gt: &Ten3) -> Vec<[f64; 3]> {
    (0..gt.shape().1).map(|p| [gt.get(0, p, 0), gt.get(0, p, 1), gt.get(0, p, 2)]).collect()
}

/// Back-project the 2D root joint to the plane `Z = depth_mm`.
pub fn root_from_backprojection(x_px: &Ten3, cam: &CameraModel, depth_mm: f64) -> Vec<[f64; 3]> {
    (0..x_px.shape().1)
        .map(|p| {
            let (u, v) = (x_px.get(0, p, 0), x_px.get(0, p, 1));
            [(u - cam.cx) / cam.fx * depth_mm, (v - cam.cy) / cam.fy * depth_mm, depth_mm]
        })
        .collect()
}

/// Absolute millimetres to root-relative metres.
pub fn to_model_units(pose_mm: &Ten3, roots: &[[f64; 3]]) -> Ten3 {
    let (j, f, _) = pose_mm.shape();
    Ten3::from_fn(j, f, 3, |a, p, k| (pose_mm.get(a, p, k) - roots[p][k]) / MM_PER_M)
}

/// Root-relative metres back to absolute millimetres.
pub fn from_model_units(pose_m: &Ten3, roots: &[[f64; 3]]) -> Ten3 {
    let (j, f, _) = pose_m.shape();
    Ten3::from_fn(j, f, 3, |a, p, k| pose_m.get(a, p, k) * MM_PER_M + roots[p][k])
}

/// MPJPE after aligning both sequences at joint 0, in the input units.
pub fn root_relative_mpjpe(pred: &Ten3, gt: &Ten3) -> Result<f64> {
    let rel = |t: &Ten3| {
        let (j, f, c) = t.shape();
        Ten3::from_fn(j, f, c, |a, p, k| t.get(a, p, k) - t.get(0, p, k))
    };
    mpjpe(&rel(pred), &rel(gt))
}

/// Generate a synthetic sequence with the run's seed and motion settings.
pub fn generate(cfg: &RunConfig) -> Result<SyntheticSequence> {
    generate_synthetic(cfg.joints, cfg.frames, derive_seed(cfg.seed, DATA_STREAM), &cfg.synth_options())
}

/// Write `poses_3d.csv` and `poses_2d.csv` into `dir`. Returns both paths.
pub fn run_generate(cfg: &RunConfig, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    cfg.validate()?;
    let seq = generate(cfg).stage("generate")?;
    std::fs::create_dir_all(dir).map_err(|e| HtpError::io_at(dir, e))?;
    let (p3, p2) = (dir.join("poses_3d.csv"), dir.join("poses_2d.csv"));
    PoseFile::new(seq.poses_3d)?.write_file(&p3)?;
    PoseFile::new(seq.poses_2d)?.write_file(&p2)?;
    info!("wrote {} and {}", p3.display(), p2.display());
    Ok((p3, p2))
}

/// Seeded initial weights for the configured network.
pub fn initial_params(cfg: &RunConfig) -> Result<DenoiserParams> {
    DenoiserParams::init(&cfg.denoiser()?, derive_seed(cfg.seed, WEIGHT_STREAM))
}

pub fn save_params(params: &DenoiserParams, path: &Path) -> Result<()> {
    std::fs::write(path, write_checkpoint(&params.to_tensors())?).map_err(|e| HtpError::io_at(path, e))?;
    Ok(())
}

pub fn load_params(cfg: &DenoiserConfig, path: &Path) -> Result<DenoiserParams> {
    DenoiserParams::from_tensors(cfg, &read_checkpoint(&std::fs::read(path).map_err(|e| HtpError::io_at(path, e))?)?)
}

/// Indices retained by the pruner in one denoiser call.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RetainedRecord {
    pub hypothesis: usize,
    pub iteration: usize,
    pub t: usize,
    pub indices: Vec<usize>,
}

/// What drives the reverse chain.
#[derive(Clone, Debug)]
pub enum Denoiser {
    Network(DenoiserParams),
    /// Always predicts this pose (absolute millimetres).
    Oracle(Ten3),
}

#[derive(Clone, Debug, Default)]
pub struct InferOptions {
    /// Worker threads over hypotheses; 0 picks the available parallelism.
    pub threads: usize,
}

#[derive(Clone, Debug)]
pub struct InferResult {
    /// Aggregated pose, absolute millimetres.
    pub pose_mm: Ten3,
    /// Every hypothesis, absolute millimetres.
    pub hypotheses: HypothesisSet,
    /// Winning hypothesis per `(joint, frame)`, joint-major.
    pub chosen: Vec<usize>,
    pub mpjpe_mm: Option<f64>,
    pub denoiser_calls: usize,
    pub retained: Vec<RetainedRecord>,
    /// Mask of the first network call.
    pub first_mask: Option<TemporalMask>,
    pub elapsed: Duration,
}

struct Chain {
    pose: Ten3,
    seed: u64,
    calls: usize,
    retained: Vec<RetainedRecord>,
    mask: Option<TemporalMask>,
}

fn run_chain(
    h: usize,
    cfg: &RunConfig,
    dcfg: &DenoiserConfig,
    sched: &crate::diffusion::DiffusionSchedule,
    rng: &RngStream,
    x: &Ten3,
    denoiser: &Denoiser,
    oracle_m: Option<&Ten3>,
) -> Result<Chain> {
    let mut calls = 0;
    let mut retained = Vec::new();
    let mut mask = None;
    let shape = (cfg.joints, cfg.frames, 3);
    let (pose, seed) = sample_chain(h, shape, &cfg.sampler(), sched, rng, |step: StepInfo, y_t: &Ten3| {
        calls += 1;
        match (denoiser, oracle_m) {
            (Denoiser::Network(params), _) => {
                let out = denoise_forward(y_t, x, step.t, dcfg, params)?;
                debug!("h={} k={} t={} support={}", step.hypothesis, step.iteration, step.t, out.sparse_support);
                retained.push(RetainedRecord {
                    hypothesis: step.hypothesis,
                    iteration: step.iteration,
                    t: step.t,
                    indices: out.retained.indices().to_vec(),
                });
                if mask.is_none() {
                    mask = Some(out.mask);
                }
                Ok(out.y0_hat)
            }
            (Denoiser::Oracle(_), Some(m)) => Ok(m.clone()),
            (Denoiser::Oracle(_), None) => unreachable!("oracle pose converted before sampling"),
        }
    })?;
    Ok(Chain { pose, seed, calls, retained, mask })
}

/// Sample `H` hypotheses, aggregate them per joint by reprojection error.
pub fn infer(cfg: &RunConfig, x_px: &Ten3, gt_mm: Option<&Ten3>, denoiser: &Denoiser, opts: &InferOptions) -> Result<InferResult> {
    let start = Instant::now();
    cfg.validate()?;
    let dcfg = cfg.denoiser()?;
    if x_px.shape() != (cfg.joints, cfg.frames, 2) {
        return Err(HtpError::shape("infer", format!("{} x {} x 2 keypoints", cfg.joints, cfg.frames), format!("{:?}", x_px.shape())));
    }
    for (name, t) in [("ground truth", gt_mm), ("oracle pose", if let Denoiser::Oracle(o) = denoiser { Some(o) } else { None })] {
        if let Some(t) = t {
            if t.shape() != (cfg.joints, cfg.frames, 3) {
                return Err(HtpError::shape("infer", format!("{name} {} x {} x 3", cfg.joints, cfg.frames), format!("{:?}", t.shape())));
            }
        }
    }
    if let Denoiser::Network(p) = denoiser {
        p.check(&dcfg)?;
    }
    let x = normalize_keypoints(x_px, &cfg.camera)?;
    let roots = match gt_mm {
        Some(gt) => root_from_ground_truth(gt),
        None => root_from_backprojection(x_px, &cfg.camera, cfg.root_depth_mm),
    };
    let oracle_m = match denoiser {
        Denoiser::Oracle(o) => Some(to_model_units(o, &roots)),
        Denoiser::Network(_) => None,
    };
    let sched = cfg.schedule()?;
    let rng = RngStream::new(derive_seed(cfg.seed, SAMPLER_STREAM));

    let threads = match opts.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(cfg.hypotheses);
    info!("sampling {} hypotheses x {} iterations on {threads} thread(s)", cfg.hypotheses, cfg.iterations);
    let mut chains: Vec<Option<Chain>> = (0..cfg.hypotheses).map(|_| None).collect();
    std::thread::scope(|scope| -> Result<()> {
        let workers: Vec<_> = (0..threads)
            .map(|w| {
                let (dcfg, sched, rng, x, oracle_m) = (&dcfg, &sched, &rng, &x, oracle_m.as_ref());
                scope.spawn(move || {
                    (w..cfg.hypotheses)
                        .step_by(threads)
                        .map(|h| run_chain(h, cfg, dcfg, sched, rng, x, denoiser, oracle_m).map(|c| (h, c)))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        for worker in workers {
            for (h, c) in worker.join().expect("sampler thread panicked")? {
                chains[h] = Some(c);
            }
        }
        Ok(())
    })?;
    let chains: Vec<Chain> = chains.into_iter().map(|c| c.expect("every hypothesis sampled")).collect();

    let denoiser_calls = chains.iter().map(|c| c.calls).sum();
    let first_mask = chains[0].mask.clone();
    let mut retained = Vec::new();
    let mut poses = Vec::with_capacity(chains.len());
    let mut seeds = Vec::with_capacity(chains.len());
    for c in chains {
        poses.push(from_model_units(&c.pose, &roots));
        seeds.push(c.seed);
        retained.extend(c.retained);
    }
    let hypotheses = HypothesisSet::new(poses, seeds)?;
    let (pose_mm, chosen) = jpma_aggregate(&hypotheses, x_px, &cfg.camera).stage("jpma")?;
    let mpjpe_mm = gt_mm.map(|gt| root_relative_mpjpe(&pose_mm, gt)).transpose()?;
    Ok(InferResult {
        pose_mm,
        hypotheses,
        chosen,
        mpjpe_mm,
        denoiser_calls,
        retained,
        first_mask,
        elapsed: start.elapsed(),
    })
}

/// Optional artifacts of `run_infer` beyond the output CSV.
#[derive(Clone, Debug, Default)]
pub struct InferArtifacts {
    pub retained_json: Option<PathBuf>,
    pub mask_htp1: Option<PathBuf>,
    pub oracle_y0: Option<PathBuf>,
    pub threads: usize,
}

/// File-level inference driven by the paths in `cfg`.
pub fn run_infer(cfg: &RunConfig, extra: &InferArtifacts) -> Result<InferResult> {
    cfg.validate()?;
    let input = cfg
        .input_2d
        .as_ref()
        .ok_or_else(|| HtpError::Config { field: "input_2d", reason: "a 2D keypoint CSV is required".into() })?;
    let x = PoseFile::read_file(input)?.poses;
    let gt = cfg.ground_truth.as_ref().map(|p| PoseFile::read_file(p).map(|f| f.poses)).transpose()?;
    let denoiser = match (&extra.oracle_y0, &cfg.checkpoint) {
        (Some(path), _) => Denoiser::Oracle(PoseFile::read_file(path)?.poses),
        (None, Some(ckpt)) => Denoiser::Network(load_params(&cfg.denoiser()?, ckpt).stage("checkpoint")?),
        (None, None) => Denoiser::Network(initial_params(cfg)?),
    };
    let result = infer(cfg, &x, gt.as_ref(), &denoiser, &InferOptions { threads: extra.threads })?;

    if let Some(out) = &cfg.output {
        PoseFile::new(result.pose_mm.clone())?.write_file(out)?;
        info!("wrote {}", out.display());
    }
    if let Some(path) = &extra.retained_json {
        std::fs::write(path, serde_json::to_string_pretty(&result.retained)?).map_err(|e| HtpError::io_at(path, e))?;
    }
    if let Some(path) = &extra.mask_htp1 {
        let mask = result
            .first_mask
            .as_ref()
            .ok_or_else(|| HtpError::invalid("no mask to write: the oracle denoiser builds none"))?;
        Tensor::from(mask.as_ten3()).write_file(path)?;
    }
    Ok(result)
}

/// Analytic cost of the configured network against its dense counterpart.
pub fn run_profile(cfg: &RunConfig) -> Result<Comparison> {
    cfg.validate()?;
    compare_to_dense(&cfg.denoiser()?, cfg.hypotheses as u64, cfg.iterations as u64)
}
