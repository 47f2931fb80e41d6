//! Run configuration: a JSON file with defaults for every field.
//!
//! Unknown keys are rejected. Command-line flags are applied on top of the
//! file by the binary.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::{default_skeleton, skeleton_from_edges, DenoiserConfig, TemporalGraph};
use crate::diffusion::{CameraModel, DiffusionSchedule, SamplerConfig, ScheduleKind};
use crate::error::{HtpError, Result};
use crate::synth::{MotionKind, SynthOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub joints: usize,
    pub frames: usize,
    pub dim: usize,
    pub retained: usize,
    pub eta: usize,
    pub blocks: usize,
    pub sparse_blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub tau: f64,
    pub knn: usize,
    pub recompute_mask_per_block: bool,
    pub temporal_graph: TemporalGraph,
    /// Undirected skeleton edges; the built-in skeleton when absent.
    pub skeleton_edges: Option<Vec<[usize; 2]>>,

    pub hypotheses: usize,
    pub iterations: usize,
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub eta_ddim: f64,
    pub seed: u64,

    pub camera: CameraModel,
    /// Pelvis depth assumed when no ground truth supplies the root trajectory.
    pub root_depth_mm: f64,
    pub motion: MotionKind,
    pub pixel_noise: f64,

    pub checkpoint: Option<PathBuf>,
    pub input_2d: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            joints: 17,
            frames: 243,
            dim: 512,
            retained: 54,
            eta: 162,
            blocks: 8,
            sparse_blocks: 3,
            heads: 8,
            mlp_ratio: 2,
            tau: 0.5,
            knn: 5,
            recompute_mask_per_block: false,
            temporal_graph: TemporalGraph::Chain,
            skeleton_edges: None,
            hypotheses: 20,
            iterations: 10,
            steps: 1000,
            schedule: ScheduleKind::Linear,
            eta_ddim: 1.0,
            seed: 0,
            camera: CameraModel::default(),
            root_depth_mm: 4500.0,
            motion: MotionKind::WalkCycle,
            pixel_noise: 0.0,
            checkpoint: None,
            input_2d: None,
            ground_truth: None,
            output: None,
        }
    }
}

fn config_err(field: &'static str, reason: impl Into<String>) -> HtpError {
    HtpError::Config { field, reason: reason.into() }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| config_err("config", e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| HtpError::io_at(path, e))?)
    }

    pub fn denoiser(&self) -> Result<DenoiserConfig> {
        let skeleton = match &self.skeleton_edges {
            Some(edges) => {
                let pairs: Vec<(usize, usize)> = edges.iter().map(|e| (e[0], e[1])).collect();
                skeleton_from_edges(self.joints, &pairs).map_err(|e| config_err("skeleton_edges", e.to_string()))?
            }
            None => default_skeleton(self.joints),
        };
        let cfg = DenoiserConfig {
            joints: self.joints,
            frames: self.frames,
            dim: self.dim,
            retained: self.retained,
            eta: self.eta,
            blocks: self.blocks,
            sparse_blocks: self.sparse_blocks,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            tau: self.tau,
            knn: self.knn,
            recompute_mask_per_block: self.recompute_mask_per_block,
            temporal_graph: self.temporal_graph,
            skeleton,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            hypotheses: self.hypotheses,
            iterations: self.iterations,
            eta: self.eta_ddim,
        }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::new(self.steps, self.schedule).map_err(|e| config_err("steps", e.to_string()))
    }

    pub fn synth_options(&self) -> SynthOptions {
        SynthOptions {
            motion: self.motion,
            pixel_noise: self.pixel_noise,
            depth: self.root_depth_mm,
            camera: self.camera,
        }
    }

    /// Check every field against the preconditions of the stage that uses it.
    pub fn validate(&self) -> Result<()> {
        self.denoiser()?;
        if self.hypotheses == 0 {
            return Err(config_err("hypotheses", "H must be at least 1"));
        }
        if self.iterations == 0 {
            return Err(config_err("iterations", "K must be at least 1"));
        }
        if self.steps == 0 {
            return Err(config_err("steps", "T must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.eta_ddim) {
            return Err(config_err("eta_ddim", format!("{} outside [0, 1]", self.eta_ddim)));
        }
        self.camera.validate()?;
        if !(self.root_depth_mm > 0.0) || !self.root_depth_mm.is_finite() {
            return Err(config_err("root_depth_mm", "must be positive"));
        }
        if !(self.pixel_noise >= 0.0) || !self.pixel_noise.is_finite() {
            return Err(config_err("pixel_noise", "must be nonnegative"));
        }
        self.schedule()?;
        Ok(())
    }
}
