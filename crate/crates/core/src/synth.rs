//! Seeded synthetic pose sequences in camera coordinates (millimetres).
//!
//! Poses come from forward kinematics over a rest skeleton: every bone keeps
//! its length and swings about its parent. The 17-joint case uses a
//! Human3.6M-like body; other joint counts use a vertical chain.

use serde::{Deserialize, Serialize};

use crate::denoiser::H36M_PARENTS;
use crate::diffusion::CameraModel;
use crate::error::{HtpError, Result};
use crate::rng::RngStream;
use crate::tensor::Ten3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    Static,
    #[default]
    WalkCycle,
    RandomSmooth,
}

impl std::str::FromStr for MotionKind {
    type Err = HtpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(MotionKind::Static),
            "walk_cycle" => Ok(MotionKind::WalkCycle),
            "random_smooth" => Ok(MotionKind::RandomSmooth),
            other => Err(HtpError::Config {
                field: "motion",
                reason: format!("unknown motion kind `{other}` (static, walk_cycle, random_smooth)"),
            }),
        }
    }
}

/// Pelvis-relative rest pose of the 17-joint body, y pointing down.
const H36M_REST: [[f64; 3]; 17] = [
    [0.0, 0.0, 0.0],
    [-130.0, 0.0, 0.0],
    [-130.0, 450.0, 0.0],
    [-130.0, 880.0, 0.0],
    [130.0, 0.0, 0.0],
    [130.0, 450.0, 0.0],
    [130.0, 880.0, 0.0],
    [0.0, -230.0, 0.0],
    [0.0, -480.0, 0.0],
    [0.0, -580.0, 0.0],
    [0.0, -700.0, 0.0],
    [160.0, -450.0, 0.0],
    [160.0, -170.0, 0.0],
    [160.0, 80.0, 0.0],
    [-160.0, -450.0, 0.0],
    [-160.0, -170.0, 0.0],
    [-160.0, 80.0, 0.0],
];

/// Swing amplitude (radians) and phase of each 17-joint bone in the walk cycle.
const H36M_SWING: [(f64, f64); 17] = [
    (0.0, 0.0),
    (0.0, 0.0),
    (0.45, 0.0),
    (0.25, 0.6),
    (0.0, 0.0),
    (0.45, std::f64::consts::PI),
    (0.25, std::f64::consts::PI + 0.6),
    (0.05, 0.0),
    (0.05, 0.0),
    (0.05, 0.3),
    (0.05, 0.3),
    (0.0, 0.0),
    (0.35, 0.0),
    (0.2, 0.3),
    (0.0, 0.0),
    (0.35, std::f64::consts::PI),
    (0.2, std::f64::consts::PI + 0.3),
];

struct Skeleton {
    parents: Vec<i64>,
    rest: Vec<[f64; 3]>,
    swing: Vec<(f64, f64)>,
}

fn skeleton(joints: usize) -> Skeleton {
    if joints == 17 {
        Skeleton {
            parents: H36M_PARENTS.iter().map(|&p| p as i64).collect(),
            rest: H36M_REST.to_vec(),
            swing: H36M_SWING.to_vec(),
        }
    } else {
        Skeleton {
            parents: (0..joints as i64).map(|j| j - 1).collect(),
            rest: (0..joints).map(|j| [0.0, -100.0 * j as f64, 0.0]).collect(),
            swing: (0..joints).map(|j| (if j == 0 { 0.0 } else { 0.3 }, 0.5 * j as f64)).collect(),
        }
    }
}

fn rotate_x(v: [f64; 3], a: f64) -> [f64; 3] {
    let (s, c) = a.sin_cos();
    [v[0], c * v[1] - s * v[2], s * v[1] + c * v[2]]
}

fn rotate_y(v: [f64; 3], a: f64) -> [f64; 3] {
    let (s, c) = a.sin_cos();
    [c * v[0] + s * v[2], v[1], -s * v[0] + c * v[2]]
}

/// A synthetic sequence with its projection.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    /// `J × F × 3`, camera coordinates in millimetres.
    pub poses_3d: Ten3,
    /// `J × F × 2`, pixels.
    pub poses_2d: Ten3,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthOptions {
    pub motion: MotionKind,
    /// Standard deviation of added pixel noise.
    pub pixel_noise: f64,
    /// Pelvis depth in millimetres.
    pub depth: f64,
    pub camera: CameraModel,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            motion: MotionKind::WalkCycle,
            pixel_noise: 0.0,
            depth: 4500.0,
            camera: CameraModel::default(),
        }
    }
}

pub fn generate_synthetic(joints: usize, frames: usize, seed: u64, opts: &SynthOptions) -> Result<SyntheticSequence> {
    if joints == 0 || frames == 0 {
        return Err(HtpError::invalid("synthetic sequence needs at least one joint and one frame"));
    }
    if !(opts.pixel_noise >= 0.0) || !(opts.depth > 0.0) {
        return Err(HtpError::invalid("pixel noise must be nonnegative and depth positive"));
    }
    let sk = skeleton(joints);
    let mut rng = RngStream::new(seed);
    let heading = rng.uniform(-0.6, 0.6);
    let phase0 = rng.uniform(0.0, std::f64::consts::TAU);
    let period = rng.uniform(40.0, 60.0);
    // Three random sinusoids per joint and axis for the smooth random kind.
    let waves: Vec<[(f64, f64, f64); 6]> = (0..joints)
        .map(|_| std::array::from_fn(|_| (rng.uniform(-0.25, 0.25), rng.uniform(0.02, 0.12), rng.uniform(0.0, std::f64::consts::TAU))))
        .collect();
    let drift = [rng.uniform(-2.0, 2.0), rng.uniform(-0.5, 0.5), rng.uniform(-2.0, 2.0)];

    let mut poses = Ten3::zeros(joints, frames, 3);
    let mut pos = vec![[0.0; 3]; joints];
    for p in 0..frames {
        let t = p as f64;
        let phase = phase0 + std::f64::consts::TAU * t / period;
        let root = match opts.motion {
            MotionKind::Static => [0.0, 0.0, opts.depth],
            MotionKind::WalkCycle => [3.0 * t * heading.cos() - 300.0, 15.0 * (2.0 * phase).sin(), opts.depth + 3.0 * t * heading.sin()],
            MotionKind::RandomSmooth => [drift[0] * t, drift[1] * t, opts.depth + drift[2] * t],
        };
        for a in 0..joints {
            let (pitch, yaw) = match opts.motion {
                MotionKind::Static => (0.0, 0.0),
                MotionKind::WalkCycle => (sk.swing[a].0 * (phase + sk.swing[a].1).sin(), 0.0),
                MotionKind::RandomSmooth => {
                    let w = &waves[a];
                    let sum = |r: std::ops::Range<usize>| r.map(|i| w[i].0 * (w[i].1 * t + w[i].2).sin()).sum::<f64>();
                    (sum(0..3), sum(3..6))
                }
            };
            pos[a] = match sk.parents[a] {
                parent if parent < 0 => [0.0; 3],
                parent => {
                    let pr = parent as usize;
                    let bone = [
                        sk.rest[a][0] - sk.rest[pr][0],
                        sk.rest[a][1] - sk.rest[pr][1],
                        sk.rest[a][2] - sk.rest[pr][2],
                    ];
                    let b = rotate_y(rotate_x(bone, pitch), yaw);
                    [pos[pr][0] + b[0], pos[pr][1] + b[1], pos[pr][2] + b[2]]
                }
            };
            let world = rotate_y(pos[a], heading);
            for k in 0..3 {
                poses.set(a, p, k, world[k] + root[k]);
            }
        }
    }
    let mut poses_2d = opts.camera.project_pose(&poses)?;
    if !poses_2d.all_finite() {
        return Err(HtpError::invalid("synthetic pose passed behind the camera; increase the depth"));
    }
    if opts.pixel_noise > 0.0 {
        for v in poses_2d.data_mut() {
            *v += opts.pixel_noise * rng.normal();
        }
    }
    Ok(SyntheticSequence { poses_3d: poses, poses_2d })
}
