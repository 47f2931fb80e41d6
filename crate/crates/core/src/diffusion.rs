//! Noise schedules, forward perturbation, DDIM reverse steps, hypothesis
//! aggregation and the MPJPE metric.
//!
//! Pose tensors are `J × F × 3`. Timesteps are integers in `0..=T`, with
//! `ᾱ_0 = 1` standing for clean data.

use serde::{Deserialize, Serialize};

use crate::error::{HtpError, Result};
use crate::rng::{gaussian, RngStream};
use crate::tensor::Ten3;

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    kind: ScheduleKind,
    /// `betas[t - 1]` is `β_t`.
    betas: Vec<f64>,
    /// `alpha_bars[t]` is `ᾱ_t`; index 0 holds 1.
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps == 0 {
            return Err(HtpError::invalid("diffusion schedule needs at least one step"));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear if steps == 1 => vec![BETA_START],
            ScheduleKind::Linear => (0..steps)
                .map(|i| BETA_START + (BETA_END - BETA_START) * i as f64 / (steps - 1) as f64)
                .collect(),
            ScheduleKind::Cosine => {
                let s = 0.008;
                let f = |t: usize| {
                    let x = (t as f64 / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
                    x.cos().powi(2)
                };
                (1..=steps).map(|t| (1.0 - f(t) / f(t - 1)).clamp(1e-8, 0.999)).collect()
            }
        };
        Self::from_betas(kind, betas)
    }

    pub fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Result<Self> {
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(HtpError::invalid(format!("β = {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        if alpha_bars.windows(2).any(|w| w[1] >= w[0]) {
            return Err(HtpError::invalid("ᾱ is not strictly decreasing; the schedule underflowed"));
        }
        Ok(DiffusionSchedule { kind, betas, alpha_bars })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t, 1)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(1.0 - self.beta(t)?)
    }

    /// `ᾱ_t` for `0 ≤ t ≤ T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t, 0)?;
        Ok(self.alpha_bars[t])
    }

    fn check(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps() {
            return Err(HtpError::invalid(format!("timestep {t} outside [{lo}, {}]", self.steps())));
        }
        Ok(())
    }
}

fn same_shape(op: &'static str, a: &Ten3, b: &Ten3) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(HtpError::shape(op, format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    Ok(())
}

/// `y_t = √ᾱ_t·y0 + √(1−ᾱ_t)·ε`.
pub fn forward_diffuse(y0: &Ten3, t: usize, eps: &Ten3, sched: &DiffusionSchedule) -> Result<Ten3> {
    same_shape("forward_diffuse", y0, eps)?;
    if t == 0 {
        return Err(HtpError::invalid("forward_diffuse: timestep 0 is clean data"));
    }
    let ab = sched.alpha_bar(t)?;
    Ok(mix(y0, ab.sqrt(), eps, (1.0 - ab).sqrt()))
}

fn mix(a: &Ten3, ca: f64, b: &Ten3, cb: f64) -> Ten3 {
    let (x, y, z) = a.shape();
    let data = a.data().iter().zip(b.data()).map(|(u, v)| ca * u + cb * v).collect();
    Ten3::new(x, y, z, data).expect("shapes checked by caller")
}

/// `ε̂ = (y_t − √ᾱ_t·ŷ0) / √(1−ᾱ_t)`.
pub fn predict_eps(y_t: &Ten3, y0_hat: &Ten3, t: usize, sched: &DiffusionSchedule) -> Result<Ten3> {
    same_shape("predict_eps", y_t, y0_hat)?;
    eps_from_alpha_bar(y_t, y0_hat, sched.alpha_bar(t)?)
}

fn eps_from_alpha_bar(y_t: &Ten3, y0_hat: &Ten3, ab: f64) -> Result<Ten3> {
    if ab >= 1.0 {
        return Err(HtpError::invalid("predict_eps: ᾱ_t = 1 leaves no noise to recover"));
    }
    let k = 1.0 / (1.0 - ab).sqrt();
    Ok(mix(y_t, k, y0_hat, -ab.sqrt() * k))
}

/// The stochastic DDIM scale `σ_t` between `t` and `t_prev`.
pub fn sigma(alpha_bar_t: f64, alpha_bar_prev: f64) -> f64 {
    let a = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t);
    let b = 1.0 - alpha_bar_t / alpha_bar_prev;
    (a.max(0.0) * b.max(0.0)).sqrt()
}

/// One reverse step from `t` to `t_prev`; `eta` scales `σ_t` (0 is deterministic).
pub fn ddim_step(
    y_t: &Ten3,
    y0_hat: &Ten3,
    t: usize,
    t_prev: usize,
    eta: f64,
    rng: &mut RngStream,
    sched: &DiffusionSchedule,
) -> Result<Ten3> {
    if t_prev >= t {
        return Err(HtpError::invalid(format!("ddim_step: t_prev {t_prev} must be below t {t}")));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(HtpError::invalid(format!("ddim_step: η = {eta} outside [0, 1]")));
    }
    let (ab_t, ab_prev) = (sched.alpha_bar(t)?, sched.alpha_bar(t_prev)?);
    let eps_hat = predict_eps(y_t, y0_hat, t, sched)?;
    let s = eta * sigma(ab_t, ab_prev);
    let mut dir = 1.0 - ab_prev - s * s;
    if dir < 0.0 {
        log::warn!("ddim_step: clamped negative direction variance {dir:e} at t={t}");
        dir = 0.0;
    }
    let mut out = mix(y0_hat, ab_prev.sqrt(), &eps_hat, dir.sqrt());
    if s > 0.0 {
        let (a, b, c) = y_t.shape();
        let noise = gaussian(rng, (a, b, c))?;
        for (o, n) in out.data_mut().iter_mut().zip(noise.data()) {
            *o += s * n;
        }
    }
    Ok(out)
}

/// `round(T·(1 − k/K))`.
pub fn timestep_for_iteration(k: usize, iterations: usize, steps: usize) -> usize {
    debug_assert!(k >= 1 && k <= iterations);
    ((steps as f64) * (1.0 - k as f64 / iterations as f64)).round() as usize
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        CameraModel { fx: 1145.0, fy: 1145.0, cx: 512.0, cy: 515.0 }
    }
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let c = CameraModel { fx, fy, cx, cy };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(HtpError::Config {
                field: "camera",
                reason: format!("focal lengths must be positive, got fx={} fy={}", self.fx, self.fy),
            });
        }
        Ok(())
    }

    /// `None` when the point is not in front of the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<[f64; 2]> {
        (p[2] > 0.0).then(|| [self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy])
    }

    /// Project every joint of a `J × F × 3` pose; points behind the camera become NaN.
    pub fn project_pose(&self, pose: &Ten3) -> Result<Ten3> {
        let (j, f, c) = pose.shape();
        if c != 3 {
            return Err(HtpError::shape("project_pose", "J x F x 3", format!("{:?}", pose.shape())));
        }
        let mut out = Ten3::zeros(j, f, 2);
        for a in 0..j {
            for p in 0..f {
                let uv = self
                    .project([pose.get(a, p, 0), pose.get(a, p, 1), pose.get(a, p, 2)])
                    .unwrap_or([f64::NAN; 2]);
                out.set(a, p, 0, uv[0]);
                out.set(a, p, 1, uv[1]);
            }
        }
        Ok(out)
    }
}

/// `H` candidate pose sequences with the seeds that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisSet {
    pub poses: Vec<Ten3>,
    pub seeds: Vec<u64>,
}

impl HypothesisSet {
    pub fn new(poses: Vec<Ten3>, seeds: Vec<u64>) -> Result<Self> {
        if poses.is_empty() {
            return Err(HtpError::invalid("hypothesis set is empty"));
        }
        if poses.len() != seeds.len() {
            return Err(HtpError::shape("HypothesisSet", poses.len(), seeds.len()));
        }
        if let Some(p) = poses.iter().find(|p| p.shape() != poses[0].shape() || p.shape().2 != 3) {
            return Err(HtpError::shape("HypothesisSet", format!("{:?}", poses[0].shape()), format!("{:?}", p.shape())));
        }
        Ok(HypothesisSet { poses, seeds })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Per-joint selection of the hypothesis with the smallest reprojection error.
///
/// Returns the aggregated pose and the chosen hypothesis per `(joint, frame)`.
pub fn jpma_aggregate(hyps: &HypothesisSet, x2d: &Ten3, cam: &CameraModel) -> Result<(Ten3, Vec<usize>)> {
    let (j, f, _) = hyps.poses[0].shape();
    if x2d.shape() != (j, f, 2) {
        return Err(HtpError::shape("jpma_aggregate", format!("{j}x{f}x2"), format!("{:?}", x2d.shape())));
    }
    let mut out = Ten3::zeros(j, f, 3);
    let mut chosen = Vec::with_capacity(j * f);
    for a in 0..j {
        for p in 0..f {
            let target = [x2d.get(a, p, 0), x2d.get(a, p, 1)];
            let mut best: Option<(f64, usize)> = None;
            for (h, pose) in hyps.poses.iter().enumerate() {
                let Some(uv) = cam.project([pose.get(a, p, 0), pose.get(a, p, 1), pose.get(a, p, 2)]) else {
                    continue;
                };
                let err = (uv[0] - target[0]).hypot(uv[1] - target[1]);
                if best.is_none_or(|(e, _)| err < e) {
                    best = Some((err, h));
                }
            }
            let h = best.map_or(0, |(_, h)| h);
            for c in 0..3 {
                out.set(a, p, c, hyps.poses[h].get(a, p, c));
            }
            chosen.push(h);
        }
    }
    Ok((out, chosen))
}

/// Mean per-joint Euclidean distance, in the input units.
pub fn mpjpe(pred: &Ten3, gt: &Ten3) -> Result<f64> {
    same_shape("mpjpe", pred, gt)?;
    let (j, f, c) = pred.shape();
    if c != 3 {
        return Err(HtpError::shape("mpjpe", "J x F x 3", format!("{:?}", pred.shape())));
    }
    let total: f64 = pred
        .data()
        .chunks_exact(3)
        .zip(gt.data().chunks_exact(3))
        .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt())
        .sum();
    Ok(total / (j * f) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub hypotheses: usize,
    pub iterations: usize,
    pub eta: f64,
}

/// One denoiser call in the reverse chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepInfo {
    pub hypothesis: usize,
    pub iteration: usize,
    pub t: usize,
}

/// Multi-hypothesis DDIM sampling.
///
/// Hypothesis `h` draws from `rng.child(h)`, so results do not depend on
/// evaluation order. `denoise` maps `(step, y_t)` to `ŷ0`.
pub fn sample<D>(
    shape: (usize, usize, usize),
    cfg: &SamplerConfig,
    sched: &DiffusionSchedule,
    rng: &RngStream,
    mut denoise: D,
) -> Result<HypothesisSet>
where
    D: FnMut(StepInfo, &Ten3) -> Result<Ten3>,
{
    if cfg.hypotheses == 0 {
        return Err(HtpError::invalid("sampler needs at least one hypothesis"));
    }
    let mut poses = Vec::with_capacity(cfg.hypotheses);
    let mut seeds = Vec::with_capacity(cfg.hypotheses);
    for h in 0..cfg.hypotheses {
        let (pose, seed) = sample_chain(h, shape, cfg, sched, rng, &mut denoise)?;
        poses.push(pose);
        seeds.push(seed);
    }
    HypothesisSet::new(poses, seeds)
}

/// The reverse chain of a single hypothesis. Returns the pose and its stream seed.
pub fn sample_chain<D>(
    hypothesis: usize,
    shape: (usize, usize, usize),
    cfg: &SamplerConfig,
    sched: &DiffusionSchedule,
    rng: &RngStream,
    mut denoise: D,
) -> Result<(Ten3, u64)>
where
    D: FnMut(StepInfo, &Ten3) -> Result<Ten3>,
{
    if cfg.iterations == 0 {
        return Err(HtpError::invalid("sampler needs at least one iteration"));
    }
    let steps = sched.steps();
    let mut r = rng.child(hypothesis as u64);
    let seed = r.seed();
    let mut y = gaussian(&mut r, shape)?;
    let mut t = steps;
    for k in 1..=cfg.iterations {
        let t_prev = timestep_for_iteration(k, cfg.iterations, steps);
        let y0_hat = denoise(StepInfo { hypothesis, iteration: k, t }, &y)?;
        if t_prev >= t {
            // Rounding can repeat a grid point when K > T; keep the estimate.
            continue;
        }
        y = ddim_step(&y, &y0_hat, t, t_prev, cfg.eta, &mut r, sched)?;
        t = t_prev;
    }
    Ok((y, seed))
}
