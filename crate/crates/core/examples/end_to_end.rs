//! Synthetic data to lifted 3D poses with a small seeded network.
//!
//! Run with `cargo run --release --example end_to_end`.

use htp::config::RunConfig;
use htp::pipeline::{generate, infer, initial_params, Denoiser, InferOptions};

fn main() -> htp::Result<()> {
    let cfg = RunConfig {
        frames: 27,
        dim: 32,
        retained: 9,
        eta: 6,
        heads: 4,
        hypotheses: 5,
        iterations: 3,
        seed: 1,
        ..Default::default()
    };
    let seq = generate(&cfg)?;
    let net = Denoiser::Network(initial_params(&cfg)?);
    let r = infer(&cfg, &seq.poses_2d, Some(&seq.poses_3d), &net, &InferOptions::default())?;
    println!("{} denoiser calls in {:.2} s", r.denoiser_calls, r.elapsed.as_secs_f64());
    println!("untrained weights, MPJPE {:.1} mm", r.mpjpe_mm.unwrap_or(f64::NAN));
    println!("first call kept frames {:?}", r.retained[0].indices);

    // An exact denoiser with a deterministic sampler returns the ground truth.
    let exact = RunConfig { eta_ddim: 0.0, ..cfg.clone() };
    let r = infer(&exact, &seq.poses_2d, Some(&seq.poses_3d), &Denoiser::Oracle(seq.poses_3d.clone()), &InferOptions::default())?;
    println!("oracle denoiser, MPJPE {:.2e} mm", r.mpjpe_mm.unwrap_or(f64::NAN));
    Ok(())
}
