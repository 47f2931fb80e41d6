//! DDIM reverse chains with an exact denoiser, deterministic and stochastic.
//!
//! Run with `cargo run --example ddim_sampling`.

use htp::diffusion::{sample, DiffusionSchedule, SamplerConfig, ScheduleKind};
use htp::rng::{gaussian, RngStream};

fn main() -> htp::Result<()> {
    let sched = DiffusionSchedule::new(1000, ScheduleKind::Linear)?;
    println!("alpha_bar(T) = {:.3e}", sched.alpha_bar(1000)?);
    let y0 = gaussian(&mut RngStream::new(1), (17, 9, 3))?;

    for eta in [0.0, 1.0] {
        for k in [1, 5, 10] {
            let cfg = SamplerConfig { hypotheses: 3, iterations: k, eta };
            let set = sample(y0.shape(), &cfg, &sched, &RngStream::new(2), |_, _| Ok(y0.clone()))?;
            let worst = set.poses.iter().map(|p| p.max_abs_diff(&y0)).fold(0.0, f64::max);
            println!("eta={eta} K={k:<2} max |y - y0| = {worst:.3e}");
        }
    }
    Ok(())
}
