//! Per-joint hypothesis selection by reprojection error.
//!
//! Run with `cargo run --example jpma_aggregation`.

use htp::diffusion::{jpma_aggregate, mpjpe, HypothesisSet};
use htp::rng::RngStream;
use htp::synth::{generate_synthetic, SynthOptions};
use htp::tensor::Ten3;

fn main() -> htp::Result<()> {
    let opts = SynthOptions::default();
    let seq = generate_synthetic(17, 20, 5, &opts)?;
    let mut rng = RngStream::new(6);

    // Hypotheses are the true pose plus noise of growing scale.
    let poses: Vec<Ten3> = (0..8)
        .map(|h| {
            let s = 10.0 * (h + 1) as f64;
            let mut p = seq.poses_3d.clone();
            p.data_mut().iter_mut().for_each(|v| *v += s * rng.normal());
            p
        })
        .collect();
    for (h, p) in poses.iter().enumerate() {
        println!("hypothesis {h}: MPJPE {:.1} mm", mpjpe(p, &seq.poses_3d)?);
    }
    let set = HypothesisSet::new(poses, (0..8).collect())?;
    let (agg, chosen) = jpma_aggregate(&set, &seq.poses_2d, &opts.camera)?;
    println!("aggregated:   MPJPE {:.1} mm", mpjpe(&agg, &seq.poses_3d)?);
    let mut counts = [0usize; 8];
    chosen.iter().for_each(|&h| counts[h] += 1);
    println!("picks per hypothesis: {counts:?}");
    Ok(())
}
