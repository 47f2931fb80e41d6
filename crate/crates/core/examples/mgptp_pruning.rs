//! Density-peak frame pruning on a sequence with three clusters of frames.
//!
//! Run with `cargo run --example mgptp_pruning`.

use htp::mgptp::{mgptp, MgptpParams};
use htp::rng::RngStream;
use htp::tcep::build_mask;
use htp::tensor::Ten3;

fn main() -> htp::Result<()> {
    let (joints, frames, dim) = (3, 24, 4);
    let mut rng = RngStream::new(11);
    // Frames 0..8, 8..16 and 16..24 sit around three different centres.
    let centres: Vec<Vec<f64>> = (0..3).map(|_| (0..dim).map(|_| 4.0 * rng.normal()).collect()).collect();
    let tokens = Ten3::from_fn(joints, frames, dim, |_, p, c| centres[p / 8][c] + 0.3 * rng.normal());

    let mask = build_mask(&tokens, 6)?;
    let params = MgptpParams { tau: 0.5, k: 3, retained: 6 };
    let (kept, sel, cluster) = mgptp(&tokens, &mask, &params)?;

    println!("frame  density  response  separation  score");
    let scores = cluster.scores();
    for p in 0..frames {
        let mark = if sel.indices().contains(&p) { "*" } else { " " };
        println!(
            "{p:>4}{mark}  {:.4}   {:.5}   {:.4}      {:.6}",
            cluster.density[p], cluster.response[p], cluster.separation[p], scores[p]
        );
    }
    println!("retained {:?} -> tokens {:?}", sel.indices(), kept.shape());
    Ok(())
}
