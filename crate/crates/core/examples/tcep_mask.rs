//! Build a top-η temporal mask from frame tokens and refine them with it.
//!
//! Run with `cargo run --example tcep_mask`.

use htp::rng::RngStream;
use htp::tcep::{build_mask, tcep_refine, TcepParams, TemporalAdjacency};
use htp::tensor::{Mat, Ten3};

fn main() -> htp::Result<()> {
    let (joints, frames, dim, eta) = (2, 12, 8, 2);
    let mut rng = RngStream::new(7);
    let tokens = Ten3::from_fn(joints, frames, dim, |_, _, _| rng.normal());

    let mask = build_mask(&tokens, eta)?;
    println!("joint 0 mask (eta = {eta}):");
    for p in 0..frames {
        let row: String = (0..frames).map(|q| if mask.as_ten3().get(0, p, q) == 1.0 { '#' } else { '.' }).collect();
        println!("  {row}");
    }
    println!("support per joint: {:.1} of {}", mask.support_total() as f64 / joints as f64, frames * frames);

    let adj = TemporalAdjacency::new(htp::tcep::chain_adjacency(frames), Mat::zeros(frames, frames))?;
    let params = TcepParams { weight: rng.uniform_mat(dim, dim, 0.3), eta };
    let (refined, _) = tcep_refine(&tokens, &adj, &params)?;
    println!("mean |refined - input|: {:.4}", mean_abs_diff(&refined, &tokens));
    Ok(())
}

fn mean_abs_diff(a: &Ten3, b: &Ten3) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data().len() as f64
}
