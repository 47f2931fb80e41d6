//! Sparse-focused temporal attention: masked pairs get exactly zero weight.
//!
//! Run with `cargo run --example sft_attention`.

use htp::attention::{attention_probs, sft_mhsa, to_additive_mask, AttnWeights, LayerNormParams};
use htp::rng::RngStream;
use htp::tcep::build_mask;
use htp::tensor::Ten3;

fn main() -> htp::Result<()> {
    let (frames, dim, heads) = (8, 16, 4);
    let mut rng = RngStream::new(3);
    let y = Ten3::from_fn(1, frames, dim, |_, _, _| rng.normal());
    let mask = build_mask(&y, 1)?;
    let additive = to_additive_mask(&mask)?;
    let w = AttnWeights::random(&mut rng, dim, heads)?;
    let norm = LayerNormParams::identity(dim);

    let out = sft_mhsa(&y, &additive, &w, &norm)?;
    println!("output shape {:?}", out.shape());

    let x = norm.apply(&y.slice0(0))?;
    let probs = attention_probs(&x, &x, &w, Some(additive.as_ten3().block(0)))?;
    println!("head 0 attention weights (rows sum to 1):");
    for p in 0..frames {
        let row: Vec<String> = probs[0].row(p).iter().map(|v| format!("{v:.2}")).collect();
        println!("  {}", row.join(" "));
    }
    Ok(())
}
