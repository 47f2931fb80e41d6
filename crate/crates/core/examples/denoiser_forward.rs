//! One forward pass of a reduced-width denoiser and its unpruned reference.
//!
//! Run with `cargo run --release --example denoiser_forward`.

use htp::denoiser::{dense_reference_forward, denoise_forward, DenoiserConfig, DenoiserParams};
use htp::rng::{gaussian, RngStream};

fn main() -> htp::Result<()> {
    let cfg = DenoiserConfig { dim: 64, retained: 12, eta: 18, ..DenoiserConfig::full_scale(17, 54) };
    let params = DenoiserParams::init(&cfg, 1)?;
    let mut rng = RngStream::new(2);
    let y_t = gaussian(&mut rng, (17, 54, 3))?;
    let x = gaussian(&mut rng, (17, 54, 2))?;

    let out = denoise_forward(&y_t, &x, 500, &cfg, &params)?;
    println!("y0_hat {:?}", out.y0_hat.shape());
    println!("retained frames {:?}", out.retained.indices());
    println!("sparse attention support {} pairs over {} layers", out.sparse_support, 1 + cfg.sparse_blocks);

    // With every frame kept and every pair attended, the pruned network is the dense one.
    let dense = cfg.dense_counterpart();
    let a = denoise_forward(&y_t, &x, 500, &dense, &params)?.y0_hat;
    let b = dense_reference_forward(&y_t, &x, 500, &dense, &params)?;
    println!("dense-degenerate max diff {:.1e}", a.max_abs_diff(&b));
    Ok(())
}
