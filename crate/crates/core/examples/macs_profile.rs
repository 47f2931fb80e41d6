//! MAC profile of the full-size denoiser next to its unpruned counterpart.
//!
//! Run with `cargo run --example macs_profile`.

use htp::denoiser::DenoiserConfig;
use htp::macs::{compare_to_dense, render_table, MacsReport};

fn main() -> htp::Result<()> {
    let cfg = DenoiserConfig::full_scale(17, 243);
    let train = compare_to_dense(&cfg, 1, 1)?;
    print!("{}", render_table(&train));
    println!(
        "single pass: htp {:.1} G, dense {:.1} G (2xMAC)",
        MacsReport::published_g(train.htp.single_pass),
        MacsReport::published_g(train.dense.single_pass)
    );

    // Inference uses a single sparse block before pruning.
    let infer_cfg = DenoiserConfig { sparse_blocks: 1, ..cfg };
    for k in [1, 5, 10] {
        let c = compare_to_dense(&infer_cfg, 20, k)?;
        println!(
            "H=20 K={k:<2}  htp {:>8.1} G  dense {:>8.1} G  reduction {:.1}%",
            MacsReport::published_g(c.htp.inference_total),
            MacsReport::published_g(c.dense.inference_total),
            100.0 * c.reduction_vs_dense
        );
    }
    Ok(())
}
