//! Seeded synthetic sequences written as pose CSVs.
//!
//! Run with `cargo run --example synthetic_data -- <out-dir>`.

use std::path::PathBuf;

use htp::poses::PoseFile;
use htp::synth::{generate_synthetic, MotionKind, SynthOptions};

fn main() -> htp::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synthetic".into()));
    std::fs::create_dir_all(&dir)?;
    for motion in [MotionKind::Static, MotionKind::WalkCycle, MotionKind::RandomSmooth] {
        let opts = SynthOptions { motion, pixel_noise: 1.0, ..Default::default() };
        let seq = generate_synthetic(17, 81, 42, &opts)?;
        let name = format!("{motion:?}").to_lowercase();
        PoseFile::new(seq.poses_3d.clone())?.write_file(dir.join(format!("{name}_3d.csv")))?;
        PoseFile::new(seq.poses_2d)?.write_file(dir.join(format!("{name}_2d.csv")))?;
        let z: Vec<f64> = (0..81).map(|p| seq.poses_3d.get(0, p, 2)).collect();
        println!("{name:<12} root depth {:.0}..{:.0} mm", z.iter().cloned().fold(f64::MAX, f64::min), z.iter().cloned().fold(0.0, f64::max));
    }
    println!("wrote CSVs to {}", dir.display());
    Ok(())
}
