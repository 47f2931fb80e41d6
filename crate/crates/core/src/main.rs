//! `htp` command-line front end.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use htp::config::RunConfig;
use htp::diffusion::ScheduleKind;
use htp::macs::{render_table, MacsReport};
use htp::pipeline::{initial_params, run_generate, run_infer, run_profile, save_params, InferArtifacts};
use htp::synth::MotionKind;
use htp::verify::{run_verify, VerifyOptions};
use htp::Result;

#[derive(Parser)]
#[command(name = "htp", version, about = "Pruned diffusion 3D pose lifting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic sequence (poses_3d.csv, poses_2d.csv).
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Also write the seeded initial weights as a checkpoint.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Lift 2D keypoints to 3D with multi-hypothesis DDIM sampling.
    Infer {
        #[command(flatten)]
        common: Common,
        /// 2D keypoint CSV (pixels).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Ground-truth 3D CSV (mm) for MPJPE and the root trajectory.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Write the retained frame indices of every call as JSON.
        #[arg(long)]
        emit_retained: Option<PathBuf>,
        /// Write the first temporal mask as an HTP1 tensor.
        #[arg(long)]
        mask_out: Option<PathBuf>,
        /// Replace the network with a stub that always predicts this 3D CSV.
        #[arg(long)]
        oracle_y0: Option<PathBuf>,
        /// Sampler threads; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        threads: usize,
        /// Print the wall-clock time.
        #[arg(long)]
        time: bool,
    },
    /// Analytic MAC count against the unpruned network.
    Profile {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run the oracle and invariant suites.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Flags that override the JSON config.
#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    joints: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    retained: Option<usize>,
    #[arg(long)]
    eta: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    sparse_blocks: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    knn: Option<usize>,
    #[arg(short = 'H', long)]
    hypotheses: Option<usize>,
    #[arg(short = 'K', long)]
    iterations: Option<usize>,
    #[arg(short = 'T', long)]
    steps: Option<usize>,
    #[arg(long, value_parser = parse_schedule)]
    schedule: Option<ScheduleKind>,
    #[arg(long)]
    eta_ddim: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    motion: Option<MotionKind>,
    #[arg(long)]
    pixel_noise: Option<f64>,
}

fn parse_schedule(s: &str) -> std::result::Result<ScheduleKind, String> {
    match s {
        "linear" => Ok(ScheduleKind::Linear),
        "cosine" => Ok(ScheduleKind::Cosine),
        other => Err(format!("unknown schedule `{other}` (linear, cosine)")),
    }
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(joints, frames, dim, retained, eta, blocks, sparse_blocks, heads, tau, knn);
        set!(hypotheses, iterations, steps, schedule, eta_ddim, seed, motion, pixel_noise);
        c.validate()?;
        Ok(c)
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate { common, out_dir, weights } => {
            let cfg = common.load()?;
            let (p3, p2) = run_generate(&cfg, &out_dir)?;
            println!("3d: {}\n2d: {}", p3.display(), p2.display());
            if let Some(path) = weights {
                save_params(&initial_params(&cfg)?, &path)?;
                println!("weights: {}", path.display());
            }
        }
        Command::Infer { common, input, gt, output, checkpoint, emit_retained, mask_out, oracle_y0, threads, time } => {
            let mut cfg = common.load()?;
            cfg.input_2d = input.or(cfg.input_2d);
            cfg.ground_truth = gt.or(cfg.ground_truth);
            cfg.output = output.or(cfg.output);
            cfg.checkpoint = checkpoint.or(cfg.checkpoint);
            let extra = InferArtifacts { retained_json: emit_retained, mask_htp1: mask_out, oracle_y0, threads };
            let r = run_infer(&cfg, &extra)?;
            println!("hypotheses: {}  denoiser calls: {}", r.hypotheses.len(), r.denoiser_calls);
            if let Some(e) = r.mpjpe_mm {
                println!("mpjpe: {e:.3} mm");
            }
            if time {
                eprintln!("elapsed: {:.2} s", r.elapsed.as_secs_f64());
            }
        }
        Command::Profile { common, json } => {
            let cfg = common.load()?;
            let c = run_profile(&cfg)?;
            print!("{}", render_table(&c));
            println!(
                "single pass: htp {:.1} G, dense {:.1} G ({:.1}% fewer)",
                MacsReport::published_g(c.htp.single_pass),
                MacsReport::published_g(c.dense.single_pass),
                c.reduction_vs_dense * 100.0
            );
            println!(
                "inference (H={}, K={}): htp {:.1} G, dense {:.1} G",
                cfg.hypotheses,
                cfg.iterations,
                MacsReport::published_g(c.htp.inference_total),
                MacsReport::published_g(c.dense.inference_total)
            );
            if let Some(path) = json {
                std::fs::write(&path, serde_json::to_string_pretty(&c)?).map_err(|e| htp::HtpError::io_at(&path, e))?;
            }
        }
        Command::Verify { seed } => {
            let report = run_verify(&VerifyOptions { seed, ..Default::default() });
            print!("{}", report.render());
            return Ok(report.all_passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
