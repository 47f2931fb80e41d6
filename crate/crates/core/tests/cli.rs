use std::path::Path;
use std::process::{Command, Output};

use htp::htp1::Tensor;
use htp::poses::PoseFile;

fn htp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_htp")).args(args).current_dir(dir).output().unwrap()
}

const SMALL: [&str; 16] = [
    "--frames", "24", "--dim", "16", "--retained", "6", "--eta", "4", "--heads", "2", "--blocks", "4", "--sparse-blocks", "1",
    "--seed", "3",
];

fn generate(dir: &Path) {
    let out = htp(dir, &[&["generate"][..], &SMALL, &["--out-dir", "data"]].concat());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn generate_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate(a.path());
    generate(b.path());
    for f in ["data/poses_3d.csv", "data/poses_2d.csv"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
    let p = PoseFile::read_file(a.path().join("data/poses_3d.csv")).unwrap();
    assert_eq!(p.poses.shape(), (17, 24, 3));
}

#[test]
fn infer_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path());
    let args = [
        &["infer"][..],
        &SMALL,
        &["-H", "2", "-K", "2", "-T", "100", "--input", "data/poses_2d.csv", "--gt", "data/poses_3d.csv"],
        &["--output", "pred.csv", "--emit-retained", "r.json", "--mask-out", "m.htp1"],
    ]
    .concat();
    let out = htp(dir.path(), &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("denoiser calls: 4"), "{stdout}");
    assert!(stdout.contains("mpjpe:"));

    assert_eq!(PoseFile::read_file(dir.path().join("pred.csv")).unwrap().poses.shape(), (17, 24, 3));
    let records: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("r.json")).unwrap()).unwrap();
    let records = records.as_array().unwrap();
    assert_eq!(records.len(), 4);
    assert_eq!(records[0]["t"], 100);
    assert_eq!(records[1]["t"], 50);
    assert_eq!(records[0]["indices"].as_array().unwrap().len(), 6);
    let mask = Tensor::read_file(dir.path().join("m.htp1")).unwrap();
    assert_eq!(mask.dims, vec![17, 24, 24]);
}

#[test]
fn oracle_stub_returns_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path());
    let args = [
        &["infer"][..],
        &SMALL,
        &["-H", "3", "-K", "10", "--eta-ddim", "0", "--input", "data/poses_2d.csv"],
        &["--oracle-y0", "data/poses_3d.csv", "--output", "pred.csv"],
    ]
    .concat();
    let out = htp(dir.path(), &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let pred = PoseFile::read_file(dir.path().join("pred.csv")).unwrap().poses;
    let gt = PoseFile::read_file(dir.path().join("data/poses_3d.csv")).unwrap().poses;
    assert!(pred.max_abs_diff(&gt) < 1e-6);
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"dim": 16, "heads": 2, "hypotheses": 4, "iterations": 3}"#).unwrap();
    let out = htp(dir.path(), &["profile", "--config", "c.json", "-K", "7"]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("inference (H=4, K=7)"), "{stdout}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"dim": 16, "unknown_key": 1}"#).unwrap();
    let out = htp(dir.path(), &["profile", "--config", "bad.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown_key"));

    let out = htp(dir.path(), &["profile", "--retained", "500"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`retained`"));

    let out = htp(dir.path(), &["infer", "--dim", "16", "--heads", "2", "--input", "missing.csv"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.csv"));

    std::fs::write(dir.path().join("broken.csv"), "frame,joint,u,v\n0,0,1\n").unwrap();
    let out = htp(dir.path(), &["infer", "--dim", "16", "--heads", "2", "--input", "broken.csv"]);
    assert_eq!(out.status.code(), Some(3));

    let out = htp(dir.path(), &["infer", "--dim", "16", "--heads", "2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_passes() {
    let out = htp(Path::new("."), &["verify"]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(out.status.success(), "{stdout}");
    assert!(stdout.contains("0 failed"));
    assert!(!stdout.contains("FAIL"));
}
