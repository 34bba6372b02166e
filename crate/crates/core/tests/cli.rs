use facevox::checkpoint::Checkpoint;
use facevox::geometry::LandmarkSet;
use facevox::network::Network;
use facevox::volumetric::{decode_peaks, peak_value, VoxelGrid};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn facevox(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_facevox"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(args: &[&str]) {
    let out = facevox(args);
    assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

/// Writes a short training config and an 8-sample synthetic dataset.
fn setup(dir: &Path, extra: &str) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    ok(&["synth", "--out", s(&data), "--count", "8", "--seed", "3"]);
    let config = dir.join("run.cfg");
    fs::write(&config, format!("epochs_pretrain=1\nepochs_finetune=1\nbatch_size=4\n{extra}")).unwrap();
    (data, config)
}

fn footer_value(report: &str, key: &str) -> f64 {
    report
        .lines()
        .filter(|l| l.starts_with('#'))
        .flat_map(|l| l.trim_start_matches('#').split_whitespace())
        .find_map(|f| f.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing"))
        .parse()
        .unwrap()
}

#[test]
fn usage_and_missing_files_exit_with_two() {
    assert_eq!(code(&facevox(&[])), 2);
    assert_eq!(code(&facevox(&["encode", "--out", "x.vox"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.pts3");
    let out = dir.path().join("g.vox");
    assert_eq!(code(&facevox(&["encode", "--input", s(&missing), "--out", s(&out)])), 2);
    assert_eq!(code(&facevox(&["train", "--data", s(&missing), "--out", s(dir.path())])), 2);
}

#[test]
fn malformed_input_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let pts = dir.path().join("bad.pts3");
    fs::write(&pts, "1 2\n").unwrap();
    let out = dir.path().join("g.vox");
    assert_eq!(code(&facevox(&["encode", "--input", s(&pts), "--out", s(&out)])), 1);
}

#[test]
fn encode_writes_a_decodable_grid_and_projections() {
    let dir = tempfile::tempdir().unwrap();
    let pts = dir.path().join("lm.pts3");
    let lm = LandmarkSet::new(vec![[3.0, 4.0, 5.0], [11.5, 9.0, 2.0], [6.0, 12.0, 12.25]], "custom").unwrap();
    lm.write(&pts).unwrap();
    let out = dir.path().join("lm.vox");
    ok(&["encode", "--input", s(&pts), "--out", s(&out), "--render"]);
    let grid = VoxelGrid::load(&out).unwrap();
    assert_eq!(grid.dims(), [16, 16, 16]);
    let found = decode_peaks(&grid, 0.1 * peak_value(1.0), 3.0);
    assert_eq!(found.len(), 3);
    for axis in ["x", "y", "z"] {
        assert!(dir.path().join(format!("lm.mip_{axis}.png")).exists(), "{axis}");
    }
}

#[test]
fn train_evaluate_predict_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = setup(dir.path(), "");
    let run_a = dir.path().join("a");
    ok(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&run_a), "--seed", "5"]);
    for stage in ["pretrain-voxel", "pretrain-coord", "finetune"] {
        let log = fs::read_to_string(run_a.join(format!("{stage}.log"))).unwrap();
        assert_eq!(log.lines().filter(|l| !l.starts_with('#')).count(), 2, "{stage}");
        assert!(run_a.join(format!("{stage}.ckpt")).exists());
    }
    let model = run_a.join("model.ckpt");
    assert!(run_a.join("last_good.ckpt").exists());

    // Same seed, same bytes.
    let run_b = dir.path().join("b");
    ok(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&run_b), "--seed", "5"]);
    assert_eq!(fs::read(&model).unwrap(), fs::read(run_b.join("model.ckpt")).unwrap());

    // Ground truth scored against itself.
    let report = dir.path().join("self.txt");
    ok(&["evaluate", "--predictions", s(&data), "--data", s(&data), "--out", s(&report)]);
    let text = fs::read_to_string(&report).unwrap();
    assert_eq!(footer_value(&text, "gte_mean"), 0.0);
    assert_eq!(footer_value(&text, "nme_mean"), 0.0);
    let ced = fs::read_to_string(report.with_extension("ced")).unwrap();
    assert!(ced.lines().filter(|l| !l.starts_with('#')).all(|l| l.ends_with(" 1")));

    let scored = dir.path().join("model.txt");
    ok(&["evaluate", "--checkpoint", s(&model), "--data", s(&data), "--out", s(&scored)]);
    assert!(footer_value(&fs::read_to_string(&scored).unwrap(), "gte_mean").is_finite());

    let image = data.join("syn0.img");
    let p1 = dir.path().join("p1.pts3");
    let p2 = dir.path().join("p2.pts3");
    ok(&["predict", "--checkpoint", s(&model), "--image", s(&image), "--out", s(&p1), "--render"]);
    ok(&["predict", "--checkpoint", s(&model), "--image", s(&image), "--out", s(&p2)]);
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    assert_eq!(LandmarkSet::read(&p1).unwrap().len(), 12);
    assert!(dir.path().join("p1.overlay.png").exists() && dir.path().join("p1.panel.png").exists());
}

#[test]
fn voxel_stage_alone_only_changes_the_hourglass() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = setup(dir.path(), "");
    let run = dir.path().join("run");
    ok(&[
        "train", "--config", s(&config), "--data", s(&data), "--out", s(&run), "--seed", "8", "--stage", "pretrain-voxel",
    ]);
    assert!(!run.join("pretrain-coord.log").exists());
    let ck = Checkpoint::load(&run.join("pretrain-voxel.ckpt")).unwrap();
    let fresh = Network::new(ck.config.model.clone()).unwrap().init_state(8);
    let moved: Vec<&String> = ck
        .state
        .names
        .iter()
        .zip(ck.state.params.iter().zip(&fresh.params))
        .filter(|(_, (a, b))| a != b)
        .map(|(n, _)| n)
        .collect();
    assert!(!moved.is_empty() && moved.iter().all(|n| n.starts_with("g.")));
    // Fine-tuning straight after voxel pre-training is refused.
    let out = facevox(&[
        "train", "--config", s(&config), "--data", s(&data), "--out", s(&dir.path().join("ft")), "--stage", "finetune",
        "--resume", s(&run.join("pretrain-voxel.ckpt")),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn divergence_exits_with_three_and_keeps_last_good() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = setup(dir.path(), "lr_initial=1e300\nepochs_pretrain=3\n");
    let run = dir.path().join("run");
    let out = facevox(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&run)]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    let ck = Checkpoint::load(&run.join("last_good.ckpt")).unwrap();
    assert!(ck.state.is_finite());
    assert!(!run.join("model.ckpt").exists());
}
