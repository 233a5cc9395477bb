use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use oponerf_core::checkpoint::Checkpoint;
use oponerf_core::config::TrainConfig;
use oponerf_core::model::Model;
use oponerf_core::raster::Image;

fn oponerf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oponerf"))
        .args(args)
        .env("OPONERF_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = oponerf(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A 24x24 scene keeps CLI round trips fast.
fn small_scene(dir: &Path) {
    ok(&["scene-gen", "--out", p(dir), "--width", "24", "--height", "24"]);
}

fn small_config(dir: &Path, iterations: usize) -> std::path::PathBuf {
    let config = TrainConfig {
        iterations,
        rays: 32,
        samples: 8,
        grid_x: 12,
        grid_y: 12,
        depth_planes: 4,
        channels: 8,
        ..TrainConfig::default()
    };
    let path = dir.join("config.toml");
    fs::write(&path, config.to_toml()).unwrap();
    path
}

#[test]
fn scene_gen_writes_21_views_deterministically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(&["scene-gen", "--out", p(a.path())]);
    ok(&["scene-gen", "--out", p(b.path())]);
    let pngs: Vec<_> = fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|f| f.extension().is_some_and(|x| x == "png"))
        .collect();
    assert_eq!(pngs.len(), 21);
    for f in &pngs {
        let img = Image::load(f).unwrap();
        assert_eq!((img.width(), img.height()), (48, 48));
        assert_eq!(fs::read(f).unwrap(), fs::read(b.path().join(f.file_name().unwrap())).unwrap());
    }
    for name in ["scene.toml", "rig.toml"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
    }
    assert!(!oponerf(&["scene-gen", "--out", p(a.path()), "--count", "0"]).status.success());
}

#[test]
fn defaults_round_trip_and_bad_configs_are_rejected() {
    let text = ok(&["train", "--print-defaults"]);
    assert_eq!(TrainConfig::from_toml(&text, "stdout").unwrap(), TrainConfig::default());

    let dir = tempfile::tempdir().unwrap();
    small_scene(dir.path());
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, text.replace("rays = 128", "rays = \"many\"")).unwrap();
    let out = oponerf(&["train", "--data", p(dir.path()), "--out", p(&dir.path().join("o")), "--config", p(&bad)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("rays"), "{err}");

    let out = oponerf(&["train", "--data", p(&dir.path().join("missing")), "--out", p(&dir.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));
}

#[test]
fn zero_iterations_checkpoint_is_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    small_scene(dir.path());
    let cfg = small_config(dir.path(), 0);
    let out = dir.path().join("run");
    ok(&["train", "--data", p(dir.path()), "--out", p(&out), "--config", p(&cfg), "--seed", "4"]);
    let ckpt = Checkpoint::load(&out.join("checkpoint.opo")).unwrap();
    assert_eq!(ckpt.iteration, 0);
    let config = TrainConfig::load(&cfg).map(|c| TrainConfig { seed: 4, ..c }).unwrap();
    assert_eq!(ckpt.model().unwrap().params, Model::init(&config).unwrap().params);
    assert_eq!(fs::read_to_string(out.join("loss.csv")).unwrap().lines().count(), 0);
}

#[test]
fn train_render_eval_bench_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path();
    small_scene(data);
    let cfg = small_config(data, 30);
    let run = data.join("run");
    ok(&["train", "--data", p(data), "--out", p(&run), "--config", p(&cfg)]);
    let csv = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 31);
    let ckpt = run.join("checkpoint.opo");

    let renders = data.join("renders");
    ok(&["render", "--checkpoint", p(&ckpt), "--data", p(data), "--out", p(&renders), "--views", "2,7"]);
    assert!(renders.join("view_07.png").exists());

    let same = ok(&["eval", p(&data.join("view_03.png")), p(&data.join("view_03.png"))]);
    assert!(same.contains("PSNR 99.0000 dB") && same.contains("SSIM 1.000000"), "{same}");
    let scores = ok(&["eval", p(&renders), p(data)]);
    assert_eq!(scores.lines().count(), 3);

    let bench = data.join("bench");
    let out = oponerf(&["bench", "--checkpoint", p(&ckpt), "--data", p(data), "--out", p(&bench), "--protocol", "wobble"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown protocol"));
    let table = ok(&["bench", "--checkpoint", p(&ckpt), "--data", p(data), "--out", p(&bench), "--protocol", "noise"]);
    assert!(table.contains("feature sigma 0.3"));
    assert!(bench.join("report.csv").exists() && bench.join("report.txt").exists());
    assert!(bench.join("images/noise_s00_v02.png").exists());
    assert!(bench.join("images/noise_s03_v17_gt.png").exists());

    let missing = oponerf(&["render", "--checkpoint", p(&data.join("nope.opo")), "--data", p(data), "--out", p(&renders)]);
    assert!(!missing.status.success());
}

#[test]
fn ablate_prints_trial_configs() {
    let text = ok(&["ablate", "--trial", "8"]);
    let c = TrainConfig::from_toml(&text, "stdout").unwrap();
    assert_eq!(c, TrainConfig { diversity_weight: 0.0, ..TrainConfig::default() });
    assert!(!oponerf(&["ablate", "--trial", "3"]).status.success());
}

#[test]
fn gradcheck_passes_on_fresh_init() {
    let out = ok(&["--threads", "1", "gradcheck"]);
    assert!(out.contains("all gradient checks passed"), "{out}");
}
