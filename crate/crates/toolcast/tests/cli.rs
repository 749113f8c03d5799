use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use toolcast::run::ForecastOverlay;

const TINY: &str = r#"
[scene]
n_videos = 6
frames_per_video = 150
instrument_speed = 0.03
seed = 4

[net]
seq_len = 8
n_layers = 1
ff_dim = 40
fc_dims = [32, 24, 20]
horizon = 4
dropout = 0.0

[optim]
peak_lr = 0.001
warmup_epochs = 1
total_epochs = 2
batch_size = 16

[windows]
train_stride = 4
eval_stride = 2

[eval]
horizons = [4]
"#;

fn toolcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_toolcast")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let data = root.join("data");
    let out = toolcast(&["--config", s(&config), "generate", "--out", s(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    Fixture {
        _dir: dir,
        root,
        config,
        data,
    }
}

fn train(fx: &Fixture, name: &str, extra: &[&str]) -> PathBuf {
    let run = fx.root.join(name);
    let mut args = vec!["--config", s(&fx.config), "train", "--dataset", s(&fx.data), "--run-dir", s(&run)];
    args.extend_from_slice(extra);
    let out = toolcast(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    run.join("model.tckp")
}

#[test]
fn full_pipeline_runs() {
    let fx = fixture();
    let describe = toolcast(&["describe", "--dataset", s(&fx.data), "--window", "8"]);
    assert!(describe.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&describe.stdout).unwrap();
    assert_eq!(summary["videos"], 6);

    let with = train(&fx, "with", &[]);
    let without = train(&fx, "without", &["--no-anatomy"]);
    let report = fs::read_to_string(fx.root.join("with/report.csv")).unwrap();
    assert_eq!(report.lines().count(), 3);
    assert!(fx.root.join("with/checkpoints/latest.tckp").exists());

    let eval_dir = fx.root.join("ablation");
    let out = toolcast(&[
        "--config",
        s(&fx.config),
        "ablate",
        "--dataset",
        s(&fx.data),
        "--run-dir",
        s(&eval_dir),
        "--checkpoint",
        s(&with),
        "--checkpoint",
        s(&without),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("Anatomy+Instrument") && text.contains("Instrument only") && text.contains("Random"));
    let table: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval_dir.join("accuracy.json")).unwrap()).unwrap();
    assert_eq!(table["cells"].as_array().unwrap().len(), 9);
    let predictions = fs::read_to_string(eval_dir.join("predictions.csv")).unwrap();
    assert!(predictions.starts_with("video_id,t,variant,horizon,gt_displacement8"));

    // ablate refuses a single variant, evaluate accepts it
    let one = toolcast(&["ablate", "--dataset", s(&fx.data), "--run-dir", s(&eval_dir), "--checkpoint", s(&with)]);
    assert_eq!(code(&one), 2);
    let one = toolcast(&["evaluate", "--dataset", s(&fx.data), "--run-dir", s(&fx.root.join("single")), "--checkpoint", s(&with)]);
    assert!(one.status.success(), "{}", String::from_utf8_lossy(&one.stderr));
}

#[test]
fn flags_override_the_config_file() {
    let fx = fixture();
    let run = fx.root.join("run");
    let out = toolcast(&[
        "--config",
        s(&fx.config),
        "train",
        "--dataset",
        s(&fx.data),
        "--run-dir",
        s(&run),
        "--epochs",
        "1",
        "--lr",
        "0.0005",
    ]);
    assert!(out.status.success());
    let cfg = toolcast::config::RunConfig::load(&run.join("run.toml")).unwrap();
    assert_eq!(cfg.optim.total_epochs, 1);
    assert_eq!(cfg.optim.peak_lr, 0.0005);
    assert_eq!(cfg.optim.batch_size, 16);
    assert_eq!(cfg.net.seq_len, 8);
}

#[test]
fn forecast_reconstructs_centers() {
    let fx = fixture();
    let model = train(&fx, "run", &[]);
    let ds = toolcast::dataset::load_dataset(&fx.data).unwrap();
    let v = ds.video("video_0000").unwrap();
    let t = (20..140).find(|&t| (t..=t + 4).all(|i| v.frames()[i].instrument().is_some())).unwrap();
    let out_dir = fx.root.join("fc");
    let t_arg = t.to_string();
    let out = toolcast(&[
        "forecast",
        "--dataset",
        s(&fx.data),
        "--run-dir",
        s(&out_dir),
        "--checkpoint",
        s(&model),
        "--video",
        "video_0000",
        "--t",
        &t_arg,
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let name = format!("forecast_video_0000_{t}.json");
    let overlay: ForecastOverlay = serde_json::from_str(&fs::read_to_string(out_dir.join(name)).unwrap()).unwrap();
    let t = t as u64;
    assert_eq!(overlay.frames, vec![t + 1, t + 2, t + 3, t + 4]);
    let mut c = overlay.instrument.center();
    for (k, d) in overlay.predicted_deltas.iter().enumerate() {
        c = [c[0] + d[0], c[1] + d[1]];
        assert_eq!(overlay.predicted_centers[k], c);
    }
    for (k, gt) in overlay.ground_truth_centers.iter().enumerate() {
        assert_eq!(*gt, v.frames()[t as usize + 1 + k].instrument().unwrap().center());
    }
}

#[test]
fn forecast_rejects_bad_frames() {
    let fx = fixture();
    let model = train(&fx, "run", &[]);
    for t in ["3", "148", "1000"] {
        let out = toolcast(&[
            "forecast",
            "--dataset",
            s(&fx.data),
            "--run-dir",
            s(&fx.root.join("fc")),
            "--checkpoint",
            s(&model),
            "--video",
            "video_0000",
            "--t",
            t,
        ]);
        assert_eq!(code(&out), 3, "t={t}");
    }
}

#[test]
fn missing_checkpoint_writes_no_table() {
    let fx = fixture();
    let model = train(&fx, "run", &[]);
    let eval_dir = fx.root.join("eval");
    let out = toolcast(&[
        "evaluate",
        "--dataset",
        s(&fx.data),
        "--run-dir",
        s(&eval_dir),
        "--checkpoint",
        s(&model),
        "--checkpoint",
        s(&fx.root.join("missing.tckp")),
    ]);
    assert_ne!(code(&out), 0);
    assert!(!eval_dir.join("accuracy.csv").exists());
    assert!(!eval_dir.join("accuracy.json").exists());
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[scene]\nn_videos = -1\n").unwrap();
    assert_eq!(code(&toolcast(&["--config", s(&bad), "generate"])), 2);
    let out = toolcast(&["generate", "--out", s(&dir.path().join("d")), "--dropout", "2"]);
    assert_eq!(code(&out), 2);

    let data = dir.path().join("broken");
    fs::create_dir_all(data.join("detections")).unwrap();
    fs::write(data.join("manifest.json"), "{not json").unwrap();
    assert_eq!(code(&toolcast(&["describe", "--dataset", s(&data)])), 3);

    assert_eq!(code(&toolcast(&["describe", "--dataset", s(&dir.path().join("nowhere"))])), 1);
}
