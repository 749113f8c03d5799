use std::fs;
use std::path::Path;

use proptest::prelude::*;
use toolcast::dataset::{self, load_dataset, read_detections, FrameRecord};
use toolcast::error::Error;
use toolcast_core::synth::{CouplingMode, SceneConfig};
use toolcast_core::{BBox, ClassId, FrameDetections, INSTRUMENT};

fn scene() -> SceneConfig {
    SceneConfig {
        n_videos: 5,
        frames_per_video: 120,
        seed: 11,
        ..SceneConfig::default()
    }
}

fn frame_line(frame: u64, dets: &str) -> String {
    format!("{{\"frame\":{frame},\"detections\":[{dets}]}}\n")
}

fn det(class: u8, cx: f64, cy: f64, w: f64, h: f64) -> String {
    format!("{{\"class\":{class},\"cx\":{cx},\"cy\":{cy},\"w\":{w},\"h\":{h}}}")
}

fn write_file(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn generated_dataset_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset::generate_dataset(dir.path(), &scene()).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.manifest.classes.len(), 16);
    assert_eq!(loaded.manifest.generator.as_ref(), Some(&scene()));
    assert_eq!(loaded.manifest.split, ds.split);
    for (a, b) in ds.videos.iter().zip(&loaded.videos) {
        assert_eq!(a.detections, *b);
    }
}

#[test]
fn regenerating_gives_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    dataset::generate_dataset(a.path(), &scene()).unwrap();
    dataset::generate_dataset(b.path(), &scene()).unwrap();
    for name in ["manifest.json", "detections/video_0000.jsonl", "detections/video_0004.jsonl"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
    }
}

#[test]
fn out_of_range_coordinate_reports_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let text = frame_line(0, &det(15, 0.5, 0.5, 0.1, 0.1))
        + &frame_line(1, &det(15, 0.5, 0.5, 0.1, 0.1))
        + &frame_line(2, &det(15, 1.5, 0.5, 0.1, 0.1));
    let path = write_file(dir.path(), "v.jsonl", &text);
    match read_detections(&path, "v") {
        Err(Error::Parse { file, line, .. }) => {
            assert_eq!(file, path);
            assert_eq!(line, 3);
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn malformed_json_and_unknown_class_are_parse_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_file(dir.path(), "a.jsonl", "{\"frame\":0,\"detections\":[\n");
    assert!(matches!(read_detections(&path, "a"), Err(Error::Parse { line: 1, .. })));
    let path = write_file(dir.path(), "b.jsonl", &frame_line(0, &det(16, 0.5, 0.5, 0.1, 0.1)));
    assert!(matches!(read_detections(&path, "b"), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn frame_gap_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let text = frame_line(5, "") + &frame_line(6, "") + &frame_line(8, "");
    let path = write_file(dir.path(), "v.jsonl", &text);
    let err = read_detections(&path, "v").unwrap_err();
    assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn first_frame_number_is_kept() {
    let dir = tempfile::tempdir().unwrap();
    let text = frame_line(40, "") + &frame_line(41, &det(15, 0.5, 0.5, 0.1, 0.1));
    let path = write_file(dir.path(), "v.jsonl", &text);
    let v = read_detections(&path, "v").unwrap();
    assert_eq!(v.first_frame(), 40);
    assert_eq!(v.position_of(41), Some(1));
    assert!(v.frames()[1].is_present(INSTRUMENT));
}

#[test]
fn repeated_class_keeps_the_largest_box() {
    let dir = tempfile::tempdir().unwrap();
    let dets = [det(15, 0.2, 0.2, 0.1, 0.1), det(15, 0.6, 0.6, 0.3, 0.2), det(15, 0.4, 0.4, 0.2, 0.2), det(2, 0.5, 0.5, 0.1, 0.1)];
    let path = write_file(dir.path(), "v.jsonl", &frame_line(0, &dets.join(",")));
    let v = read_detections(&path, "v").unwrap();
    assert_eq!(v.frames()[0].instrument(), Some(BBox::new(0.6, 0.6, 0.3, 0.2).unwrap()));
    assert_eq!(v.frames()[0].detections().count(), 2);
}

#[test]
fn wrong_class_count_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    dataset::generate_dataset(dir.path(), &scene()).unwrap();
    let path = dir.path().join("manifest.json");
    let mut manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    manifest["classes"].as_array_mut().unwrap().push("extra".into());
    fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Schema(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn frame_count_mismatch_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    dataset::generate_dataset(dir.path(), &scene()).unwrap();
    let path = dir.path().join("detections/video_0001.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let kept: Vec<&str> = text.lines().take(100).collect();
    fs::write(&path, kept.join("\n") + "\n").unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Schema(_))));
}

#[test]
fn describe_counts_are_nested() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SceneConfig {
        instrument_speed: 0.03,
        coupling_mode: CouplingMode::Decoupled,
        ..scene()
    };
    dataset::generate_dataset(dir.path(), &cfg).unwrap();
    let summary = dataset::describe_dataset(dir.path(), 16).unwrap();
    let counts: Vec<usize> = summary.sample_counts.iter().map(|c| c.1).collect();
    assert_eq!(counts.len(), 3);
    assert!(counts[0] >= counts[1] && counts[1] >= counts[2] && counts[2] > 0);
}

#[test]
fn full_dropout_describes_as_empty() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SceneConfig {
        detection_dropout_prob: 1.0,
        ..scene()
    };
    dataset::generate_dataset(dir.path(), &cfg).unwrap();
    let summary = dataset::describe_dataset(dir.path(), 16).unwrap();
    assert!(summary.sample_counts.iter().all(|c| c.1 == 0));
}

fn arb_frame() -> impl Strategy<Value = FrameDetections> {
    proptest::collection::vec(
        (0usize..16, 0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0),
        0..16,
    )
    .prop_map(|rows| {
        let mut f = FrameDetections::empty();
        for (c, cx, cy, w, h) in rows {
            f.insert(ClassId::new(c).unwrap(), BBox::new(cx, cy, w, h).unwrap()).unwrap();
        }
        f
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn frame_records_round_trip(frame in arb_frame(), n in 0u64..1_000_000) {
        let record = FrameRecord::from_frame(n, &frame);
        let text = serde_json::to_string(&record).unwrap();
        let back: FrameRecord = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back.frame, n);
        let (rebuilt, repeated) = back.to_frame().unwrap();
        prop_assert!(repeated.is_empty());
        prop_assert_eq!(rebuilt, frame);
    }
}
