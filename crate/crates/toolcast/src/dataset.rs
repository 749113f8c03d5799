//! Dataset directories: `manifest.json` plus one JSON Lines detection file
//! per video under `detections/`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toolcast_core::dataio::{DatasetSplit, VideoDetections};
use toolcast_core::synth::{self, SceneConfig, SyntheticDataset};
use toolcast_core::{BBox, ClassId, FrameDetections, NUM_CLASSES};

use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const DETECTIONS_DIR: &str = "detections";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: String,
    /// Path relative to the dataset directory.
    pub file: String,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// Class names by index; the instrument is last.
    pub classes: Vec<String>,
    pub split: DatasetSplit,
    pub videos: Vec<VideoEntry>,
    /// Generator settings, for synthetic datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<SceneConfig>,
}

/// One detection row of a JSON Lines record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub class: u8,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub frame: u64,
    pub detections: Vec<DetectionRecord>,
}

impl FrameRecord {
    pub fn from_frame(frame: u64, dets: &FrameDetections) -> Self {
        FrameRecord {
            frame,
            detections: dets
                .detections()
                .map(|(c, b)| DetectionRecord {
                    class: c.index() as u8,
                    cx: b.cx,
                    cy: b.cy,
                    w: b.w,
                    h: b.h,
                })
                .collect(),
        }
    }

    /// Builds the frame, keeping the largest box when a class repeats.
    /// Returns the classes that were repeated.
    pub fn to_frame(&self) -> Result<(FrameDetections, Vec<ClassId>), String> {
        let mut frame = FrameDetections::empty();
        let mut repeated = Vec::new();
        for d in &self.detections {
            let class = ClassId::new(d.class as usize).map_err(|e| e.to_string())?;
            let bbox = BBox::new(d.cx, d.cy, d.w, d.h).map_err(|e| format!("class {}: {e}", d.class))?;
            match frame.get(class) {
                Some(prev) => {
                    repeated.push(class);
                    if bbox.area() > prev.area() {
                        frame.insert(class, bbox).map_err(|e| e.to_string())?;
                    }
                }
                None => frame.insert(class, bbox).map_err(|e| e.to_string())?,
            }
        }
        Ok((frame, repeated))
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub videos: Vec<VideoDetections>,
}

impl Dataset {
    pub fn video(&self, id: &str) -> Option<&VideoDetections> {
        self.videos.iter().find(|v| v.video_id() == id)
    }

    /// Videos listed under `ids`, in split order.
    pub fn subset(&self, ids: &[String]) -> Result<Vec<VideoDetections>> {
        ids.iter()
            .map(|id| {
                self.video(id)
                    .cloned()
                    .ok_or_else(|| Error::Schema(format!("split lists unknown video '{id}'")))
            })
            .collect()
    }
}

fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if manifest.classes.len() != NUM_CLASSES {
        return Err(Error::Schema(format!(
            "{} lists {} classes, expected {NUM_CLASSES}",
            path.display(),
            manifest.classes.len()
        )));
    }
    manifest.split.validate()?;
    Ok(manifest)
}

/// Reads one detection file. Frame numbers must be consecutive.
pub fn read_detections(path: &Path, video_id: &str) -> Result<VideoDetections> {
    let file = File::open(path).map_err(Error::io(path))?;
    let mut frames = Vec::new();
    let mut first = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(Error::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            file: path.to_path_buf(),
            line: line_no,
            message,
        };
        let record: FrameRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let expected = first.map(|f: u64| f + frames.len() as u64);
        match expected {
            None => first = Some(record.frame),
            Some(e) if e != record.frame => {
                return Err(parse_err(format!("frame {} follows frame {}; frames must be consecutive", record.frame, e - 1)));
            }
            Some(_) => {}
        }
        let (frame, repeated) = record.to_frame().map_err(parse_err)?;
        for class in repeated {
            log::warn!(
                "{}:{line_no}: class {class} detected more than once in frame {}; keeping the largest box",
                path.display(),
                record.frame
            );
        }
        frames.push(frame);
    }
    Ok(VideoDetections::new(video_id, first.unwrap_or(0), frames))
}

/// Loads and validates a dataset directory.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for entry in &manifest.videos {
        let video = read_detections(&root.join(&entry.file), &entry.id)?;
        if video.len() != entry.frames {
            return Err(Error::Schema(format!(
                "video '{}' has {} frames, manifest says {}",
                entry.id,
                video.len(),
                entry.frames
            )));
        }
        videos.push(video);
    }
    for id in manifest.split.all() {
        if !manifest.videos.iter().any(|v| v.id == id) {
            return Err(Error::Schema(format!("split lists unknown video '{id}'")));
        }
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
        videos,
    })
}

pub fn write_detections(path: &Path, video: &VideoDetections) -> Result<()> {
    let file = File::create(path).map_err(Error::io(path))?;
    let mut out = BufWriter::new(file);
    for (i, frame) in video.frames().iter().enumerate() {
        let record = FrameRecord::from_frame(video.first_frame() + i as u64, frame);
        serde_json::to_writer(&mut out, &record).map_err(|e| Error::Data(e.to_string()))?;
        out.write_all(b"\n").map_err(Error::io(path))?;
    }
    out.flush().map_err(Error::io(path))
}

/// Writes a dataset directory, creating it if needed.
pub fn write_dataset(
    root: &Path,
    classes: &[String],
    split: &DatasetSplit,
    videos: &[VideoDetections],
    generator: Option<&SceneConfig>,
) -> Result<Manifest> {
    if classes.len() != NUM_CLASSES {
        return Err(Error::Schema(format!("{} class names, expected {NUM_CLASSES}", classes.len())));
    }
    let det_dir = root.join(DETECTIONS_DIR);
    fs::create_dir_all(&det_dir).map_err(Error::io(&det_dir))?;
    let mut entries = Vec::with_capacity(videos.len());
    for v in videos {
        let file = format!("{DETECTIONS_DIR}/{}.jsonl", v.video_id());
        write_detections(&root.join(&file), v)?;
        entries.push(VideoEntry {
            id: v.video_id().to_string(),
            file,
            frames: v.len(),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        classes: classes.to_vec(),
        split: split.clone(),
        videos: entries,
        generator: generator.cloned(),
    };
    write_json(&root.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Generates a synthetic dataset and writes it to `root`.
pub fn generate_dataset(root: &Path, cfg: &SceneConfig) -> Result<SyntheticDataset> {
    let ds = synth::generate(cfg)?;
    let videos: Vec<VideoDetections> = ds.videos.iter().map(|v| v.detections.clone()).collect();
    write_dataset(root, &ds.class_names, &ds.split, &videos, Some(cfg))?;
    Ok(ds)
}

/// Summary statistics of a dataset directory.
pub fn describe_dataset(root: &Path, window_len: usize) -> Result<synth::DatasetSummary> {
    let ds = load_dataset(root)?;
    Ok(synth::describe(&ds.videos, window_len)?)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(Error::io(path))
}
