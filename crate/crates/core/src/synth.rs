//! Seeded synthetic detection streams.
//!
//! Each video places a fixed set of anatomy boxes and moves one instrument in
//! straight segments between targets, dwelling at each. In the
//! anatomy-coupled regime the targets are the anatomy centers visited in
//! class-index order, so the layout tells where the instrument goes next. In
//! the decoupled regime the targets are random waypoints and anatomy carries
//! no information about the track. Observations add Gaussian jitter to every
//! box and drop each detection independently.
//!
//! All coordinates are kept on a `2^-16` grid, which makes box differences
//! and their running sums exact in `f64`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{extract_samples, DatasetSplit, VideoDetections, DISPLACEMENT_FRAMES};
use crate::error::{Error, Result};
use crate::types::{BBox, ClassId, FrameDetections, INSTRUMENT, NUM_ANATOMY, NUM_CLASSES};

/// Coordinate resolution of generated boxes.
pub const GRID: f64 = 1.0 / 65536.0;

#[inline]
pub fn quantize(v: f64) -> f64 {
    libm::round(v / GRID) * GRID
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingMode {
    #[default]
    AnatomyCoupled,
    Decoupled,
}

impl CouplingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CouplingMode::AnatomyCoupled => "anatomy_coupled",
            CouplingMode::Decoupled => "decoupled",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub n_videos: usize,
    pub frames_per_video: usize,
    pub visible_anatomy_count: usize,
    /// Largest per-video shift of an anatomy center from its canonical
    /// position, per axis.
    pub layout_spread: f64,
    pub anatomy_jitter_sigma: f64,
    pub detection_dropout_prob: f64,
    /// Mean instrument speed, normalized units per frame.
    pub instrument_speed: f64,
    pub speed_noise_sigma: f64,
    /// Inclusive range of frames spent at each target.
    pub dwell_frames: [usize; 2],
    pub coupling_mode: CouplingMode,
    pub seed: u64,
    /// Window length the dataset must support.
    pub window_len: usize,
    /// Longest horizon the dataset must support.
    pub max_horizon: usize,
    pub validation_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_videos: 20,
            frames_per_video: 2000,
            visible_anatomy_count: 6,
            layout_spread: 0.04,
            anatomy_jitter_sigma: 0.005,
            detection_dropout_prob: 0.05,
            instrument_speed: 0.01,
            speed_noise_sigma: 0.002,
            dwell_frames: [10, 40],
            coupling_mode: CouplingMode::AnatomyCoupled,
            seed: 0,
            window_len: 64,
            max_horizon: 16,
            validation_fraction: 0.1,
            test_fraction: 0.2,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if self.n_videos == 0 {
            return bad("n_videos", "must be at least 1".into());
        }
        if self.frames_per_video <= self.window_len + self.max_horizon {
            return bad(
                "frames_per_video",
                format!(
                    "{} must exceed window_len + max_horizon = {}",
                    self.frames_per_video,
                    self.window_len + self.max_horizon
                ),
            );
        }
        if !(3..=NUM_ANATOMY).contains(&self.visible_anatomy_count) {
            return bad(
                "visible_anatomy_count",
                format!("{} not in [3, {NUM_ANATOMY}]", self.visible_anatomy_count),
            );
        }
        if !(0.0..0.1).contains(&self.layout_spread) {
            return bad("layout_spread", format!("{} not in [0, 0.1)", self.layout_spread));
        }
        for (field, v) in [
            ("anatomy_jitter_sigma", self.anatomy_jitter_sigma),
            ("speed_noise_sigma", self.speed_noise_sigma),
            ("instrument_speed", self.instrument_speed),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(field, format!("{v} must be finite and >= 0"));
            }
        }
        for (field, v) in [
            ("detection_dropout_prob", self.detection_dropout_prob),
            ("validation_fraction", self.validation_fraction),
            ("test_fraction", self.test_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(field, format!("{v} not in [0, 1]"));
            }
        }
        if self.validation_fraction + self.test_fraction > 1.0 {
            return bad("test_fraction", "validation + test fractions exceed 1".into());
        }
        if self.dwell_frames[0] > self.dwell_frames[1] {
            return bad("dwell_frames", format!("{:?} is not a range", self.dwell_frames));
        }
        Ok(())
    }
}

/// Targets visited by the instrument, cycling by phase index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePhaseRule {
    pub targets: Vec<ClassId>,
}

impl ScenePhaseRule {
    pub fn target(&self, phase: usize) -> ClassId {
        self.targets[phase % self.targets.len()]
    }
}

/// One straight movement of the instrument.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    /// First frame whose position differs from the start.
    pub first_frame: usize,
    /// Frame at which the target is reached (`None` if never).
    pub arrival_frame: Option<usize>,
    pub start: [f64; 2],
    pub target: [f64; 2],
}

/// Noise-free state of a generated video.
#[derive(Clone, Debug)]
pub struct VideoTruth {
    pub anatomy: Vec<(ClassId, BBox)>,
    pub instrument_size: [f64; 2],
    /// True instrument center per frame.
    pub instrument_centers: Vec<[f64; 2]>,
    pub segments: Vec<Segment>,
    pub rule: Option<ScenePhaseRule>,
}

#[derive(Clone, Debug)]
pub struct SyntheticVideo {
    pub detections: VideoDetections,
    pub truth: VideoTruth,
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub config: SceneConfig,
    pub class_names: Vec<String>,
    pub split: DatasetSplit,
    pub videos: Vec<SyntheticVideo>,
}

/// Class names used by generated manifests.
pub fn default_class_names() -> Vec<String> {
    (0..NUM_CLASSES)
        .map(|k| {
            if k == INSTRUMENT.index() {
                String::from("instrument")
            } else {
                format!("anatomy_{k:02}")
            }
        })
        .collect()
}

pub fn video_id(index: usize) -> String {
    format!("video_{index:04}")
}

fn gauss(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma).map(|n| n.sample(rng)).unwrap_or(0.0)
}

fn stream_rng(seed: u64, video: usize, role: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(video as u64 * 4 + role);
    rng
}

fn observe(rng: &mut ChaCha8Rng, truth: [f64; 4], sigma: f64, dropout: f64) -> Option<BBox> {
    if dropout > 0.0 && rng.random::<f64>() < dropout {
        return None;
    }
    let mut v = [0.0; 4];
    for (o, t) in v.iter_mut().zip(truth) {
        *o = quantize((t + gauss(rng, sigma)).clamp(0.0, 1.0));
    }
    Some(BBox {
        cx: v[0],
        cy: v[1],
        w: v[2],
        h: v[3],
    })
}

/// Grid cell (column, row) of each anatomy class in the shared layout.
const LAYOUT_CELLS: [(u8, u8); NUM_ANATOMY] = [
    (1, 2), (3, 0), (0, 1), (2, 3), (2, 0), (0, 3), (3, 2), (1, 0),
    (2, 2), (0, 0), (3, 3), (1, 1), (3, 1), (1, 3), (0, 2),
];
const LAYOUT_SPACING: f64 = 0.2;

/// Canonical center of an anatomy class before per-video offsets.
pub fn layout_center(class: ClassId) -> [f64; 2] {
    let (col, row) = LAYOUT_CELLS[class.index()];
    [0.2 + LAYOUT_SPACING * col as f64, 0.2 + LAYOUT_SPACING * row as f64]
}

fn place_anatomy(rng: &mut ChaCha8Rng, count: usize, spread: f64) -> Vec<(ClassId, BBox)> {
    let mut classes: Vec<usize> = index::sample(rng, NUM_ANATOMY, count).into_vec();
    classes.sort_unstable();
    classes
        .into_iter()
        .map(|k| {
            let class = ClassId::new(k).expect("anatomy index");
            let [x, y] = layout_center(class);
            let mut offset = || if spread > 0.0 { rng.random_range(-spread..=spread) } else { 0.0 };
            let (cx, cy) = (quantize(x + offset()), quantize(y + offset()));
            let w = quantize(rng.random_range(0.06..0.16));
            let h = quantize(rng.random_range(0.06..0.16));
            (class, BBox { cx, cy, w, h })
        })
        .collect()
}

/// Generates video `index` of the dataset described by `cfg`.
pub fn generate_video(cfg: &SceneConfig, index: usize) -> Result<SyntheticVideo> {
    cfg.validate()?;
    let mut anatomy_rng = stream_rng(cfg.seed, index, 0);
    let mut motion_rng = stream_rng(cfg.seed, index, 1);
    let mut observe_rng = stream_rng(cfg.seed, index, 2);

    let anatomy = place_anatomy(&mut anatomy_rng, cfg.visible_anatomy_count, cfg.layout_spread);
    let rule = match cfg.coupling_mode {
        CouplingMode::AnatomyCoupled => Some(ScenePhaseRule {
            targets: anatomy.iter().map(|(c, _)| *c).collect(),
        }),
        CouplingMode::Decoupled => None,
    };
    let anatomy_center = |c: ClassId| {
        anatomy
            .iter()
            .find(|(k, _)| *k == c)
            .map(|(_, b)| b.center())
            .expect("rule targets are visible anatomy")
    };

    let size = [
        quantize(motion_rng.random_range(0.08..0.18)),
        quantize(motion_rng.random_range(0.08..0.18)),
    ];
    let mut pos = [
        quantize(motion_rng.random_range(0.15..0.85)),
        quantize(motion_rng.random_range(0.15..0.85)),
    ];
    let mut phase = 0usize;
    let next_target = |phase: usize, rng: &mut ChaCha8Rng| match &rule {
        Some(r) => anatomy_center(r.target(phase)),
        None => [quantize(rng.random_range(0.1..0.9)), quantize(rng.random_range(0.1..0.9))],
    };

    enum State {
        Moving { target: [f64; 2], heading: [f64; 2] },
        Dwelling { remaining: usize },
    }
    let heading_to = |from: [f64; 2], to: [f64; 2]| {
        let (dx, dy) = (to[0] - from[0], to[1] - from[1]);
        let n = libm::hypot(dx, dy);
        if n > 0.0 {
            [dx / n, dy / n]
        } else {
            [0.0, 0.0]
        }
    };

    let first = next_target(phase, &mut motion_rng);
    let mut state = State::Moving {
        target: first,
        heading: heading_to(pos, first),
    };
    let mut segments = alloc::vec![Segment {
        first_frame: 1,
        arrival_frame: None,
        start: pos,
        target: first,
    }];

    let n = cfg.frames_per_video;
    let mut centers = Vec::with_capacity(n);
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 {
            match &mut state {
                State::Moving { target, heading } => {
                    let step = (cfg.instrument_speed + gauss(&mut motion_rng, cfg.speed_noise_sigma)).max(0.0);
                    let dist = libm::hypot(target[0] - pos[0], target[1] - pos[1]);
                    if dist <= step {
                        pos = *target;
                        if let Some(seg) = segments.last_mut() {
                            seg.arrival_frame = Some(i);
                        }
                        let [lo, hi] = cfg.dwell_frames;
                        state = State::Dwelling {
                            remaining: motion_rng.random_range(lo..=hi),
                        };
                    } else {
                        // grid-aligned step keeps straight-line deltas exactly equal
                        pos = [
                            (pos[0] + quantize(heading[0] * step)).clamp(0.0, 1.0),
                            (pos[1] + quantize(heading[1] * step)).clamp(0.0, 1.0),
                        ];
                    }
                }
                State::Dwelling { remaining } => {
                    if *remaining > 0 {
                        *remaining -= 1;
                    }
                    if *remaining == 0 {
                        phase += 1;
                        let target = next_target(phase, &mut motion_rng);
                        segments.push(Segment {
                            first_frame: i + 1,
                            arrival_frame: None,
                            start: pos,
                            target,
                        });
                        state = State::Moving {
                            target,
                            heading: heading_to(pos, target),
                        };
                    }
                }
            }
        }
        centers.push(pos);

        let mut frame = FrameDetections::empty();
        for (class, b) in &anatomy {
            if let Some(obs) = observe(
                &mut anatomy_rng,
                b.to_array(),
                cfg.anatomy_jitter_sigma,
                cfg.detection_dropout_prob,
            ) {
                frame.insert(*class, obs)?;
            }
        }
        let inst = [pos[0], pos[1], size[0], size[1]];
        if let Some(obs) = observe(
            &mut observe_rng,
            inst,
            cfg.anatomy_jitter_sigma,
            cfg.detection_dropout_prob,
        ) {
            frame.insert(INSTRUMENT, obs)?;
        }
        frames.push(frame);
    }

    Ok(SyntheticVideo {
        detections: VideoDetections::new(video_id(index), 0, frames),
        truth: VideoTruth {
            anatomy,
            instrument_size: size,
            instrument_centers: centers,
            segments,
            rule,
        },
    })
}

/// Splits `n` video ids: training first, then validation, then test.
pub fn split_ids(n: usize, validation_fraction: f64, test_fraction: f64) -> DatasetSplit {
    let n_test = libm::round(n as f64 * test_fraction) as usize;
    let n_val = (libm::round(n as f64 * validation_fraction) as usize).min(n - n_test);
    let n_train = n - n_test - n_val;
    let ids: Vec<String> = (0..n).map(video_id).collect();
    DatasetSplit {
        detector_train: Vec::new(),
        forecaster_train: ids[..n_train].to_vec(),
        validation: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
    }
}

/// Generates every video of the dataset.
pub fn generate(cfg: &SceneConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let videos = (0..cfg.n_videos)
        .map(|i| generate_video(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticDataset {
        config: cfg.clone(),
        class_names: default_class_names(),
        split: split_ids(cfg.n_videos, cfg.validation_fraction, cfg.test_fraction),
        videos,
    })
}

/// Summary statistics of a detection dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub videos: usize,
    pub frames: usize,
    pub window_len: usize,
    pub horizon: usize,
    /// `(threshold, samples passing it)` at stride 1.
    pub sample_counts: Vec<(f64, usize)>,
    /// Fraction of frames in which each class is detected.
    pub presence_rates: Vec<f64>,
}

/// Sample counts at the standard thresholds and per-class presence rates,
/// using an 8-frame horizon at stride 1.
pub fn describe(videos: &[VideoDetections], window_len: usize) -> Result<DatasetSummary> {
    let thresholds = [0.0, 0.05, 0.1];
    let mut counts = [0usize; 3];
    let mut present = [0usize; NUM_CLASSES];
    let mut frames = 0;
    for v in videos {
        frames += v.len();
        for f in v.frames() {
            for (c, _) in f.detections() {
                present[c.index()] += 1;
            }
        }
        for s in extract_samples(v, window_len, DISPLACEMENT_FRAMES, 1)? {
            let norm = s.displacement_norm();
            for (n, &t) in counts.iter_mut().zip(&thresholds) {
                if t <= 0.0 || norm > t {
                    *n += 1;
                }
            }
        }
    }
    Ok(DatasetSummary {
        videos: videos.len(),
        frames,
        window_len,
        horizon: DISPLACEMENT_FRAMES,
        sample_counts: thresholds.iter().copied().zip(counts).collect(),
        presence_rates: present
            .iter()
            .map(|&p| if frames == 0 { 0.0 } else { p as f64 / frames as f64 })
            .collect(),
    })
}
