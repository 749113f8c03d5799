//! Windowing, label generation and evaluation filtering over detection
//! streams.
//!
//! A sample ending at frame `t` sees frames `t-s+1..=t` and is labelled with
//! the instrument's frame-to-frame box changes over `t+1..=t+f`. Labels come
//! from the detection stream itself, so a sample is only emitted when the
//! instrument is detected at `t` and in every labelled frame.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{DeltaTrajectory, DetectionWindow, FrameDetections};

/// Frames used for the horizon-independent evaluation displacement.
pub const DISPLACEMENT_FRAMES: usize = 8;

/// Default stride between training windows.
pub const TRAIN_STRIDE: usize = 4;
/// Default stride between evaluation windows.
pub const EVAL_STRIDE: usize = 1;

/// All detections of one video on a gap-free frame index range.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoDetections {
    video_id: Arc<str>,
    first_frame: u64,
    frames: Arc<[FrameDetections]>,
}

impl VideoDetections {
    pub fn new(video_id: impl Into<String>, first_frame: u64, frames: Vec<FrameDetections>) -> Self {
        let id: String = video_id.into();
        VideoDetections {
            video_id: Arc::from(id.as_str()),
            first_frame,
            frames: Arc::from(frames),
        }
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn first_frame(&self) -> u64 {
        self.first_frame
    }

    pub fn frames(&self) -> &[FrameDetections] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Position of source frame index `t`, if it lies in this video.
    pub fn position_of(&self, t: u64) -> Option<usize> {
        let pos = t.checked_sub(self.first_frame)? as usize;
        (pos < self.frames.len()).then_some(pos)
    }

    /// Window of `s` frames ending at position `end` (inclusive).
    pub fn window_ending_at(&self, end: usize, s: usize) -> Result<DetectionWindow> {
        if s == 0 || end + 1 < s || end >= self.frames.len() {
            return Err(Error::Range {
                what: "window end position",
                value: end as i64,
                range: format!("[{}, {})", s.saturating_sub(1), self.frames.len()),
            });
        }
        DetectionWindow::new(
            self.video_id.clone(),
            self.frames.clone(),
            end + 1 - s,
            s,
            self.first_frame + end as u64,
        )
    }

    /// Ground-truth sample for the window ending at position `end`, or `None`
    /// if the instrument is missing at `end` or anywhere in the horizon.
    pub fn sample_at(&self, end: usize, s: usize, f: usize) -> Result<Option<Sample>> {
        if f == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if end + f >= self.frames.len() {
            return Err(Error::Range {
                what: "window end position",
                value: end as i64,
                range: format!("[{}, {})", s.saturating_sub(1), self.frames.len().saturating_sub(f)),
            });
        }
        let window = self.window_ending_at(end, s)?;
        let track: Option<Vec<_>> = self.frames[end..=end + f]
            .iter()
            .map(|fr| fr.instrument())
            .collect();
        let Some(track) = track else {
            return Ok(None);
        };
        let deltas: Vec<[f64; 4]> = track.windows(2).map(|p| p[1].delta_from(&p[0])).collect();
        let target = DeltaTrajectory::new(deltas)?;
        let gt_displacement8 = target.center_displacement_over(DISPLACEMENT_FRAMES);
        Ok(Some(Sample {
            window,
            target,
            gt_displacement8,
        }))
    }
}

/// One training or evaluation example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub window: DetectionWindow,
    pub target: DeltaTrajectory,
    /// Summed ground-truth center displacement over the first
    /// `min(f, 8)` future frames.
    pub gt_displacement8: [f64; 2],
}

impl Sample {
    pub fn displacement_norm(&self) -> f64 {
        libm::hypot(self.gt_displacement8[0], self.gt_displacement8[1])
    }
}

/// Number of window positions before the instrument-presence filter.
pub fn window_count(len: usize, s: usize, f: usize, stride: usize) -> usize {
    match len.checked_sub(s + f) {
        Some(span) => span / stride + 1,
        None => 0,
    }
}

/// Extracts labelled samples from one video, one window every `stride`
/// admissible offsets.
pub fn extract_samples(video: &VideoDetections, s: usize, f: usize, stride: usize) -> Result<Vec<Sample>> {
    if s == 0 || f == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "window length ({s}), horizon ({f}) and stride ({stride}) must be positive"
        )));
    }
    let n = window_count(video.len(), s, f, stride);
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let end = k * stride + s - 1;
        if let Some(sample) = video.sample_at(end, s, f)? {
            out.push(sample);
        }
    }
    Ok(out)
}

/// Extracts samples from several videos in order.
pub fn extract_all<'a>(
    videos: impl IntoIterator<Item = &'a VideoDetections>,
    s: usize,
    f: usize,
    stride: usize,
) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for v in videos {
        out.extend(extract_samples(v, s, f, stride)?);
    }
    Ok(out)
}

/// Keeps samples whose 8-frame ground-truth displacement norm exceeds
/// `threshold`. A threshold of zero keeps everything.
pub fn filter_by_magnitude(samples: &[Sample], threshold: f64) -> Vec<Sample> {
    if threshold <= 0.0 {
        return samples.to_vec();
    }
    samples
        .iter()
        .filter(|s| s.displacement_norm() > threshold)
        .cloned()
        .collect()
}

/// Horizontal pixel distance a normalized threshold corresponds to.
pub fn threshold_in_pixels(threshold: f64, image_width_px: u32) -> f64 {
    threshold * image_width_px as f64
}

/// Video ids assigned to each stage.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    #[serde(default)]
    pub detector_train: Vec<String>,
    #[serde(default)]
    pub forecaster_train: Vec<String>,
    #[serde(default)]
    pub validation: Vec<String>,
    #[serde(default)]
    pub test: Vec<String>,
}

impl DatasetSplit {
    /// Checks that no id appears twice across all splits.
    pub fn validate(&self) -> Result<()> {
        let mut all: Vec<&str> = self.all().collect();
        all.sort_unstable();
        if let Some(w) = all.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("video id {} appears in more than one split", w[0])));
        }
        Ok(())
    }

    pub fn all(&self) -> impl Iterator<Item = &str> {
        self.detector_train
            .iter()
            .chain(&self.forecaster_train)
            .chain(&self.validation)
            .chain(&self.test)
            .map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{BBox, INSTRUMENT};
    use alloc::vec;

    fn grid(v: u32) -> f64 {
        v as f64 / 1024.0
    }

    /// Instrument walks right by 1/1024 per frame; optionally absent at `gap`.
    fn toy_video(len: usize, gap: Option<usize>) -> VideoDetections {
        let frames = (0..len)
            .map(|i| {
                let mut f = FrameDetections::empty();
                if Some(i) != gap {
                    f.insert(INSTRUMENT, BBox::new(grid(100 + i as u32), 0.5, 0.1, 0.1).unwrap())
                        .unwrap();
                }
                f
            })
            .collect();
        VideoDetections::new("toy", 0, frames)
    }

    /// Brute force: every end position whose window and horizon fit and whose
    /// instrument track `end..=end+f` is complete.
    fn brute_force_ends(video: &VideoDetections, s: usize, f: usize, stride: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut start = 0;
        while start + s + f <= video.len() {
            let end = start + s - 1;
            if (end..=end + f).all(|i| video.frames()[i].instrument().is_some()) {
                out.push(end);
            }
            start += stride;
        }
        out
    }

    #[test]
    fn count_formula_and_enumeration() {
        let v = toy_video(100, None);
        let samples = extract_samples(&v, 64, 8, 1).unwrap();
        assert_eq!(samples.len(), 29);
        for len in 0..40 {
            for s in 1..6 {
                for f in 1..5 {
                    for stride in 1..4 {
                        let v = toy_video(len, None);
                        let n = extract_samples(&v, s, f, stride).unwrap().len();
                        assert_eq!(n, brute_force_ends(&v, s, f, stride).len());
                        assert_eq!(n, window_count(len, s, f, stride));
                    }
                }
            }
        }
    }

    #[test]
    fn too_short_video_yields_nothing() {
        assert!(extract_samples(&toy_video(71, None), 64, 8, 1).unwrap().is_empty());
    }

    #[test]
    fn absence_drops_covering_windows() {
        let v = toy_video(100, Some(80));
        let got: Vec<u64> = extract_samples(&v, 64, 8, 1)
            .unwrap()
            .iter()
            .map(|s| s.window.t())
            .collect();
        let expected: Vec<u64> = brute_force_ends(&v, 64, 8, 1).into_iter().map(|e| e as u64).collect();
        assert_eq!(got, expected);
        // ends 72..=80 have frame 80 in their label range or at t
        assert!(got.iter().all(|&t| !(72..=80).contains(&t)));
        assert_eq!(got.len(), 29 - 9);
    }

    #[test]
    fn rejects_zero_parameters() {
        let v = toy_video(10, None);
        assert!(extract_samples(&v, 0, 1, 1).is_err());
        assert!(extract_samples(&v, 1, 0, 1).is_err());
        assert!(extract_samples(&v, 1, 1, 0).is_err());
    }

    #[test]
    fn reconstruction_is_exact() {
        let v = toy_video(30, None);
        for s in extract_samples(&v, 4, 8, 1).unwrap() {
            let pos = v.position_of(s.window.t()).unwrap();
            let b_t = v.frames()[pos].instrument().unwrap();
            for (k, rec) in s.target.accumulate_from(&b_t).iter().enumerate() {
                let truth = v.frames()[pos + k + 1].instrument().unwrap().to_array();
                assert_eq!(*rec, truth);
            }
        }
    }

    #[test]
    fn threshold_pixels() {
        assert_eq!(threshold_in_pixels(0.1, 1920), 192.0);
        assert_eq!(threshold_in_pixels(0.05, 1920), 96.0);
    }

    #[test]
    fn zero_threshold_keeps_all() {
        let v = toy_video(40, None);
        let samples = extract_samples(&v, 4, 8, 1).unwrap();
        assert_eq!(filter_by_magnitude(&samples, 0.0).len(), samples.len());
        // 8 frames * 1/1024 = 0.0078
        assert_eq!(filter_by_magnitude(&samples, 0.007).len(), samples.len());
        assert!(filter_by_magnitude(&samples, 0.008).is_empty());
    }

    #[test]
    fn split_disjointness() {
        let mut split = DatasetSplit {
            forecaster_train: vec!["a".into(), "b".into()],
            test: vec!["c".into()],
            ..Default::default()
        };
        split.validate().unwrap();
        split.validation.push("a".into());
        assert!(split.validate().is_err());
    }
}
