//! Detection data model shared by every stage of the pipeline.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of detection classes: 15 anatomical structures plus the instrument.
pub const NUM_CLASSES: usize = 16;
/// Number of anatomy classes (indices `0..NUM_ANATOMY`).
pub const NUM_ANATOMY: usize = 15;
/// Features per class row: presence flag followed by `cx, cy, w, h`.
pub const BOX_FEATURES: usize = 5;
/// The single instrument class.
pub const INSTRUMENT: ClassId = ClassId(15);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct ClassId(u8);

impl ClassId {
    pub fn new(index: usize) -> Result<Self> {
        if index < NUM_CLASSES {
            Ok(ClassId(index as u8))
        } else {
            Err(Error::Range {
                what: "class index",
                value: index as i64,
                range: format!("[0, {}]", NUM_CLASSES - 1),
            })
        }
    }

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    #[inline]
    pub fn is_instrument(self) -> bool {
        self == INSTRUMENT
    }

    /// All anatomy classes in index order.
    pub fn anatomy() -> impl Iterator<Item = ClassId> {
        (0..NUM_ANATOMY as u8).map(ClassId)
    }

    pub fn all() -> impl Iterator<Item = ClassId> {
        (0..NUM_CLASSES as u8).map(ClassId)
    }
}

impl TryFrom<u8> for ClassId {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        ClassId::new(value as usize)
    }
}

impl From<ClassId> for u8 {
    fn from(value: ClassId) -> u8 {
        value.0
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Axis-aligned box in normalized image coordinates (y grows downward).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const ZERO: BBox = BBox {
        cx: 0.0,
        cy: 0.0,
        w: 0.0,
        h: 0.0,
    };

    /// Builds a box, rejecting values that are non-finite or outside `[0, 1]`.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BBox { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("cx", self.cx), ("cy", self.cy), ("w", self.w), ("h", self.h)] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::Input(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> [f64; 2] {
        [self.cx, self.cy]
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Componentwise `self - earlier`.
    pub fn delta_from(&self, earlier: &BBox) -> [f64; 4] {
        [
            self.cx - earlier.cx,
            self.cy - earlier.cy,
            self.w - earlier.w,
            self.h - earlier.h,
        ]
    }
}

/// One frame's detections for all classes.
///
/// Absent classes carry an all-zero box, so the feature layout never has to
/// distinguish "missing" from "placeholder".
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFrame", into = "RawFrame")]
pub struct FrameDetections {
    presence: [bool; NUM_CLASSES],
    boxes: [BBox; NUM_CLASSES],
}

#[derive(Serialize, Deserialize)]
struct RawFrame {
    presence: [bool; NUM_CLASSES],
    boxes: [BBox; NUM_CLASSES],
}

impl TryFrom<RawFrame> for FrameDetections {
    type Error = Error;

    fn try_from(raw: RawFrame) -> Result<Self> {
        let mut frame = FrameDetections::empty();
        for class in ClassId::all() {
            let k = class.index();
            if raw.presence[k] {
                frame.insert(class, raw.boxes[k])?;
            } else if raw.boxes[k] != BBox::ZERO {
                return Err(Error::Input(format!(
                    "class {k} is absent but carries a nonzero box"
                )));
            }
        }
        Ok(frame)
    }
}

impl From<FrameDetections> for RawFrame {
    fn from(frame: FrameDetections) -> RawFrame {
        RawFrame {
            presence: frame.presence,
            boxes: frame.boxes,
        }
    }
}

impl Default for FrameDetections {
    fn default() -> Self {
        Self::empty()
    }
}

impl FrameDetections {
    pub const fn empty() -> Self {
        FrameDetections {
            presence: [false; NUM_CLASSES],
            boxes: [BBox::ZERO; NUM_CLASSES],
        }
    }

    /// Sets the detection for `class`, replacing any previous one.
    pub fn insert(&mut self, class: ClassId, bbox: BBox) -> Result<()> {
        bbox.validate()?;
        self.presence[class.index()] = true;
        self.boxes[class.index()] = bbox;
        Ok(())
    }

    pub fn remove(&mut self, class: ClassId) {
        self.presence[class.index()] = false;
        self.boxes[class.index()] = BBox::ZERO;
    }

    pub fn get(&self, class: ClassId) -> Option<BBox> {
        self.presence[class.index()].then(|| self.boxes[class.index()])
    }

    pub fn is_present(&self, class: ClassId) -> bool {
        self.presence[class.index()]
    }

    pub fn instrument(&self) -> Option<BBox> {
        self.get(INSTRUMENT)
    }

    pub fn detections(&self) -> impl Iterator<Item = (ClassId, BBox)> + '_ {
        ClassId::all().filter_map(move |c| self.get(c).map(|b| (c, b)))
    }

    /// Drops every anatomy row, keeping only the instrument.
    pub fn without_anatomy(&self) -> Self {
        let mut out = FrameDetections::empty();
        out.presence[INSTRUMENT.index()] = self.presence[INSTRUMENT.index()];
        out.boxes[INSTRUMENT.index()] = self.boxes[INSTRUMENT.index()];
        out
    }

    /// Writes the flattened `NUM_CLASSES x BOX_FEATURES` feature block.
    pub fn write_features(&self, out: &mut [f64], use_anatomy: bool) {
        debug_assert_eq!(out.len(), NUM_CLASSES * BOX_FEATURES);
        for k in 0..NUM_CLASSES {
            let row = &mut out[k * BOX_FEATURES..(k + 1) * BOX_FEATURES];
            if !use_anatomy && k != INSTRUMENT.index() {
                row.fill(0.0);
                continue;
            }
            let b = &self.boxes[k];
            row[0] = if self.presence[k] { 1.0 } else { 0.0 };
            row[1] = b.cx;
            row[2] = b.cy;
            row[3] = b.w;
            row[4] = b.h;
        }
    }
}

/// The `s` most recent frames ending at frame `t` of one video.
///
/// Frames are shared with the source video, so cloning a window is cheap.
#[derive(Clone, Debug)]
pub struct DetectionWindow {
    video_id: Arc<str>,
    source: Arc<[FrameDetections]>,
    start: usize,
    len: usize,
    t: u64,
}

impl DetectionWindow {
    /// Window over `source[start..start + len]`; `t` is the source frame index
    /// of the last frame.
    pub fn new(
        video_id: Arc<str>,
        source: Arc<[FrameDetections]>,
        start: usize,
        len: usize,
        t: u64,
    ) -> Result<Self> {
        if len == 0 || start + len > source.len() {
            return Err(Error::Shape(format!(
                "window [{start}, {}) outside a {}-frame source",
                start + len,
                source.len()
            )));
        }
        Ok(DetectionWindow {
            video_id,
            source,
            start,
            len,
            t,
        })
    }

    /// Window owning its frames.
    pub fn from_frames(video_id: &str, frames: Vec<FrameDetections>, t: u64) -> Result<Self> {
        let len = frames.len();
        Self::new(Arc::from(video_id), Arc::from(frames), 0, len, t)
    }

    pub fn frames(&self) -> &[FrameDetections] {
        &self.source[self.start..self.start + self.len]
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    /// Source frame index of the last frame in the window.
    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn last(&self) -> &FrameDetections {
        &self.frames()[self.len - 1]
    }

    /// Flattened `len x NUM_CLASSES x BOX_FEATURES` input tensor.
    pub fn to_tensor(&self, use_anatomy: bool) -> Vec<f64> {
        let token = NUM_CLASSES * BOX_FEATURES;
        let mut out = alloc::vec![0.0; self.len * token];
        for (frame, chunk) in self.frames().iter().zip(out.chunks_exact_mut(token)) {
            frame.write_features(chunk, use_anatomy);
        }
        out
    }
}

/// Frame-to-frame box changes `(dcx, dcy, dw, dh)` over a forecast horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaTrajectory {
    deltas: Vec<[f64; 4]>,
}

impl DeltaTrajectory {
    /// Ground-truth style trajectory: finite entries with magnitude at most 1.
    pub fn new(deltas: Vec<[f64; 4]>) -> Result<Self> {
        if deltas.is_empty() {
            return Err(Error::Shape("trajectory needs at least one frame".into()));
        }
        for (r, row) in deltas.iter().enumerate() {
            for &v in row {
                if !v.is_finite() || v.abs() > 1.0 {
                    return Err(Error::Input(format!("delta {v} in row {r} not in [-1, 1]")));
                }
            }
        }
        Ok(DeltaTrajectory { deltas })
    }

    /// Network output: finite, but not bound to `[-1, 1]`.
    pub fn from_prediction(values: &[f64]) -> Result<Self> {
        if values.is_empty() || values.len() % 4 != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form an f x 4 trajectory",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numerics(format!("non-finite prediction {v}")));
        }
        Ok(DeltaTrajectory {
            deltas: values
                .chunks_exact(4)
                .map(|c| [c[0], c[1], c[2], c[3]])
                .collect(),
        })
    }

    pub fn zeros(horizon: usize) -> Self {
        DeltaTrajectory {
            deltas: alloc::vec![[0.0; 4]; horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.deltas.len()
    }

    pub fn rows(&self) -> &[[f64; 4]] {
        &self.deltas
    }

    pub fn flat(&self) -> Vec<f64> {
        self.deltas.iter().flatten().copied().collect()
    }

    /// Summed center displacement over the whole horizon.
    pub fn center_displacement(&self) -> [f64; 2] {
        self.center_displacement_over(self.deltas.len())
    }

    /// Summed center displacement over the first `frames` rows.
    pub fn center_displacement_over(&self, frames: usize) -> [f64; 2] {
        self.deltas
            .iter()
            .take(frames)
            .fold([0.0, 0.0], |acc, d| [acc[0] + d[0], acc[1] + d[1]])
    }

    /// Mean `(dcx, dcy)` over the horizon.
    pub fn mean_center_direction(&self) -> [f64; 2] {
        let [x, y] = self.center_displacement();
        let n = self.deltas.len() as f64;
        [x / n, y / n]
    }

    /// First `horizon` rows.
    pub fn truncated(&self, horizon: usize) -> Result<Self> {
        if horizon == 0 || horizon > self.deltas.len() {
            return Err(Error::Shape(format!(
                "cannot truncate a {}-frame trajectory to {horizon}",
                self.deltas.len()
            )));
        }
        Ok(DeltaTrajectory {
            deltas: self.deltas[..horizon].to_vec(),
        })
    }

    /// Applies the deltas cumulatively to `start`, returning one box per row.
    pub fn accumulate_from(&self, start: &BBox) -> Vec<[f64; 4]> {
        let mut cur = start.to_array();
        self.deltas
            .iter()
            .map(|d| {
                for j in 0..4 {
                    cur[j] += d[j];
                }
                cur
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirectionLabel {
    Up,
    Down,
    Left,
    Right,
}

impl DirectionLabel {
    pub const ALL: [DirectionLabel; 4] = [
        DirectionLabel::Up,
        DirectionLabel::Down,
        DirectionLabel::Left,
        DirectionLabel::Right,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DirectionLabel::Up => "up",
            DirectionLabel::Down => "down",
            DirectionLabel::Left => "left",
            DirectionLabel::Right => "right",
        }
    }
}

impl fmt::Display for DirectionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Angle of a normalized-image displacement in degrees, `[0, 360)`.
///
/// The y component is flipped first so that motion toward the top of the
/// image (decreasing `cy`) has an angle of 90 degrees.
pub fn displacement_angle(dx: f64, dy: f64) -> Result<f64> {
    if !(dx.is_finite() && dy.is_finite()) {
        return Err(Error::Input(format!("non-finite displacement ({dx}, {dy})")));
    }
    if dx == 0.0 && dy == 0.0 {
        return Err(Error::NoDirection);
    }
    let mut deg = libm::atan2(-dy, dx).to_degrees();
    if deg < 0.0 {
        deg += 360.0;
    }
    if deg >= 360.0 {
        deg -= 360.0;
    }
    // normalizes -0.0
    Ok(deg + 0.0)
}

/// Four half-open sectors centered on the axes:
/// Up `[45, 135)`, Left `[135, 225)`, Down `[225, 315)`, Right elsewhere.
///
/// Angles outside `[0, 360)` are wrapped first.
pub fn classify_direction(angle: f64) -> DirectionLabel {
    let a = if (0.0..360.0).contains(&angle) {
        angle
    } else {
        let r = libm::fmod(angle, 360.0);
        if r < 0.0 {
            r + 360.0
        } else {
            r
        }
    };
    if (45.0..135.0).contains(&a) {
        DirectionLabel::Up
    } else if (135.0..225.0).contains(&a) {
        DirectionLabel::Left
    } else if (225.0..315.0).contains(&a) {
        DirectionLabel::Down
    } else {
        DirectionLabel::Right
    }
}

/// Direction label of a displacement vector.
pub fn direction_of(dx: f64, dy: f64) -> Result<DirectionLabel> {
    displacement_angle(dx, dy).map(classify_direction)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn angle_examples() {
        // scalar oracle: atan2(0.2, 0.1) in degrees
        let expected = 63.434_948_822_922_01;
        assert!(close(displacement_angle(0.1, -0.2).unwrap(), expected, 1e-9));
        assert_eq!(displacement_angle(1.0, 0.0).unwrap(), 0.0);
        assert_eq!(displacement_angle(0.0, 1.0).unwrap(), 270.0);
        assert_eq!(displacement_angle(0.0, -1.0).unwrap(), 90.0);
        assert_eq!(displacement_angle(-1.0, 0.0).unwrap(), 180.0);
    }

    #[test]
    fn zero_displacement_has_no_direction() {
        assert_eq!(displacement_angle(0.0, 0.0), Err(Error::NoDirection));
        assert_eq!(displacement_angle(-0.0, 0.0), Err(Error::NoDirection));
    }

    #[test]
    fn tiny_negative_y_stays_in_range() {
        let a = displacement_angle(1.0, 1e-300).unwrap();
        assert!((0.0..360.0).contains(&a));
        assert_eq!(classify_direction(a), DirectionLabel::Right);
    }

    #[test]
    fn sector_boundaries() {
        assert_eq!(classify_direction(90.0), DirectionLabel::Up);
        assert_eq!(classify_direction(45.0), DirectionLabel::Up);
        assert_eq!(classify_direction(135.0), DirectionLabel::Left);
        assert_eq!(classify_direction(225.0), DirectionLabel::Down);
        assert_eq!(classify_direction(315.0), DirectionLabel::Right);
        assert_eq!(classify_direction(359.0), DirectionLabel::Right);
        assert_eq!(classify_direction(0.0), DirectionLabel::Right);
        assert_eq!(classify_direction(44.999), DirectionLabel::Right);
    }

    #[test]
    fn screen_up_is_up() {
        assert_eq!(direction_of(0.0, -0.3).unwrap(), DirectionLabel::Up);
        assert_eq!(direction_of(0.0, 0.3).unwrap(), DirectionLabel::Down);
        assert_eq!(direction_of(-0.3, 0.1).unwrap(), DirectionLabel::Left);
    }

    #[test]
    fn bbox_rejects_out_of_range() {
        assert!(BBox::new(1.5, 0.5, 0.1, 0.1).is_err());
        assert!(BBox::new(0.5, f64::NAN, 0.1, 0.1).is_err());
        assert!(BBox::new(0.0, 1.0, 0.0, 1.0).is_ok());
    }

    #[test]
    fn absent_rows_are_zero() {
        let mut f = FrameDetections::empty();
        let b = BBox::new(0.3, 0.4, 0.1, 0.2).unwrap();
        f.insert(ClassId::new(3).unwrap(), b).unwrap();
        f.insert(INSTRUMENT, b).unwrap();
        let mut feats = [9.0; NUM_CLASSES * BOX_FEATURES];
        f.write_features(&mut feats, true);
        assert_eq!(&feats[15..20], &[1.0, 0.3, 0.4, 0.1, 0.2]);
        assert_eq!(&feats[0..5], &[0.0; 5]);
        f.write_features(&mut feats, false);
        assert_eq!(&feats[15..20], &[0.0; 5]);
        assert_eq!(&feats[75..80], &[1.0, 0.3, 0.4, 0.1, 0.2]);
        f.remove(INSTRUMENT);
        assert_eq!(f.instrument(), None);
    }

    #[test]
    fn class_ids() {
        assert!(ClassId::new(16).is_err());
        assert!(ClassId::new(15).unwrap().is_instrument());
        assert_eq!(ClassId::anatomy().count(), 15);
        assert!(ClassId::anatomy().all(|c| !c.is_instrument()));
    }

    #[test]
    fn prediction_rows() {
        let t = DeltaTrajectory::from_prediction(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(t.horizon(), 2);
        assert_eq!(t.center_displacement(), [6.0, 8.0]);
        assert_eq!(t.mean_center_direction(), [3.0, 4.0]);
        assert!(DeltaTrajectory::from_prediction(&[1.0, 2.0, 3.0]).is_err());
        assert!(DeltaTrajectory::new(alloc::vec![[1.5, 0.0, 0.0, 0.0]]).is_err());
    }
}
