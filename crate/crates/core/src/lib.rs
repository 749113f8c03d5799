//! Forecasting surgical instrument motion from anatomy and instrument
//! detections.
//!
//! This crate is `no_std` (with `alloc`) and holds everything that is pure
//! computation: the detection data model, window and label extraction, the
//! synthetic detection-stream generator, the transformer forecaster with its
//! hand-written backward pass, the training objective and optimizer, and the
//! direction-classification metrics. File formats, checkpoints and the CLI
//! live in the `toolcast` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod dataio;
pub mod error;
pub mod eval;
pub mod net;
pub mod synth;
pub mod train;
pub mod types;

pub(crate) mod tensor;

pub use error::{Error, Result};
pub use types::{
    classify_direction, direction_of, displacement_angle, BBox, ClassId, DeltaTrajectory, DetectionWindow,
    DirectionLabel, FrameDetections, BOX_FEATURES, INSTRUMENT, NUM_ANATOMY, NUM_CLASSES,
};
