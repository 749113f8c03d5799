//! Transformer-encoder forecaster.

mod config;
mod model;
mod params;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

pub use config::{Aggregation, NetConfig};
pub use model::{
    backward, backward_masked, backward_trace, forward, forward_masked, forward_trace, Forecast, LatentVector, Trace,
    LATENT_DIM,
};
pub use params::{ForecasterParams, Gradients, ParamLayout, TensorEntry, TensorKind};

use crate::error::{Error, Result};

/// Sinusoidal position codes, `s x d` row-major:
/// `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn positional_encoding(s: usize, d: usize) -> Result<Vec<f64>> {
    if d % 2 != 0 {
        return Err(Error::Config(format!("positional encoding needs an even dimension, got {d}")));
    }
    let mut pe = vec![0.0; s * d];
    for i in 0..d / 2 {
        let rate = libm::pow(10000.0, (2 * i) as f64 / d as f64);
        for pos in 0..s {
            let angle = pos as f64 / rate;
            pe[pos * d + 2 * i] = libm::sin(angle);
            pe[pos * d + 2 * i + 1] = libm::cos(angle);
        }
    }
    Ok(pe)
}
