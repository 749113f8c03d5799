use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{BOX_FEATURES, NUM_CLASSES};

/// How the encoder output is reduced before the fully connected stack.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Concatenate all `s` tokens (`s * token_dim` features).
    #[default]
    Flatten,
    /// Average the tokens (`token_dim` features).
    MeanPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub seq_len: usize,
    pub n_classes: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub fc_dims: [usize; 3],
    pub latent_dim: usize,
    pub horizon: usize,
    pub dropout: f64,
    pub aggregation: Aggregation,
    pub layer_norm_eps: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            seq_len: 64,
            n_classes: NUM_CLASSES,
            n_layers: 6,
            n_heads: 5,
            ff_dim: 320,
            fc_dims: [512, 256, 128],
            latent_dim: 16,
            horizon: 8,
            dropout: 0.1,
            aggregation: Aggregation::Flatten,
            layer_norm_eps: 1e-5,
        }
    }
}

impl NetConfig {
    /// Width of one frame token (`n_classes * 5`).
    pub fn token_dim(&self) -> usize {
        self.n_classes * BOX_FEATURES
    }

    pub fn head_dim(&self) -> usize {
        self.token_dim() / self.n_heads
    }

    pub fn output_dim(&self) -> usize {
        self.horizon * 4
    }

    /// Input width of the first fully connected layer.
    pub fn fc_input_dim(&self) -> usize {
        match self.aggregation {
            Aggregation::Flatten => self.seq_len * self.token_dim(),
            Aggregation::MeanPool => self.token_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: alloc::string::String| Err(Error::Config(m));
        if self.n_classes != NUM_CLASSES {
            return fail(format!("n_classes must be {NUM_CLASSES}, got {}", self.n_classes));
        }
        if self.seq_len == 0 || self.horizon == 0 {
            return fail(format!(
                "seq_len ({}) and horizon ({}) must be positive",
                self.seq_len, self.horizon
            ));
        }
        if self.n_heads == 0 || self.token_dim() % self.n_heads != 0 {
            return fail(format!(
                "token_dim {} not divisible by n_heads {}",
                self.token_dim(),
                self.n_heads
            ));
        }
        if self.token_dim() % 2 != 0 {
            return fail("token_dim must be even for sinusoidal encoding".into());
        }
        if self.ff_dim == 0 || self.fc_dims.contains(&0) {
            return fail("layer widths must be positive".into());
        }
        if self.latent_dim != 16 {
            return fail(format!("latent_dim must be 16, got {}", self.latent_dim));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if !(self.layer_norm_eps > 0.0) {
            return fail("layer_norm_eps must be positive".into());
        }
        Ok(())
    }
}
