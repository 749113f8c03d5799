use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::NetConfig;
use crate::error::{Error, Result};

/// Location of one named tensor inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub range: Range<usize>,
    /// Initialization fan-in; `None` for layer-norm tensors.
    pub fan_in: Option<usize>,
    pub kind: TensorKind,
}

/// What a tensor belongs to, used to group gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TensorKind {
    Attention,
    LayerNormScale,
    LayerNormOffset,
    FeedForward,
    FullyConnected,
    Latent,
    Decoder,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct LinearSlots {
    pub w: Range<usize>,
    pub b: Range<usize>,
    pub n_in: usize,
    pub n_out: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct NormSlots {
    pub gamma: Range<usize>,
    pub beta: Range<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct EncoderSlots {
    pub q: LinearSlots,
    pub k: LinearSlots,
    pub v: LinearSlots,
    pub o: LinearSlots,
    pub norm1: NormSlots,
    pub ff1: LinearSlots,
    pub ff2: LinearSlots,
    pub norm2: NormSlots,
}

/// Layout of every learnable tensor, fully determined by a [`NetConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLayout {
    entries: Vec<TensorEntry>,
    pub(crate) layers: Vec<EncoderSlots>,
    pub(crate) fc: Vec<LinearSlots>,
    pub(crate) latent: LinearSlots,
    pub(crate) decoder: LinearSlots,
    total: usize,
}

struct Builder {
    entries: Vec<TensorEntry>,
    next: usize,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, fan_in: Option<usize>, kind: TensorKind) -> Range<usize> {
        let n: usize = shape.iter().product();
        let range = self.next..self.next + n;
        self.next += n;
        self.entries.push(TensorEntry {
            name,
            shape,
            range: range.clone(),
            fan_in,
            kind,
        });
        range
    }

    fn linear(&mut self, prefix: &str, n_in: usize, n_out: usize, kind: TensorKind) -> LinearSlots {
        let w = self.push(format!("{prefix}.weight"), vec![n_out, n_in], Some(n_in), kind);
        let b = self.push(format!("{prefix}.bias"), vec![n_out], Some(n_in), kind);
        LinearSlots { w, b, n_in, n_out }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormSlots {
        let gamma = self.push(format!("{prefix}.weight"), vec![d], None, TensorKind::LayerNormScale);
        let beta = self.push(format!("{prefix}.bias"), vec![d], None, TensorKind::LayerNormOffset);
        NormSlots { gamma, beta }
    }
}

impl ParamLayout {
    pub fn new(cfg: &NetConfig) -> Self {
        let d = cfg.token_dim();
        let mut b = Builder {
            entries: Vec::new(),
            next: 0,
        };
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("encoder.{l}");
                EncoderSlots {
                    q: b.linear(&format!("{p}.attn.query"), d, d, TensorKind::Attention),
                    k: b.linear(&format!("{p}.attn.key"), d, d, TensorKind::Attention),
                    v: b.linear(&format!("{p}.attn.value"), d, d, TensorKind::Attention),
                    o: b.linear(&format!("{p}.attn.output"), d, d, TensorKind::Attention),
                    norm1: b.norm(&format!("{p}.norm1"), d),
                    ff1: b.linear(&format!("{p}.ff.0"), d, cfg.ff_dim, TensorKind::FeedForward),
                    ff2: b.linear(&format!("{p}.ff.1"), cfg.ff_dim, d, TensorKind::FeedForward),
                    norm2: b.norm(&format!("{p}.norm2"), d),
                }
            })
            .collect();
        let mut n_in = cfg.fc_input_dim();
        let mut fc = Vec::with_capacity(3);
        for (i, &n_out) in cfg.fc_dims.iter().enumerate() {
            fc.push(b.linear(&format!("fc.{i}"), n_in, n_out, TensorKind::FullyConnected));
            n_in = n_out;
        }
        let latent = b.linear("latent", n_in, cfg.latent_dim, TensorKind::Latent);
        let decoder = b.linear("decoder", cfg.latent_dim, cfg.output_dim(), TensorKind::Decoder);
        ParamLayout {
            total: b.next,
            entries: b.entries,
            layers,
            fc,
            latent,
            decoder,
        }
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }
}

/// All learnable tensors of the forecaster, stored in one flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecasterParams {
    config: NetConfig,
    layout: ParamLayout,
    values: Vec<f64>,
}

/// Gradients share the parameter layout.
pub type Gradients = ForecasterParams;

impl ForecasterParams {
    /// Seeded initialization: linear layers uniform in `+-1/sqrt(fan_in)`,
    /// layer-norm scale 1 and offset 0.
    pub fn init(config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; layout.len()];
        for e in layout.entries() {
            let slot = &mut values[e.range.clone()];
            match (e.kind, e.fan_in) {
                (TensorKind::LayerNormScale, _) => slot.fill(1.0),
                (TensorKind::LayerNormOffset, _) => slot.fill(0.0),
                (_, Some(fan_in)) => {
                    let bound = 1.0 / libm::sqrt(fan_in as f64);
                    for v in slot {
                        *v = rng.random_range(-bound..bound);
                    }
                }
                (_, None) => unreachable!("linear tensors always have a fan-in"),
            }
        }
        Ok(ForecasterParams {
            config: config.clone(),
            layout,
            values,
        })
    }

    /// All-zero tensors with the layout of `config`.
    pub fn zeros(config: &NetConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        let values = vec![0.0; layout.len()];
        Ok(ForecasterParams {
            config: config.clone(),
            layout,
            values,
        })
    }

    /// Rebuilds parameters from a flat vector in layout order.
    pub fn from_values(config: &NetConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        if values.len() != layout.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                layout.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerics("non-finite parameter value".into()));
        }
        Ok(ForecasterParams {
            config: config.clone(),
            layout,
            values,
        })
    }

    /// Zeroed gradient buffer for these parameters.
    pub fn zeros_like(&self) -> Self {
        ForecasterParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            values: vec![0.0; self.values.len()],
        }
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.entry(name).map(|e| &self.values[e.range.clone()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.entry(name)?.range.clone();
        Some(&mut self.values[range])
    }

    /// `(name, shape, data)` for every tensor in layout order.
    pub fn tensors(&self) -> impl Iterator<Item = (&str, &[usize], &[f64])> {
        self.layout
            .entries()
            .iter()
            .map(move |e| (e.name.as_str(), e.shape.as_slice(), &self.values[e.range.clone()]))
    }

    pub fn fill(&mut self, v: f64) {
        self.values.fill(v);
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &Self) {
        crate::tensor::axpy(alpha, &other.values, &mut self.values);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub(crate) fn slice(&self, r: &Range<usize>) -> &[f64] {
        &self.values[r.clone()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout_shapes() {
        let cfg = NetConfig::default();
        let layout = ParamLayout::new(&cfg);
        assert_eq!(layout.entry("decoder.weight").unwrap().shape, vec![32, 16]);
        assert_eq!(layout.entry("fc.0.weight").unwrap().shape, vec![512, 64 * 80]);
        assert_eq!(layout.entry("latent.weight").unwrap().shape, vec![16, 128]);
        assert_eq!(layout.entry("encoder.5.ff.0.weight").unwrap().shape, vec![320, 80]);
        assert!(layout.entry("encoder.6.norm1.weight").is_none());
        let sum: usize = layout.entries().iter().map(|e| e.range.len()).sum();
        assert_eq!(sum, layout.len());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = NetConfig {
            seq_len: 8,
            n_layers: 2,
            ..NetConfig::default()
        };
        let a = ForecasterParams::init(&cfg, 3).unwrap();
        let b = ForecasterParams::init(&cfg, 3).unwrap();
        let c = ForecasterParams::init(&cfg, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.values(), c.values());
        assert!(a.values().iter().all(|v| v.is_finite() && v.abs() <= 1.0));
        assert!(a.tensor("encoder.1.norm2.weight").unwrap().iter().all(|&v| v == 1.0));
        assert!(a.tensor("encoder.0.norm1.bias").unwrap().iter().all(|&v| v == 0.0));
        let bound = 1.0 / (8.0 * 80.0f64).sqrt();
        assert!(a.tensor("fc.0.weight").unwrap().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn decoder_shape_follows_horizon() {
        let cfg = NetConfig {
            horizon: 16,
            ..NetConfig::default()
        };
        let layout = ParamLayout::new(&cfg);
        assert_eq!(layout.entry("decoder.weight").unwrap().shape, vec![64, 16]);
    }
}
