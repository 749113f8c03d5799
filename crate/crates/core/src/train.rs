//! Training objective, learning-rate schedule, AdamW and the epoch loop.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Sample;
use crate::error::{Error, Result};
use crate::net::{backward_trace, forward_trace, ForecasterParams, Gradients, NetConfig};
use crate::types::DeltaTrajectory;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the direction term.
    pub lambda: f64,
    /// Below this norm an average direction vector counts as zero.
    pub epsilon_dir: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.5,
            epsilon_dir: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.epsilon_dir > 0.0) {
            return Err(Error::Config(format!("epsilon_dir must be > 0, got {}", self.epsilon_dir)));
        }
        Ok(())
    }
}

/// Loss value split into its two terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub l1: f64,
    pub direction: f64,
}

/// Direction term `lambda * (1 - cos(mean_p, mean_g))` over the `(dcx, dcy)`
/// columns, with its gradient w.r.t. the prediction's mean center motion.
/// Zero, with zero gradient, when either mean has norm below `epsilon_dir`.
fn direction_term(pred: &[f64], target: &[f64], cfg: &LossConfig) -> (f64, [f64; 2]) {
    let f = (pred.len() / 4) as f64;
    let mean = |v: &[f64]| {
        let (mut x, mut y) = (0.0, 0.0);
        for row in v.chunks_exact(4) {
            x += row[0];
            y += row[1];
        }
        [x / f, y / f]
    };
    let p = mean(pred);
    let g = mean(target);
    let pp = p[0] * p[0] + p[1] * p[1];
    let gg = g[0] * g[0] + g[1] * g[1];
    let np = libm::sqrt(pp);
    let ng = libm::sqrt(gg);
    if np < cfg.epsilon_dir || ng < cfg.epsilon_dir {
        return (0.0, [0.0, 0.0]);
    }
    // sqrt(pp * gg) rounds back to pp when g = -p, so opposite means give
    // exactly -1
    let cos = ((p[0] * g[0] + p[1] * g[1]) / libm::sqrt(pp * gg)).clamp(-1.0, 1.0);
    let term = cfg.lambda * (1.0 - cos);
    let dcos = [
        g[0] / (np * ng) - cos * p[0] / (np * np),
        g[1] / (np * ng) - cos * p[1] / (np * np),
    ];
    (term, [-cfg.lambda * dcos[0], -cfg.lambda * dcos[1]])
}

/// Loss and its gradient on flat `f * 4` slices; the gradient is written to
/// `grad` scaled by `scale`.
pub fn loss_flat(pred: &[f64], target: &[f64], cfg: &LossConfig, scale: f64, grad: &mut [f64]) -> Result<LossValue> {
    if pred.len() != target.len() || pred.is_empty() || pred.len() % 4 != 0 || grad.len() != pred.len() {
        return Err(Error::Shape(format!(
            "prediction has {} values, target {}",
            pred.len(),
            target.len()
        )));
    }
    let mut l1 = 0.0;
    for ((g, p), t) in grad.iter_mut().zip(pred).zip(target) {
        let diff = p - t;
        l1 += diff.abs();
        *g = if diff > 0.0 {
            scale
        } else if diff < 0.0 {
            -scale
        } else {
            0.0
        };
    }
    let (direction, dmean) = direction_term(pred, target, cfg);
    if direction != 0.0 || dmean != [0.0, 0.0] {
        let f = (pred.len() / 4) as f64;
        for row in grad.chunks_exact_mut(4) {
            row[0] += scale * dmean[0] / f;
            row[1] += scale * dmean[1] / f;
        }
    }
    Ok(LossValue {
        total: l1 + direction,
        l1,
        direction,
    })
}

/// Sum of absolute delta errors plus the weighted direction term, with the
/// gradient w.r.t. every prediction entry (sign subgradient, 0 at ties).
pub fn loss(pred: &DeltaTrajectory, target: &DeltaTrajectory, cfg: &LossConfig) -> Result<(LossValue, DeltaTrajectory)> {
    if pred.horizon() != target.horizon() {
        return Err(Error::Shape(format!(
            "prediction horizon {} vs target horizon {}",
            pred.horizon(),
            target.horizon()
        )));
    }
    let p = pred.flat();
    let mut grad = vec![0.0; p.len()];
    let value = loss_flat(&p, &target.flat(), cfg, 1.0, &mut grad)?;
    Ok((value, DeltaTrajectory::from_prediction(&grad)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub weight_decay: f64,
    /// Rescale each batch gradient to at most this L2 norm. Off by default.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            peak_lr: 1e-4,
            warmup_epochs: 60,
            total_epochs: 75,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            weight_decay: 0.01,
            max_grad_norm: None,
            seed: 0,
        }
    }
}

impl OptimConfig {
    /// Epoch budget used for a forecast horizon: 75 for 8 frames, 150 for 16.
    pub fn default_epochs(horizon: usize) -> usize {
        if horizon >= 16 {
            150
        } else {
            75
        }
    }

    pub fn for_horizon(horizon: usize) -> Self {
        OptimConfig {
            total_epochs: Self::default_epochs(horizon),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m| Err(Error::Config(m));
        if self.total_epochs == 0 || self.batch_size == 0 {
            return bad(format!(
                "total_epochs ({}) and batch_size ({}) must be positive",
                self.total_epochs, self.batch_size
            ));
        }
        if self.warmup_epochs > self.total_epochs {
            return bad(format!(
                "warmup_epochs {} exceeds total_epochs {}",
                self.warmup_epochs, self.total_epochs
            ));
        }
        for (name, v) in [
            ("peak_lr", self.peak_lr),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("adam_epsilon", self.adam_epsilon),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.beta1 < 1.0 && self.beta2 < 1.0) {
            return bad("betas must be below 1".into());
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) || !c.is_finite() {
                return bad(format!("max_grad_norm must be positive, got {c}"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        Ok(())
    }
}

/// Linear warm-up to `peak_lr`, constant afterwards.
pub fn lr_at(epoch: usize, cfg: &OptimConfig) -> Result<f64> {
    if epoch >= cfg.total_epochs {
        return Err(Error::Range {
            what: "epoch",
            value: epoch as i64,
            range: format!("[0, {})", cfg.total_epochs),
        });
    }
    if epoch < cfg.warmup_epochs {
        Ok(cfg.peak_lr * (epoch + 1) as f64 / cfg.warmup_epochs as f64)
    } else {
        Ok(cfg.peak_lr)
    }
}

/// First and second moment estimates of AdamW.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One AdamW update on flat slices. Weight decay shrinks the parameters by
/// `lr * weight_decay` directly instead of entering the gradient.
///
/// The update is rejected before any mutation if a gradient is non-finite.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, cfg: &OptimConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerics(format!("non-finite gradient at parameter {i}")));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *p *= decay;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (libm::sqrt(v_hat) + cfg.adam_epsilon);
    }
    Ok(())
}

/// [`adamw_step`] on a parameter set.
pub fn step(params: &mut ForecasterParams, grads: &Gradients, state: &mut AdamState, lr: f64, cfg: &OptimConfig) -> Result<()> {
    if params.layout() != grads.layout() {
        return Err(Error::Shape("gradient layout differs from parameters".into()));
    }
    adamw_step(params.values_mut(), grads.values(), state, lr, cfg)
}

/// Scales `grads` down to L2 norm `max_norm` if it is larger; returns the
/// norm before scaling.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = libm::sqrt(grads.values().iter().map(|g| g * g).sum::<f64>());
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

fn check_horizon(net: &NetConfig, sample: &Sample) -> Result<()> {
    if sample.target.horizon() != net.horizon {
        return Err(Error::Shape(format!(
            "sample horizon {} vs model horizon {}",
            sample.target.horizon(),
            net.horizon
        )));
    }
    Ok(())
}

/// Mean loss over `batch` and its gradient. Dropout is active when `rng`
/// is given.
pub fn batch_gradient(
    params: &ForecasterParams,
    batch: &[&Sample],
    use_anatomy: bool,
    loss_cfg: &LossConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = params.zeros_like();
    let mut upstream = vec![0.0; params.config().output_dim()];
    let mut total = 0.0;
    for sample in batch {
        check_horizon(params.config(), sample)?;
        let input = sample.window.to_tensor(use_anatomy);
        let trace = forward_trace(params, &input, rng.as_deref_mut())?;
        let value = loss_flat(trace.output(), &sample.target.flat(), loss_cfg, scale, &mut upstream)?;
        total += value.total;
        backward_trace(params, &trace, &upstream, &mut grads)?;
    }
    Ok((total * scale, grads))
}

/// Mean inference-mode loss over `samples`.
pub fn mean_loss(params: &ForecasterParams, samples: &[Sample], use_anatomy: bool, loss_cfg: &LossConfig) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("no samples to evaluate".into()));
    }
    let mut grad = vec![0.0; params.config().output_dim()];
    let mut total = 0.0;
    for sample in samples {
        check_horizon(params.config(), sample)?;
        let trace = forward_trace(params, &sample.window.to_tensor(use_anatomy), None)?;
        total += loss_flat(trace.output(), &sample.target.flat(), loss_cfg, 1.0, &mut grad)?.total;
    }
    Ok(total / samples.len() as f64)
}

/// One row of the training report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Zero-based epoch.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

/// Owns the parameter set and optimizer state across epochs.
pub struct Trainer {
    params: ForecasterParams,
    state: AdamState,
    loss: LossConfig,
    optim: OptimConfig,
    use_anatomy: bool,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    /// Fresh parameters initialized from `optim.seed`.
    pub fn new(net: &NetConfig, loss: &LossConfig, optim: &OptimConfig, use_anatomy: bool) -> Result<Self> {
        let params = ForecasterParams::init(net, optim.seed)?;
        Self::from_params(params, loss, optim, use_anatomy)
    }

    pub fn from_params(params: ForecasterParams, loss: &LossConfig, optim: &OptimConfig, use_anatomy: bool) -> Result<Self> {
        loss.validate()?;
        optim.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(optim.seed);
        rng.set_stream(1);
        Ok(Trainer {
            state: AdamState::new(params.values().len()),
            params,
            loss: loss.clone(),
            optim: optim.clone(),
            use_anatomy,
            rng,
            epoch: 0,
        })
    }

    pub fn params(&self) -> &ForecasterParams {
        &self.params
    }

    pub fn into_params(self) -> ForecasterParams {
        self.params
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One pass over shuffled mini-batches; returns the mean training loss
    /// and the learning rate used. On error the parameters keep the values
    /// of the last successful step.
    pub fn run_epoch(&mut self, samples: &[Sample]) -> Result<(f64, f64)> {
        if samples.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let lr = lr_at(self.epoch, &self.optim)?;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut self.rng);
        let dropout = self.params.config().dropout > 0.0;
        let mut total = 0.0;
        for chunk in order.chunks(self.optim.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let rng = if dropout { Some(&mut self.rng) } else { None };
            let (mean, mut grads) = batch_gradient(&self.params, &batch, self.use_anatomy, &self.loss, rng)?;
            if let Some(c) = self.optim.max_grad_norm {
                clip_grad_norm(&mut grads, c);
            }
            step(&mut self.params, &grads, &mut self.state, lr, &self.optim)?;
            total += mean * batch.len() as f64;
        }
        self.epoch += 1;
        Ok((total / samples.len() as f64, lr))
    }
}

/// Full training run. `on_epoch` sees every record with the parameters at
/// the end of that epoch, e.g. to write checkpoints; an error from it stops
/// training.
pub fn train<F>(
    samples: &[Sample],
    validation: &[Sample],
    net: &NetConfig,
    loss_cfg: &LossConfig,
    optim: &OptimConfig,
    use_anatomy: bool,
    mut on_epoch: F,
) -> Result<(ForecasterParams, Vec<EpochRecord>)>
where
    F: FnMut(&EpochRecord, &ForecasterParams) -> Result<()>,
{
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut trainer = Trainer::new(net, loss_cfg, optim, use_anatomy)?;
    let mut report = Vec::with_capacity(optim.total_epochs);
    for epoch in 0..optim.total_epochs {
        let (train_loss, lr) = trainer.run_epoch(samples)?;
        if !train_loss.is_finite() {
            return Err(Error::Numerics(format!("training loss became {train_loss} in epoch {epoch}")));
        }
        let val_loss = if validation.is_empty() {
            None
        } else {
            Some(mean_loss(trainer.params(), validation, use_anatomy, loss_cfg)?)
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        };
        on_epoch(&record, trainer.params())?;
        report.push(record);
    }
    Ok((trainer.into_params(), report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(rows: &[[f64; 4]]) -> DeltaTrajectory {
        DeltaTrajectory::from_prediction(&rows.iter().flatten().copied().collect::<Vec<_>>()).unwrap()
    }

    /// Term-by-term scalar evaluation of the objective.
    fn oracle(pred: &[[f64; 4]], target: &[[f64; 4]], lambda: f64) -> f64 {
        let mut l1 = 0.0;
        for r in 0..pred.len() {
            for j in 0..4 {
                l1 += (target[r][j] - pred[r][j]).abs();
            }
        }
        let n = pred.len() as f64;
        let (mut px, mut py, mut gx, mut gy) = (0.0, 0.0, 0.0, 0.0);
        for r in 0..pred.len() {
            px += pred[r][0] / n;
            py += pred[r][1] / n;
            gx += target[r][0] / n;
            gy += target[r][1] / n;
        }
        let cos = (px * gx + py * gy) / ((px * px + py * py).sqrt() * (gx * gx + gy * gy).sqrt());
        l1 + lambda * (1.0 - cos)
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let t = traj(&[[0.01, -0.02, 0.0, 0.001], [0.02, -0.01, 0.0, 0.0]]);
        let (v, g) = loss(&t, &t, &LossConfig::default()).unwrap();
        assert!(v.total.abs() < 1e-12, "{}", v.total);
        assert!(g.flat().iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn opposite_directions_add_two_lambda() {
        let p = traj(&[[0.1, 0.2, 0.0, 0.0], [0.1, 0.2, 0.0, 0.0]]);
        let t = traj(&[[-0.1, -0.2, 0.0, 0.0], [-0.1, -0.2, 0.0, 0.0]]);
        let (v, _) = loss(&p, &t, &LossConfig::default()).unwrap();
        let a = 2.0 * (0.2 + 0.4);
        assert!((v.l1 - a).abs() < 1e-12);
        assert!((v.direction - 1.0).abs() < 1e-12);
        assert!((v.total - (a + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn integer_toy_matches_oracle() {
        let pred = [[1.0, 2.0, 0.0, -1.0], [3.0, -1.0, 2.0, 0.0], [0.0, 0.0, 1.0, 1.0], [-2.0, 4.0, 0.0, 3.0]];
        let target = [[2.0, 2.0, 1.0, 0.0], [1.0, 1.0, 0.0, 0.0], [-1.0, 3.0, 0.0, 2.0], [0.0, -2.0, 1.0, 1.0]];
        let cfg = LossConfig::default();
        let (v, _) = loss(&traj(&pred), &traj(&target), &cfg).unwrap();
        assert!((v.total - oracle(&pred, &target, 0.5)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_direction_contributes_nothing() {
        let p = traj(&[[0.1, 0.0, 0.0, 0.0], [-0.1, 0.0, 0.0, 0.0]]);
        let t = traj(&[[0.0, 0.3, 0.0, 0.0], [0.0, 0.3, 0.0, 0.0]]);
        let (v, g) = loss(&p, &t, &LossConfig::default()).unwrap();
        assert_eq!(v.direction, 0.0);
        // pure sign subgradient
        assert_eq!(g.flat(), vec![1.0, -1.0, 0.0, 0.0, -1.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch() {
        let a = DeltaTrajectory::zeros(4);
        let b = DeltaTrajectory::zeros(8);
        assert!(matches!(loss(&a, &b, &LossConfig::default()), Err(Error::Shape(_))));
    }

    #[test]
    fn schedule_values() {
        let cfg = OptimConfig::default();
        assert!((lr_at(59, &cfg).unwrap() - 1e-4).abs() < 1e-12);
        assert!((lr_at(0, &cfg).unwrap() - 1e-4 / 60.0).abs() < 1e-18);
        assert_eq!(lr_at(74, &cfg).unwrap(), 1e-4);
        assert!(matches!(lr_at(75, &cfg), Err(Error::Range { .. })));
        let no_warmup = OptimConfig {
            warmup_epochs: 0,
            ..cfg
        };
        assert_eq!(lr_at(0, &no_warmup).unwrap(), 1e-4);
        assert_eq!(OptimConfig::for_horizon(8).total_epochs, 75);
        assert_eq!(OptimConfig::for_horizon(16).total_epochs, 150);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let net = NetConfig {
            seq_len: 2,
            n_layers: 1,
            ff_dim: 8,
            fc_dims: [4, 4, 4],
            horizon: 1,
            ..NetConfig::default()
        };
        let mut g = ForecasterParams::zeros(&net).unwrap();
        g.values_mut()[0] = 3.0;
        g.values_mut()[1] = 4.0;
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!(&g.values()[..2], &[3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g.values()[0] - 0.6).abs() < 1e-15 && (g.values()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adamw_single_steps() {
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut p = [0.5];
        let mut st = AdamState::new(1);
        adamw_step(&mut p, &[0.0], &mut st, 1e-3, &cfg).unwrap();
        assert_eq!(p, [0.5]);

        // closed form for the first step: m_hat = g, v_hat = g^2
        let mut p = [0.5];
        let mut st = AdamState::new(1);
        adamw_step(&mut p, &[1.0], &mut st, 1e-3, &cfg).unwrap();
        assert!((p[0] - (0.5 - 1e-3 / (1.0 + 1e-8))).abs() < 1e-15);

        let decay = OptimConfig {
            weight_decay: 0.01,
            ..OptimConfig::default()
        };
        let mut p = [0.5];
        let mut st = AdamState::new(1);
        adamw_step(&mut p, &[0.0], &mut st, 1e-3, &decay).unwrap();
        assert!((p[0] - 0.5 * (1.0 - 1e-3 * 0.01)).abs() < 1e-16);

        let mut p = [0.5, -0.25];
        let mut st = AdamState::new(2);
        adamw_step(&mut p, &[3.0, -2.0], &mut st, 0.0, &decay).unwrap();
        assert_eq!(p, [0.5, -0.25]);

        let before = p;
        assert!(matches!(
            adamw_step(&mut p, &[f64::NAN, 1.0], &mut st, 1e-3, &decay),
            Err(Error::Numerics(_))
        ));
        assert_eq!(p, before);
    }

    #[test]
    fn optim_validation() {
        let bad = OptimConfig {
            warmup_epochs: 80,
            ..OptimConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(OptimConfig::default().validate().is_ok());
    }
}
