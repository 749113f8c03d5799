//! Direction-classification accuracy, the random baseline, and the
//! anatomy-vs-instrument ablation table.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Sample;
use crate::error::{Error, Result};
use crate::net::{forward_masked, ForecasterParams};
use crate::types::{direction_of, DeltaTrajectory, DirectionLabel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Displacement thresholds, descending.
    pub thresholds: Vec<f64>,
    pub horizons: Vec<usize>,
    /// Seed of the random baseline.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds: alloc::vec![0.1, 0.05, 0.0],
            horizons: alloc::vec![8, 16],
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() || self.horizons.is_empty() {
            return Err(Error::Config("need at least one threshold and one horizon".into()));
        }
        if self.thresholds.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
            return Err(Error::Config("thresholds must be finite and >= 0".into()));
        }
        if self.thresholds.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::Config("thresholds must be sorted in descending order".into()));
        }
        if self.horizons.contains(&0) {
            return Err(Error::Config("horizons must be positive".into()));
        }
        Ok(())
    }

    pub fn max_horizon(&self) -> usize {
        self.horizons.iter().copied().max().unwrap_or(0)
    }
}

/// Accuracy of one set of predictions plus the bookkeeping behind it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    /// Percentage of scored samples whose predicted label matched.
    pub accuracy: f64,
    pub matches: usize,
    /// Samples with a ground-truth direction.
    pub scored: usize,
    /// Samples dropped because the ground-truth displacement was zero.
    pub dropped_zero_targets: usize,
    /// Scored samples whose predicted displacement was zero (counted wrong).
    pub zero_predictions: usize,
}

/// Per-sample comparison used for prediction dumps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub gt_label: Option<DirectionLabel>,
    pub pred_label: Option<DirectionLabel>,
    pub gt_displacement: [f64; 2],
    pub pred_displacement: [f64; 2],
}

impl Outcome {
    pub fn new(pred: &DeltaTrajectory, target: &DeltaTrajectory) -> Self {
        let gt = target.center_displacement();
        let pd = pred.center_displacement();
        Outcome {
            gt_label: direction_of(gt[0], gt[1]).ok(),
            pred_label: direction_of(pd[0], pd[1]).ok(),
            gt_displacement: gt,
            pred_displacement: pd,
        }
    }
}

fn tally(pairs: impl Iterator<Item = (Option<DirectionLabel>, Option<DirectionLabel>)>) -> Result<Accuracy> {
    let mut acc = Accuracy::default();
    for (gt, pred) in pairs {
        let Some(gt) = gt else {
            acc.dropped_zero_targets += 1;
            continue;
        };
        acc.scored += 1;
        match pred {
            Some(p) if p == gt => acc.matches += 1,
            Some(_) => {}
            None => acc.zero_predictions += 1,
        }
    }
    if acc.scored == 0 {
        return Err(Error::Eval("no sample has a ground-truth direction".into()));
    }
    acc.accuracy = 100.0 * acc.matches as f64 / acc.scored as f64;
    Ok(acc)
}

/// Percentage of samples whose summed predicted center displacement falls in
/// the same direction sector as the ground truth.
pub fn direction_accuracy(predictions: &[DeltaTrajectory], targets: &[DeltaTrajectory]) -> Result<Accuracy> {
    if predictions.is_empty() {
        return Err(Error::Eval("no predictions to score".into()));
    }
    if predictions.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if let Some((p, t)) = predictions.iter().zip(targets).find(|(p, t)| p.horizon() != t.horizon()) {
        return Err(Error::Shape(format!(
            "prediction horizon {} vs target horizon {}",
            p.horizon(),
            t.horizon()
        )));
    }
    tally(predictions.iter().zip(targets).map(|(p, t)| {
        let o = Outcome::new(p, t);
        (o.gt_label, o.pred_label)
    }))
}

/// Accuracy of uniformly drawn labels.
pub fn random_baseline(targets: &[DeltaTrajectory], seed: u64) -> Result<Accuracy> {
    if targets.is_empty() {
        return Err(Error::Eval("no targets to score".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tally(targets.iter().map(|t| {
        let [dx, dy] = t.center_displacement();
        let guess = DirectionLabel::ALL[rng.random_range(0..4)];
        (direction_of(dx, dy).ok(), Some(guess))
    }))
}

/// A trained model family evaluated in the ablation: one parameter set per
/// horizon, all run with the same anatomy flag.
#[derive(Clone, Debug)]
pub struct ModelVariant {
    pub name: String,
    pub use_anatomy: bool,
    pub models: Vec<ForecasterParams>,
}

impl ModelVariant {
    fn for_horizon(&self, horizon: usize) -> Result<&ForecasterParams> {
        self.models
            .iter()
            .find(|m| m.config().horizon == horizon)
            .ok_or_else(|| Error::Config(format!("variant '{}' has no model for horizon {horizon}", self.name)))
    }
}

pub const RANDOM_ROW: &str = "Random";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCell {
    pub variant: String,
    pub horizon: usize,
    pub threshold: f64,
    #[serde(flatten)]
    pub result: Accuracy,
}

/// Accuracy per (variant, horizon, threshold), laid out like an ablation
/// table: one row per variant, one column group per horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub variants: Vec<String>,
    pub horizons: Vec<usize>,
    pub thresholds: Vec<f64>,
    /// Samples passing each threshold (shared by every variant and horizon).
    pub filtered_counts: Vec<usize>,
    pub cells: Vec<AccuracyCell>,
}

impl AccuracyTable {
    pub fn cell(&self, variant: &str, horizon: usize, threshold: f64) -> Option<&AccuracyCell> {
        self.cells
            .iter()
            .find(|c| c.variant == variant && c.horizon == horizon && c.threshold == threshold)
    }

    /// Fixed-width text rendering.
    pub fn to_text(&self) -> String {
        let name_w = self.variants.iter().map(|v| v.len()).max().unwrap_or(5).max(5);
        let col = 8;
        let group_w = col * self.thresholds.len();
        let mut out = String::new();
        let _ = write!(out, "{:<name_w$}", "Model");
        for h in &self.horizons {
            let _ = write!(out, " |{:^group_w$}", format!("f = {h}"));
        }
        out.push('\n');
        let _ = write!(out, "{:<name_w$}", "");
        for _ in &self.horizons {
            out.push_str(" |");
            for t in &self.thresholds {
                let _ = write!(out, "{:>col$}", format!("{t}"));
            }
        }
        out.push('\n');
        for v in &self.variants {
            let _ = write!(out, "{v:<name_w$}");
            for &h in &self.horizons {
                out.push_str(" |");
                for &t in &self.thresholds {
                    match self.cell(v, h, t) {
                        Some(c) => {
                            let _ = write!(out, "{:>col$.2}", c.result.accuracy);
                        }
                        None => {
                            let _ = write!(out, "{:>col$}", "-");
                        }
                    }
                }
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<name_w$}", "n");
        for _ in &self.horizons {
            out.push_str(" |");
            for n in &self.filtered_counts {
                let _ = write!(out, "{n:>col$}");
            }
        }
        out.push('\n');
        out
    }
}

/// Per-sample outcomes of one variant at one horizon over the unfiltered set.
#[derive(Clone, Debug)]
pub struct VariantOutcomes {
    pub variant: String,
    pub horizon: usize,
    pub outcomes: Vec<Outcome>,
}

#[derive(Clone, Debug)]
pub struct Ablation {
    pub table: AccuracyTable,
    pub outcomes: Vec<VariantOutcomes>,
}

/// Evaluates every variant on one shared sample set per threshold.
///
/// `samples` must carry targets at least as long as the longest horizon;
/// shorter horizons score the leading rows. Filtering uses each sample's
/// 8-frame displacement, so a threshold selects the same samples for every
/// horizon and variant. A random-label row is appended.
pub fn ablate(samples: &[Sample], variants: &[ModelVariant], cfg: &EvalConfig) -> Result<Ablation> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Eval("empty test set".into()));
    }
    let max_h = cfg.max_horizon();
    if let Some(s) = samples.iter().find(|s| s.target.horizon() < max_h) {
        return Err(Error::Config(format!(
            "sample targets cover {} frames, evaluation needs {max_h}",
            s.target.horizon()
        )));
    }
    let masks: Vec<Vec<bool>> = cfg
        .thresholds
        .iter()
        .map(|&t| samples.iter().map(|s| t <= 0.0 || s.displacement_norm() > t).collect())
        .collect();
    let filtered_counts = masks.iter().map(|m| m.iter().filter(|&&b| b).count()).collect();

    let mut cells = Vec::new();
    let mut all_outcomes = Vec::new();
    for variant in variants {
        for &h in &cfg.horizons {
            let params = variant.for_horizon(h)?;
            let mut outcomes = Vec::with_capacity(samples.len());
            for s in samples {
                let pred = forward_masked(params, &s.window, variant.use_anatomy)?.prediction;
                outcomes.push(Outcome::new(&pred, &s.target.truncated(h)?));
            }
            for (&t, mask) in cfg.thresholds.iter().zip(&masks) {
                let result = tally(
                    outcomes
                        .iter()
                        .zip(mask)
                        .filter(|(_, &keep)| keep)
                        .map(|(o, _)| (o.gt_label, o.pred_label)),
                )?;
                cells.push(AccuracyCell {
                    variant: variant.name.clone(),
                    horizon: h,
                    threshold: t,
                    result,
                });
            }
            all_outcomes.push(VariantOutcomes {
                variant: variant.name.clone(),
                horizon: h,
                outcomes,
            });
        }
    }
    for (hi, &h) in cfg.horizons.iter().enumerate() {
        for (ti, (&t, mask)) in cfg.thresholds.iter().zip(&masks).enumerate() {
            let targets = samples
                .iter()
                .zip(mask)
                .filter(|(_, &keep)| keep)
                .map(|(s, _)| s.target.truncated(h))
                .collect::<Result<Vec<_>>>()?;
            let seed = cfg.seed.wrapping_add((hi * cfg.thresholds.len() + ti) as u64);
            cells.push(AccuracyCell {
                variant: RANDOM_ROW.into(),
                horizon: h,
                threshold: t,
                result: random_baseline(&targets, seed)?,
            });
        }
    }
    let mut names: Vec<String> = variants.iter().map(|v| v.name.clone()).collect();
    names.push(RANDOM_ROW.into());
    Ok(Ablation {
        table: AccuracyTable {
            variants: names,
            horizons: cfg.horizons.clone(),
            thresholds: cfg.thresholds.clone(),
            filtered_counts,
            cells,
        },
        outcomes: all_outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn traj(dx: f64, dy: f64, f: usize) -> DeltaTrajectory {
        DeltaTrajectory::new(vec![[dx / f as f64, dy / f as f64, 0.0, 0.0]; f]).unwrap()
    }

    #[test]
    fn identity_and_antipodal() {
        let targets: Vec<_> = [(0.1, 0.0), (0.0, -0.2), (-0.3, 0.1), (0.05, 0.4)]
            .iter()
            .map(|&(x, y)| traj(x, y, 8))
            .collect();
        assert_eq!(direction_accuracy(&targets, &targets).unwrap().accuracy, 100.0);
        let flipped: Vec<_> = targets
            .iter()
            .map(|t| {
                let rows: Vec<_> = t.rows().iter().map(|r| [-r[0], -r[1], r[2], r[3]]).collect();
                DeltaTrajectory::new(rows).unwrap()
            })
            .collect();
        assert_eq!(direction_accuracy(&flipped, &targets).unwrap().accuracy, 0.0);
    }

    #[test]
    fn two_of_three() {
        // labels: right/right, up/up, down/left
        let targets = [traj(0.3, 0.05, 8), traj(0.0, -0.2, 8), traj(0.0, 0.2, 8)];
        let preds = [traj(0.1, -0.01, 8), traj(0.01, -0.3, 8), traj(-0.2, 0.0, 8)];
        let acc = direction_accuracy(&preds, &targets).unwrap();
        assert_eq!(acc.matches, 2);
        assert!((acc.accuracy - 66.666_666_666_666_67).abs() < 1e-9);
    }

    #[test]
    fn zero_cases_are_reported() {
        let targets = [traj(0.0, 0.0, 4), traj(0.2, 0.0, 4), traj(0.2, 0.0, 4)];
        let preds = [traj(0.1, 0.0, 4), traj(0.0, 0.0, 4), traj(0.2, 0.0, 4)];
        let acc = direction_accuracy(&preds, &targets).unwrap();
        assert_eq!(acc.dropped_zero_targets, 1);
        assert_eq!(acc.zero_predictions, 1);
        assert_eq!(acc.scored, 2);
        assert_eq!(acc.accuracy, 50.0);
    }

    #[test]
    fn empty_inputs_error() {
        assert!(matches!(direction_accuracy(&[], &[]), Err(Error::Eval(_))));
        assert!(matches!(random_baseline(&[], 0), Err(Error::Eval(_))));
    }

    #[test]
    fn random_baseline_is_seeded() {
        let targets: Vec<_> = (0..4).map(|i| traj(i as f64 - 1.5, 0.2, 8)).collect();
        let a = random_baseline(&targets, 3).unwrap();
        assert_eq!(a, random_baseline(&targets, 3).unwrap());
    }

    #[test]
    fn random_baseline_near_quarter() {
        let targets: Vec<_> = (0..100_000)
            .map(|i| {
                let a = (i as f64) * 0.618_033_988_75 * core::f64::consts::TAU;
                traj(libm::cos(a), libm::sin(a), 4)
            })
            .collect();
        let acc = random_baseline(&targets, 11).unwrap().accuracy;
        assert!((acc - 25.0).abs() <= 0.7, "{acc}");
    }

    #[test]
    fn config_validation() {
        let mut cfg = EvalConfig::default();
        cfg.validate().unwrap();
        cfg.thresholds = vec![0.05, 0.1];
        assert!(cfg.validate().is_err());
        cfg.thresholds = vec![-0.1];
        assert!(cfg.validate().is_err());
    }
}
