//! The pipeline stages behind each subcommand. Every stage writes into a run
//! directory holding the resolved `run.toml` and a `manifest.json` listing
//! inputs and outputs.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use toolcast_core::dataio::{extract_samples, Sample};
use toolcast_core::eval::{self, Ablation, AccuracyTable, ModelVariant};
use toolcast_core::net::{forward_masked, ForecasterParams};
use toolcast_core::synth::DatasetSummary;
use toolcast_core::train::{self, EpochRecord};
use toolcast_core::BBox;

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::RunConfig;
use crate::dataset::{self, write_json, Dataset};
use crate::error::{Error, Result};

pub const RUN_CONFIG: &str = "run.toml";
pub const RUN_MANIFEST: &str = "manifest.json";
pub const ANATOMY_VARIANT: &str = "Anatomy+Instrument";
pub const INSTRUMENT_VARIANT: &str = "Instrument only";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub inputs: Vec<(String, String)>,
    pub outputs: Vec<String>,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))
}

fn write_run_files(dir: &Path, cfg: &RunConfig, manifest: &RunManifest) -> Result<()> {
    let path = dir.join(RUN_CONFIG);
    fs::write(&path, cfg.to_toml()?).map_err(Error::io(&path))?;
    write_json(&dir.join(RUN_MANIFEST), manifest)
}

fn manifest(command: &str, inputs: Vec<(&str, &Path)>, outputs: &[&str]) -> RunManifest {
    RunManifest {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        inputs: inputs
            .into_iter()
            .map(|(k, p)| (k.to_string(), p.display().to_string()))
            .collect(),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    }
}

/// Generates the synthetic dataset of `cfg.scene` into `cfg.paths.dataset`.
pub fn generate(cfg: &RunConfig) -> Result<DatasetSummary> {
    cfg.validate()?;
    let root = &cfg.paths.dataset;
    create_dir(root)?;
    let ds = dataset::generate_dataset(root, &cfg.scene)?;
    let videos: Vec<_> = ds.videos.iter().map(|v| v.detections.clone()).collect();
    let path = root.join(RUN_CONFIG);
    fs::write(&path, cfg.to_toml()?).map_err(Error::io(&path))?;
    Ok(toolcast_core::synth::describe(&videos, cfg.net.seq_len)?)
}

fn samples_of(ds: &Dataset, ids: &[String], s: usize, f: usize, stride: usize) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for v in ds.subset(ids)? {
        out.extend(extract_samples(&v, s, f, stride)?);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ForecasterParams,
    pub report: Vec<EpochRecord>,
    pub model_path: PathBuf,
}

pub const MODEL_FILE: &str = "model.tckp";
pub const LATEST_FILE: &str = "checkpoints/latest.tckp";
pub const REPORT_FILE: &str = "report.csv";
pub const LOG_FILE: &str = "train.log";

/// Trains one model on the forecaster-train split, scoring the validation
/// split after every epoch.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = dataset::load_dataset(&cfg.paths.dataset)?;
    let (s, f) = (cfg.net.seq_len, cfg.net.horizon);
    let split = &ds.manifest.split;
    let train_set = samples_of(&ds, &split.forecaster_train, s, f, cfg.windows.train_stride)?;
    let val_set = samples_of(&ds, &split.validation, s, f, cfg.windows.eval_stride)?;
    if train_set.is_empty() {
        return Err(Error::Data(format!(
            "no training samples for window {s} and horizon {f} in {}",
            cfg.paths.dataset.display()
        )));
    }

    let dir = &cfg.paths.run_dir;
    create_dir(&dir.join("checkpoints"))?;
    let mut outputs = vec![MODEL_FILE, LATEST_FILE, REPORT_FILE, LOG_FILE];
    if cfg.train.keep_every > 0 {
        outputs.push("checkpoints/epoch_NNNN.tckp");
    }
    write_run_files(dir, cfg, &manifest("train", vec![("dataset", &cfg.paths.dataset)], &outputs))?;

    let log_path = dir.join(LOG_FILE);
    let mut log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(&log_path)
        .map_err(Error::io(&log_path))?;
    let _ = writeln!(
        log_file,
        "training {} samples, validating {} samples, {} epochs, anatomy={}",
        train_set.len(),
        val_set.len(),
        cfg.optim.total_epochs,
        cfg.train.use_anatomy
    );
    log::info!(
        "training on {} samples ({} validation) for {} epochs",
        train_set.len(),
        val_set.len(),
        cfg.optim.total_epochs
    );

    let report_path = dir.join(REPORT_FILE);
    let mut report = csv::Writer::from_path(&report_path).map_err(|e| Error::Data(e.to_string()))?;
    report
        .write_record(["epoch", "train_loss", "val_loss", "lr"])
        .map_err(|e| Error::Data(e.to_string()))?;

    let meta_at = |epochs: usize| CheckpointMeta {
        use_anatomy: cfg.train.use_anatomy,
        epochs,
        seed: cfg.optim.seed,
        dataset: Some(cfg.paths.dataset.display().to_string()),
    };
    let start = Instant::now();
    let mut on_epoch = |rec: &EpochRecord, params: &ForecasterParams| -> toolcast_core::Result<()> {
        let io = |e: Error| toolcast_core::Error::Input(e.to_string());
        let val = rec.val_loss.map(|v| v.to_string()).unwrap_or_default();
        report
            .write_record([rec.epoch.to_string(), rec.train_loss.to_string(), val, rec.lr.to_string()])
            .and_then(|_| report.flush().map_err(csv::Error::from))
            .map_err(|e| toolcast_core::Error::Input(e.to_string()))?;
        checkpoint::save(&dir.join(LATEST_FILE), params, &meta_at(rec.epoch + 1)).map_err(io)?;
        if cfg.train.keep_every > 0 && (rec.epoch + 1) % cfg.train.keep_every == 0 {
            let path = dir.join(format!("checkpoints/epoch_{:04}.tckp", rec.epoch + 1));
            checkpoint::save(&path, params, &meta_at(rec.epoch + 1)).map_err(io)?;
        }
        let _ = writeln!(
            log_file,
            "epoch {} train_loss {} val_loss {:?} lr {} elapsed_s {:.1}",
            rec.epoch,
            rec.train_loss,
            rec.val_loss,
            rec.lr,
            start.elapsed().as_secs_f64()
        );
        log::info!("epoch {} train {:.5} val {:?}", rec.epoch, rec.train_loss, rec.val_loss);
        Ok(())
    };
    let (params, records) = train::train(
        &train_set,
        &val_set,
        &cfg.net,
        &cfg.loss,
        &cfg.optim,
        cfg.train.use_anatomy,
        &mut on_epoch,
    )?;
    let model_path = dir.join(MODEL_FILE);
    checkpoint::save(&model_path, &params, &meta_at(records.len()))?;
    Ok(TrainOutcome {
        params,
        report: records,
        model_path,
    })
}

pub const TABLE_CSV: &str = "accuracy.csv";
pub const TABLE_JSON: &str = "accuracy.json";
pub const TABLE_TEXT: &str = "accuracy.txt";
pub const PREDICTIONS_CSV: &str = "predictions.csv";

/// Loads checkpoints and groups them into variants by their anatomy flag,
/// anatomy first. Each variant needs exactly one checkpoint per horizon.
pub fn load_variants(paths: &[PathBuf], horizons: &[usize]) -> Result<Vec<ModelVariant>> {
    if paths.is_empty() {
        return Err(Error::Config("no checkpoints given".into()));
    }
    let mut variants: Vec<ModelVariant> = Vec::new();
    for path in paths {
        let ck = checkpoint::load(path)?;
        let h = ck.params.config().horizon;
        if !horizons.contains(&h) {
            return Err(Error::Config(format!(
                "{} forecasts {h} frames; evaluation horizons are {horizons:?}",
                path.display()
            )));
        }
        let name = if ck.meta.use_anatomy { ANATOMY_VARIANT } else { INSTRUMENT_VARIANT };
        let variant = match variants.iter_mut().find(|v| v.use_anatomy == ck.meta.use_anatomy) {
            Some(v) => v,
            None => {
                variants.push(ModelVariant {
                    name: name.into(),
                    use_anatomy: ck.meta.use_anatomy,
                    models: Vec::new(),
                });
                variants.last_mut().expect("just pushed")
            }
        };
        if variant.models.iter().any(|m| m.config().horizon == h) {
            return Err(Error::Config(format!("two '{name}' checkpoints for horizon {h}")));
        }
        variant.models.push(ck.params);
    }
    for v in &variants {
        for h in horizons {
            if !v.models.iter().any(|m| m.config().horizon == *h) {
                return Err(Error::Config(format!("'{}' has no checkpoint for horizon {h}", v.name)));
            }
        }
    }
    variants.sort_by_key(|v| !v.use_anatomy);
    Ok(variants)
}

/// Scores the checkpoints in `cfg.paths.checkpoints` on the test split and
/// writes the table files and the per-sample prediction dump. Nothing is
/// written unless every checkpoint loads and matches the config. With
/// `require_both` the checkpoints must cover both anatomy settings.
pub fn evaluate(cfg: &RunConfig, command: &str, require_both: bool) -> Result<Ablation> {
    cfg.validate()?;
    let variants = load_variants(&cfg.paths.checkpoints, &cfg.eval.horizons)?;
    if require_both && variants.len() != 2 {
        return Err(Error::Config(
            "ablation needs checkpoints trained with and without anatomy".into(),
        ));
    }
    let seq_len = variants[0].models[0].config().seq_len;
    if let Some(m) = variants.iter().flat_map(|v| &v.models).find(|m| m.config().seq_len != seq_len) {
        return Err(Error::Config(format!(
            "checkpoints disagree on window length ({} vs {seq_len})",
            m.config().seq_len
        )));
    }
    let ds = dataset::load_dataset(&cfg.paths.dataset)?;
    let samples = samples_of(
        &ds,
        &ds.manifest.split.test,
        seq_len,
        cfg.eval.max_horizon(),
        cfg.windows.eval_stride,
    )?;
    let ablation = eval::ablate(&samples, &variants, &cfg.eval)?;

    let dir = &cfg.paths.run_dir;
    create_dir(dir)?;
    let mut inputs = vec![("dataset", cfg.paths.dataset.as_path())];
    inputs.extend(cfg.paths.checkpoints.iter().map(|c| ("checkpoint", c.as_path())));
    write_run_files(
        dir,
        cfg,
        &manifest(command, inputs, &[TABLE_CSV, TABLE_JSON, TABLE_TEXT, PREDICTIONS_CSV]),
    )?;
    write_table(dir, &ablation.table)?;
    write_predictions(&dir.join(PREDICTIONS_CSV), &samples, &ablation)?;
    Ok(ablation)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(e.to_string())
}

pub fn write_table(dir: &Path, table: &AccuracyTable) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join(TABLE_CSV)).map_err(csv_err)?;
    w.write_record([
        "variant",
        "horizon",
        "threshold",
        "accuracy",
        "matches",
        "scored",
        "dropped_zero_targets",
        "zero_predictions",
    ])
    .map_err(csv_err)?;
    for c in &table.cells {
        let r = &c.result;
        w.write_record([
            c.variant.clone(),
            c.horizon.to_string(),
            c.threshold.to_string(),
            format!("{:.4}", r.accuracy),
            r.matches.to_string(),
            r.scored.to_string(),
            r.dropped_zero_targets.to_string(),
            r.zero_predictions.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(Error::io(dir.join(TABLE_CSV)))?;
    write_json(&dir.join(TABLE_JSON), table)?;
    let path = dir.join(TABLE_TEXT);
    fs::write(&path, table.to_text()).map_err(Error::io(&path))
}

fn write_predictions(path: &Path, samples: &[Sample], ablation: &Ablation) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record([
        "video_id",
        "t",
        "variant",
        "horizon",
        "gt_displacement8",
        "gt_label",
        "pred_label",
        "gt_dx",
        "gt_dy",
        "pred_dx",
        "pred_dy",
    ])
    .map_err(csv_err)?;
    let label = |l: Option<toolcast_core::DirectionLabel>| l.map(|l| l.as_str()).unwrap_or("none").to_string();
    for vo in &ablation.outcomes {
        for (s, o) in samples.iter().zip(&vo.outcomes) {
            w.write_record([
                s.window.video_id().to_string(),
                s.window.t().to_string(),
                vo.variant.clone(),
                vo.horizon.to_string(),
                s.displacement_norm().to_string(),
                label(o.gt_label),
                label(o.pred_label),
                o.gt_displacement[0].to_string(),
                o.gt_displacement[1].to_string(),
                o.pred_displacement[0].to_string(),
                o.pred_displacement[1].to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(Error::io(path))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnatomyBox {
    pub class: u8,
    pub name: String,
    pub bbox: BBox,
}

/// Overlay data for one forecast: future centers predicted and observed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastOverlay {
    pub video_id: String,
    pub t: u64,
    pub horizon: usize,
    pub use_anatomy: bool,
    pub instrument: BBox,
    /// Frame numbers `t+1..=t+f`.
    pub frames: Vec<u64>,
    pub predicted_centers: Vec<[f64; 2]>,
    pub ground_truth_centers: Vec<[f64; 2]>,
    pub predicted_deltas: Vec<[f64; 4]>,
    pub anatomy: Vec<AnatomyBox>,
}

/// Runs one checkpoint on the window ending at frame `t` of `video_id`.
pub fn forecast(ds: &Dataset, ckpt_path: &Path, video_id: &str, t: u64) -> Result<ForecastOverlay> {
    let ck = checkpoint::load(ckpt_path)?;
    let net = ck.params.config();
    let (s, f) = (net.seq_len, net.horizon);
    let video = ds
        .video(video_id)
        .ok_or_else(|| Error::Data(format!("no video '{video_id}' in {}", ds.root.display())))?;
    let first = video.first_frame();
    let last = first + video.len() as u64 - 1;
    let end = video
        .position_of(t)
        .ok_or_else(|| Error::Data(format!("frame {t} is outside {video_id} (frames {first}..={last})")))?;
    if end + 1 < s {
        return Err(Error::Data(format!("frame {t} has fewer than {s} frames of history")));
    }
    if end + f >= video.len() {
        return Err(Error::Data(format!(
            "frame {t} is within {f} frames of the end of {video_id} (last frame {last})"
        )));
    }
    let sample = video.sample_at(end, s, f)?.ok_or_else(|| {
        Error::Data(format!("instrument is not detected in every frame {t}..={}", t + f as u64))
    })?;
    let pred = forward_masked(&ck.params, &sample.window, ck.meta.use_anatomy)?.prediction;
    let b_t = video.frames()[end].instrument().expect("sample implies presence");
    let center = |b: [f64; 4]| [b[0], b[1]];
    let predicted_centers = pred.accumulate_from(&b_t).into_iter().map(center).collect();
    let ground_truth_centers = (1..=f)
        .map(|k| video.frames()[end + k].instrument().expect("sample implies presence").center())
        .collect();
    let anatomy = video.frames()[end]
        .detections()
        .filter(|(c, _)| !c.is_instrument())
        .map(|(c, b)| AnatomyBox {
            class: c.index() as u8,
            name: ds.manifest.classes[c.index()].clone(),
            bbox: b,
        })
        .collect();
    Ok(ForecastOverlay {
        video_id: video_id.to_string(),
        t,
        horizon: f,
        use_anatomy: ck.meta.use_anatomy,
        instrument: b_t,
        frames: (1..=f as u64).map(|k| t + k).collect(),
        predicted_centers,
        ground_truth_centers,
        predicted_deltas: pred.rows().to_vec(),
        anatomy,
    })
}

/// Writes a forecast overlay into the run directory.
pub fn forecast_to_run(cfg: &RunConfig, video_id: &str, t: u64) -> Result<(ForecastOverlay, PathBuf)> {
    let [ckpt_path] = cfg.paths.checkpoints.as_slice() else {
        return Err(Error::Config("forecast takes exactly one checkpoint".into()));
    };
    let ds = dataset::load_dataset(&cfg.paths.dataset)?;
    let overlay = forecast(&ds, ckpt_path, video_id, t)?;
    let dir = &cfg.paths.run_dir;
    create_dir(dir)?;
    let name = format!("forecast_{video_id}_{t}.json");
    write_run_files(
        dir,
        cfg,
        &manifest(
            "forecast",
            vec![("dataset", &cfg.paths.dataset), ("checkpoint", ckpt_path)],
            &[name.as_str()],
        ),
    )?;
    let path = dir.join(&name);
    write_json(&path, &overlay)?;
    Ok((overlay, path))
}
