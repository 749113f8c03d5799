use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use toolcast::config::RunConfig;
use toolcast::error::{Error, Result};
use toolcast::{dataset, run};
use toolcast_core::synth::CouplingMode;
use toolcast_core::train::OptimConfig;

/// Forecast instrument motion from anatomy and instrument detections.
#[derive(Parser, Debug)]
#[command(name = "toolcast", version)]
struct Cli {
    /// TOML run config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset.
    Generate(GenerateArgs),
    /// Train one forecaster.
    Train(TrainArgs),
    /// Score checkpoints on the test split.
    Evaluate(EvalArgs),
    /// Compare anatomy+instrument against instrument-only checkpoints.
    Ablate(EvalArgs),
    /// Dump overlay data for one window.
    Forecast(ForecastArgs),
    /// Print dataset statistics.
    Describe(DescribeArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    videos: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    /// anatomy_coupled or decoupled.
    #[arg(long, value_parser = parse_coupling)]
    coupling: Option<CouplingMode>,
    #[arg(long)]
    visible_anatomy: Option<usize>,
    #[arg(long)]
    speed: Option<f64>,
    #[arg(long)]
    jitter: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Forecast horizon; also picks the default epoch budget.
    #[arg(long)]
    horizon: Option<usize>,
    /// Zero the anatomy rows (instrument-only model).
    #[arg(long)]
    no_anatomy: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Window length in frames.
    #[arg(long)]
    window: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Checkpoint file; repeat for several.
    #[arg(long = "checkpoint")]
    checkpoints: Vec<PathBuf>,
    /// Comma-separated, descending, e.g. 0.1,0.05,0
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    /// Comma-separated horizons; defaults to those of the checkpoints.
    #[arg(long, value_delimiter = ',')]
    horizons: Option<Vec<usize>>,
    /// Seed of the random baseline.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ForecastArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    video: String,
    /// Frame number the window ends at.
    #[arg(long)]
    t: u64,
}

#[derive(Args, Debug)]
struct DescribeArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    window: Option<usize>,
}

fn parse_coupling(s: &str) -> std::result::Result<CouplingMode, String> {
    match s {
        "anatomy_coupled" | "coupled" => Ok(CouplingMode::AnatomyCoupled),
        "decoupled" => Ok(CouplingMode::Decoupled),
        _ => Err(format!("unknown coupling '{s}' (anatomy_coupled or decoupled)")),
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn load_config(path: Option<&PathBuf>) -> Result<(RunConfig, String)> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(Error::io(p))?;
            let cfg = RunConfig::from_toml(&text).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}: {m}", p.display())),
                other => other,
            })?;
            Ok((cfg, text))
        }
        None => Ok((RunConfig::default(), String::new())),
    }
}

fn execute(cli: Cli) -> Result<()> {
    let (mut cfg, text) = load_config(cli.config.as_ref())?;
    match cli.command {
        Command::Generate(a) => {
            set(&mut cfg.paths.dataset, a.out);
            let s = &mut cfg.scene;
            set(&mut s.seed, a.seed);
            set(&mut s.n_videos, a.videos);
            set(&mut s.frames_per_video, a.frames);
            set(&mut s.coupling_mode, a.coupling);
            set(&mut s.visible_anatomy_count, a.visible_anatomy);
            set(&mut s.instrument_speed, a.speed);
            set(&mut s.anatomy_jitter_sigma, a.jitter);
            set(&mut s.detection_dropout_prob, a.dropout);
            let summary = run::generate(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&summary).map_err(|e| Error::Data(e.to_string()))?);
        }
        Command::Train(a) => {
            set(&mut cfg.paths.dataset, a.dataset);
            set(&mut cfg.paths.run_dir, a.run_dir);
            set(&mut cfg.net.horizon, a.horizon);
            set(&mut cfg.net.seq_len, a.window);
            if a.no_anatomy {
                cfg.train.use_anatomy = false;
            }
            set(&mut cfg.optim.seed, a.seed);
            set(&mut cfg.optim.peak_lr, a.lr);
            set(&mut cfg.optim.batch_size, a.batch_size);
            match a.epochs {
                Some(e) => cfg.optim.total_epochs = e,
                None if !RunConfig::sets_key(&text, "optim", "total_epochs") => {
                    cfg.optim.total_epochs = OptimConfig::default_epochs(cfg.net.horizon);
                }
                None => {}
            }
            let out = run::train(&cfg)?;
            if let Some(last) = out.report.last() {
                println!(
                    "trained {} epochs, final train loss {:.6}, model at {}",
                    out.report.len(),
                    last.train_loss,
                    out.model_path.display()
                );
            }
        }
        Command::Evaluate(a) => evaluate(cfg, &text, a, "evaluate")?,
        Command::Ablate(a) => evaluate(cfg, &text, a, "ablate")?,
        Command::Forecast(a) => {
            set(&mut cfg.paths.dataset, a.dataset);
            set(&mut cfg.paths.run_dir, a.run_dir);
            cfg.paths.checkpoints = vec![a.checkpoint];
            let (overlay, path) = run::forecast_to_run(&cfg, &a.video, a.t)?;
            println!(
                "{} predicted centers for {} at frame {} written to {}",
                overlay.predicted_centers.len(),
                overlay.video_id,
                overlay.t,
                path.display()
            );
        }
        Command::Describe(a) => {
            set(&mut cfg.paths.dataset, a.dataset);
            set(&mut cfg.net.seq_len, a.window);
            let summary = dataset::describe_dataset(&cfg.paths.dataset, cfg.net.seq_len)?;
            println!("{}", serde_json::to_string_pretty(&summary).map_err(|e| Error::Data(e.to_string()))?);
        }
    }
    Ok(())
}

fn evaluate(mut cfg: RunConfig, text: &str, a: EvalArgs, command: &str) -> Result<()> {
    set(&mut cfg.paths.dataset, a.dataset);
    set(&mut cfg.paths.run_dir, a.run_dir);
    if !a.checkpoints.is_empty() {
        cfg.paths.checkpoints = a.checkpoints;
    }
    set(&mut cfg.eval.thresholds, a.thresholds);
    set(&mut cfg.eval.seed, a.seed);
    match a.horizons {
        Some(h) => cfg.eval.horizons = h,
        None if !cfg.paths.checkpoints.is_empty() && !RunConfig::sets_key(text, "eval", "horizons") => {
            let mut hs = Vec::new();
            for p in &cfg.paths.checkpoints {
                hs.push(toolcast::checkpoint::load(p)?.params.config().horizon);
            }
            hs.sort_unstable();
            hs.dedup();
            cfg.eval.horizons = hs;
        }
        None => {}
    }
    let ablation = run::evaluate(&cfg, command, command == "ablate")?;
    print!("{}", ablation.table.to_text());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
