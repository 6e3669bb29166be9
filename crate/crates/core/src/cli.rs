//! Command-line front end: `synth`, `train`, `sr`, `eval` and `baseline`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::load_checkpoint;
use crate::disparity::BlockMatcher;
use crate::error::{Error, Result};
use crate::imaging::{
    bicubic_resample, degrade_pair, load_dataset, load_stereo_pair, save_png, synth_stereo_dataset, StereoDataset,
    StereoPair,
};
use crate::metrics::{border_for_scale, evaluate_pair, MetricsReport, SsimProxy};
use crate::model::{Model, ModelConfig, TRAINED_SCALE_RANGE};
use crate::training::{fit, FitOutput, ModelState, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;
pub const EXIT_ARTIFACT: i32 = 4;

/// Environment variable capping worker threads (0 = automatic).
pub const THREADS_ENV: &str = "STEREOINR_THREADS";

#[derive(Debug, Parser)]
#[command(name = "stereoinr", version, about = "Arbitrary-scale stereo image super-resolution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic rectified stereo dataset with ground-truth disparity.
    Synth(SynthArgs),
    /// Fine-tune adapters and upsampler from a JSON run config.
    Train(TrainArgs),
    /// Super-resolve one stereo pair at an arbitrary scale.
    Sr(SrArgs),
    /// Evaluate a checkpoint on a dataset at one or more scales.
    Eval(EvalArgs),
    /// Evaluate bicubic upsampling under the same protocol as `eval`.
    Baseline(BaselineArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of pairs.
    #[arg(long, default_value_t = 32)]
    pub count: usize,
    #[arg(long, default_value_t = 128)]
    pub height: usize,
    #[arg(long, default_value_t = 192)]
    pub width: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON run config.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SrArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub left: PathBuf,
    #[arg(long)]
    pub right: PathBuf,
    /// Any real factor > 0; values outside [1, 4] are extrapolation.
    #[arg(long, value_parser = parse_scale)]
    pub scale: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Output name stem; defaults to the left file stem without `_L`.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Comma-separated scales.
    #[arg(long, value_delimiter = ',', value_parser = parse_scale, default_value = "2,3,4")]
    pub scales: Vec<f64>,
    /// Output JSON (an array with one report per scale).
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_delimiter = ',', value_parser = parse_scale, default_value = "2,3,4")]
    pub scales: Vec<f64>,
    #[arg(long)]
    pub report: PathBuf,
}

fn parse_scale(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("{s:?} is not a number"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("scale must be a finite number > 0, got {s}"))
    }
}

/// Training run description read by `train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn line_of(text: &str, key: &str) -> usize {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map(|i| i + 1).unwrap_or(1)
}

impl RunConfig {
    /// Parses and validates; relative paths resolve against the config's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column()))
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.dataset, &mut cfg.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        let at = |key: &str, msg: String| Error::Config(format!("{}:{}: {msg}", path.display(), line_of(&text, key)));
        if !cfg.dataset.is_dir() {
            return Err(at("dataset", format!("dataset directory {} does not exist", cfg.dataset.display())));
        }
        cfg.model.validate().map_err(|e| at("model", e.to_string()))?;
        cfg.train.validate().map_err(|e| at("train", e.to_string()))?;
        Ok(cfg)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }
}

/// Applies [`THREADS_ENV`] to the global worker pool.
pub fn configure_threads() -> Result<()> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("{THREADS_ENV}={v:?} is not a thread count")))?,
        Err(_) => 0,
    };
    // A second initialization in the same process is harmless.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn usage(e: Error) -> (i32, Error) {
    (EXIT_USAGE, e)
}

fn artifact(e: Error) -> (i32, Error) {
    (EXIT_ARTIFACT, e)
}

type CmdResult = std::result::Result<(), (i32, Error)>;

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return EXIT_USAGE;
    }
    let res = match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Sr(a) => cmd_sr(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Baseline(a) => cmd_baseline(&a),
    };
    match res {
        Ok(()) => EXIT_OK,
        Err((code, e)) => {
            eprintln!("error: {e}");
            code
        }
    }
}

fn cmd_synth(a: &SynthArgs) -> CmdResult {
    let m = synth_stereo_dataset(a.count, (a.height, a.width), a.seed, &a.out).map_err(usage)?;
    println!("wrote {} pairs to {}", m.pairs.len(), a.out.display());
    Ok(())
}

fn load_nonempty(dir: &Path) -> std::result::Result<StereoDataset, (i32, Error)> {
    let ds = load_dataset(dir).map_err(usage)?;
    if ds.is_empty() {
        return Err(usage(Error::Dataset(format!("{} contains no pairs", dir.display()))));
    }
    Ok(ds)
}

fn cmd_train(a: &TrainArgs) -> CmdResult {
    let mut cfg = RunConfig::load(&a.config).map_err(usage)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.train.seed = cfg.seed;
    let ds = load_nonempty(&cfg.dataset)?;
    if ds.len() <= cfg.train.n_holdout {
        return Err(usage(Error::Dataset(format!(
            "{} pairs leave nothing to train on after holding out {}",
            ds.len(),
            cfg.train.n_holdout
        ))));
    }
    let (train, val) = ds.split(cfg.train.n_holdout);
    let state = match &a.resume {
        Some(p) => {
            let s = load_checkpoint(p).map_err(artifact)?;
            if s.model.config != cfg.model {
                return Err(usage(Error::Config("checkpoint model config differs from the run config".into())));
            }
            s
        }
        None => ModelState::new(Model::new(cfg.model.clone(), cfg.seed).map_err(usage)?, cfg.seed.wrapping_add(1)),
    };
    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = stop.clone();
        // Only the first registration in a process succeeds; later runs
        // simply go without a handler.
        let _ = ctrlc::set_handler(move || stop.store(true, Ordering::SeqCst));
    }
    let out = FitOutput {
        dir: cfg.output_dir.clone(),
    };
    let outcome = fit(state, &train, &val, &cfg.train, Some(&out), Some(&stop)).map_err(|e| match e {
        Error::TrainingAborted { .. } => (EXIT_TRAINING, e),
        Error::Io { .. } => (EXIT_ARTIFACT, e),
        other => (EXIT_TRAINING, other),
    })?;
    if outcome.interrupted {
        eprintln!("interrupted at step {}; wrote {}", outcome.state.step, out.last().display());
        return Err((EXIT_TRAINING, Error::Config("training interrupted".into())));
    }
    let model = outcome.best.as_ref().map(|(_, s)| &s.model).unwrap_or(&outcome.state.model);
    if !val.is_empty() {
        let names: Vec<String> = ds.pairs[ds.len() - val.len()..].iter().map(|p| p.name.clone()).collect();
        let mut reports = Vec::new();
        for &r in &cfg.train.val_scales {
            let mut rep = evaluate_model(model, &names, &val, r, "stereoinr").map_err(artifact)?;
            rep.config_hash = Some(cfg.hash().map_err(usage)?);
            reports.push(rep);
        }
        write_reports(&cfg.output_dir.join("eval_report.json"), &reports).map_err(artifact)?;
    }
    println!("finished {} steps; artifacts in {}", outcome.state.step, cfg.output_dir.display());
    Ok(())
}

fn format_scale(r: f64) -> String {
    format!("{r}")
}

fn cmd_sr(a: &SrArgs) -> CmdResult {
    let state = load_checkpoint(&a.checkpoint).map_err(artifact)?;
    let pair = load_stereo_pair(&a.left, &a.right).map_err(usage)?;
    if a.scale < TRAINED_SCALE_RANGE.0 || a.scale > TRAINED_SCALE_RANGE.1 {
        eprintln!("warning: x{} is outside the training range [1, 4]", a.scale);
    }
    let sr = state.model.super_resolve(&pair, a.scale).map_err(usage)?;
    let name = a.name.clone().unwrap_or_else(|| {
        let stem = a.left.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        stem.strip_suffix("_L").map(str::to_string).unwrap_or(stem)
    });
    fs::create_dir_all(&a.out_dir).map_err(|e| artifact(Error::io(&a.out_dir, e)))?;
    let r = format_scale(a.scale);
    for (img, side) in [(&sr.left, "L"), (&sr.right, "R")] {
        save_png(img, a.out_dir.join(format!("{name}_{side}_x{r}.png"))).map_err(artifact)?;
    }
    println!("wrote {}x{} pair to {}", sr.dims().0, sr.dims().1, a.out_dir.display());
    Ok(())
}

/// Upsamples a pair; `None` selects bicubic interpolation.
fn upsample(model: Option<&Model>, lr: &StereoPair, r: f64, target: (usize, usize)) -> Result<StereoPair> {
    match model {
        Some(m) => m.super_resolve(lr, r),
        None => StereoPair::new(bicubic_resample(&lr.left, target)?, bicubic_resample(&lr.right, target)?),
    }
}

fn evaluate(model: Option<&Model>, names: &[String], pairs: &[StereoPair], r: f64, method: &str) -> Result<MetricsReport> {
    let border = border_for_scale(r);
    let estimator = BlockMatcher::default();
    let rows = pairs
        .par_iter()
        .zip(names.par_iter())
        .map(|(hr, name)| {
            let (lr, hr) = degrade_pair(hr, r)?;
            let sr = upsample(model, &lr, r, hr.dims())?;
            evaluate_pair(name, &sr, &hr, border, &SsimProxy, &estimator)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::new(method, r, border, &SsimProxy, &estimator, rows)
}

/// Metrics of `model` on HR `pairs` degraded by bicubic downsampling at `r`.
pub fn evaluate_model(model: &Model, names: &[String], pairs: &[StereoPair], r: f64, method: &str) -> Result<MetricsReport> {
    evaluate(Some(model), names, pairs, r, method)
}

/// The same protocol with bicubic upsampling in place of a model.
pub fn evaluate_bicubic(names: &[String], pairs: &[StereoPair], r: f64) -> Result<MetricsReport> {
    evaluate(None, names, pairs, r, "bicubic")
}

fn write_reports(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    if let Some(d) = path.parent() {
        if !d.as_os_str().is_empty() {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
    }
    fs::write(path, serde_json::to_string_pretty(reports)?).map_err(|e| Error::io(path, e))
}

fn eval_scales(scales: &[f64]) -> std::result::Result<(), (i32, Error)> {
    if let Some(r) = scales.iter().find(|r| **r < 1.0) {
        return Err(usage(Error::arg(format!("evaluation needs scales >= 1, got {r}"))));
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> CmdResult {
    eval_scales(&a.scales)?;
    let state = load_checkpoint(&a.checkpoint).map_err(artifact)?;
    let ds = load_nonempty(&a.dataset)?;
    let names: Vec<String> = ds.pairs.iter().map(|p| p.name.clone()).collect();
    let hash = hex::encode(Sha256::digest(serde_json::to_vec(&state.model.config).map_err(|e| usage(e.into()))?));
    let mut reports = Vec::new();
    for &r in &a.scales {
        let mut rep = evaluate_model(&state.model, &names, &ds.hr_pairs(), r, "stereoinr").map_err(usage)?;
        rep.config_hash = Some(hash.clone());
        reports.push(rep);
    }
    write_reports(&a.report, &reports).map_err(artifact)?;
    Ok(())
}

fn cmd_baseline(a: &BaselineArgs) -> CmdResult {
    eval_scales(&a.scales)?;
    let ds = load_nonempty(&a.dataset)?;
    let names: Vec<String> = ds.pairs.iter().map(|p| p.name.clone()).collect();
    let hash = hex::encode(Sha256::digest(format!("bicubic {:?}", a.scales)));
    let mut reports = Vec::new();
    for &r in &a.scales {
        let mut rep = evaluate_bicubic(&names, &ds.hr_pairs(), r).map_err(usage)?;
        rep.config_hash = Some(hash.clone());
        reports.push(rep);
    }
    write_reports(&a.report, &reports).map_err(artifact)?;
    Ok(())
}
