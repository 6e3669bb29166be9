//! Adapter-only fine-tuning: L1 loss on sampled coordinate/RGB pairs, Adam
//! with a cosine learning-rate schedule, validation and checkpointing.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape};
use crate::checkpoint::save_checkpoint;
use crate::encoder::ScaleConditioning;
use crate::error::{Error, Result};
use crate::imaging::{degrade_pair, sample_training_batch, BatchConfig, StereoPair, TrainingBatch};
use crate::metrics::{border_for_scale, crop_border, psnr};
use crate::model::{Model, StereoGuidance};
use crate::params::{Binder, ParamGroup};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Validation period in steps; 0 validates only at the end.
    pub eval_every: u64,
    /// Periodic `last` checkpoint; 0 writes only at the end.
    pub checkpoint_every: u64,
    pub n_holdout: usize,
    pub val_scales: Vec<f64>,
    pub batch: BatchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 5e-4,
            total_steps: 200_000,
            batch_size: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            seed: 0,
            eval_every: 1000,
            checkpoint_every: 1000,
            n_holdout: 8,
            val_scales: vec![2.0, 4.0],
            batch: BatchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.total_steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("total_steps and batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("Adam betas must be in [0, 1) and eps positive".into()));
        }
        if !(self.batch.min_scale >= 1.0 && self.batch.max_scale >= self.batch.min_scale) {
            return Err(Error::Config("batch scale range must satisfy 1 <= min <= max".into()));
        }
        if self.val_scales.iter().any(|r| !(*r >= 1.0)) {
            return Err(Error::Config("validation scales must be >= 1".into()));
        }
        Ok(())
    }
}

/// `0.5 * lr0 * (1 + cos(pi * step / total))`.
pub fn cosine_lr(step: u64, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::arg(format!("step {step} beyond total_steps {}", cfg.total_steps)));
    }
    let t = step as f64 / cfg.total_steps as f64;
    Ok((0.5 * cfg.lr0 * (1.0 + (PI * t).cos())).max(0.0))
}

/// Mean absolute error over all elements of both views.
pub fn l1_loss(pred: (&Mat, &Mat), gt: (&Mat, &Mat)) -> Result<f64> {
    if pred.0.dim() != gt.0.dim() || pred.1.dim() != gt.1.dim() {
        return Err(Error::shape("prediction and ground truth differ in shape"));
    }
    let n = (pred.0.len() + pred.1.len()) as f64;
    let s: f64 = (pred.0 - gt.0).iter().chain((pred.1 - gt.1).iter()).map(|d| d.abs()).sum();
    Ok(s / n)
}

/// Adam moments, kept only for tunable parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Mat>,
    pub v: BTreeMap<String, Mat>,
}

impl AdamState {
    pub fn for_model(model: &Model) -> Self {
        let mut s = Self::default();
        for name in model.params.tunable_names() {
            let dim = model.params.get(&name).expect("listed").dim();
            s.m.insert(name.clone(), Mat::zeros(dim));
            s.v.insert(name, Mat::zeros(dim));
        }
        s
    }
}

/// One bias-corrected Adam update at 1-based iteration `t`.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(p: &mut Mat, g: &Mat, m: &mut Mat, v: &mut Mat, t: u64, lr: f64, b1: f64, b2: f64, eps: f64) {
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let mh = *m / c1;
        let vh = *v / c2;
        *p -= lr * mh / (vh.sqrt() + eps);
    });
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub model: Model,
    pub adam: AdamState,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl ModelState {
    pub fn new(model: Model, seed: u64) -> Self {
        Self {
            adam: AdamState::for_model(&model),
            model,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// Loss and gradients of one batch on a fresh tape.
pub fn batch_gradients(model: &Model, batch: &TrainingBatch) -> Result<(f64, BTreeMap<String, Mat>)> {
    let guidance = StereoGuidance::estimate(&batch.lr_pair, &model.estimator())?;
    let s = ScaleConditioning::for_output(batch.scale, batch.hr_shape.0, batch.hr_shape.1)?;
    let mut tape = Tape::new();
    let mut b = Binder::new(&model.params, true);
    let (l, r) = model.forward_on_tape(&mut tape, &mut b, &batch.lr_pair, &guidance, &batch.queries, &s)?;
    let pred = tape.concat_cols(&[l, r]);
    let gt = ndarray::concatenate(ndarray::Axis(1), &[batch.gt_left.view(), batch.gt_right.view()])
        .map_err(|e| Error::shape(e.to_string()))?;
    let gt = tape.constant(gt);
    let loss = tape.mean_abs_diff(pred, gt);
    let value = tape.value(loss)[[0, 0]];
    if !value.is_finite() {
        return Ok((value, BTreeMap::new()));
    }
    let grads = b.collect_grads(&tape.backward(loss));
    Ok((value, grads))
}

/// Global-norm clipping in place; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Mat>, max_norm: f64) -> f64 {
    let norm = grads.values().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * k);
        }
    }
    norm
}

/// Forward, backward and one Adam step over `batches` (gradients averaged).
/// Returns the mean loss.
pub fn train_step(state: &mut ModelState, batches: &[TrainingBatch], cfg: &TrainConfig) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::arg("train_step needs at least one batch"));
    }
    let lr = cosine_lr(state.step, cfg)?;
    let mut total: BTreeMap<String, Mat> = BTreeMap::new();
    let mut loss = 0.0;
    for batch in batches {
        let (l, grads) = batch_gradients(&state.model, batch)?;
        let bad_grad = grads.values().any(|g| g.iter().any(|v| !v.is_finite()));
        if !l.is_finite() || bad_grad {
            return Err(Error::TrainingAborted {
                step: state.step,
                batch_seed: batch.seed,
                message: format!("non-finite loss or gradient (loss = {l})"),
            });
        }
        loss += l / batches.len() as f64;
        for (name, g) in grads {
            match total.get_mut(&name) {
                Some(acc) => *acc += &g,
                None => {
                    total.insert(name, g);
                }
            }
        }
    }
    if batches.len() > 1 {
        let k = 1.0 / batches.len() as f64;
        total.values_mut().for_each(|g| g.mapv_inplace(|v| v * k));
    }
    let norm = clip_global_norm(&mut total, cfg.clip_norm);
    if !norm.is_finite() {
        return Err(Error::TrainingAborted {
            step: state.step,
            batch_seed: batches[0].seed,
            message: "gradient norm overflowed".into(),
        });
    }
    let t = state.step + 1;
    for (name, g) in &total {
        debug_assert!(ParamGroup::of(name).map(|g| g.is_tunable()).unwrap_or(false));
        let p = state.model.params.get_mut(name).expect("gradient of a known parameter");
        let m = state.adam.m.get_mut(name).expect("moment exists");
        let v = state.adam.v.get_mut(name).expect("moment exists");
        adam_update(p, g, m, v, t, lr, cfg.beta1, cfg.beta2, cfg.eps);
    }
    state.step = t;
    Ok(loss)
}

/// Mean stereo PSNR at scale `r` over `pairs`, with a `2r` border crop.
pub fn validation_psnr(model: &Model, pairs: &[StereoPair], r: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Dataset("empty validation split".into()));
    }
    let border = border_for_scale(r);
    let mut acc = Vec::with_capacity(pairs.len());
    for hr in pairs {
        let (lr, hr) = degrade_pair(hr, r)?;
        let sr = model.super_resolve(&lr, r)?;
        let p = |a, b| -> Result<f64> { psnr(&crop_border(a, border)?, &crop_border(b, border)?) };
        acc.push(0.5 * (p(&sr.left, &hr.left)? + p(&sr.right, &hr.right)?));
    }
    Ok(crate::metrics::mean(acc))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub psnr_x2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub psnr_x4: Option<f64>,
}

#[derive(Debug)]
pub struct FitOutcome {
    pub state: ModelState,
    pub best: Option<(f64, ModelState)>,
    pub log: Vec<LogEntry>,
    /// True when stopped early through the interrupt flag.
    pub interrupted: bool,
}

/// Where `fit` writes checkpoints and its NDJSON log.
#[derive(Clone, Debug)]
pub struct FitOutput {
    pub dir: PathBuf,
}

impl FitOutput {
    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }

    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join("train_log.ndjson")
    }
}

/// Runs `train_step` from `state.step` up to `cfg.total_steps`.
pub fn fit(
    mut state: ModelState,
    train: &[StereoPair],
    val: &[StereoPair],
    cfg: &TrainConfig,
    output: Option<&FitOutput>,
    stop: Option<&AtomicBool>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let mut log_file = match output {
        Some(o) => {
            fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
            let path = o.log();
            let f = fs::OpenOptions::new()
                .create(true)
                .append(state.step > 0)
                .write(true)
                .truncate(state.step == 0)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let mut log = Vec::new();
    let mut best: Option<(f64, ModelState)> = None;
    let mut interrupted = false;
    while state.step < cfg.total_steps {
        if stop.is_some_and(|s| s.load(Ordering::SeqCst)) {
            interrupted = true;
            break;
        }
        let lr = cosine_lr(state.step, cfg)?;
        let batches = (0..cfg.batch_size)
            .map(|_| sample_training_batch(train, &mut state.rng, &cfg.batch))
            .collect::<Result<Vec<_>>>()?;
        let loss = train_step(&mut state, &batches, cfg)?;
        let mut entry = LogEntry {
            step: state.step,
            loss,
            lr,
            psnr_x2: None,
            psnr_x4: None,
        };
        let last = state.step == cfg.total_steps;
        let due = |every: u64| (every > 0 && state.step.is_multiple_of(every)) || last;
        if !val.is_empty() && due(cfg.eval_every) {
            for &r in &cfg.val_scales {
                let v = validation_psnr(&state.model, val, r)?;
                if r == 2.0 {
                    entry.psnr_x2 = Some(v);
                } else if r == 4.0 {
                    entry.psnr_x4 = Some(v);
                }
                log::info!("step {} val x{r}: {v:.3} dB", state.step);
            }
            let key = entry.psnr_x2.or(entry.psnr_x4);
            if let Some(k) = key {
                if best.as_ref().is_none_or(|(b, _)| k > *b) {
                    if let Some(o) = output {
                        save_checkpoint(&state, &o.best())?;
                    }
                    best = Some((k, state.clone()));
                }
            }
        }
        if let Some((f, path)) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(path.as_path(), e))?;
        }
        if state.step.is_multiple_of(100) {
            log::info!("step {} loss {:.5} lr {:.2e}", state.step, loss, lr);
        }
        log.push(entry);
        if let Some(o) = output {
            if due(cfg.checkpoint_every) {
                save_checkpoint(&state, &o.last())?;
            }
        }
    }
    if interrupted {
        if let Some(o) = output {
            save_checkpoint(&state, &o.last())?;
        }
    }
    if let Some((f, path)) = log_file.as_mut() {
        f.flush().map_err(|e| Error::io(path.as_path(), e))?;
    }
    Ok(FitOutcome {
        state,
        best,
        log,
        interrupted,
    })
}

/// Reads an NDJSON training log.
pub fn read_log(path: &Path) -> Result<Vec<LogEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub(crate) fn create_file(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    File::create(path).map_err(|e| Error::io(path, e))
}
