//! Mini-batch SGD with momentum, early stopping and mask sweeps.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::arch::{apply_branch_mask, keypoint_terms, save_checkpoint, BranchMask, ModelConfig, Network, NetworkConfig};
use crate::data::{stream_rng, AugmentConfig, Dataset, Pipeline};
use crate::error::{config, input, Error, Result};
use crate::metrics::{interocular_error, EvalConfig, KeypointSet, ProbMaps};
use crate::ops::NllTerm;
use crate::params::ParamStore;
use crate::tensor::Tensor4;

/// RNG stream tags, so shuffling and augmentation never share draws.
const SPLIT_STREAM: u64 = 0x5150;
const SHUFFLE_STREAM: u64 = 0x5348;

/// Validation-error thresholds tracked in every report.
pub const THRESHOLDS: [f64; 5] = [0.20, 0.10, 0.08, 0.05, 0.03];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping. The learning
    /// rate halves after every `patience / 2` such epochs.
    pub patience: usize,
    pub lambda: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub validation_fraction: f64,
    /// Rescale each mini-batch gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
    /// Stop as soon as the validation error reaches this value.
    pub target_error: Option<f64>,
    /// Where the best parameters are written as a checkpoint.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 16,
            max_epochs: 200,
            patience: 20,
            lambda: 1e-5,
            seed: 0,
            augment: AugmentConfig::default(),
            validation_fraction: 0.10,
            clip_norm: None,
            target_error: None,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return config(format!("learning rate must be non-negative, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return config(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 || self.patience == 0 {
            return config("batch size and patience must be at least 1");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction <= 0.5) {
            return config(format!("validation fraction {} outside (0, 0.5]", self.validation_fraction));
        }
        if !(self.lambda >= 0.0) {
            return config("weight decay must be non-negative");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return config("gradient clipping norm must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_error: f64,
    pub best_val_error: f64,
    pub learning_rate: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub arch: String,
    pub seed: u64,
    pub initial_train_loss: f64,
    pub initial_val_error: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_error: f64,
    /// First epoch whose validation error is at or below each threshold.
    pub epochs_to_threshold: Vec<(f64, Option<usize>)>,
    pub stop_reason: String,
    pub best_checkpoint: Option<String>,
    pub optimizer: String,
}

impl TrainReport {
    pub fn final_train_loss(&self) -> f64 {
        self.epochs.last().map_or(self.initial_train_loss, |e| e.train_loss)
    }

    /// First epoch reaching `threshold`, if any.
    pub fn epochs_to(&self, threshold: f64) -> Option<usize> {
        self.epochs.iter().find(|e| e.val_error <= threshold).map(|e| e.epoch)
    }

    /// The report with every wall-clock field zeroed.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
        r
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    /// Learning curve as CSV.
    pub fn write_curve<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_loss", "val_error", "best_val_error", "learning_rate", "seconds"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.val_error.to_string(),
                e.best_val_error.to_string(),
                e.learning_rate.to_string(),
                format!("{:.3}", e.seconds),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// True iff at least `patience` entries follow the first occurrence of the
/// minimum of `history`.
pub fn early_stop_check(history: &[f64], patience: usize) -> bool {
    let Some(best) = history
        .iter()
        .enumerate()
        .fold(None, |acc: Option<(usize, f64)>, (i, &v)| match acc {
            Some((_, b)) if v >= b => acc,
            _ => Some((i, v)),
        })
    else {
        return false;
    };
    history.len() - 1 - best.0 >= patience
}

/// Deterministic shuffled split into `(train, validation)` indices.
pub fn split_indices(n: usize, validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, &[SPLIT_STREAM]));
    let n_val = ((n as f64 * validation_fraction).round() as usize).clamp(1.min(n), n.saturating_sub(1));
    let train = idx.split_off(n_val);
    (train, idx)
}

/// Hard predictions in chunks of `chunk` images.
pub fn predict(net: &Network, images: &Tensor4, chunk: usize) -> Result<Vec<KeypointSet>> {
    let n = images.dims().n;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + chunk.max(1)).min(n);
        out.extend(net.forward(&images.slice_batch(start..end))?.argmax());
        start = end;
    }
    Ok(out)
}

/// Interocular error of hard predictions on preprocessed `images`.
pub fn evaluate(net: &Network, images: &Tensor4, truth: &[KeypointSet], eval: &EvalConfig) -> Result<f64> {
    interocular_error(&predict(net, images, 32)?, truth, eval)
}

fn check_compatible(net: &Network, data: &Dataset) -> Result<()> {
    let ModelConfig::Keypoint(cfg) = net.config() else {
        return config("keypoint training needs a SumNet or RCN");
    };
    if cfg.num_keypoints != data.num_keypoints() || cfg.input_size != data.image_size() {
        return config(format!(
            "network expects K={} on {}px images, dataset has K={} on {}px",
            cfg.num_keypoints,
            cfg.input_size,
            data.num_keypoints(),
            data.image_size()
        ));
    }
    Ok(())
}

/// SGD with momentum: `v ← μ·v − lr·g`, `W ← W + v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    velocity: ParamStore,
}

impl Sgd {
    pub fn new(params: &ParamStore, learning_rate: f64, momentum: f64) -> Self {
        Self { learning_rate, momentum, clip_norm: None, velocity: params.zeros_like() }
    }

    pub fn with_clip_norm(mut self, clip_norm: Option<f64>) -> Self {
        self.clip_norm = clip_norm;
        self
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) {
        if self.learning_rate == 0.0 {
            return;
        }
        let scale = match self.clip_norm {
            Some(c) => {
                let norm = grads.iter().map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
                if norm > c { c / norm } else { 1.0 }
            }
            None => 1.0,
        };
        for ((name, w), (_, v)) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let g = grads.get(name).expect("gradient for every parameter");
            for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = self.momentum * *vi - self.learning_rate * scale * gi;
                *wi += *vi;
            }
        }
    }
}

/// Mean data loss over `images` in chunks.
fn mean_loss(net: &Network, images: &Tensor4, truth: &[KeypointSet], chunk: usize) -> Result<f64> {
    let n = images.dims().n;
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let terms = net.keypoint_terms(&truth[start..end])?;
        total += net.loss(&images.slice_batch(start..end), &terms, 0.0)? * (end - start) as f64;
        start = end;
    }
    Ok(total / n as f64)
}

/// Splits `data` by `cfg.validation_fraction` and trains on the rest.
pub fn train(net: &mut Network, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let (tr, va) = split_indices(data.len(), cfg.validation_fraction, cfg.seed);
    if tr.is_empty() || va.is_empty() {
        return input(format!("{} samples cannot be split into training and validation", data.len()));
    }
    train_split(net, &data.subset(&tr), &data.subset(&va), cfg)
}

/// Trains on `train_data`, selecting parameters by interocular error on
/// `val_data`. On return `net` holds the best parameters seen.
pub fn train_split(net: &mut Network, train_data: &Dataset, val_data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    check_compatible(net, train_data)?;
    check_compatible(net, val_data)?;
    cfg.augment.validate(train_data.image_size())?;
    if train_data.is_empty() || val_data.is_empty() {
        return input("training and validation sets must be non-empty");
    }
    let eval = val_data.eval_config();
    let pipeline = Pipeline::new(cfg.augment.clone());
    let val_images = pipeline.clean(val_data)?;
    let val_truth = val_data.truth();
    let train_truth = train_data.truth();
    let clean_train = pipeline.clean(train_data)?;

    let initial_train_loss = mean_loss(net, &clean_train, &train_truth, 32)?;
    let cached = cfg.augment.is_identity();
    fit(
        net,
        train_data.len(),
        cfg,
        initial_train_loss,
        |net| evaluate(net, &val_images, &val_truth, &eval),
        |epoch, idx| {
            let (images, truth) = if cached {
                let d = clean_train.dims();
                let data = idx.iter().flat_map(|&i| clean_train.sample(i).iter().copied()).collect();
                let images = Tensor4::from_vec((idx.len(), d.c, d.h, d.w), data)?;
                (images, idx.iter().map(|&i| train_truth[i].clone()).collect::<Vec<_>>())
            } else {
                pipeline.batch(train_data, idx, cfg.seed, epoch)?
            };
            let terms = keypoint_terms(&truth, train_data.num_keypoints(), train_data.image_size())?;
            Ok((images, terms))
        },
    )
}

/// The shared optimization loop. `batch` builds the inputs and likelihood
/// terms of one mini-batch; `validate` scores the current parameters.
fn fit<B, V>(
    net: &mut Network,
    n_train: usize,
    cfg: &TrainConfig,
    initial_train_loss: f64,
    validate: V,
    mut batch: B,
) -> Result<TrainReport>
where
    B: FnMut(u64, &[usize]) -> Result<(Tensor4, Vec<NllTerm>)>,
    V: Fn(&Network) -> Result<f64>,
{
    let initial_val_error = validate(net)?;
    let mut opt = Sgd::new(net.params(), cfg.learning_rate, cfg.momentum).with_clip_norm(cfg.clip_norm);
    let mut best = (0usize, initial_val_error, net.params().clone());
    let mut history = Vec::new();
    let mut epochs = Vec::new();
    let mut stop_reason = format!("reached {} epochs", cfg.max_epochs);
    let halve_every = (cfg.patience / 2).max(1);
    let mut order: Vec<usize> = (0..n_train).collect();

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut stream_rng(cfg.seed, &[SHUFFLE_STREAM, epoch as u64]));
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let (x, terms) = batch(epoch as u64, idx)?;
            let (loss, grads) = net.loss_and_grads(&x, &terms, cfg.lambda)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss became {loss} in epoch {epoch} at learning rate {}",
                    opt.learning_rate
                )));
            }
            loss_sum += loss * idx.len() as f64;
            opt.step(net.params_mut(), &grads);
        }
        if !net.params().iter().all(|(_, t)| t.all_finite()) {
            return Err(Error::Numerical(format!(
                "parameters diverged in epoch {epoch} at learning rate {}",
                opt.learning_rate
            )));
        }
        let val_error = validate(net)?;
        history.push(val_error);
        if val_error < best.1 {
            best = (epoch, val_error, net.params().clone());
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n_train as f64,
            val_error,
            best_val_error: best.1,
            learning_rate: opt.learning_rate,
            seconds: started.elapsed().as_secs_f64(),
        });
        if cfg.target_error.is_some_and(|t| val_error <= t) {
            stop_reason = format!("validation error reached target in epoch {epoch}");
            break;
        }
        if early_stop_check(&history, cfg.patience) {
            stop_reason = format!("no improvement for {} epochs", cfg.patience);
            break;
        }
        let since_best = epoch - best.0;
        if since_best > 0 && since_best % halve_every == 0 {
            opt.learning_rate *= 0.5;
        }
    }

    net.set_params(best.2)?;
    let best_checkpoint = match &cfg.checkpoint {
        Some(path) => {
            save_checkpoint(net, path)?;
            Some(path.display().to_string())
        }
        None => None,
    };
    let epochs_to_threshold = THRESHOLDS
        .iter()
        .map(|&t| (t, epochs.iter().find(|e| e.val_error <= t).map(|e| e.epoch)))
        .collect();
    Ok(TrainReport {
        arch: net.config().tag().to_string(),
        seed: cfg.seed,
        initial_train_loss,
        initial_val_error,
        epochs,
        best_epoch: best.0,
        best_val_error: best.1,
        epochs_to_threshold,
        stop_reason,
        best_checkpoint,
        optimizer: format!(
            "sgd momentum={} lr={} batch={} lambda={} halve_after={} clip={}",
            cfg.momentum,
            cfg.learning_rate,
            cfg.batch_size,
            cfg.lambda,
            halve_every,
            cfg.clip_norm.map_or("none".to_string(), |c| c.to_string())
        ),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub mask: BranchMask,
    pub val_error: f64,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub arch: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn error_for(&self, mask: &BranchMask) -> Option<f64> {
        self.rows.iter().find(|r| &r.mask == mask).map(|r| r.val_error)
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "| Mask | {} |", self.arch)?;
        writeln!(f, "|---|---|")?;
        for r in &self.rows {
            writeln!(f, "| {} | {:.2} |", r.mask.to_string().replace(',', ", "), 100.0 * r.val_error)?;
        }
        Ok(())
    }
}

/// Trains one network per mask from `base` with identical settings.
pub fn ablation_sweep(
    base: &NetworkConfig,
    masks: &[BranchMask],
    train_data: &Dataset,
    val_data: &Dataset,
    cfg: &TrainConfig,
) -> Result<AblationTable> {
    let configs = masks.iter().map(|m| apply_branch_mask(base, m)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(masks.len());
    for (mask, c) in masks.iter().zip(configs) {
        let mut net = Network::new(ModelConfig::Keypoint(c))?;
        let report = train_split(&mut net, train_data, val_data, cfg)?;
        rows.push(AblationRow { mask: mask.clone(), val_error: report.best_val_error, best_epoch: report.best_epoch });
    }
    Ok(AblationTable { arch: base.arch.tag().to_string(), rows })
}

/// Writes `report.json` and `curve.csv` into `dir`.
pub fn write_report(report: &TrainReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), report.to_json()?)?;
    report.write_curve(std::fs::File::create(dir.join("curve.csv"))?)
}

/// Helper for callers holding probability maps rather than a network.
pub fn error_of_maps(maps: &ProbMaps, truth: &[KeypointSet], eval: &EvalConfig) -> Result<f64> {
    interocular_error(&maps.argmax(), truth, eval)
}

const CORRUPT_STREAM: u64 = 0x434f;
const HELD_OUT_STREAM: u64 = 0x484f;

/// One corrupted keypoint and the denoiser's answer for it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correction {
    pub sample: usize,
    pub keypoint: usize,
    pub corrupted: crate::metrics::Keypoint,
    pub predicted: crate::metrics::Keypoint,
    pub truth: crate::metrics::Keypoint,
}

impl Correction {
    pub fn error(&self) -> f64 {
        self.predicted.distance(&self.truth)
    }

    pub fn input_error(&self) -> f64 {
        self.corrupted.distance(&self.truth)
    }
}

fn denoiser_config(den: &Network) -> Result<crate::denoiser::DenoiserConfig> {
    match den.config() {
        ModelConfig::Denoiser(c) => Ok(c.clone()),
        ModelConfig::Keypoint(_) => config("expected a denoiser network"),
    }
}

fn corrupt_all(
    truth: &[KeypointSet],
    count: usize,
    size: usize,
    seed: u64,
    stream: &[u64],
) -> Result<(Vec<KeypointSet>, Vec<crate::denoiser::CorruptionRecord>)> {
    let mut inputs = Vec::with_capacity(truth.len());
    let mut records = Vec::with_capacity(truth.len());
    for (i, t) in truth.iter().enumerate() {
        let mut parts = stream.to_vec();
        parts.push(i as u64);
        let (c, r) = crate::denoiser::corrupt_keypoints(t, count, size, &mut stream_rng(seed, &parts))?;
        inputs.push(c);
        records.push(r);
    }
    Ok((inputs, records))
}

/// Corrupts `count` keypoints of every set (reproducibly from `seed`) and
/// reports where the denoiser puts each of them.
pub fn denoise_held_out(den: &Network, truth: &[KeypointSet], count: usize, seed: u64) -> Result<Vec<Correction>> {
    let size = den.map_size();
    let (inputs, records) = corrupt_all(truth, count, size, seed, &[HELD_OUT_STREAM])?;
    let mut out = Vec::new();
    for start in (0..truth.len()).step_by(32) {
        let end = (start + 32).min(truth.len());
        let maps = crate::denoiser::one_hot_maps(&inputs[start..end], size)?;
        let pred = den.forward(&maps)?.argmax();
        for (b, p) in pred.iter().enumerate() {
            let n = start + b;
            for &k in &records[n].indices {
                out.push(Correction {
                    sample: n,
                    keypoint: k,
                    corrupted: inputs[n].0[k],
                    predicted: p.0[k],
                    truth: truth[n].0[k],
                });
            }
        }
    }
    Ok(out)
}

/// Mean interocular-normalized distance of corrected keypoints.
fn correction_error(fixes: &[Correction], truth: &[KeypointSet], eval: &EvalConfig) -> Result<f64> {
    let mut total = 0.0;
    for f in fixes {
        let d = eval.interocular(&truth[f.sample]);
        if d <= 0.0 {
            return Err(Error::Eval(format!("sample {} has zero interocular distance", f.sample)));
        }
        total += f.error() / d;
    }
    Ok(total / fixes.len().max(1) as f64)
}

/// Trains a denoiser on keypoint sets alone. Every epoch draws a fresh
/// corruption of each training set; validation uses one fixed corruption
/// and reports the normalized error on the corrupted keypoints.
pub fn train_denoiser(
    den: &mut Network,
    train_sets: &[KeypointSet],
    val_sets: &[KeypointSet],
    eval: &EvalConfig,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let dcfg = denoiser_config(den)?;
    if train_sets.is_empty() || val_sets.is_empty() {
        return input("denoiser training needs training and validation keypoints");
    }
    for s in train_sets.iter().chain(val_sets) {
        if s.len() != dcfg.num_keypoints {
            return config(format!("keypoint sets have K={}, denoiser expects {}", s.len(), dcfg.num_keypoints));
        }
        s.check_bounds(dcfg.map_size, dcfg.map_size)?;
    }
    eval.validate(dcfg.num_keypoints)?;
    let size = dcfg.map_size;
    let count = dcfg.corrupt_count;
    let validate = |den: &Network| -> Result<f64> {
        correction_error(&denoise_held_out(den, val_sets, count, cfg.seed)?, val_sets, eval)
    };
    let (inputs0, records0) = corrupt_all(train_sets, count, size, cfg.seed, &[CORRUPT_STREAM, 0])?;
    let mut initial_train_loss = 0.0;
    for start in (0..train_sets.len()).step_by(32) {
        let end = (start + 32).min(train_sets.len());
        let terms = crate::denoiser::denoiser_terms(&train_sets[start..end], &records0[start..end])?;
        let x = crate::denoiser::one_hot_maps(&inputs0[start..end], size)?;
        initial_train_loss += den.loss(&x, &terms, 0.0)? * (end - start) as f64;
    }
    initial_train_loss /= train_sets.len() as f64;

    let mut corrupted = (u64::MAX, Vec::new(), Vec::new());
    fit(den, train_sets.len(), cfg, initial_train_loss, validate, |epoch, idx| {
        if corrupted.0 != epoch {
            let (inputs, records) = corrupt_all(train_sets, count, size, cfg.seed, &[CORRUPT_STREAM, epoch])?;
            corrupted = (epoch, inputs, records);
        }
        let x_sets: Vec<KeypointSet> = idx.iter().map(|&i| corrupted.1[i].clone()).collect();
        let truth: Vec<KeypointSet> = idx.iter().map(|&i| train_sets[i].clone()).collect();
        let recs: Vec<_> = idx.iter().map(|&i| corrupted.2[i].clone()).collect();
        let terms = crate::denoiser::denoiser_terms(&truth, &recs)?;
        Ok((crate::denoiser::one_hot_maps(&x_sets, size)?, terms))
    })
}
