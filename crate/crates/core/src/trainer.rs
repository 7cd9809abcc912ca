//! Adam training of the global (M0, resized utterances) and local (M1,
//! fixed-width slices) classifiers.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{augment_batch, AugmentPolicy};
use crate::data::{read_wav, DataError, Label, Manifest};
use crate::dsp::{
    bilinear_resize, pad_frames, slice, DspError, FeatureConfig, LogMelExtractor, SliceConfig, Spectrogram,
};
use crate::model::{Arch, Model, ModelConfig, ModelError, ParamStore};
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training set has no {0:?} examples")]
    EmptyClass(Label),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite { epoch: usize, batch: usize, detail: String },
    #[error("invalid training configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    M0,
    M1,
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Target::M0 => "m0",
            Target::M1 => "m1",
        })
    }
}

impl FromStr for Target {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "m0" => Ok(Target::M0),
            "m1" => Ok(Target::M1),
            _ => Err(TrainError::Config(format!("unknown target `{s}` (expected m0 or m1)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

/// One bias-corrected Adam update of every tensor in `params`.
pub fn adam_step(params: &mut [Tensor], grads: &[Vec<f32>], state: &mut AdamState, lr: f32, hp: &AdamConfig) {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter");
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - (hp.beta1 as f64).powi(t);
    let c2 = 1.0 - (hp.beta2 as f64).powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        assert_eq!(p.numel(), g.len(), "gradient shape");
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
            *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
            let m_hat = *m as f64 / c1;
            let v_hat = *v as f64 / c2;
            *w -= (lr as f64 * m_hat / (v_hat.sqrt() + hp.eps as f64)) as f32;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub target: Target,
    pub arch: Arch,
    pub lr0: f32,
    pub batch_size: usize,
    pub min_epochs: usize,
    pub max_epochs: usize,
    /// Learning rate multiplier applied after `patience` epochs without a
    /// dev-loss improvement.
    pub plateau_factor: f32,
    pub patience: usize,
    /// Training may stop once lr < lr0 * lr_floor_ratio (and min_epochs ran).
    pub lr_floor_ratio: f32,
    pub seed: u64,
    pub slice: SliceConfig,
    pub resize_frames: usize,
    /// Fraction of utterances per class held out for the dev loss.
    pub dev_fraction: f64,
    pub augment: AugmentPolicy,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            target: Target::M1,
            arch: "se-res2net50-ii".parse().expect("known arch"),
            lr0: 2e-4,
            batch_size: 32,
            min_epochs: 20,
            max_epochs: 60,
            plateau_factor: 0.5,
            patience: 2,
            lr_floor_ratio: 1.0 / 16.0,
            seed: 0,
            slice: SliceConfig::default(),
            resize_frames: 200,
            dev_fraction: 0.1,
            augment: AugmentPolicy::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.max_epochs == 0 || self.min_epochs > self.max_epochs {
            return bad(format!(
                "epoch bounds min {} / max {} are inconsistent",
                self.min_epochs, self.max_epochs
            ));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) || self.patience == 0 {
            return bad("plateau factor must lie in (0, 1) and patience be positive".into());
        }
        if !(self.lr_floor_ratio > 0.0 && self.lr_floor_ratio < 1.0) {
            return bad("lr floor ratio must lie in (0, 1)".into());
        }
        if self.resize_frames < 2 {
            return bad("resize_frames must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return bad("dev fraction must lie in [0, 1)".into());
        }
        self.slice.validate()?;
        Ok(())
    }

    /// Frames per input example for this target.
    pub fn input_frames(&self) -> usize {
        match self.target {
            Target::M0 => self.resize_frames,
            Target::M1 => self.slice.window_frames,
        }
    }
}

/// A model input with its (possibly inherited) label.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Spectrogram,
    pub label: Label,
}

/// Log-mel features of every manifest entry, in manifest order.
pub fn featurize_manifest(manifest: &Manifest, features: &FeatureConfig) -> Result<Vec<(Spectrogram, Label)>> {
    let extractor = LogMelExtractor::new(features.clone())?;
    manifest
        .records
        .par_iter()
        .map(|r| {
            let audio = read_wav(&r.path)?;
            let spec = extractor.compute(&audio.samples)?;
            Ok((spec, r.label))
        })
        .collect()
}

/// Turns utterance spectrograms into training examples: M0 resizes each to
/// `resize_frames`; M1 cuts slices that inherit the utterance label, padding
/// utterances shorter than one window with `pad_value`.
pub fn prepare_examples(
    utterances: &[(Spectrogram, Label)],
    cfg: &TrainConfig,
    pad_value: f32,
) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (spec, label) in utterances {
        match cfg.target {
            Target::M0 => out.push(Example {
                input: bilinear_resize(spec, cfg.resize_frames)?,
                label: *label,
            }),
            Target::M1 => {
                let padded = pad_frames(spec, cfg.slice.window_frames, pad_value);
                for s in slice(&padded, &cfg.slice, *label)? {
                    out.push(Example {
                        input: s.values,
                        label: s.inherited_label,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Deterministic stratified hold-out of whole utterances. Each class keeps
/// at least one training item; a class with two or more items contributes
/// at least one dev item when `fraction > 0`.
pub fn split_dev<T: Clone>(items: &[(T, Label)], fraction: f64, seed: u64) -> (Vec<(T, Label)>, Vec<(T, Label)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd5e7_5017);
    let mut train = Vec::new();
    let mut dev = Vec::new();
    for class in [Label::Negative, Label::Positive] {
        let mut idx: Vec<usize> = (0..items.len()).filter(|&i| items[i].1 == class).collect();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let mut k = (n as f64 * fraction).round() as usize;
        if fraction > 0.0 && n >= 2 {
            k = k.max(1);
        }
        k = k.min(n.saturating_sub(1));
        let (d, t) = idx.split_at(k);
        dev.extend(d.iter().map(|&i| items[i].clone()));
        train.extend(t.iter().map(|&i| items[i].clone()));
    }
    (train, dev)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub train_accuracy: f64,
    pub dev_accuracy: f64,
    pub lr: f32,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the epoch with the lowest dev loss.
    pub model: Model,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
}

fn stack(batch: &[&Spectrogram]) -> Result<Tensor> {
    let (bands, frames) = (batch[0].bands(), batch[0].frames());
    let mut data = Vec::with_capacity(batch.len() * bands * frames);
    for s in batch {
        if s.bands() != bands || s.frames() != frames {
            return Err(TrainError::Config(format!(
                "examples must share one shape: {bands}x{frames} vs {}x{}",
                s.bands(),
                s.frames()
            )));
        }
        data.extend_from_slice(s.values());
    }
    Ok(Tensor::new([batch.len(), 1, bands, frames], data).map_err(ModelError::from)?)
}

/// Mean cross-entropy and accuracy of `model` in eval mode.
pub fn evaluate_examples(model: &Model, examples: &[Example], batch_size: usize) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&Spectrogram> = chunk.iter().map(|e| &e.input).collect();
        let logits = model.logits(stack(&refs)?)?;
        let classes = model.config().classes;
        for (row, e) in logits.data().chunks(classes).zip(chunk) {
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
            let target = e.label.class_index();
            loss += lse - row[target] as f64;
            let pred = if row[1] > row[0] { 1 } else { 0 };
            correct += (pred == target) as usize;
        }
    }
    Ok((loss / examples.len() as f64, correct as f64 / examples.len() as f64))
}

/// Mini-batch Adam on a model, one epoch at a time.
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    adam: AdamState,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            model,
            cfg,
            adam: AdamState::default(),
        })
    }

    /// Shuffles, augments (early epochs) and optimizes over `examples`
    /// once. Returns mean training loss and accuracy over the epoch.
    pub fn run_epoch(&mut self, examples: &[Example], epoch: usize, lr: f32) -> Result<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut correct = 0usize;
        for (b, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            let mut inputs: Vec<Spectrogram> = idx.iter().map(|&i| examples[i].input.clone()).collect();
            augment_batch(&mut inputs, epoch, &self.cfg.augment, &mut rng);
            let refs: Vec<&Spectrogram> = inputs.iter().collect();
            let targets: Vec<usize> = idx.iter().map(|&i| examples[i].label.class_index()).collect();
            let mut g = Graph::new();
            let x = g.leaf(stack(&refs)?);
            let (logits, leaves) = self.model.forward_train(&mut g, x)?;
            let loss = g.cross_entropy(logits, &targets).map_err(ModelError::from)?;
            let value = g.value(loss)[0];
            if !value.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b,
                    detail: format!("loss = {value}"),
                });
            }
            for (row, &t) in g.value(logits).chunks(2).zip(&targets) {
                correct += ((row[1] > row[0]) as usize == t) as usize;
            }
            total += value as f64 * idx.len() as f64;
            g.backward(loss).map_err(ModelError::from)?;
            let grads: Vec<Vec<f32>> = leaves
                .iter()
                .map(|&id| {
                    g.grad(id)
                        .map_or_else(|| vec![0.0; g.tensor(id).numel()], <[f32]>::to_vec)
                })
                .collect();
            if let Some(i) = grads.iter().position(|gr| gr.iter().any(|v| !v.is_finite())) {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b,
                    detail: format!("gradient of `{}`", self.model.store().param_names()[i]),
                });
            }
            adam_step(
                self.model.store_mut().params_mut(),
                &grads,
                &mut self.adam,
                lr,
                &self.cfg.adam,
            );
        }
        let n = examples.len().max(1) as f64;
        Ok((total / n, correct as f64 / n))
    }
}

/// Full training run with the plateau schedule and stopping rule: stop at
/// `max_epochs`, or once `min_epochs` have run and the learning rate has
/// decayed below `lr0 * lr_floor_ratio`. With an empty dev set the training
/// loss drives the schedule.
pub fn train_examples(
    train: &[Example],
    dev: &[Example],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    for class in [Label::Negative, Label::Positive] {
        if !train.iter().any(|e| e.label == class) {
            return Err(TrainError::EmptyClass(class));
        }
    }
    let model = Model::build(&ModelConfig::from_arch(cfg.arch), cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut lr = cfg.lr0;
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut since_best = 0;
    let mut log = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        let (train_loss, train_accuracy) = trainer.run_epoch(train, epoch, lr)?;
        let (dev_loss, dev_accuracy) = if dev.is_empty() {
            evaluate_examples(&trainer.model, train, cfg.batch_size)?
        } else {
            evaluate_examples(&trainer.model, dev, cfg.batch_size)?
        };
        if !dev_loss.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                batch: 0,
                detail: format!("dev loss = {dev_loss}"),
            });
        }
        let rec = EpochRecord {
            epoch,
            train_loss,
            dev_loss,
            train_accuracy,
            dev_accuracy,
            lr,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        log.push(rec);
        if best.as_ref().is_none_or(|b| dev_loss < b.0) {
            best = Some((dev_loss, epoch, trainer.model.store().clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                lr *= cfg.plateau_factor;
                since_best = 0;
            }
        }
        if epoch >= cfg.min_epochs && lr < cfg.lr0 * cfg.lr_floor_ratio {
            break;
        }
    }
    let (_, best_epoch, store) = best.expect("at least one epoch ran");
    let mut model = trainer.model;
    *model.store_mut() = store;
    Ok(TrainOutcome { model, log, best_epoch })
}

/// Featurizes a manifest, holds out a dev split and trains `cfg.target`.
pub fn train(
    manifest: &Manifest,
    features: &FeatureConfig,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    for class in [Label::Negative, Label::Positive] {
        if manifest.count(class) == 0 {
            return Err(TrainError::EmptyClass(class));
        }
    }
    let utterances = featurize_manifest(manifest, features)?;
    train_utterances(&utterances, features.floor_value(), cfg, on_epoch)
}

/// Holds out a dev split of already featurized utterances and trains
/// `cfg.target`; `pad_value` fills utterances shorter than one slice.
pub fn train_utterances(
    utterances: &[(Spectrogram, Label)],
    pad_value: f32,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let (train_utts, dev_utts) = split_dev(utterances, cfg.dev_fraction, cfg.seed);
    let train_set = prepare_examples(&train_utts, cfg, pad_value)?;
    let dev_set = prepare_examples(&dev_utts, cfg, pad_value)?;
    train_examples(&train_set, &dev_set, cfg, on_epoch)
}

/// Writes the training log as JSON lines.
pub fn write_log(path: &Path, log: &[EpochRecord]) -> std::io::Result<()> {
    let mut text = String::new();
    for r in log {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    std::fs::write(path, text)
}
