//! Weighted cross-entropy, AdamW with decoupled decay, cosine schedule and
//! the early-stopped training loop.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainState};
use crate::error::{Error, Result};
use crate::evaluation::{roc_auc, score_videos, window_logits};
use crate::kinematics::{FeatureConfig, WindowFeatures};
use crate::network::{backward, forward, Batch, Mode, ModelConfig, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosWeightKeyword {
    Auto,
}

/// Fake-class loss weight: a fixed value or the negative/positive window ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PosWeight {
    Fixed(f64),
    Keyword(PosWeightKeyword),
}

impl Default for PosWeight {
    fn default() -> Self {
        PosWeight::Keyword(PosWeightKeyword::Auto)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub pos_weight: PosWeight,
    pub seed: u64,
    pub betas: [f64; 2],
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 3e-4,
            lr_min: 1e-5,
            weight_decay: 1e-4,
            epochs: 60,
            patience: 30,
            batch_size: 256,
            pos_weight: PosWeight::default(),
            seed: 42,
            betas: [0.9, 0.999],
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr0) {
            return bad("require 0 <= lr_min <= lr0");
        }
        if self.epochs == 0 || self.patience > self.epochs {
            return bad("require epochs >= 1 and patience <= epochs");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if let PosWeight::Fixed(w) = self.pos_weight {
            if !(w > 0.0 && w.is_finite()) {
                return bad("pos_weight must be positive");
            }
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) || self.eps <= 0.0 {
            return bad("betas must lie in [0, 1) and eps must be positive");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean of `-[w*y*log s(z) + (1-y)*log(1-s(z))]` over the batch.
pub fn weighted_bce_logits(logits: &[f64], labels: &[f64], pos_weight: f64) -> f64 {
    let sum: f64 = logits.iter().zip(labels).map(|(&z, &y)| pos_weight * y * softplus(-z) + (1.0 - y) * softplus(z)).sum();
    sum / logits.len() as f64
}

/// Derivative of [`weighted_bce_logits`] with respect to each logit.
pub fn weighted_bce_grad(logits: &[f64], labels: &[f64], pos_weight: f64) -> Vec<f64> {
    let n = logits.len() as f64;
    logits.iter().zip(labels).map(|(&z, &y)| (-pos_weight * y * sigmoid(-z) + (1.0 - y) * sigmoid(z)) / n).collect()
}

pub fn auto_pos_weight<'a>(labels: impl IntoIterator<Item = &'a WindowFeatures>) -> Result<f64> {
    let (mut neg, mut pos) = (0usize, 0usize);
    for w in labels {
        match w.label {
            Some(l) if l.is_fake() => pos += 1,
            Some(_) => neg += 1,
            None => {}
        }
    }
    if neg == 0 || pos == 0 {
        return Err(Error::SingleClassDataset);
    }
    Ok(neg as f64 / pos as f64)
}

pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> f64 {
    let frac = epoch as f64 / cfg.epochs as f64;
    cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + (PI * frac).cos())
}

/// First and second moments, one buffer per trainable tensor in visit order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub names: Vec<String>,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let mut state = AdamState { names: Vec::new(), m: Vec::new(), v: Vec::new() };
        params.for_each(|name, kind, t| {
            if kind.is_trainable() {
                state.names.push(name.to_string());
                state.m.push(vec![0.0; t.len()]);
                state.v.push(vec![0.0; t.len()]);
            }
        });
        state
    }
}

/// One AdamW update. Increments `params.step` before bias correction.
pub fn adamw_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState, lr: f64, cfg: &TrainConfig) -> Result<()> {
    let mut flat = Vec::with_capacity(state.m.len());
    let mut bad = None;
    grads.for_each(|name, kind, t| {
        if kind.is_trainable() {
            if bad.is_none() && t.data.iter().any(|g| !g.is_finite()) {
                bad = Some(name.to_string());
            }
            flat.push(t.data.clone());
        }
    });
    if let Some(name) = bad {
        return Err(Error::NonFiniteGradient(name));
    }
    if flat.len() != state.m.len() {
        return Err(Error::ShapeMismatch("optimizer state does not match parameters".into()));
    }
    params.step += 1;
    let t = params.step as i32;
    let [b1, b2] = cfg.betas;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    let mut i = 0;
    params.for_each_mut(|_, kind, theta| {
        if !kind.is_trainable() {
            return;
        }
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &flat[i]);
        for j in 0..theta.data.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            if kind.decays() {
                theta.data[j] *= decay;
            }
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            theta.data[j] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        i += 1;
    });
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub loss: f64,
    pub val_auc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,val_auc,lr\n");
        for r in &self.epochs {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.loss, r.val_auc, r.lr));
        }
        out
    }
}

pub struct TrainOutcome {
    /// Parameters and optimizer state from the best validation epoch.
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
}

fn labelled<'a>(windows: &'a [WindowFeatures], what: &str) -> Result<Vec<&'a WindowFeatures>> {
    if windows.is_empty() {
        return Err(Error::InvalidInput(format!("{what} set is empty")));
    }
    if windows.iter().any(|w| w.label.is_none()) {
        return Err(Error::InvalidInput(format!("{what} set contains unlabelled windows")));
    }
    Ok(windows.iter().collect())
}

/// Video-level validation AUC of `params` in eval mode.
pub fn validation_auc(params: &ModelParams, windows: &[WindowFeatures], batch_size: usize) -> Result<f64> {
    let logits = window_logits(params, windows, batch_size)?;
    let videos = score_videos(windows, &logits)?;
    let scores: Vec<f64> = videos.iter().map(|v| v.score).collect();
    let labels: Vec<bool> = videos.iter().map(|v| v.label.is_some_and(|l| l.is_fake())).collect();
    roc_auc(&scores, &labels)
}

pub fn train(
    train_set: &[WindowFeatures],
    val_set: &[WindowFeatures],
    features: &FeatureConfig,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(train_set, val_set, features, model, cfg, |_| {})
}

/// Trains with a callback after every epoch.
pub fn train_with(
    train_set: &[WindowFeatures],
    val_set: &[WindowFeatures],
    features: &FeatureConfig,
    model: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    features.validate()?;
    let train_windows = labelled(train_set, "training")?;
    labelled(val_set, "validation")?;
    let pos_weight = match cfg.pos_weight {
        PosWeight::Fixed(w) => {
            auto_pos_weight(train_windows.iter().copied())?;
            w
        }
        PosWeight::Keyword(PosWeightKeyword::Auto) => auto_pos_weight(train_windows.iter().copied())?,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(model, &mut rng)?;
    let mut adam = AdamState::new(&params);
    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut since_best = 0;

    for e in 0..cfg.epochs {
        let lr = cosine_lr(e, cfg);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        // A trailing singleton batch cannot use batch statistics and is skipped.
        for chunk in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let rows: Vec<&WindowFeatures> = chunk.iter().map(|&i| train_windows[i]).collect();
            let labels: Vec<f64> = rows.iter().map(|w| w.label.unwrap().target()).collect();
            let batch = Batch::from_windows(&rows)?;
            let (logits, cache) = forward(&batch, &params, Mode::Train, &mut rng)?;
            let loss = weighted_bce_logits(&logits, &labels, pos_weight);
            if !loss.is_finite() {
                return Err(Error::DivergedTraining { epoch: e + 1, loss });
            }
            let dlogits = weighted_bce_grad(&logits, &labels, pos_weight);
            let grads = backward(&cache, &params, &dlogits)?;
            params.apply_running_stats(&cache);
            adamw_step(&mut params, &grads, &mut adam, lr, cfg)?;
            loss_sum += loss * rows.len() as f64;
            seen += rows.len();
        }
        let loss = loss_sum / seen.max(1) as f64;
        let val_auc = validation_auc(&params, val_set, cfg.batch_size)?;
        let record = EpochRecord { epoch: e + 1, loss, val_auc, lr };
        on_epoch(&record);
        history.epochs.push(record);

        // Strict improvement only: ties keep the earlier epoch.
        if best.as_ref().is_none_or(|(auc, _)| val_auc > *auc) {
            since_best = 0;
            history.best_epoch = e + 1;
            let state = TrainState {
                adam: adam.clone(),
                epoch: e + 1,
                best_epoch: e + 1,
                best_auc: val_auc,
                rng_seed: rng.get_seed(),
                rng_stream: rng.get_stream(),
                rng_word_pos: rng.get_word_pos(),
            };
            let ckpt = Checkpoint { params: params.clone(), features: features.clone(), train: Some(cfg.clone()), state: Some(state) };
            best = Some((val_auc, ckpt));
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (_, checkpoint) = best.expect("at least one epoch runs");
    Ok(TrainOutcome { checkpoint, history })
}
