//! Supervised training with Adam and early stopping, and the evaluation
//! protocol (within-subject vs unseen-subject accuracy, ablations, dominance
//! groups).

mod ablation;
mod eval;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use ndarray::{Array1, Array3, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::conditioning::{codes_for, embed, embed_backward, EmbedderParams, ProfileCode, EMBED_DIM};
use crate::dataset::{SubjectProfile, TrialEpoch};
use crate::error::{Error, Result};
use crate::models::{
    self, backward, cross_entropy, forward_batch, init_params, Mode, ModelParams, ModelSpec, ParamSet,
};
use crate::rng;

pub use ablation::{ablation_table, rows_to_csv, Ablation, AblationConfig, AblationEntry, AblationRow};
pub use eval::{dominance_eval, evaluate, predict, DominanceReport, EvalReport, GroupStats, SplitKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "32-bit")]
    F32,
    #[default]
    #[serde(rename = "64-bit")]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub early_stop_patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Hard cap on optimizer steps.
    pub max_steps: Option<usize>,
    /// Stop once eval-mode accuracy on the training instances reaches this.
    pub stop_at_train_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 128,
            max_epochs: 100,
            early_stop_patience: 10,
            val_fraction: 0.1,
            seed: 0,
            precision: Precision::F64,
            max_steps: None,
            stop_at_train_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            errs.push(format!("train.lr = {} must be finite and >= 0", self.lr));
        }
        if self.batch_size == 0 {
            errs.push("train.batch_size must be >= 1".to_string());
        }
        if self.max_epochs == 0 {
            errs.push("train.max_epochs must be >= 1".to_string());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            errs.push(format!("train.val_fraction = {} outside [0, 1)", self.val_fraction));
        }
        if self.precision == Precision::F32 {
            errs.push("train.precision = \"32-bit\" is not supported; use \"64-bit\"".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

/// Per-epoch curves; all vectors have one entry per completed epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    /// Accuracy of the training-mode passes (dropout active).
    pub train_accuracy: Vec<f64>,
    /// Absent when no validation carve-out is used.
    pub val_accuracy: Vec<Option<f64>>,
    pub steps: usize,
    pub stopped_epoch: usize,
    /// Epoch whose parameters were returned (1-based).
    pub best_epoch: usize,
    pub stop_reason: String,
    /// Not serialized, so saved histories replay byte for byte.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl TrainHistory {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_accuracy,val_accuracy\n");
        for i in 0..self.epochs() {
            let val = self.val_accuracy[i].map(|v| format!("{v:?}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:?},{:?},{}\n",
                i + 1,
                self.train_loss[i],
                self.train_accuracy[i],
                val
            ));
        }
        out
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: ParamSet,
    v: ParamSet,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamSet) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: models::zeros_like(params),
            v: models::zeros_like(params),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, p) in params.iter_mut() {
            let g = &grads[name].data;
            let m = &mut self.m.get_mut(name).expect("moment slot").data;
            let v = &mut self.v.get_mut(name).expect("moment slot").data;
            for i in 0..p.data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Profile codes needed to build inputs for `epochs`; empty for baselines.
pub fn codes_if_needed<'a>(
    spec: &ModelSpec,
    epochs: impl IntoIterator<Item = &'a TrialEpoch>,
    profiles: &BTreeMap<String, SubjectProfile>,
) -> Result<BTreeMap<String, ProfileCode>> {
    if spec.use_ids {
        codes_for(epochs, profiles)
    } else {
        Ok(BTreeMap::new())
    }
}

/// Stacks epochs into a `B × C' × T` batch, appending each subject's
/// embedding rows when the model uses IDs.
pub fn batch_input(
    model: &ModelParams,
    epochs: &[&TrialEpoch],
    codes: &BTreeMap<String, ProfileCode>,
) -> Result<Array3<f64>> {
    let spec = &model.spec;
    let (c, t) = (spec.eeg_channels, spec.samples);
    let embedder = model.embedder();
    let mut cache: BTreeMap<ProfileCode, Array1<f64>> = BTreeMap::new();
    let mut x = Array3::zeros((epochs.len(), spec.input_channels(), t));
    for (b, ep) in epochs.iter().enumerate() {
        if ep.data.dim() != (c, t) {
            return Err(Error::Shape(format!(
                "epoch of subject {} is {:?}, model expects {c}x{t}",
                ep.subject_id,
                ep.data.dim()
            )));
        }
        let mut slot = x.index_axis_mut(Axis(0), b);
        slot.slice_mut(ndarray::s![..c, ..]).assign(&ep.data);
        if let Some(params) = &embedder {
            let code = *codes
                .get(&ep.subject_id)
                .ok_or_else(|| Error::MissingProfile(ep.subject_id.clone()))?;
            if let std::collections::btree_map::Entry::Vacant(e) = cache.entry(code) {
                e.insert(embed(code, params)?);
            }
            for (j, &v) in cache[&code].iter().enumerate() {
                slot.row_mut(c + j).fill(v);
            }
        }
    }
    Ok(x)
}

pub struct StepResult {
    pub loss: f64,
    pub correct: usize,
    pub grads: ParamSet,
    pub pass: models::Pass,
}

/// Mean cross-entropy of a batch and its gradient with respect to every
/// parameter, the embedder included.
pub fn loss_and_gradients(
    model: &ModelParams,
    epochs: &[&TrialEpoch],
    codes: &BTreeMap<String, ProfileCode>,
    mode: Mode,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<StepResult> {
    let x = batch_input(model, epochs, codes)?;
    let labels: Vec<usize> = epochs.iter().map(|e| e.label.index()).collect();
    let pass = forward_batch(model, x.view(), mode, rng)?;
    let (loss, dlogits) = cross_entropy(pass.logits.view(), &labels);
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(b, &y)| argmax2(pass.logits[[*b, 0]], pass.logits[[*b, 1]]) == y)
        .count();
    let mut g = backward(model, &pass, dlogits.view(), model.spec.use_ids);
    if let (Some(dx), Some(params)) = (g.input.take(), model.embedder()) {
        let c = model.spec.eeg_channels;
        let mut eg = match params {
            EmbedderParams::Affine { .. } => EmbedderParams::zeros(crate::conditioning::EmbedderKind::Affine),
            EmbedderParams::Lookup { .. } => EmbedderParams::zeros(crate::conditioning::EmbedderKind::Lookup),
        };
        for (b, ep) in epochs.iter().enumerate() {
            let upstream: Vec<f64> = (0..EMBED_DIM)
                .map(|j| dx.index_axis(Axis(0), b).row(c + j).sum())
                .collect();
            embed_backward(codes[&ep.subject_id], &upstream, &mut eg);
        }
        match eg {
            EmbedderParams::Affine { weight, bias } => {
                models::add(models::grad(&mut g.params, "embed.weight"), &weight);
                models::add(models::grad(&mut g.params, "embed.bias"), &bias);
            }
            EmbedderParams::Lookup { table } => {
                models::add(models::grad(&mut g.params, "embed.table"), &table);
            }
        }
    }
    Ok(StepResult {
        loss,
        correct,
        grads: g.params,
        pass,
    })
}

/// Class 0 (target) wins ties.
pub fn argmax2(a: f64, b: f64) -> usize {
    usize::from(b > a)
}

fn accuracy_of(model: &ModelParams, epochs: &[&TrialEpoch], codes: &BTreeMap<String, ProfileCode>) -> Result<f64> {
    let preds = predict(model, epochs, codes)?;
    let correct = preds.iter().zip(epochs).filter(|(p, e)| **p == e.label.index()).count();
    Ok(correct as f64 / epochs.len() as f64)
}

const STOP_CHECK_MARGIN: f64 = 0.05;

/// Trains a fresh model from `init_params(spec, cfg.seed)`.
///
/// `excluded` lists subjects that must never be consumed (the unseen side of
/// the split); finding one is a hard error. A `val_fraction` share of the
/// instances is held out for early stopping and the best-validation
/// parameters are returned.
pub fn train(
    spec: &ModelSpec,
    data: &[&TrialEpoch],
    profiles: &BTreeMap<String, SubjectProfile>,
    cfg: &TrainConfig,
    excluded: &BTreeSet<String>,
) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate()?;
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if let Some(ep) = data.iter().find(|e| excluded.contains(&e.subject_id)) {
        return Err(Error::Leakage(ep.subject_id.clone()));
    }
    let codes = codes_if_needed(spec, data.iter().copied(), profiles)?;
    let started = Instant::now();

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng::named(cfg.seed, "train.validation"));
    let n_val = ((cfg.val_fraction * data.len() as f64).round() as usize).min(data.len() - 1);
    let val: Vec<&TrialEpoch> = order[..n_val].iter().map(|&i| data[i]).collect();
    let fit: Vec<&TrialEpoch> = order[n_val..].iter().map(|&i| data[i]).collect();

    let mut model = init_params(spec, cfg.seed)?;
    let mut adam = Adam::new(cfg.lr, &model.params);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ModelParams, usize)> = None;
    let mut since_best = 0;
    let mut dropout_rng = rng::named(cfg.seed, "train.dropout");
    let mut stop_reason = "max_epochs".to_string();

    'epochs: for epoch in 0..cfg.max_epochs {
        let mut idx: Vec<usize> = (0..fit.len()).collect();
        idx.shuffle(&mut rng::stream(cfg.seed ^ 0x7A11, epoch as u64));
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let mut seen = 0;
        for chunk in idx.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| history.steps >= m) {
                break;
            }
            let batch: Vec<&TrialEpoch> = chunk.iter().map(|&i| fit[i]).collect();
            let step = loss_and_gradients(&model, &batch, &codes, Mode::Train, &mut dropout_rng)?;
            history.steps += 1;
            if !step.loss.is_finite() {
                return Err(Error::Divergence {
                    step: history.steps,
                    loss: step.loss,
                });
            }
            loss_sum += step.loss * batch.len() as f64;
            correct += step.correct;
            seen += batch.len();
            adam.step(&mut model.params, &step.grads);
            model.update_running_stats(&step.pass);
        }
        if seen == 0 {
            stop_reason = "max_steps".to_string();
            break;
        }
        history.train_loss.push(loss_sum / seen as f64);
        history.train_accuracy.push(correct as f64 / seen as f64);
        history.stopped_epoch = epoch + 1;

        let val_acc = if val.is_empty() {
            None
        } else {
            Some(accuracy_of(&model, &val, &codes)?)
        };
        history.val_accuracy.push(val_acc);
        if let Some(acc) = val_acc {
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, model.clone(), epoch + 1));
                since_best = 0;
            } else {
                since_best += 1;
            }
        }
        // The eval pass is as costly as a step, so it only runs once the
        // running training accuracy is close to the target.
        let near = |target: f64| {
            history
                .train_accuracy
                .last()
                .is_some_and(|&a| a >= target - STOP_CHECK_MARGIN)
        };
        if let Some(target) = cfg.stop_at_train_accuracy.filter(|&t| near(t)) {
            if accuracy_of(&model, &fit, &codes)? >= target {
                stop_reason = "train_accuracy".to_string();
                best = None;
                break 'epochs;
            }
        }
        if val_acc.is_some() && since_best >= cfg.early_stop_patience {
            stop_reason = "early_stop".to_string();
            break;
        }
        if cfg.max_steps.is_some_and(|m| history.steps >= m) {
            stop_reason = "max_steps".to_string();
            break;
        }
    }
    history.stop_reason = stop_reason;
    history.best_epoch = history.stopped_epoch;
    if let Some((_, params, epoch)) = best {
        model = params;
        history.best_epoch = epoch;
    }
    history.wall_time_secs = started.elapsed().as_secs_f64();
    Ok((model, history))
}
