//! Optimization: SGD with Nesterov momentum, step learning-rate schedule and
//! the epoch loop.

mod synthetic;

pub use synthetic::{make_synthetic, rest_pose, SyntheticSpec, SYNTHETIC_CLASSES};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::evaluation::{predict_dataset, topk_accuracy};
use crate::ingest::{assemble_batch, DataConfig, SkeletonSequence};
use crate::network::{Forward, Model, TrainingState};
use crate::params::{Mode, ParamStore, BN_MOMENTUM};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Multiplier applied at each decay epoch.
    pub lr_decay: f64,
    pub decay_epochs: Vec<usize>,
    pub epochs: usize,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.1,
            lr_decay: 0.1,
            decay_epochs: vec![60, 90],
            epochs: 120,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 1e-4,
            batch_size: 16,
            eval_batch_size: 128,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!(
                "base_lr {} must be finite and non-negative",
                self.base_lr
            ));
        }
        if !(self.lr_decay > 0.0) {
            return bad(format!("lr_decay {} must be positive", self.lr_decay));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "decay_epochs {:?} must be strictly increasing",
                self.decay_epochs
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.weight_decay < 0.0 {
            return bad(format!(
                "weight_decay {} must be non-negative",
                self.weight_decay
            ));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        Ok(())
    }

    /// Learning rate for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.base_lr * self.lr_decay.powi(steps as i32)
    }
}

/// One SGD update. Weight decay adds `wd·p` to the gradient of decayed
/// parameters; then `v ← μv + g` and `p ← p − lr·(g + μv)` (Nesterov) or
/// `p ← p − lr·v`.
pub fn sgd_step(
    store: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f64>>,
    momentum: &mut BTreeMap<String, Tensor>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let mu = cfg.momentum;
    for (name, g) in grads {
        let p = store.param_mut(name)?;
        if g.len() != p.value.numel() {
            return Err(Error::shape("sgd_step", &[g.len()], p.value.shape()));
        }
        let wd = if p.decay { cfg.weight_decay } else { 0.0 };
        let v = momentum
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.value.shape()));
        for ((w, vel), &gi) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(g) {
            let g = gi + wd * *w;
            *vel = mu * *vel + g;
            *w -= if cfg.nesterov {
                lr * (g + mu * *vel)
            } else {
                lr * *vel
            };
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_top1: f64,
    pub val_top1: Option<f64>,
}

pub const HISTORY_HEADER: &str = "epoch,lr,train_loss,train_top1,val_top1";

pub fn history_csv(records: &[EpochRecord]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in records {
        let val = r.val_top1.map_or(String::new(), |v| v.to_string());
        writeln!(
            out,
            "{},{},{},{},{val}",
            r.epoch, r.lr, r.train_loss, r.train_top1
        )
        .unwrap();
    }
    out
}

/// Appends records to a history CSV, writing the header for a new file.
pub fn append_history(path: &Path, records: &[EpochRecord]) -> Result<()> {
    use std::io::Write;
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let text = history_csv(records);
    let body = if fresh {
        &text[..]
    } else {
        &text[HISTORY_HEADER.len() + 1..]
    };
    f.write_all(body.as_bytes())?;
    Ok(())
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Loss and correct-prediction count of one optimization step.
pub fn train_step(
    model: &mut Model,
    momentum: &mut BTreeMap<String, Tensor>,
    input: &Tensor,
    labels: &[usize],
    lr: f64,
    cfg: &TrainConfig,
    dropout_seed: u64,
) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let opts = Forward {
        mode: Mode::Train,
        dropout_seed: Some(dropout_seed),
        ..Forward::default()
    };
    let mut ctx = model.context(&mut tape, opts).with_grads();
    let x = ctx.tape.constant(input.clone());
    let logits = model.forward(&mut ctx, x)?;
    let loss = ctx.tape.cross_entropy(logits, labels)?;
    let loss_value = ctx.tape.value(loss).item();
    let k = ctx.tape.shape(logits)[1];
    let correct = labels
        .iter()
        .zip(ctx.tape.value(logits).data().chunks(k))
        .filter(|(&l, row)| argmax(row) == l)
        .count();
    if !loss_value.is_finite() {
        return Ok((loss_value, correct));
    }
    let grads = ctx.tape.backward(loss)?;
    let param_grads = ctx.param_grads(&grads);
    let stats = ctx.take_bn_stats();
    model.store.update_running_stats(&stats, BN_MOMENTUM)?;
    sgd_step(&mut model.store, &param_grads, momentum, lr, cfg)?;
    Ok((loss_value, correct))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains from `state.epoch` up to `cfg.epochs`, calling `on_epoch` after each.
///
/// Every epoch draws its shuffle, augmentation and dropout from a generator
/// seeded by `(cfg.seed, epoch)`, so a resumed run matches an uninterrupted one.
pub fn train<F: FnMut(&EpochRecord)>(
    model: &mut Model,
    state: &mut TrainingState,
    train_set: &[SkeletonSequence],
    val_set: &[SkeletonSequence],
    cfg: &TrainConfig,
    data: &DataConfig,
    mut on_epoch: F,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let mut history = Vec::new();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let lr = cfg.lr_at(epoch);
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let seqs: Vec<&SkeletonSequence> = chunk.iter().map(|&i| &train_set[i]).collect();
            let batch = assemble_batch(
                &seqs,
                data.stream,
                model.graph(),
                data.frames,
                data.persons,
                data.augment,
                &mut rng,
            )?;
            let dropout_seed = rng.random();
            let (loss, ok) = train_step(
                model,
                &mut state.momentum,
                &batch.input,
                &batch.labels,
                lr,
                cfg,
                dropout_seed,
            )?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            loss_sum += loss * chunk.len() as f64;
            correct += ok;
        }
        let val_top1 = if val_set.is_empty() {
            None
        } else {
            let scores = predict_dataset(model, val_set, data, cfg.eval_batch_size, None)?;
            let labels: Vec<usize> = val_set.iter().map(|s| s.label).collect();
            Some(topk_accuracy(&scores, &labels, 1)?)
        };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            train_top1: correct as f64 / train_set.len() as f64,
            val_top1,
        };
        state.epoch += 1;
        on_epoch(&record);
        history.push(record);
    }
    Ok(history)
}
