//! Mini-batch SGD with truncated BPTT and validation-driven lr decay.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::checkpoint::Checkpoint;
use crate::dataset::{self, Utterance};
use crate::error::{Error, Result};
use crate::eval;
use crate::layers::{Ctx, Mode};
use crate::loss::LossKind;
use crate::model::{Model, ModelConfig};
use crate::params::{ParamId, ParamSet};
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_decay: f64,
    pub lr_floor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub bptt_t: usize,
    pub loss: LossKind,
    pub seed: u64,
    /// Epochs without validation improvement before the lr decays.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 0.1,
            lr_decay: 0.1,
            lr_floor: 1e-5,
            epochs: 20,
            batch_size: 128,
            bptt_t: 50,
            loss: LossKind::CrossEntropy,
            seed: 0,
            patience: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr_floor > 0.0
            && self.lr_floor <= self.initial_lr
            && self.initial_lr.is_finite()
            && self.lr_decay > 0.0
            && self.lr_decay <= 1.0
            && self.bptt_t >= 1
            && self.batch_size >= 1
            && self.patience >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid training configuration: {self:?}")))
        }
    }
}

/// A fixed-length training window.
#[derive(Clone, Debug, PartialEq)]
pub struct Chunk {
    /// T×I features.
    pub features: Tensor,
    pub labels: Vec<u8>,
}

/// Splits each utterance into non-overlapping `bptt_t`-frame windows; a
/// trailing fragment shorter than `bptt_t` is dropped.
pub fn make_chunks(utts: &[Utterance], bptt_t: usize) -> Result<Vec<Chunk>> {
    let mut out = Vec::new();
    for u in utts {
        let &[t, d] = u.features.shape() else {
            return Err(Error::shape("make_chunks", u.features.shape(), &[0, 0]));
        };
        if t != u.labels.len() {
            return Err(Error::Data(format!(
                "{}: {t} feature frames but {} labels",
                u.entry.utt_id,
                u.labels.len()
            )));
        }
        for k in 0..t / bptt_t {
            let rows = k * bptt_t..(k + 1) * bptt_t;
            out.push(Chunk {
                features: Tensor::new(&[bptt_t, d], u.features.data()[rows.start * d..rows.end * d].to_vec())?,
                labels: u.labels[rows].to_vec(),
            });
        }
    }
    Ok(out)
}

/// Chunk visiting order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(rng::derive_seed(
        seed ^ 0x005E_ED0F_C4A1,
        epoch as u64,
    )));
    order
}

/// Stacks chunks into a time-major T×B×I batch and T×B targets.
pub fn stack_batch(chunks: &[&Chunk]) -> Result<(Tensor, Tensor)> {
    let first = chunks.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let &[t, d] = first.features.shape() else {
        return Err(Error::shape("batch", first.features.shape(), &[0, 0]));
    };
    let b = chunks.len();
    let mut x = vec![0.0; t * b * d];
    let mut y = vec![0.0; t * b];
    for (j, c) in chunks.iter().enumerate() {
        if c.features.shape() != [t, d] {
            return Err(Error::shape("batch", c.features.shape(), &[t, d]));
        }
        for step in 0..t {
            x[(step * b + j) * d..(step * b + j + 1) * d].copy_from_slice(c.features.row(step));
            y[step * b + j] = c.labels[step] as f64;
        }
    }
    Ok((Tensor::new(&[t, b, d], x)?, Tensor::new(&[t, b], y)?))
}

/// Plain SGD: `w ← w − lr·g`. Every gradient is checked before any
/// parameter changes, so a non-finite gradient leaves `params` untouched.
pub fn sgd_step(params: &mut ParamSet, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
    for (id, g) in grads {
        if params.get(*id).shape() != g.shape() {
            return Err(Error::shape("sgd_step", params.get(*id).shape(), g.shape()));
        }
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of '{}' has {} at flat index {i}",
                params.name(*id),
                g.data()[i]
            )));
        }
    }
    for (id, g) in grads {
        let w = params.get(*id);
        let data = w.data().iter().zip(g.data()).map(|(w, g)| w - lr * g).collect();
        params.set(*id, Tensor::new(w.shape(), data)?)?;
    }
    Ok(())
}

/// Loss of one batch and the gradient of every trainable parameter.
/// Batch-norm running statistics are updated in `model` when `mode` is
/// `Train`.
pub fn batch_gradients(
    model: &mut Model,
    x: &Tensor,
    y: &Tensor,
    loss: LossKind,
    mode: Mode,
) -> Result<(f64, Vec<(ParamId, Tensor)>)> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let mut ctx = Ctx::new(&mut tape, &model.params, &bound, mode);
    let xv = ctx.tape.constant(x.clone());
    let yv = ctx.tape.constant(y.clone());
    let out = model.forward(&mut ctx, xv, None)?;
    let lv = loss.batch(ctx.tape, out.probs, yv)?;
    let updates = std::mem::take(&mut ctx.updates);
    let value = tape.value(lv).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("batch loss is {value}")));
    }
    let grads = tape.backward(lv)?;
    let grads = model.params.collect_grads(&bound, &grads);
    model.apply_updates(&updates)?;
    Ok((value, grads))
}

/// Loss of one batch without updating anything.
pub fn batch_loss(model: &Model, x: &Tensor, y: &Tensor, loss: LossKind, mode: Mode) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let mut ctx = Ctx::new(&mut tape, &model.params, &bound, mode);
    let xv = ctx.tape.constant(x.clone());
    let yv = ctx.tape.constant(y.clone());
    let out = model.forward(&mut ctx, xv, None)?;
    let lv = loss.batch(ctx.tape, out.probs, yv)?;
    Ok(tape.value(lv).item())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_auc,lr,seconds\n");
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.3}",
                r.epoch, r.train_loss, r.val_auc, r.lr, r.seconds
            );
        }
        s
    }

    /// The log without wall-clock times, for reproducibility comparisons.
    pub fn without_times(&self) -> Vec<(usize, f64, f64, f64)> {
        self.epochs
            .iter()
            .map(|r| (r.epoch, r.train_loss, r.val_auc, r.lr))
            .collect()
    }
}

/// Where to persist progress while training.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// Rewritten whenever validation AUC improves.
    pub checkpoint: Option<PathBuf>,
    /// Rewritten after every epoch.
    pub log: Option<PathBuf>,
    /// Threads for validation scoring.
    pub jobs: usize,
}

pub struct TrainResult {
    /// Best-validation checkpoint (the initialization when no epoch ran).
    pub best: Checkpoint,
    pub best_val_auc: Option<f64>,
    pub log: TrainLog,
}

/// Trains on raw (unnormalized) utterances. Normalization statistics are
/// fitted on `train` and stored in the checkpoint.
pub fn train(
    model_config: &ModelConfig,
    config: &TrainConfig,
    train: &[Utterance],
    val: &[Utterance],
    outputs: &TrainOutputs,
) -> Result<TrainResult> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    let norm = dataset::fit(train)?;
    let train_n = dataset::normalized(&norm, train)?;
    let val_n = dataset::normalized(&norm, val)?;
    let chunks = make_chunks(&train_n, config.bptt_t)?;
    if chunks.is_empty() && config.epochs > 0 {
        return Err(Error::Data(format!(
            "no training utterance reaches {} frames",
            config.bptt_t
        )));
    }

    let mut model = Model::build(model_config.clone(), config.seed)?;
    let mut best = Checkpoint {
        model: model.clone(),
        norm: norm.clone(),
    };
    let mut best_auc: Option<f64> = None;
    let mut stale = 0usize;
    let mut lr = config.initial_lr;
    let mut log = TrainLog::default();
    let write = |path: &PathBuf, body: String| std::fs::write(path, body).map_err(|e| Error::io(path, e));
    if let Some(p) = &outputs.checkpoint {
        best.save(p)?;
    }

    for epoch in 0..config.epochs {
        let start = Instant::now();
        let order = epoch_order(chunks.len(), config.seed, epoch);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (bi, ids) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Chunk> = ids.iter().map(|&i| &chunks[i]).collect();
            let (x, y) = stack_batch(&batch)?;
            let loss = batch_gradients(&mut model, &x, &y, config.loss, Mode::Train)
                .and_then(|(l, g)| {
                    sgd_step(&mut model.params, &g, lr)?;
                    Ok(l)
                })
                .map_err(|e| match e {
                    Error::NonFinite(msg) => Error::NonFinite(format!(
                        "epoch {}, batch {bi}: {msg} (last good checkpoint kept)",
                        epoch + 1
                    )),
                    other => other,
                })?;
            total += loss;
            batches += 1;
        }

        let scores = eval::score_all(&model, &val_n, outputs.jobs.max(1))?;
        let val_auc = eval::pooled_auc(&scores, &val_n)?;
        log.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: total / batches as f64,
            val_auc,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        });
        log::info!(
            "epoch {} loss {:.5} val AUC {:.4} lr {lr}",
            epoch + 1,
            total / batches as f64,
            val_auc
        );

        if best_auc.is_none_or(|b| val_auc > b) {
            best_auc = Some(val_auc);
            stale = 0;
            best = Checkpoint {
                model: model.clone(),
                norm: norm.clone(),
            };
            if let Some(p) = &outputs.checkpoint {
                best.save(p)?;
            }
        } else {
            stale += 1;
            if stale >= config.patience {
                lr = (lr * config.lr_decay).max(config.lr_floor);
                stale = 0;
            }
        }
        if let Some(p) = &outputs.log {
            write(p, log.to_csv())?;
        }
    }
    Ok(TrainResult {
        best,
        best_val_auc: best_auc,
        log,
    })
}
