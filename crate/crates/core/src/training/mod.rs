//! Target assignment, the compound detection loss, vanilla SGD and the
//! epoch loop with per-epoch validation and checkpointing.

mod loss;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

pub use loss::{
    assign_targets, bce_with_logits, bce_with_logits_value, box_iou_loss, compute_loss,
    iou_box_loss, BoxTarget, LossBreakdown, LossConfig, Positive, Reduction, TargetAssignment,
};

use crate::dataset::{make_batches, AnnotatedImage, BoxLabel};
use crate::detector::{DetectorModel, ForwardOutput, Mode};
use crate::error::{Error, Result};
use crate::inference::{evaluate_model, InferenceConfig};
use crate::tensor::{Element, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// When set, the rate decays linearly to this fraction of the initial
    /// value by the last epoch. Constant otherwise.
    pub final_lr_fraction: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            epochs: 200,
            batch_size: 64,
            final_lr_fraction: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if let Some(f) = self.final_lr_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::config("final_lr_fraction", "must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Learning rate for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.final_lr_fraction {
            None => self.learning_rate,
            Some(f) => {
                let span = (self.epochs.max(2) - 1) as f64;
                let progress = (epoch as f64 / span).min(1.0);
                self.learning_rate * (1.0 - (1.0 - f) * progress)
            }
        }
    }
}

/// `ω ← ω − α·∂L/∂ω` for every parameter, then clears the gradients.
/// Nothing is updated if any parameter lacks a gradient.
pub fn sgd_step<T: Element>(params: &mut IndexMap<String, Tensor<T>>, lr: f64) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, p)| p.grad().is_none()) {
        return Err(Error::MissingGradient(name.clone()));
    }
    for p in params.values_mut() {
        let g = p.take_grad().expect("checked above");
        for (w, g) in p.data_mut().iter_mut().zip(g) {
            *w = T::of_f64(w.as_f64() - lr * g.as_f64());
        }
    }
    Ok(())
}

/// Forward pass plus compound loss for one batch.
pub fn batch_loss<T: Element>(
    model: &DetectorModel<T>,
    tape: &mut Tape<T>,
    images: Tensor<T>,
    labels: &[Vec<BoxLabel>],
    loss: &LossConfig,
    mode: Mode,
) -> Result<(LossBreakdown, ForwardOutput<T>)> {
    let x = tape.constant(images);
    let out = model.forward(tape, x, mode)?;
    let assignment = assign_targets(labels, model.config(), loss)?;
    let breakdown = compute_loss(tape, &out.maps, &assignment, model.config(), loss)?;
    Ok((breakdown, out))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_obj: f64,
    pub loss_cls: f64,
    pub loss_box: f64,
    pub val_precision: f64,
    pub val_recall: f64,
    pub val_f1: f64,
    pub val_map50: f64,
    pub epoch_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    /// One-based epoch with the highest validation mAP (earliest on ties).
    pub best_epoch: Option<usize>,
}

pub const HISTORY_HEADER: &str =
    "epoch,loss_total,loss_obj,loss_cls,loss_box,val_precision,val_recall,val_f1,val_map50,epoch_seconds";

impl TrainingHistory {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{HISTORY_HEADER}\n");
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{},{:.8},{:.8},{:.8},{:.8},{:.6},{:.6},{:.6},{:.6},{:.3}",
                r.epoch,
                r.loss_total,
                r.loss_obj,
                r.loss_cls,
                r.loss_box,
                r.val_precision,
                r.val_recall,
                r.val_f1,
                r.val_map50,
                r.epoch_seconds
            );
        }
        out
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.map(|e| &self.epochs[e - 1])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub seed: u64,
    /// Decoding used for per-epoch validation.
    pub validation: InferenceConfig,
    /// Where `history.csv`, `best.ckpt` and `last.ckpt` go, if anywhere.
    pub out_dir: Option<PathBuf>,
}

/// Shuffle seed for an epoch, distinct per epoch and derived from the run seed.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Trains in place. Each epoch shuffles, steps once per batch, then scores
/// the validation set; a non-finite loss aborts with its epoch and batch.
pub fn train(
    model: &mut DetectorModel<f32>,
    train_set: &[AnnotatedImage],
    val_set: &[AnnotatedImage],
    settings: &TrainSettings,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainingHistory> {
    let opt = &settings.optimizer;
    opt.validate()?;
    settings.loss.validate(model.config().num_classes)?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset("training set is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::EmptyDataset("validation set is empty".into()));
    }
    if opt.batch_size > train_set.len() {
        return Err(Error::config(
            "batch_size",
            format!(
                "{} exceeds the {} training images",
                opt.batch_size,
                train_set.len()
            ),
        ));
    }
    if let Some(dir) = &settings.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let size = model.config().input_size;
    let mut history = TrainingHistory::default();
    let mut best_map = f64::NEG_INFINITY;
    for epoch in 0..opt.epochs {
        let start = Instant::now();
        let lr = opt.lr_at(epoch);
        let mut sums = [0.0f64; 4];
        let mut batches = 0usize;
        for (bi, batch) in make_batches(
            train_set,
            opt.batch_size,
            epoch_seed(settings.seed, epoch),
            size,
        )?
        .enumerate()
        {
            let batch = batch?;
            let mut tape = Tape::new();
            let x = tape.constant(batch.images);
            let out = model.forward_train(&mut tape, x)?;
            let assignment = assign_targets(&batch.labels, model.config(), &settings.loss)?;
            let lb = compute_loss(
                &mut tape,
                &out.maps,
                &assignment,
                model.config(),
                &settings.loss,
            )?;
            let total = tape.value(lb.total).data()[0] as f64;
            if !total.is_finite() {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    batch: bi + 1,
                });
            }
            tape.backward(lb.total)?;
            model.collect_grads(&tape, &out.params)?;
            sgd_step(model.store_mut().params_mut(), lr)?;
            for (s, v) in sums
                .iter_mut()
                .zip([total, lb.objectness, lb.class, lb.box_loss])
            {
                *s += v;
            }
            batches += 1;
        }
        let report = evaluate_model(model, val_set, opt.batch_size, &settings.validation, "val")?;
        let mean = |i: usize| sums[i] / batches as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            loss_total: mean(0),
            loss_obj: mean(1),
            loss_cls: mean(2),
            loss_box: mean(3),
            val_precision: report.best.precision,
            val_recall: report.best.recall,
            val_f1: report.best.f1,
            val_map50: report.map,
            epoch_seconds: start.elapsed().as_secs_f64(),
        };
        if record.val_map50 > best_map {
            best_map = record.val_map50;
            history.best_epoch = Some(record.epoch);
            if let Some(dir) = &settings.out_dir {
                model.save(&dir.join("best.ckpt"))?;
            }
        }
        on_epoch(&record);
        history.epochs.push(record);
        if let Some(dir) = &settings.out_dir {
            model.save(&dir.join("last.ckpt"))?;
            write_file(&dir.join("history.csv"), &history.to_csv())?;
        }
    }
    Ok(history)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
