//! Cross-entropy training with ADAM, per-epoch validation and selection of
//! the epoch with the best average validation Dice.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::arch::{save_checkpoint, Model};
use crate::error::{Error, Result};
use crate::kernels::BnMode;
use crate::metrics::{structure_counts, DiceCounts};
use crate::phantom::LabeledSlice;
use crate::tape::Tape;
use crate::tensor::{LabelMask, Precision, Real, Shape, Tensor};

pub const HISTORY_FILE: &str = "history.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Where `history.csv`, `epoch_<n>.ckpt` and `best.ckpt` go. Nothing is
    /// written when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
    /// Validate every this many epochs. The last epoch is always validated.
    pub validate_every: usize,
    /// Write `epoch_<n>.ckpt` for every validated epoch.
    pub keep_epoch_checkpoints: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            epochs: 50,
            batch_size: 10,
            seed: 0,
            precision: Precision::F32,
            checkpoint_dir: None,
            validate_every: 1,
            keep_epoch_checkpoints: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        // Zero is allowed: it runs the loop without moving any parameter.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            problems.push(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if self.epochs == 0 {
            problems.push("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".into());
        }
        if self.validate_every == 0 {
            problems.push("validate_every must be at least 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation Dice per structure, when this epoch was validated.
    pub dsc: Option<[f64; 5]>,
}

impl EpochRecord {
    pub fn dsc_avg(&self) -> Option<f64> {
        self.dsc.map(|d| d.iter().sum::<f64>() / 5.0)
    }
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,dsc_1,dsc_2,dsc_3,dsc_4,dsc_5,dsc_avg";

/// History as CSV. Numbers use the shortest representation that reads back
/// to the same value; unvalidated epochs leave the Dice columns empty.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in history {
        out.push_str(&format!("{},{}", r.epoch, r.train_loss));
        match r.dsc {
            Some(d) => {
                for v in d {
                    out.push_str(&format!(",{v}"));
                }
                out.push_str(&format!(",{}\n", r.dsc_avg().expect("validated")));
            }
            None => out.push_str(",,,,,,\n"),
        }
    }
    out
}

/// Stacks slices into an `(n, 1, S, S)` image batch and its label mask.
pub fn make_batch<T: Real>(slices: &[&LabeledSlice]) -> Result<(Tensor<T>, LabelMask)> {
    let Some(first) = slices.first() else {
        return Err(Error::EmptyDataset("batch"));
    };
    let s = first.size;
    if let Some(bad) = slices.iter().find(|x| x.size != s) {
        return Err(Error::shape("make_batch", format!("slice `{}` is {}×{}, expected {s}×{s}", bad.slice_id, bad.size, bad.size)));
    }
    let image = slices.iter().flat_map(|x| x.image.iter().map(|&v| T::of(v as f64))).collect();
    let labels = slices.iter().flat_map(|x| x.mask.iter().copied()).collect();
    Ok((Tensor::from_vec(Shape::new(slices.len(), 1, s, s), image)?, LabelMask::new(slices.len(), s, s, labels)?))
}

/// Per-pixel argmax over channels. Ties go to the lowest class index.
pub fn argmax_labels<T: Real>(logits: &Tensor<T>) -> LabelMask {
    let s = logits.shape();
    let plane = s.plane();
    let mut labels = vec![0u8; s.n * plane];
    for n in 0..s.n {
        let base = n * s.c * plane;
        let data = logits.data();
        for p in 0..plane {
            let mut best = 0;
            let mut best_v = data[base + p];
            for c in 1..s.c {
                let v = data[base + c * plane + p];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            labels[n * plane + p] = best as u8;
        }
    }
    LabelMask { n: s.n, h: s.h, w: s.w, labels }
}

fn check_size<T: Real>(model: &Model<T>, slice: &LabeledSlice) -> Result<()> {
    let s = model.config().input_size;
    if slice.size != s {
        return Err(Error::shape("predict", format!("slice `{}` is {}×{} but the model takes {s}×{s}", slice.slice_id, slice.size, slice.size)));
    }
    Ok(())
}

/// Eval-mode segmentations of `slices`, computed `batch_size` at a time.
/// The model's mode is restored afterwards.
pub fn predict_all<T: Real>(model: &mut Model<T>, slices: &[LabeledSlice], batch_size: usize) -> Result<Vec<LabelMask>> {
    for s in slices {
        check_size(model, s)?;
    }
    let previous = model.mode();
    model.set_mode(BnMode::Eval);
    let result = (|| {
        let mut out = Vec::with_capacity(slices.len());
        for chunk in slices.chunks(batch_size.max(1)) {
            let refs: Vec<&LabeledSlice> = chunk.iter().collect();
            let (x, _) = make_batch::<T>(&refs)?;
            let pred = argmax_labels(&model.logits(&x)?);
            let plane = pred.h * pred.w;
            for i in 0..pred.n {
                out.push(LabelMask::new(1, pred.h, pred.w, pred.labels[i * plane..(i + 1) * plane].to_vec())?);
            }
        }
        Ok(out)
    })();
    model.set_mode(previous);
    result
}

pub fn predict<T: Real>(model: &mut Model<T>, slice: &LabeledSlice) -> Result<LabelMask> {
    Ok(predict_all(model, std::slice::from_ref(slice), 1)?.remove(0))
}

/// Validation scores: Dice per structure from pixel counts summed over the
/// whole set.
#[derive(Debug, Clone, PartialEq)]
pub struct Validation {
    pub counts: [DiceCounts; 5],
    pub dsc: [f64; 5],
    pub avg: f64,
}

pub fn score_predictions(preds: &[LabelMask], slices: &[LabeledSlice]) -> Result<Validation> {
    if preds.len() != slices.len() {
        return Err(Error::shape("score_predictions", format!("{} predictions for {} slices", preds.len(), slices.len())));
    }
    let mut counts = [DiceCounts::default(); 5];
    for (p, s) in preds.iter().zip(slices) {
        let truth = LabelMask::new(1, s.size, s.size, s.mask.clone())?;
        for (total, c) in counts.iter_mut().zip(structure_counts(p, &truth)?) {
            total.merge(c);
        }
    }
    let dsc = counts.map(|c| c.dsc());
    Ok(Validation { counts, dsc, avg: dsc.iter().sum::<f64>() / 5.0 })
}

/// Scores the model on `slices` in eval mode. Parameters and running
/// statistics are left untouched.
pub fn validate<T: Real>(model: &mut Model<T>, slices: &[LabeledSlice], batch_size: usize) -> Result<Validation> {
    if slices.is_empty() {
        return Err(Error::EmptyDataset("validation set"));
    }
    let preds = predict_all(model, slices, batch_size)?;
    score_predictions(&preds, slices)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Model of the validated epoch with the highest average Dice, earliest on ties.
    pub best: Model<T>,
    pub best_epoch: usize,
    pub best_avg: f64,
    /// Model after the last epoch.
    pub last: Model<T>,
    pub history: Vec<EpochRecord>,
}

/// One epoch of minibatch training. Returns the mean loss per slice.
fn train_epoch<T: Real>(
    model: &mut Model<T>,
    adam: &mut AdamState<T>,
    slices: &[LabeledSlice],
    order: &[usize],
    batch_size: usize,
    epoch: usize,
) -> Result<f64> {
    model.set_mode(BnMode::Train);
    let mut loss_sum = 0.0;
    for (b, chunk) in order.chunks(batch_size).enumerate() {
        let refs: Vec<&LabeledSlice> = chunk.iter().map(|&i| &slices[i]).collect();
        let (x, target) = make_batch::<T>(&refs)?;
        let mut tape = Tape::new();
        let params = model.register(&mut tape, true);
        let input = tape.leaf(x);
        let out = model.forward_with(&mut tape, &params, input)?;
        let loss = tape.softmax_ce(out.logits, &target)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: b + 1 });
        }
        loss_sum += value * chunk.len() as f64;
        tape.backward(loss)?;
        let grads: Vec<&[T]> = params.iter().map(|&v| tape.grad(v).expect("parameters require grad")).collect();
        let mut values: Vec<&mut [T]> = model.params_mut().iter_mut().map(|p| p.tensor.data_mut()).collect();
        adam.step(&mut values, &grads)?;
    }
    Ok(loss_sum / slices.len() as f64)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains `model` and returns the best and last models with the history.
pub fn train<T: Real>(model: Model<T>, train_set: &[LabeledSlice], val_set: &[LabeledSlice], cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    train_observed(model, train_set, val_set, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_observed<T: Real>(
    mut model: Model<T>,
    train_set: &[LabeledSlice],
    val_set: &[LabeledSlice],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset("training set"));
    }
    if val_set.is_empty() {
        return Err(Error::EmptyDataset("validation set"));
    }
    for s in train_set.iter().chain(val_set) {
        check_size(&model, s)?;
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), model.params().iter().map(|p| p.tensor.numel()));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(Model<T>, usize, f64)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let train_loss = train_epoch(&mut model, &mut adam, train_set, &order, cfg.batch_size, epoch)?;
        let validated = epoch % cfg.validate_every == 0 || epoch == cfg.epochs;
        let dsc = if validated { Some(validate(&mut model, val_set, cfg.batch_size)?.dsc) } else { None };
        let record = EpochRecord { epoch, train_loss, dsc };

        if let Some(avg) = record.dsc_avg() {
            let improved = best.as_ref().map_or(true, |(_, _, b)| avg > *b);
            if improved {
                best = Some((model.clone(), epoch, avg));
            }
            if let Some(dir) = &cfg.checkpoint_dir {
                if cfg.keep_epoch_checkpoints {
                    save_checkpoint(&model, dir.join(format!("epoch_{epoch}.ckpt")))?;
                }
                if improved {
                    save_checkpoint(&model, dir.join(BEST_CHECKPOINT))?;
                }
            }
        }
        on_epoch(&record);
        history.push(record);
        if let Some(dir) = &cfg.checkpoint_dir {
            write_file(&dir.join(HISTORY_FILE), &history_csv(&history))?;
        }
    }
    let (best, best_epoch, best_avg) = best.expect("last epoch is always validated");
    Ok(TrainOutcome { best, best_epoch, best_avg, last: model, history })
}
