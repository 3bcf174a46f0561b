//! Mini-batch training with best-validation checkpoint selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::metrics::{confusion, metrics};
use crate::data::{Dataset, Label, SampleRef};
use crate::error::{Error, Result};
use crate::nn::{Model, ModelConfig};
use crate::tensor::{Mode, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Validation fold monitored for checkpoint selection.
    pub selection_fold: usize,
    /// Decision threshold for accuracy.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            optimizer: AdamConfig::default(),
            seed: 0,
            selection_fold: 1,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.selection_fold == 0 {
            return Err(Error::InvalidConfig("validation folds are numbered from 1".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::InvalidConfig(format!("invalid optimizer settings {o:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy of the train-mode predictions seen during the epoch.
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub best_val_accuracy: f64,
    pub best_epoch: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Model<f32>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub history: Vec<EpochRecord>,
}

pub fn accuracy(model: &Model<f32>, samples: &[SampleRef<'_>], batch: usize, threshold: f64) -> Result<f64> {
    let scores = model.predict_samples(samples, batch)?;
    let labels: Vec<bool> = samples.iter().map(|s| s.label == Label::Worn).collect();
    let c = confusion(&scores, &labels, threshold)?;
    metrics(&c)
        .accuracy
        .ok_or_else(|| Error::Eval("accuracy of an empty set".into()))
}

/// Train a fresh model on `train`, selecting the epoch with the highest
/// accuracy on `val` (earliest on ties).
pub fn train(
    model_cfg: &ModelConfig,
    dataset: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(model_cfg, dataset, train_idx, val_idx, cfg, |_| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    model_cfg: &ModelConfig,
    dataset: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_idx.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    if val_idx.is_empty() {
        return Err(Error::Dataset("no validation samples".into()));
    }
    let mut model = Model::<f32>::new(model_cfg, cfg.seed)?;
    let mut opt = Adam::new(cfg.optimizer, model.params().tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let val: Vec<SampleRef<'_>> = val_idx.iter().map(|&i| dataset.sample(i)).collect();

    let mut order = train_idx.to_vec();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(Model<f32>, usize, f64)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<SampleRef<'_>> = chunk.iter().map(|&i| dataset.sample(i)).collect();
            let labels: Vec<f32> = batch.iter().map(|s| s.label.target()).collect();
            let inputs = model.encode(&batch)?;
            let mut tape = Tape::new();
            let vars = model.params().bind(&mut tape);
            let out = model.forward(&mut tape, &vars, &inputs, Mode::Train, &mut rng)?;
            let loss = tape.bce_loss(out.prob, &labels)?;
            loss_sum += tape.value(loss)?.data()[0] as f64 * batch.len() as f64;
            for (p, y) in tape.value(out.prob)?.data().iter().zip(&labels) {
                correct += usize::from((*p as f64 >= cfg.threshold) == (*y > 0.5));
            }
            let grads = tape.backward(loss)?;
            let g = vars.iter().map(|&v| grads.get(v)).collect::<Result<Vec<_>>>()?;
            drop(grads);
            drop(tape);
            opt.update(model.params_mut().tensors_mut(), &g)?;
            model.params_mut().absorb(&out.moments);
        }
        let val_accuracy = accuracy(&model, &val, 64, cfg.threshold)?;
        if best.as_ref().is_none_or(|b| val_accuracy > b.2) {
            best = Some((model.clone(), epoch, val_accuracy));
        }
        let (_, best_epoch, best_val) = best.as_ref().expect("set on the first epoch");
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            train_accuracy: correct as f64 / order.len() as f64,
            val_accuracy,
            best_val_accuracy: *best_val,
            best_epoch: *best_epoch,
        };
        on_epoch(&rec);
        history.push(rec);
    }
    let (best, best_epoch, best_val_accuracy) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_accuracy,
        history,
    })
}

/// Train on the dataset's training split, selecting on `cfg.selection_fold`.
pub fn train_on_dataset(model_cfg: &ModelConfig, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let train_idx = dataset.train_indices();
    let val_idx = dataset.fold_indices(cfg.selection_fold);
    if val_idx.is_empty() {
        return Err(Error::Dataset(format!(
            "dataset has no samples in val-fold-{}",
            cfg.selection_fold
        )));
    }
    train(model_cfg, dataset, &train_idx, &val_idx, cfg)
}
