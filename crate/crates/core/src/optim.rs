//! Adam and the epoch loop with validation-based snapshot selection.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::eval::{dice_or_zero, hard_confusion, predict_samples};
use crate::losses::{ConfusionCounts, LossSpec};
use crate::rng;
use crate::synth::SegSample;
use crate::tensor::{Tape, Tensor};
use crate::unet::Model;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamParams {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn for_model(model: &Model) -> Self {
        Self::new(model.parameters().iter().map(|(_, t)| t))
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], hp: &AdamParams) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(
                "adam_step",
                format!(
                    "{} parameters and {} gradients for {} optimizer slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::invalid(
                    "adam_step",
                    format!(
                        "gradient {i} has shape {:?}, parameter {:?}",
                        g.shape(),
                        p.shape()
                    ),
                ));
            }
        }
        self.t += 1;
        let b1t = 1.0 - hp.beta1.powi(self.t as i32);
        let b2t = 1.0 - hp.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = hp.beta1 * *mi + (1.0 - hp.beta1) * gi;
                *vi = hp.beta2 * *vi + (1.0 - hp.beta2) * gi * gi;
                let m_hat = *mi / b1t;
                let v_hat = *vi / b2t;
                *x -= hp.learning_rate * m_hat / (v_hat.sqrt() + hp.epsilon);
            }
        }
        Ok(())
    }
}

/// Applies one Adam update to every model parameter, in registry order.
pub fn adam_step(model: &mut Model, grads: &[Tensor], state: &mut AdamState, hp: &AdamParams) -> Result<()> {
    let mut params: Vec<&mut Tensor> = model.tensors_mut().collect();
    state.update(&mut params, grads, hp)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionMetric {
    /// Pooled hard Dice at threshold 0.5; higher is better.
    ValidationDice,
    /// Mean per-sample loss; lower is better.
    ValidationLoss,
}

impl SelectionMetric {
    fn better(self, candidate: f64, incumbent: f64) -> bool {
        match self {
            SelectionMetric::ValidationDice => candidate > incumbent,
            SelectionMetric::ValidationLoss => candidate < incumbent,
        }
    }
}

impl fmt::Display for SelectionMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionMetric::ValidationDice => "validation_dice",
            SelectionMetric::ValidationLoss => "validation_loss",
        })
    }
}

impl FromStr for SelectionMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "validation_dice" => Ok(SelectionMetric::ValidationDice),
            "validation_loss" => Ok(SelectionMetric::ValidationLoss),
            other => Err(Error::Config(format!(
                "unknown selection metric {other:?} (validation_dice|validation_loss)"
            ))),
        }
    }
}

pub const VALIDATION_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub loss: LossSpec,
    pub seed: u64,
    pub selection: SelectionMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 1e-3,
            batch_size: 4,
            loss: LossSpec::tversky(),
            seed: 0,
            selection: SelectionMetric::ValidationDice,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.loss.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn best(&self) -> &EpochRecord {
        &self.history[self.best_epoch - 1]
    }
}

const SHUFFLE_KEY: u64 = 0x5348_5546;
const DROPOUT_KEY: u64 = 0x4452_4f50;

/// Sample visiting order for `epoch`; depends only on `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[SHUFFLE_KEY, epoch as u64]));
    order
}

fn stack_field(samples: &[&SegSample], f: impl Fn(&SegSample) -> &Tensor) -> Result<Tensor> {
    let items: Vec<&Tensor> = samples.iter().map(|s| f(s)).collect();
    Tensor::stack(&items)
}

/// Pooled hard Dice of `model` on `samples` at threshold 0.5.
pub fn dice_at_half(model: &Model, samples: &[SegSample]) -> Result<f64> {
    let preds = predict_samples(model, samples, 8)?;
    let mut c = ConfusionCounts::default();
    for (p, s) in preds.iter().zip(samples) {
        let b = p.map(|v| if v >= VALIDATION_THRESHOLD { 1.0 } else { 0.0 });
        c = c + hard_confusion(&b, &s.mask)?;
    }
    Ok(dice_or_zero(&c))
}

/// Mean per-sample loss in inference mode.
pub fn mean_loss(model: &Model, samples: &[SegSample], loss: &LossSpec) -> Result<f64> {
    let preds = predict_samples(model, samples, 8)?;
    let mut total = 0.0;
    for (p, s) in preds.iter().zip(samples) {
        total += loss.value(p, &s.mask)?;
    }
    Ok(total / samples.len() as f64)
}

pub fn selection_value(model: &Model, samples: &[SegSample], config: &TrainConfig) -> Result<f64> {
    match config.selection {
        SelectionMetric::ValidationDice => dice_at_half(model, samples),
        SelectionMetric::ValidationLoss => mean_loss(model, samples, &config.loss),
    }
}

/// Trains from `initial` and returns the snapshot of the best validation
/// epoch. Ties keep the earlier epoch.
pub fn train(initial: &Model, train_set: &[SegSample], val_set: &[SegSample], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid(
            "train",
            format!(
                "training and validation sets must be non-empty ({} / {})",
                train_set.len(),
                val_set.len()
            ),
        ));
    }
    let hp = AdamParams::with_lr(config.learning_rate);
    let mut model = initial.clone();
    let mut state = AdamState::for_model(&model);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, Model)> = None;

    for epoch in 1..=config.epochs {
        let order = epoch_order(config.seed, epoch, train_set.len());
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&SegSample> = idx.iter().map(|&i| &train_set[i]).collect();
            let images = stack_field(&batch, |s| &s.image)?;
            let masks = stack_field(&batch, |s| &s.mask)?;
            let mut drop_rng = rng::stream(config.seed, &[DROPOUT_KEY, epoch as u64, b as u64]);
            let mut tape = Tape::new();
            let params = model.bind(&mut tape);
            let x = tape.constant(images);
            let pred = model.forward_on(&mut tape, &params, x, true, &mut drop_rng)?;
            let loss = config.loss.apply(&mut tape, pred, &masks)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b + 1 });
            }
            loss_sum += value * batch.len() as f64;
            let grads = tape.backward(loss)?;
            let grads: Vec<Tensor> = params.iter().map(|&v| grads.wrt(v)).collect();
            adam_step(&mut model, &grads, &mut state, &hp)?;
        }
        let val_metric = selection_value(&model, val_set, config)?;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_metric,
        });
        let improved = match &best {
            None => true,
            Some((_, score, _)) => config.selection.better(val_metric, *score),
        };
        if improved {
            best = Some((epoch, val_metric, model.clone()));
        }
    }
    let (best_epoch, _, model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        best_epoch,
        history,
    })
}
