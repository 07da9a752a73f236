use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::RngStream;
use crate::model::{Model, Weights};
use crate::uniattn::{CompensationSet, InitMode};

use super::backward::{loss_and_grads, GradStore};

/// Minimum EMA improvement that resets the patience counter.
pub const EMA_MIN_DELTA: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// Only `W_c` is trained.
    WcOnly,
    Full,
}

impl Stage {
    pub fn id(self) -> u8 {
        match self {
            Stage::WcOnly => 1,
            Stage::Full => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub stage: Stage,
    pub ema_decay: f64,
    pub patience: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(stage: Stage, learning_rate: f64, steps: usize, batch_size: usize) -> Self {
        Self { learning_rate, steps, batch_size, stage, ema_decay: 0.9, patience: 20, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config(format!("ema_decay {} outside (0, 1)", self.ema_decay)));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} is not a finite non-negative number", self.learning_rate)));
        }
        Ok(())
    }
}

/// Exponential moving average of the loss with patience-based stopping.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaTracker {
    pub decay: f64,
    pub value: Option<f64>,
    pub best: f64,
    pub steps_since_best: usize,
}

impl EmaTracker {
    pub fn new(decay: f64) -> Self {
        Self { decay, value: None, best: f64::INFINITY, steps_since_best: 0 }
    }

    /// Folds in `loss` and returns the new EMA.
    pub fn update(&mut self, loss: f64) -> f64 {
        let v = match self.value {
            None => loss,
            Some(prev) => self.decay * prev + (1.0 - self.decay) * loss,
        };
        self.value = Some(v);
        if v < self.best - EMA_MIN_DELTA {
            self.best = v;
            self.steps_since_best = 0;
        } else {
            self.steps_since_best += 1;
        }
        v
    }

    pub fn should_stop(&self, patience: usize) -> bool {
        self.steps_since_best >= patience
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub stage: u8,
    pub step: usize,
    pub loss: f64,
    pub ema: f64,
}

/// Deterministic batch order: the data is reshuffled with the run seed every epoch.
struct Batches<'a> {
    data: &'a [Vec<usize>],
    order: Vec<usize>,
    pos: usize,
    rng: RngStream,
}

impl<'a> Batches<'a> {
    fn new(data: &'a [Vec<usize>], seed: u64) -> Self {
        let mut rng = RngStream::new(seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng.shuffle(&mut order);
        Self { data, order, pos: 0, rng }
    }

    fn next(&mut self, size: usize) -> Vec<Vec<usize>> {
        let size = size.min(self.data.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            out.push(self.data[self.order[self.pos]].clone());
            self.pos += 1;
        }
        out
    }
}

fn sgd(model: &mut Model, grads: &GradStore, lr: f64, weights_too: bool) -> Result<()> {
    if weights_too {
        for ((_, p), (_, g)) in model.weights.named_mut().into_iter().zip(grads.weights.named()) {
            p.axpy(-lr, g)?;
        }
    }
    if let Some(comp) = model.compensation.as_mut() {
        for (l, p) in comp.entries_mut() {
            p.axpy(-lr, &grads.wc[l])?;
        }
    }
    Ok(())
}

fn run(model: &mut Model, data: &[Vec<usize>], tc: &TrainConfig) -> Result<Vec<LossRecord>> {
    tc.validate()?;
    if data.is_empty() {
        return Err(Error::Config("no training data".into()));
    }
    let mut batches = Batches::new(data, tc.seed);
    let mut ema = EmaTracker::new(tc.ema_decay);
    let mut history = Vec::new();
    for step in 0..tc.steps {
        let batch = batches.next(tc.batch_size);
        let (loss, grads) = loss_and_grads(model, &batch)?;
        let smoothed = ema.update(loss);
        history.push(LossRecord { stage: tc.stage.id(), step, loss, ema: smoothed });
        if ema.should_stop(tc.patience) {
            break;
        }
        sgd(model, &grads, tc.learning_rate, tc.stage == Stage::Full)?;
        if !model.weights.named().iter().all(|(_, m)| m.is_finite()) {
            return Err(Error::NonFinite("parameters after update"));
        }
    }
    Ok(history)
}

/// Trains only the compensation matrices; every other weight stays bit-exact.
pub fn train_stage1(
    model: &Model,
    data: &[Vec<usize>],
    tc: &TrainConfig,
) -> Result<(CompensationSet, Vec<LossRecord>)> {
    if tc.stage != Stage::WcOnly {
        return Err(Error::Config("stage 1 needs a W_c-only train config".into()));
    }
    if model.compensation.is_none() {
        return Err(Error::Config("stage 1 needs a compensated UniAttn model".into()));
    }
    let mut m = model.clone();
    let history = run(&mut m, data, tc)?;
    let mut comp = m.compensation.expect("checked above");
    comp.meta.mode = InitMode::Trained;
    Ok((comp, history))
}

/// Full fine-tuning of all weights and, when present, `W_c`.
pub fn train_stage2(
    model: &Model,
    data: &[Vec<usize>],
    tc: &TrainConfig,
) -> Result<(Weights, Option<CompensationSet>, Vec<LossRecord>)> {
    if tc.stage != Stage::Full {
        return Err(Error::Config("stage 2 needs a full train config".into()));
    }
    let mut m = model.clone();
    let history = run(&mut m, data, tc)?;
    let comp = m.compensation.map(|mut c| {
        c.meta.mode = InitMode::Trained;
        c
    });
    Ok((m.weights, comp, history))
}
