//! Mini-batch training loop.

use serde::{Deserialize, Serialize};

use crate::config::{LossConfig, RunConfig};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::loss::{batch_mean, total_loss, LossBreakdown};
use crate::model::Model;
use crate::nn::Session;
use crate::optim::AdamW;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Stream offset separating data-order randomness from initialization.
const ORDER_STREAM: u64 = 1 << 32;

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub l_cls: Vec<f64>,
    pub l_mask: Vec<f64>,
    pub l_atr: Vec<f64>,
}

impl LogEntry {
    fn new(step: usize, lr: f64, b: LossBreakdown) -> Self {
        Self {
            step,
            lr,
            total: b.total,
            l_cls: b.l_cls,
            l_mask: b.l_mask,
            l_atr: b.l_atr,
        }
    }
}

/// Model, optimizer state and the loss log of a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: AdamW,
    pub log: Vec<LogEntry>,
}

impl TrainState {
    /// Fresh model and optimizer for `cfg`.
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model.clone(), cfg.seed)?;
        let optimizer = AdamW::new(cfg.optim.clone(), &model.params);
        Ok(Self {
            model,
            optimizer,
            log: Vec::new(),
        })
    }
}

/// Mean staged loss over `batch` and the parameter gradients.
pub fn loss_and_grads(
    model: &Model,
    batch: &[&Sample],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<Option<Tensor>>)> {
    let mut s = Session::trainable(&model.params);
    let mut losses = Vec::with_capacity(batch.len());
    for sample in batch {
        let out = model.forward(&mut s, &sample.image)?;
        losses.push(total_loss(&mut s, &out.stages, &sample.target, cfg)?);
    }
    let (loss, breakdown) = batch_mean(&mut s, &losses)?;
    if let Some((stage, term)) = breakdown.first_non_finite() {
        return Err(Error::NonFiniteLoss { stage, term });
    }
    s.backward(loss)?;
    Ok((breakdown, s.param_grads()))
}

/// Sample indices for `step`: each epoch visits every sample once in an
/// order fixed by `seed` and the epoch number.
pub fn batch_indices(seed: u64, num_samples: usize, batch_size: usize, step: usize) -> Vec<usize> {
    let root = Rng::seed(seed);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (0..batch_size)
        .map(|b| {
            let k = step * batch_size + b;
            let (epoch, pos) = (k / num_samples, k % num_samples);
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut order: Vec<usize> = (0..num_samples).collect();
                root.split(ORDER_STREAM + epoch as u64).shuffle(&mut order);
                cached = Some((epoch, order));
            }
            cached.as_ref().expect("order cached").1[pos]
        })
        .collect()
}

/// Runs optimizer steps until `state.optimizer.step == cfg.optim.steps`,
/// calling `on_step` after each one.
pub fn train(
    state: &mut TrainState,
    cfg: &RunConfig,
    samples: &[Sample],
    mut on_step: impl FnMut(&LogEntry),
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if cfg.optim.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    while state.optimizer.step < cfg.optim.steps {
        let step = state.optimizer.step;
        let idx = batch_indices(cfg.seed, samples.len(), cfg.optim.batch_size, step);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
        let (breakdown, grads) = loss_and_grads(&state.model, &batch, &cfg.loss)?;
        let lr = state.optimizer.update(&mut state.model.params, &grads)?;
        let entry = LogEntry::new(step, lr, breakdown);
        on_step(&entry);
        state.log.push(entry);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epochs_cover_every_sample() {
        let mut seen: Vec<usize> = (0..4).flat_map(|s| batch_indices(3, 8, 2, s)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..8).collect::<Vec<_>>());
        assert_eq!(batch_indices(3, 8, 2, 5), batch_indices(3, 8, 2, 5));
    }
}
