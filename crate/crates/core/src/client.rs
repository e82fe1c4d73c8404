//! Client-side round logic.

use ndarray::Axis;
use rand::seq::SliceRandom;

use crate::data::ClientShard;
use crate::error::{Error, Result};
use crate::mask::{self, CriticalMask, Selector, SensitivityMap};
use crate::nn::{self, Batch, MlpSpec, ParameterSet};
use crate::seed::{self, Purpose};

/// Default mini-batch size.
pub const DEFAULT_BATCH_SIZE: usize = 100;

#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub model: ParameterSet,
    pub shard: ClientShard,
    /// Absent until the first round of local training finishes.
    pub mask: Option<CriticalMask>,
    /// Sensitivity from the most recent local training.
    pub sensitivity: Option<SensitivityMap>,
    /// Root of this client's shuffle and selector streams.
    pub rng_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub selector: Selector,
}

/// Result of [`local_train`]. The trained model itself is left in
/// `ClientState::model`.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The model as it stood before training (`theta^{t,0}`).
    pub start: ParameterSet,
    pub sensitivity: SensitivityMap,
    pub mask: CriticalMask,
    pub mean_loss: f64,
}

impl TrainOutcome {
    /// `end - start` over trainable layers, flattened.
    pub fn update_vector(&self, end: &ParameterSet) -> Vec<f64> {
        end.flatten_trainable()
            .into_iter()
            .zip(self.start.flatten_trainable())
            .map(|(e, s)| e - s)
            .collect()
    }
}

impl ClientState {
    pub fn new(client_id: usize, model: ParameterSet, shard: ClientShard, rng_seed: u64) -> Self {
        Self {
            client_id,
            model,
            shard,
            mask: None,
            sensitivity: None,
            rng_seed,
        }
    }

    /// Builds next round's starting model from the server's aggregates using
    /// this client's current mask.
    pub fn local_init(&self, global_model: &ParameterSet, custom_model: &ParameterSet) -> Result<ParameterSet> {
        let mask = self
            .mask
            .as_ref()
            .ok_or_else(|| Error::config(format!("client {} has no mask yet", self.client_id)))?;
        masked_merge(mask, custom_model, global_model)
    }
}

/// Critical positions from `critical`, everything else from `rest`.
pub fn masked_merge(mask: &CriticalMask, critical: &ParameterSet, rest: &ParameterSet) -> Result<ParameterSet> {
    critical.ensure_same_structure(rest)?;
    if !mask.matches_model(critical) {
        return Err(Error::structure("mask does not match the model layout"));
    }
    let mut out = rest.clone();
    for ((dst, src), m) in out.layers_mut().iter_mut().zip(critical.layers()).zip(mask.layers()) {
        for ((d, &s), &bit) in dst.values.iter_mut().zip(&src.values).zip(&m.bits) {
            if bit {
                *d = s;
            }
        }
    }
    Ok(out)
}

/// `epochs` passes of shuffled mini-batch SGD, then sensitivity and a fresh
/// mask for the round. Shuffling is keyed by `(rng_seed, round)`.
pub fn local_train(state: &mut ClientState, spec: &MlpSpec, cfg: &LocalTrainConfig, round: usize) -> Result<TrainOutcome> {
    let train = &state.shard.train;
    if train.is_empty() {
        return Err(Error::data(format!("client {} has no training samples", state.client_id)));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::config("epochs and batch_size must be positive"));
    }
    let start = state.model.clone();
    let batch_size = cfg.batch_size.min(train.len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = seed::rng(state.rng_seed, Purpose::Shuffle, 0, round as u64);
    let mut loss_sum = 0.0;
    let mut steps = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let features = train.features.select(Axis(0), chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let batch = Batch::new(features.view(), &labels)?;
            loss_sum += nn::train_step(&mut state.model, spec, &batch, cfg.lr)?;
            steps += 1;
        }
    }
    if !state.model.is_finite() {
        return Err(Error::data(format!("client {} diverged to non-finite parameters", state.client_id)));
    }
    let sensitivity = mask::compute_sensitivity(&start, &state.model)?;
    let mut selector_rng = seed::rng(state.rng_seed, Purpose::Selector, 0, round as u64);
    let new_mask = mask::select_with(&sensitivity, cfg.tau, cfg.selector, &mut selector_rng)?;
    state.mask = Some(new_mask.clone());
    state.sensitivity = Some(sensitivity.clone());
    Ok(TrainOutcome {
        start,
        sensitivity,
        mask: new_mask,
        mean_loss: loss_sum / steps as f64,
    })
}

/// Top-1 accuracy on the client's test shard.
pub fn evaluate(state: &ClientState, spec: &MlpSpec) -> Result<f64> {
    accuracy(&state.model, spec, &state.shard.test)
}

pub fn accuracy(model: &ParameterSet, spec: &MlpSpec, data: &crate::data::Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::data("cannot evaluate on an empty test set"));
    }
    let predicted = nn::predict(model, spec, data.features.view())?;
    let correct = predicted.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / data.len() as f64)
}
