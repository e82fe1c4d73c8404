//! The round loop.
//!
//! One round: every client trains locally and produces a mask; the server
//! builds aggregates; every client re-initializes from them; every client is
//! evaluated on its own test shard. The reported accuracy for a round is
//! measured on the models clients hold after re-initialization, i.e. what
//! they would start the next round with.

mod probes;

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{self, ClientState, LocalTrainConfig, TrainOutcome};
use crate::data::{self, ClientShard, PartitionMode, PartitionSpec};
use crate::error::{Error, Result};
use crate::mask::{self, Selector};
use crate::nn::{Activation, MlpSpec, ParameterSet};
use crate::seed::{self, Purpose};
use crate::server::{self, OverlapMatrix, RoundPlan};

pub use probes::{
    angle_degrees, export_sensitivity_heatmap, gradient_angle_probe, gradient_angle_probe_on,
    overlap_similarity_study, planted_class_sets, planted_simulation, write_angles, write_overlap_study,
    write_sensitivity_heatmap, OverlapRow, OverlapStudy, PairType,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Critical-parameter collaboration with dual aggregation.
    #[default]
    Fedcac,
    /// Every client restarts each round from the global mean.
    Fedavg,
    /// No communication at all.
    Separate,
    /// Global mean for everything except the classifier head, which stays local.
    Fedper,
}

/// Who a client's critical parameters are averaged with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Collaboration {
    /// Threshold rising from the mean overlap to the max overlap over `beta` rounds.
    #[default]
    TimeVarying,
    /// Critical parameters stay local.
    None,
    /// The `k` clients with the highest overlap.
    FixedNumber(usize),
}

impl fmt::Display for Collaboration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Collaboration::TimeVarying => f.write_str("time_varying"),
            Collaboration::None => f.write_str("none"),
            Collaboration::FixedNumber(k) => write!(f, "fixed_number:{k}"),
        }
    }
}

impl FromStr for Collaboration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "time_varying" => Ok(Collaboration::TimeVarying),
            "none" => Ok(Collaboration::None),
            other => other
                .strip_prefix("fixed_number:")
                .and_then(|k| k.parse().ok())
                .map(Collaboration::FixedNumber)
                .ok_or_else(|| {
                    Error::config(format!(
                        "collaboration must be time_varying, none or fixed_number:<k>, got `{other}`"
                    ))
                }),
        }
    }
}

impl TryFrom<String> for Collaboration {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Collaboration> for String {
    fn from(c: Collaboration) -> String {
        c.to_string()
    }
}

/// Where non-critical positions come from during re-initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonCriticalMode {
    /// The global mean.
    #[default]
    All,
    /// The same customized mean as critical positions.
    AsCritical,
}

/// Synthetic source data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub classes: usize,
    pub dims: usize,
    pub samples_per_class: usize,
    pub separation: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            dims: 16,
            samples_per_class: 400,
            separation: 3.0,
        }
    }
}

impl DataConfig {
    /// The shared source dataset that clients are carved out of.
    pub fn generate(&self, seed: u64) -> Result<data::Dataset> {
        data::generate_blobs(self.classes, self.dims, self.samples_per_class, self.separation, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionConfig {
    pub mode: PartitionMode,
    pub classes_per_client: usize,
    pub alpha: f64,
    pub train_per_client: usize,
    pub test_per_client: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            mode: PartitionMode::Pathological,
            classes_per_client: 2,
            alpha: 0.1,
            train_per_client: 10,
            test_per_client: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            activation: Activation::Relu,
            norm: false,
        }
    }
}

/// Everything needed to reproduce one simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub selector: Selector,
    pub collaboration: Collaboration,
    pub noncritical_mode: NonCriticalMode,
    /// Number of clients.
    pub clients: usize,
    /// Communication rounds.
    pub rounds: usize,
    pub local_epochs: usize,
    /// Fraction of each layer marked critical.
    pub tau: f64,
    /// Rounds until the threshold reaches the maximum overlap.
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub data: DataConfig,
    pub partition: PartitionConfig,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Fedcac,
            selector: Selector::Sensitivity,
            collaboration: Collaboration::TimeVarying,
            noncritical_mode: NonCriticalMode::All,
            clients: 16,
            rounds: 60,
            local_epochs: 5,
            tau: 0.5,
            beta: 10.0,
            lr: 0.1,
            batch_size: client::DEFAULT_BATCH_SIZE,
            seed: 0,
            data: DataConfig::default(),
            partition: PartitionConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.clients == 0 {
            return fail("clients must be at least 1".into());
        }
        if self.rounds == 0 {
            return fail("rounds must be at least 1".into());
        }
        if self.local_epochs == 0 || self.batch_size == 0 {
            return fail("local_epochs and batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return fail(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        if !(self.beta >= 1.0 && self.beta <= self.rounds as f64) {
            return fail(format!("beta must lie in [1, rounds={}], got {}", self.rounds, self.beta));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.algorithm == Algorithm::Fedcac {
            match self.collaboration {
                Collaboration::TimeVarying if self.clients < 2 => {
                    return fail("time-varying collaboration needs at least two clients".into())
                }
                Collaboration::FixedNumber(k) if k == 0 || k >= self.clients => {
                    return fail(format!("fixed_number:{k} needs 1 <= k <= clients - 1"))
                }
                _ => {}
            }
        }
        self.mlp_spec()?;
        self.partition_spec().validate(self.data.classes)
    }

    pub fn mlp_spec(&self) -> Result<MlpSpec> {
        let mut widths = vec![self.data.dims];
        widths.extend(&self.model.hidden);
        widths.push(self.data.classes);
        MlpSpec::new(widths, self.model.activation, self.model.norm)
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            mode: self.partition.mode,
            num_clients: self.clients,
            classes_per_client: self.partition.classes_per_client,
            alpha: self.partition.alpha,
            train_per_client: self.partition.train_per_client,
            test_per_client: self.partition.test_per_client,
            seed: self.seed,
        }
    }

    pub fn local_train_config(&self) -> LocalTrainConfig {
        LocalTrainConfig {
            epochs: self.local_epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            tau: self.tau,
            selector: self.selector,
        }
    }

    pub fn client_seed(&self, client_id: usize) -> u64 {
        seed::derive_seed(self.seed, Purpose::Client, client_id as u64, 0)
    }

    pub fn build_shards(&self) -> Result<Vec<ClientShard>> {
        let data = self.data.generate(self.seed)?;
        data::partition(&data, &self.partition_spec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub mean_accuracy: f64,
    pub per_client_accuracy: Vec<f64>,
    pub threshold: Option<f64>,
    pub mean_collab_size: Option<f64>,
}

/// Upload volume for one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CommStats {
    /// Encoded masks from all clients.
    pub mask_bytes: usize,
    /// All client models at four bytes per parameter.
    pub model_bytes: usize,
}

/// Full detail of one round, for probes and tests.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub metrics: RoundMetrics,
    pub outcomes: Vec<TrainOutcome>,
    /// Client models after local training, before the server step.
    pub trained: Vec<ParameterSet>,
    pub plan: Option<RoundPlan>,
    pub comm: CommStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunHistory {
    pub history: Vec<RoundMetrics>,
    pub best_accuracy: f64,
    pub best_round: usize,
}

impl RunHistory {
    pub fn final_accuracy(&self) -> f64 {
        self.history.last().map_or(0.0, |m| m.mean_accuracy)
    }
}

pub struct Simulation {
    config: RunConfig,
    spec: MlpSpec,
    clients: Vec<ClientState>,
    round: usize,
}

impl Simulation {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let shards = config.build_shards()?;
        let seeds = (0..shards.len()).map(|i| config.client_seed(i)).collect();
        Self::from_shards(config, shards, seeds)
    }

    /// Starts from explicit shards and per-client stream seeds. Every client
    /// gets the same initial model.
    pub fn from_shards(config: RunConfig, shards: Vec<ClientShard>, seeds: Vec<u64>) -> Result<Self> {
        config.validate()?;
        if shards.len() != config.clients || seeds.len() != config.clients {
            return Err(Error::config(format!(
                "expected {} shards and seeds, got {} and {}",
                config.clients,
                shards.len(),
                seeds.len()
            )));
        }
        let spec = config.mlp_spec()?;
        let initial = spec.init(&mut seed::rng(config.seed, Purpose::Init, 0, 0));
        let clients = shards
            .into_iter()
            .zip(seeds)
            .enumerate()
            .map(|(i, (shard, s))| ClientState::new(i, initial.clone(), shard, s))
            .collect();
        Ok(Self {
            config,
            spec,
            clients,
            round: 0,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn is_finished(&self) -> bool {
        self.round >= self.config.rounds
    }

    /// Runs the next round.
    pub fn step(&mut self) -> Result<RoundRecord> {
        let t = self.round + 1;
        let record = self.step_inner(t).map_err(|e| Error::Round {
            round: t,
            source: Box::new(e),
        })?;
        self.round = t;
        Ok(record)
    }

    fn step_inner(&mut self, t: usize) -> Result<RoundRecord> {
        let spec = &self.spec;
        let local = self.config.local_train_config();
        let outcomes: Vec<TrainOutcome> = self
            .clients
            .par_iter_mut()
            .map(|c| client::local_train(c, spec, &local, t))
            .collect::<Result<_>>()?;
        let trained: Vec<ParameterSet> = self.clients.iter().map(|c| c.model.clone()).collect();

        let mut plan = None;
        let mut comm = CommStats::default();
        let next: Option<Vec<ParameterSet>> = match self.config.algorithm {
            Algorithm::Separate => None,
            Algorithm::Fedavg => {
                let global = server::aggregate_global(&trained)?;
                Some(vec![global; trained.len()])
            }
            Algorithm::Fedper => {
                let global = server::aggregate_global(&trained)?;
                let head = spec.head_layer_names();
                let models = trained
                    .iter()
                    .map(|own| {
                        let mut m = global.clone();
                        for (dst, src) in m.layers_mut().iter_mut().zip(own.layers()) {
                            if head.contains(&dst.name) {
                                dst.values.clone_from(&src.values);
                            }
                        }
                        m
                    })
                    .collect();
                Some(models)
            }
            Algorithm::Fedcac => {
                let p = self.fedcac_server(t, &outcomes, &trained)?;
                comm = CommStats {
                    mask_bytes: outcomes
                        .iter()
                        .map(|o| {
                            let lens: Vec<usize> = o.mask.layers().iter().map(|l| l.bits.len()).collect();
                            mask::encoded_len(&lens)
                        })
                        .sum(),
                    model_bytes: trained.iter().map(|m| 4 * m.total_count()).sum(),
                };
                let models = self
                    .clients
                    .iter()
                    .enumerate()
                    .map(|(i, c)| match self.config.noncritical_mode {
                        NonCriticalMode::All => c.local_init(&p.global_model, &p.custom_models[i]),
                        NonCriticalMode::AsCritical => Ok(p.custom_models[i].clone()),
                    })
                    .collect::<Result<Vec<_>>>()?;
                plan = Some(p);
                Some(models)
            }
        };
        if let Some(models) = next {
            for (c, m) in self.clients.iter_mut().zip(models) {
                c.model = m;
            }
        }

        let per_client_accuracy: Vec<f64> = self
            .clients
            .par_iter()
            .map(|c| client::evaluate(c, spec))
            .collect::<Result<_>>()?;
        let mean_accuracy = per_client_accuracy.iter().sum::<f64>() / per_client_accuracy.len() as f64;
        let metrics = RoundMetrics {
            round: t,
            mean_accuracy,
            per_client_accuracy,
            threshold: plan.as_ref().and_then(|p| p.stats).map(|s| s.threshold),
            mean_collab_size: plan.as_ref().map(RoundPlan::mean_collab_size),
        };
        Ok(RoundRecord {
            metrics,
            outcomes,
            trained,
            plan,
            comm,
        })
    }

    fn fedcac_server(&self, t: usize, outcomes: &[TrainOutcome], trained: &[ParameterSet]) -> Result<RoundPlan> {
        let masks: Vec<_> = outcomes.iter().map(|o| &o.mask).collect();
        let overlap = OverlapMatrix::from_masks(&masks)?;
        let n = trained.len();
        let (stats, collaborators) = match self.config.collaboration {
            Collaboration::TimeVarying => {
                let (s, sets) = server::time_varying_collaborators(&overlap, t, self.config.beta)?;
                (Some(s), sets)
            }
            Collaboration::None => (None, vec![BTreeSet::new(); n]),
            Collaboration::FixedNumber(k) => (None, server::fixed_number_collaborators(&overlap, k)?),
        };
        let global_model = server::aggregate_global(trained)?;
        let custom_models = (0..n)
            .into_par_iter()
            .map(|i| server::aggregate_custom(trained, &collaborators[i], i))
            .collect::<Result<Vec<_>>>()?;
        Ok(RoundPlan {
            round: t,
            overlap,
            stats,
            collaborators,
            global_model,
            custom_models,
        })
    }

    /// Runs all remaining rounds, keeping only metrics.
    pub fn run_to_end(mut self) -> Result<RunHistory> {
        let mut history = Vec::with_capacity(self.config.rounds);
        while !self.is_finished() {
            history.push(self.step()?.metrics);
        }
        Ok(summarize(history))
    }
}

fn summarize(history: Vec<RoundMetrics>) -> RunHistory {
    let (best_round, best_accuracy) = history
        .iter()
        .fold((0, f64::NEG_INFINITY), |best, m| if m.mean_accuracy > best.1 { (m.round, m.mean_accuracy) } else { best });
    RunHistory {
        history,
        best_accuracy,
        best_round,
    }
}

/// Runs `config.rounds` rounds; the best accuracy is the maximum per-round
/// mean accuracy.
pub fn run(config: &RunConfig) -> Result<RunHistory> {
    Simulation::new(config.clone())?.run_to_end()
}

/// One JSON object per line per round.
pub fn write_history_jsonl<W: Write>(history: &[RoundMetrics], mut writer: W) -> Result<()> {
    for m in history {
        serde_json::to_writer(&mut writer, m)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}
