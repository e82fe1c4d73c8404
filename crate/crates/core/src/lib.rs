//! Simulator for personalized federated learning with sensitivity-driven
//! critical-parameter collaboration.
//!
//! Each client trains a small MLP on its own non-IID shard, scores every
//! parameter by how much it moved and how large it ended up, and marks the
//! top fraction of each layer as critical. Masks travel to the server at one
//! bit per parameter; the server derives a pairwise overlap matrix from them,
//! picks a shrinking set of collaborators per client, and sends back a global
//! average (for non-critical positions) and a customized average (for critical
//! positions).
//!
//! The crate is organised bottom-up:
//!
//! * [`nn`] - parameter containers, forward/backward passes, SGD.
//! * [`data`] - synthetic blobs and the pathological / Dirichlet partitioners.
//! * [`mask`] - sensitivity, critical-parameter selection, mask wire format, overlap.
//! * [`client`] - masked re-initialization, local training, evaluation.
//! * [`server`] - threshold schedule, collaborator sets, aggregation.
//! * [`orchestrator`] - the round loop, baselines, and diagnostic probes.

pub mod client;
pub mod data;
pub mod error;
pub mod mask;
pub mod nn;
pub mod orchestrator;
pub mod seed;
pub mod server;

pub use client::{ClientState, LocalTrainConfig, TrainOutcome};
pub use data::{ClientShard, Dataset, PartitionMode, PartitionSpec};
pub use error::{Error, Result};
pub use mask::{CriticalMask, Selector, SensitivityMap};
pub use nn::{Activation, Batch, LayerKind, MlpSpec, ParameterSet};
pub use orchestrator::{
    Algorithm, Collaboration, NonCriticalMode, RoundMetrics, RunConfig, RunHistory, Simulation,
};
pub use server::{OverlapMatrix, RoundPlan, ThresholdStats};
