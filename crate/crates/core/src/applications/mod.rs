//! Problem instances: federated logistic regression, zone-decomposed load
//! shedding, and consensus problems with known optima.

pub mod loadshed;
pub mod logistic;
pub mod quadratic;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::problem::ConsensusProblem;

pub use loadshed::{
    loadshed_reference, loadshed_sensitivity, loadshed_value_and_gradient, make_loadshed,
    LoadShedInstance, LoadShedSpec, LoadShedZone,
};
pub use logistic::{
    logistic_sensitivity, logistic_sensitivity_source, logistic_value_and_gradient, make_logistic,
    FeatureUniverse, LogisticDataset, LogisticInstance, LogisticPartition, LogisticSpec,
    PartitionScheme,
};
pub use quadratic::{
    consensus_optimum, consensus_problem, make_consensus, ConsensusInstance, ConsensusLoss,
    ConsensusSpec,
};

/// Which synthetic family to generate, with its sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SyntheticSpec {
    Logistic(LogisticSpec),
    Loadshed(LoadShedSpec),
    ConsensusQp(ConsensusSpec),
}

#[derive(Debug, Clone)]
pub enum SyntheticInstance {
    Logistic(LogisticInstance),
    Loadshed(LoadShedInstance),
    ConsensusQp(ConsensusInstance),
}

impl SyntheticInstance {
    pub fn problem(&self) -> &ConsensusProblem {
        match self {
            Self::Logistic(i) => &i.problem,
            Self::Loadshed(i) => &i.problem,
            Self::ConsensusQp(i) => &i.problem,
        }
    }
}

/// Deterministic per seed.
pub fn make_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticInstance> {
    Ok(match spec {
        SyntheticSpec::Logistic(s) => SyntheticInstance::Logistic(make_logistic(s, seed)?),
        SyntheticSpec::Loadshed(s) => SyntheticInstance::Loadshed(make_loadshed(s, seed)?),
        SyntheticSpec::ConsensusQp(s) => SyntheticInstance::ConsensusQp(make_consensus(s, seed)?),
    })
}
