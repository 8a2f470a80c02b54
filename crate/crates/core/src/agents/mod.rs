//! Per-region policy agents: observations, prompts, peer messages, decision
//! backends and multi-round coordination.

pub mod backend;
pub mod coordinate;
pub mod expert;
pub mod message;
pub mod observation;
pub mod parse;
pub mod prompt;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::policy::TirAllocation;

pub use backend::{
    backend_from_spec, BackendError, BackendReply, DecisionBackend, DecisionRequest,
    ExpertBackend, RandomBackend, RemoteBackend, ScriptStep, ScriptedBackend,
};
pub use coordinate::{coordinate_round, CoordinationContext, CoordinationOutcome, TranscriptEntry};
pub use expert::expert_heuristic;
pub use message::{extract_message, Message};
pub use observation::{build_observation, Observation, OriginInflow, RegionSummary};
pub use parse::{parse_action, ParseError, ParsedAction};
pub use prompt::render_prompt;

/// A decision for one acting region. Origins are region indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum PolicyAction {
    Tir {
        allocations: BTreeMap<usize, TirAllocation>,
    },
    Sis {
        origin: usize,
    },
    Tis {
        origin: usize,
    },
    NoOp,
}

impl PolicyAction {
    pub fn uniform_tir(origins: impl IntoIterator<Item = usize>, weeks: usize) -> Self {
        PolicyAction::Tir {
            allocations: origins
                .into_iter()
                .map(|o| (o, TirAllocation::uniform(weeks)))
                .collect(),
        }
    }
}
