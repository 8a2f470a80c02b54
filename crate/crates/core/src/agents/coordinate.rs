//! Synchronous multi-round decision making with peer messages.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::backend::{BackendReply, DecisionBackend, DecisionRequest};
use super::message::{extract_message, Message};
use super::observation::Observation;
use super::parse::{parse_action, ParseError};
use super::prompt::render_prompt;
use super::PolicyAction;
use crate::policy::normalize_tir;
use crate::scenario::{RegionSet, Strategy};

pub const MAX_ATTEMPTS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoordinationError {
    #[error("at least one communication round is required")]
    NoRounds,
    #[error("{backends} backends for {observations} observations")]
    Mismatch {
        backends: usize,
        observations: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoordinationContext {
    pub cycle: usize,
    pub strategy: Strategy,
    pub seed: u64,
    pub rounds: usize,
    pub max_attempts: usize,
}

/// One decision as recorded in the transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub cycle: usize,
    pub round: usize,
    pub region: String,
    pub prompt_sha256: String,
    pub raw_response: Option<String>,
    pub action: PolicyAction,
    pub repaired: bool,
    pub fallback: bool,
    pub attempts: usize,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinationOutcome {
    /// Final-round action per observation.
    pub actions: Vec<PolicyAction>,
    /// Messages broadcast in each round.
    pub messages: Vec<Vec<Message>>,
    pub transcript: Vec<TranscriptEntry>,
    pub decision_calls: usize,
    pub ingestions: usize,
    pub degradations: usize,
}

fn fallback_action(obs: &Observation, strategy: Strategy) -> PolicyAction {
    match strategy {
        Strategy::Tir => PolicyAction::uniform_tir(obs.origins(), obs.horizon_weeks),
        _ => PolicyAction::NoOp,
    }
}

/// Checks a structured reply against the action space, renormalizing TIR
/// fractions.
fn validate(
    action: PolicyAction,
    obs: &Observation,
    strategy: Strategy,
    regions: &RegionSet,
) -> Result<(PolicyAction, bool), ParseError> {
    let origins = obs.origins();
    let unknown = |o: usize| {
        ParseError::UnknownRegion(if o < regions.len() {
            regions.code(o).to_string()
        } else {
            o.to_string()
        })
    };
    match (strategy, action) {
        (Strategy::Tir, PolicyAction::NoOp) => Ok((fallback_action(obs, strategy), false)),
        (Strategy::Tir, PolicyAction::Tir { allocations }) => {
            let mut repaired = false;
            let mut out = std::collections::BTreeMap::new();
            for (o, a) in allocations {
                if !origins.contains(&o) {
                    return Err(unknown(o));
                }
                if a.weeks() != obs.horizon_weeks {
                    return Err(ParseError::WrongLength {
                        code: regions.code(o).to_string(),
                        expected: obs.horizon_weeks,
                        found: a.weeks(),
                    });
                }
                let (fixed, r) = normalize_tir(a.fractions())
                    .map_err(|_| ParseError::Unrecoverable(regions.code(o).to_string()))?;
                repaired |= r;
                out.insert(o, fixed);
            }
            if let Some(m) = origins.iter().find(|o| !out.contains_key(o)) {
                return Err(ParseError::MissingOrigin(regions.code(*m).to_string()));
            }
            Ok((PolicyAction::Tir { allocations: out }, repaired))
        }
        (Strategy::Sis | Strategy::Tis, PolicyAction::NoOp) => Ok((PolicyAction::NoOp, false)),
        (Strategy::Sis, PolicyAction::Sis { origin }) | (Strategy::Tis, PolicyAction::Tis { origin }) => {
            if !origins.contains(&origin) {
                return Err(unknown(origin));
            }
            Ok((
                if strategy == Strategy::Sis {
                    PolicyAction::Sis { origin }
                } else {
                    PolicyAction::Tis { origin }
                },
                false,
            ))
        }
        _ => Err(ParseError::MissingSolution),
    }
}

fn decide_one(
    backend: &dyn DecisionBackend,
    obs: &Observation,
    inbox: &[Message],
    round: usize,
    ctx: &CoordinationContext,
    regions: &RegionSet,
) -> TranscriptEntry {
    let prompt = render_prompt(obs, inbox, ctx.strategy);
    let prompt_sha256 = hex::encode(Sha256::digest(prompt.as_bytes()));
    let mut errors = Vec::new();
    let mut raw_response = None;
    let attempts_allowed = ctx.max_attempts.max(1);
    for attempt in 0..attempts_allowed {
        let req = DecisionRequest {
            observation: obs,
            messages: inbox,
            prompt: &prompt,
            strategy: ctx.strategy,
            seed: ctx.seed,
            round,
            attempt,
        };
        let result = match backend.decide(&req) {
            Ok(BackendReply::Action(a)) => validate(a, obs, ctx.strategy, regions),
            Ok(BackendReply::Text(text)) => {
                let parsed = parse_action(&text, ctx.strategy, &obs.origins(), obs.horizon_weeks, regions)
                    .map(|p| (p.action, p.repaired));
                raw_response = Some(text);
                parsed
            }
            Err(e) => {
                errors.push(e.to_string());
                continue;
            }
        };
        match result {
            Ok((action, repaired)) => {
                return TranscriptEntry {
                    cycle: ctx.cycle,
                    round,
                    region: obs.code.clone(),
                    prompt_sha256,
                    raw_response,
                    action,
                    repaired,
                    fallback: false,
                    attempts: attempt + 1,
                    errors,
                }
            }
            Err(e) => errors.push(e.to_string()),
        }
    }
    warn!(
        "region {} cycle {} round {}: falling back after {} failed attempts ({})",
        obs.code,
        ctx.cycle,
        round + 1,
        attempts_allowed,
        errors.join("; ")
    );
    TranscriptEntry {
        cycle: ctx.cycle,
        round,
        region: obs.code.clone(),
        prompt_sha256,
        raw_response,
        action: fallback_action(obs, ctx.strategy),
        repaired: false,
        fallback: true,
        attempts: attempts_allowed,
        errors,
    }
}

/// Runs `ctx.rounds` synchronized rounds. Round 1 decides from
/// observations alone; each later round sees every peer's message from the
/// previous round. Decisions inside a round run in parallel.
pub fn coordinate_round(
    backends: &[&dyn DecisionBackend],
    observations: &[Observation],
    regions: &RegionSet,
    ctx: &CoordinationContext,
) -> Result<CoordinationOutcome, CoordinationError> {
    if ctx.rounds == 0 {
        return Err(CoordinationError::NoRounds);
    }
    if backends.len() != observations.len() {
        return Err(CoordinationError::Mismatch {
            backends: backends.len(),
            observations: observations.len(),
        });
    }
    let mut transcript = Vec::new();
    let mut messages: Vec<Vec<Message>> = Vec::new();
    let mut actions = Vec::new();
    let mut ingestions = 0;
    for round in 0..ctx.rounds {
        let previous = messages.last();
        let inboxes: Vec<Vec<Message>> = observations
            .iter()
            .map(|obs| {
                previous.map_or_else(Vec::new, |msgs| {
                    msgs.iter().filter(|m| m.sender != obs.code).cloned().collect()
                })
            })
            .collect();
        if round > 0 {
            ingestions += observations.len();
        }
        let entries: Vec<TranscriptEntry> = observations
            .par_iter()
            .zip(backends.par_iter())
            .zip(inboxes.par_iter())
            .map(|((obs, backend), inbox)| decide_one(*backend, obs, inbox, round, ctx, regions))
            .collect();
        messages.push(
            observations
                .iter()
                .zip(&entries)
                .map(|(obs, e)| extract_message(obs, &e.action))
                .collect(),
        );
        actions = entries.iter().map(|e| e.action.clone()).collect();
        transcript.extend(entries);
    }
    let degradations = transcript.iter().filter(|e| e.fallback).count();
    Ok(CoordinationOutcome {
        actions,
        messages,
        decision_calls: observations.len() * ctx.rounds,
        ingestions,
        degradations,
        transcript,
    })
}
