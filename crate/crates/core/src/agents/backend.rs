//! Decision backends: scripted replay, seeded random, expert rules and a
//! remote text endpoint.

use std::collections::BTreeMap;
use std::time::Duration;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::expert::expert_heuristic;
use super::message::Message;
use super::observation::Observation;
use super::PolicyAction;
use crate::policy::normalize_tir;
use crate::scenario::{BackendSpec, Strategy};

pub const ENV_ENDPOINT: &str = "METAPOLICY_ENDPOINT";
pub const ENV_TOKEN: &str = "METAPOLICY_TOKEN";
pub const ENV_MODEL: &str = "METAPOLICY_MODEL";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("scripted failure")]
    Scripted,
}

/// Everything a backend may look at for one decision.
#[derive(Debug, Clone, Copy)]
pub struct DecisionRequest<'a> {
    pub observation: &'a Observation,
    pub messages: &'a [Message],
    pub prompt: &'a str,
    pub strategy: Strategy,
    pub seed: u64,
    /// Zero-based communication round.
    pub round: usize,
    /// Zero-based retry attempt.
    pub attempt: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendReply {
    Action(PolicyAction),
    Text(String),
}

pub trait DecisionBackend: Send + Sync {
    fn name(&self) -> &str;
    fn decide(&self, request: &DecisionRequest<'_>) -> Result<BackendReply, BackendError>;
}

/// One scripted step.
#[derive(Debug, Clone, PartialEq)]
pub enum ScriptStep {
    Uniform,
    NoOp,
    Action(PolicyAction),
    Text(String),
    Fail,
}

impl ScriptStep {
    pub fn parse(s: &str) -> Self {
        match s.trim() {
            "uniform" => ScriptStep::Uniform,
            "noop" => ScriptStep::NoOp,
            "fail" => ScriptStep::Fail,
            _ => ScriptStep::Text(s.to_string()),
        }
    }
}

/// Replays one step per cycle; the last step repeats.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    steps: Vec<ScriptStep>,
}

impl ScriptedBackend {
    pub fn new(steps: Vec<ScriptStep>) -> Self {
        Self { steps }
    }
}

impl DecisionBackend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn decide(&self, req: &DecisionRequest<'_>) -> Result<BackendReply, BackendError> {
        let obs = req.observation;
        let step = self
            .steps
            .get(obs.cycle)
            .or(self.steps.last())
            .unwrap_or(&ScriptStep::Uniform);
        Ok(match step {
            ScriptStep::Uniform => BackendReply::Action(match req.strategy {
                Strategy::Tir => PolicyAction::uniform_tir(obs.origins(), obs.horizon_weeks),
                _ => PolicyAction::NoOp,
            }),
            ScriptStep::NoOp => BackendReply::Action(PolicyAction::NoOp),
            ScriptStep::Action(a) => BackendReply::Action(a.clone()),
            ScriptStep::Text(t) => BackendReply::Text(t.clone()),
            ScriptStep::Fail => return Err(BackendError::Scripted),
        })
    }
}

/// Symmetric Dirichlet(1) fractions per origin for TIR, a uniformly drawn
/// origin for SIS/TIS. The stream is keyed by cycle, round, region and
/// attempt so draws do not depend on scheduling.
#[derive(Debug, Clone, Default)]
pub struct RandomBackend;

impl DecisionBackend for RandomBackend {
    fn name(&self) -> &str {
        "random"
    }

    fn decide(&self, req: &DecisionRequest<'_>) -> Result<BackendReply, BackendError> {
        let obs = req.observation;
        let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
        rng.set_stream(
            ((obs.cycle as u64) << 40)
                | ((req.round as u64 & 0xff) << 32)
                | ((obs.region as u64 & 0xffff) << 16)
                | (req.attempt as u64 & 0xffff),
        );
        let origins = obs.origins();
        let action = match req.strategy {
            Strategy::Tir => {
                let mut allocations = BTreeMap::new();
                for o in origins {
                    let draws: Vec<f64> = (0..obs.horizon_weeks)
                        .map(|_| rng.sample::<f64, _>(Exp1))
                        .collect();
                    let total: f64 = draws.iter().sum();
                    let fractions: Vec<f64> = draws.iter().map(|d| d / total).collect();
                    let (alloc, _) = normalize_tir(&fractions)
                        .map_err(|e| BackendError::Config(e.to_string()))?;
                    allocations.insert(o, alloc);
                }
                PolicyAction::Tir { allocations }
            }
            _ if origins.is_empty() => PolicyAction::NoOp,
            Strategy::Sis => PolicyAction::Sis {
                origin: origins[rng.random_range(0..origins.len())],
            },
            Strategy::Tis => PolicyAction::Tis {
                origin: origins[rng.random_range(0..origins.len())],
            },
        };
        Ok(BackendReply::Action(action))
    }
}

#[derive(Debug, Clone, Default)]
pub struct ExpertBackend;

impl DecisionBackend for ExpertBackend {
    fn name(&self) -> &str {
        "expert"
    }

    fn decide(&self, req: &DecisionRequest<'_>) -> Result<BackendReply, BackendError> {
        Ok(BackendReply::Action(expert_heuristic(req.observation)))
    }
}

#[derive(Debug, Serialize)]
struct RemoteRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
}

#[derive(Debug, Deserialize)]
struct RemoteResponse {
    text: String,
}

/// POSTs `{model, prompt, max_tokens, temperature}` and reads `{text}`.
pub struct RemoteBackend {
    agent: ureq::Agent,
    endpoint: String,
    token: Option<String>,
    model: String,
    max_tokens: u32,
    temperature: f64,
    backoff: Vec<Duration>,
}

impl RemoteBackend {
    pub fn new(endpoint: &str, token: Option<String>, model: &str, max_tokens: u32, temperature: f64) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        Self {
            agent,
            endpoint: endpoint.to_string(),
            token,
            model: model.to_string(),
            max_tokens,
            temperature,
            backoff: [1, 2, 4].map(Duration::from_secs).to_vec(),
        }
    }

    /// Reads endpoint, token and default model from the environment.
    pub fn from_env(model: Option<&str>, max_tokens: u32, temperature: f64) -> Result<Self, BackendError> {
        let endpoint = std::env::var(ENV_ENDPOINT)
            .map_err(|_| BackendError::Config(format!("{ENV_ENDPOINT} is not set")))?;
        let token = std::env::var(ENV_TOKEN).ok();
        let model = model
            .map(str::to_string)
            .or_else(|| std::env::var(ENV_MODEL).ok())
            .unwrap_or_else(|| "default".to_string());
        Ok(Self::new(&endpoint, token, &model, max_tokens, temperature))
    }

    /// Delays between transport retries.
    pub fn with_backoff(mut self, backoff: Vec<Duration>) -> Self {
        self.backoff = backoff;
        self
    }

    fn call(&self, prompt: &str) -> Result<String, BackendError> {
        let body = RemoteRequest {
            model: &self.model,
            prompt,
            max_tokens: self.max_tokens,
            temperature: self.temperature,
        };
        let mut req = self.agent.post(&self.endpoint);
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let parsed: RemoteResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(parsed.text)
    }
}

impl DecisionBackend for RemoteBackend {
    fn name(&self) -> &str {
        "remote"
    }

    fn decide(&self, req: &DecisionRequest<'_>) -> Result<BackendReply, BackendError> {
        let mut last = None;
        for k in 0..=self.backoff.len() {
            match self.call(req.prompt) {
                Ok(text) => return Ok(BackendReply::Text(text)),
                Err(e) => {
                    warn!("remote backend call {} failed: {e}", k + 1);
                    last = Some(e);
                    if let Some(delay) = self.backoff.get(k) {
                        std::thread::sleep(*delay);
                    }
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

pub fn backend_from_spec(spec: &BackendSpec) -> Result<Box<dyn DecisionBackend>, BackendError> {
    Ok(match spec {
        BackendSpec::Expert => Box::new(ExpertBackend),
        BackendSpec::Random => Box::new(RandomBackend),
        BackendSpec::Scripted { steps } => {
            Box::new(ScriptedBackend::new(steps.iter().map(|s| ScriptStep::parse(s)).collect()))
        }
        BackendSpec::Remote {
            model,
            max_tokens,
            temperature,
        } => Box::new(RemoteBackend::from_env(model.as_deref(), *max_tokens, *temperature)?),
    })
}
