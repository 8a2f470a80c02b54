//! Closed-loop episodes: simulate, observe, coordinate, apply, repeat.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::backend::{backend_from_spec, BackendError, DecisionBackend, ExpertBackend, RandomBackend};
use crate::agents::coordinate::{coordinate_round, CoordinationContext, CoordinationError, MAX_ATTEMPTS};
use crate::agents::observation::build_observation;
use crate::agents::{PolicyAction, TranscriptEntry};
use crate::analytics::equity::{equity_coefficient, improvements, Equity};
use crate::analytics::metrics::MetricSeries;
use crate::analytics::AnalyticsError;
use crate::dynamics::{DynamicsError, ScreeningCalendar, Simulator, Trajectory};
use crate::policy::{
    apply_sis, classify_policy, compile_tis, reallocate_pair, PolicyError, PolicyLogEntry,
    PolicyType, SisOrder, TirWindow, TisOrder,
};
use crate::rt::{estimate_rt, RtConfig, RtSeries, SerialInterval};
use crate::scenario::{CycleCalendar, ScenarioConfig, Strategy};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("{context}: {source}")]
    Dynamics {
        context: String,
        #[source]
        source: DynamicsError,
    },
    #[error("cycle {cycle}: {source}")]
    Policy {
        cycle: usize,
        #[source]
        source: PolicyError,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Coordination(#[from] CoordinationError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error("reports do not share a scenario: {0}")]
    Mismatch(String),
    #[error("no ground-truth report to compare against")]
    NoGroundTruth,
    #[error("{0} backends supplied for {1} regions")]
    BackendCount(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    Agent,
    GroundTruth,
    Expert,
    Random,
}

impl Paradigm {
    pub const ALL: [Paradigm; 4] = [Self::Agent, Self::GroundTruth, Self::Expert, Self::Random];

    pub fn label(&self) -> &'static str {
        match self {
            Paradigm::Agent => "agent",
            Paradigm::GroundTruth => "ground_truth",
            Paradigm::Expert => "expert",
            Paradigm::Random => "random",
        }
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Paradigm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.label() == s || (s == "ground-truth" && *p == Paradigm::GroundTruth))
            .ok_or_else(|| format!("unknown paradigm {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub paradigm: Paradigm,
    pub scenario: String,
    /// Hash of the scenario with seed and backends blanked, shared by every
    /// arm of one experiment.
    pub scenario_hash: String,
    pub config_hash: String,
    pub seed: u64,
    pub strategy: Strategy,
    pub regions: Vec<String>,
    pub calendar: CycleCalendar,
    pub trajectory: Trajectory,
    pub policy_log: Vec<PolicyLogEntry>,
    pub metrics: MetricSeries,
    pub rt: Vec<Option<RtSeries>>,
    /// Terminal cumulative confirmed per region.
    pub infections: Vec<f64>,
    pub deaths: Vec<f64>,
    pub transcript: Vec<TranscriptEntry>,
    pub degradations: usize,
    pub decision_calls: usize,
    pub wall_clock_secs: f64,
}

impl EpisodeReport {
    pub fn total_infections(&self) -> f64 {
        self.infections.iter().sum()
    }

    pub fn total_deaths(&self) -> f64 {
        self.deaths.iter().sum()
    }

    /// Equality ignoring wall-clock time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.wall_clock_secs = other.wall_clock_secs;
        a == *other
    }

    pub fn policy_type_counts(&self) -> BTreeMap<String, usize> {
        let mut counts: BTreeMap<String, usize> = PolicyType::ALL
            .iter()
            .map(|p| (p.label().to_string(), 0))
            .collect();
        for label in self.policy_log.iter().filter_map(|e| e.label) {
            *counts.entry(label.label().to_string()).or_default() += 1;
        }
        counts
    }
}

/// Hash identifying the experiment independent of seed and backends.
pub fn scenario_hash(config: &ScenarioConfig) -> String {
    let mut c = config.clone();
    c.seed = 0;
    c.backends.clear();
    c.content_hash()
}

fn backends_for(
    config: &ScenarioConfig,
    paradigm: Paradigm,
    supplied: Option<Vec<Box<dyn DecisionBackend>>>,
) -> Result<Vec<Box<dyn DecisionBackend>>, OrchestratorError> {
    let n = config.regions.len();
    let list: Vec<Box<dyn DecisionBackend>> = match (paradigm, supplied) {
        (Paradigm::GroundTruth, _) => Vec::new(),
        (_, Some(b)) => b,
        (Paradigm::Expert, None) => (0..n).map(|_| Box::new(ExpertBackend) as Box<dyn DecisionBackend>).collect(),
        (Paradigm::Random, None) => (0..n).map(|_| Box::new(RandomBackend) as Box<dyn DecisionBackend>).collect(),
        (Paradigm::Agent, None) => {
            if config.backends.is_empty() {
                (0..n).map(|_| Box::new(ExpertBackend) as Box<dyn DecisionBackend>).collect()
            } else {
                config
                    .backends
                    .iter()
                    .map(backend_from_spec)
                    .collect::<Result<_, _>>()?
            }
        }
    };
    if paradigm != Paradigm::GroundTruth && list.len() != n {
        return Err(OrchestratorError::BackendCount(list.len(), n));
    }
    Ok(list)
}

/// Runs one episode. `backends` overrides the paradigm's default backends
/// (one per region); ground truth ignores it.
pub fn run_episode(
    config: &ScenarioConfig,
    paradigm: Paradigm,
    backends: Option<Vec<Box<dyn DecisionBackend>>>,
) -> Result<EpisodeReport, OrchestratorError> {
    let started = Instant::now();
    let backends = backends_for(config, paradigm, backends)?;
    let backend_refs: Vec<&dyn DecisionBackend> = backends.iter().map(|b| b.as_ref()).collect();
    let n = config.regions.len();
    let baseline = &config.baseline;
    let mut realized = baseline.truncated(config.days);
    let mut screening = ScreeningCalendar::new();
    let mut sis_orders: Vec<SisOrder> = Vec::new();
    let mut tis_orders: Vec<TisOrder> = Vec::new();
    let mut sim = Simulator::new(config);
    let mut policy_log = Vec::new();
    let mut transcript = Vec::new();
    let mut degradations = 0;
    let mut decision_calls = 0;
    let dyn_err = |cycle: Option<usize>| {
        move |source| OrchestratorError::Dynamics {
            context: cycle.map_or_else(|| "warm-up".to_string(), |c| format!("cycle {c}")),
            source,
        }
    };

    for (k, cycle) in config.calendar.cycles.iter().enumerate() {
        let lead = cycle.start.saturating_sub(sim.day());
        sim.advance(&realized, &screening, lead)
            .map_err(dyn_err(k.checked_sub(1)))?;
        if paradigm != Paradigm::GroundTruth {
            let traj = sim.trajectory(&realized);
            let observations: Vec<_> = (0..n)
                .map(|r| build_observation(&traj, &realized, config, r, k, cycle))
                .collect();
            let ctx = CoordinationContext {
                cycle: k,
                strategy: config.strategy,
                seed: config.seed,
                rounds: config.rounds.max(1),
                max_attempts: MAX_ATTEMPTS,
            };
            let outcome = coordinate_round(&backend_refs, &observations, &config.regions, &ctx)?;
            degradations += outcome.degradations;
            decision_calls += outcome.decision_calls;
            transcript.extend(outcome.transcript);
            let policy_err = |source| OrchestratorError::Policy { cycle: k, source };
            for (acting, action) in outcome.actions.iter().enumerate() {
                let acting_code = config.regions.code(acting).to_string();
                match action {
                    PolicyAction::Tir { allocations } => {
                        let window = TirWindow {
                            start: cycle.start,
                            weeks: config.horizon_weeks,
                        };
                        for (origin, alloc) in allocations {
                            reallocate_pair(&mut realized, baseline, *origin, acting, alloc, window)
                                .map_err(policy_err)?;
                            policy_log.push(PolicyLogEntry {
                                cycle: k,
                                acting: acting_code.clone(),
                                origin: config.regions.code(*origin).to_string(),
                                action_type: Strategy::Tir,
                                parameters: alloc.to_string(),
                                label: classify_policy(alloc).ok(),
                            });
                        }
                    }
                    PolicyAction::Sis { origin } => {
                        sis_orders.push(SisOrder {
                            acting,
                            origin: *origin,
                            start_day: cycle.start,
                            window_days: cycle.days.min(config.policy.sis_window_days),
                            factor: config.policy.sis_factor,
                            redistribute: config.policy.sis_redistribute,
                        });
                        policy_log.push(PolicyLogEntry {
                            cycle: k,
                            acting: acting_code,
                            origin: config.regions.code(*origin).to_string(),
                            action_type: Strategy::Sis,
                            parameters: format!("{}", config.policy.sis_factor),
                            label: None,
                        });
                    }
                    PolicyAction::Tis { origin } => {
                        tis_orders.push(TisOrder {
                            acting,
                            origin: *origin,
                            start_day: cycle.start,
                            window_days: cycle.days.min(config.policy.tis_window_days),
                            eta: config.policy.tis_eta,
                        });
                        policy_log.push(PolicyLogEntry {
                            cycle: k,
                            acting: acting_code,
                            origin: config.regions.code(*origin).to_string(),
                            action_type: Strategy::Tis,
                            parameters: format!("{}", config.policy.tis_eta),
                            label: None,
                        });
                    }
                    PolicyAction::NoOp => {}
                }
            }
            if !sis_orders.is_empty() {
                let (sched, outcome) = apply_sis(&baseline.truncated(config.days), &sis_orders)
                    .map_err(policy_err)?;
                if !outcome.full_coordination.is_empty() {
                    info!(
                        "cycle {k}: {} origin-days with every destination suppressing",
                        outcome.full_coordination.len()
                    );
                }
                realized = sched;
            }
            if !tis_orders.is_empty() {
                screening = compile_tis(&tis_orders).map_err(policy_err)?;
            }
        }
        sim.advance(&realized, &screening, cycle.days)
            .map_err(dyn_err(Some(k)))?;
    }
    let remaining = config.days - sim.day();
    sim.advance(&realized, &screening, remaining)
        .map_err(dyn_err(config.calendar.len().checked_sub(1)))?;
    if sim.capped_days() > 0 {
        warn!(
            "{}: outflow exceeded available mass on {} days and was scaled down",
            config.name,
            sim.capped_days()
        );
    }
    let trajectory = sim.finish(&realized);

    let metrics = MetricSeries::from_trajectory(&trajectory)?;
    let si = SerialInterval::default();
    let rt_cfg = RtConfig::default();
    let rt = (0..n)
        .map(|r| estimate_rt(&trajectory.new_confirmed(r), &si, &rt_cfg).ok())
        .collect();
    let infections = (0..n).map(|r| trajectory.terminal_confirmed(r)).collect();
    let deaths = (0..n).map(|r| trajectory.terminal_deaths(r)).collect();
    Ok(EpisodeReport {
        paradigm,
        scenario: config.name.clone(),
        scenario_hash: scenario_hash(config),
        config_hash: config.content_hash(),
        seed: config.seed,
        strategy: config.strategy,
        regions: config.regions.codes(),
        calendar: config.calendar.clone(),
        trajectory,
        policy_log,
        metrics,
        rt,
        infections,
        deaths,
        transcript,
        degradations,
        decision_calls,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Per-arm outcome, as stored in `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub schema_version: u32,
    pub scenario: String,
    pub scenario_hash: String,
    pub config_hash: String,
    pub paradigm: Paradigm,
    pub seed: u64,
    pub strategy: Strategy,
    pub start_date: chrono::NaiveDate,
    pub days: usize,
    pub regions: Vec<String>,
    /// Terminal cumulative confirmed per region.
    pub infections: Vec<f64>,
    pub deaths: Vec<f64>,
    pub total_infections: f64,
    pub total_deaths: f64,
    pub policy_types: BTreeMap<String, usize>,
    pub calendar: CycleCalendar,
    pub degradations: usize,
    pub decision_calls: usize,
}

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

impl EpisodeReport {
    pub fn summary(&self) -> ArmSummary {
        ArmSummary {
            schema_version: SUMMARY_SCHEMA_VERSION,
            scenario: self.scenario.clone(),
            scenario_hash: self.scenario_hash.clone(),
            config_hash: self.config_hash.clone(),
            paradigm: self.paradigm,
            seed: self.seed,
            strategy: self.strategy,
            start_date: self.trajectory.start_date,
            days: self.trajectory.days(),
            regions: self.regions.clone(),
            infections: self.infections.clone(),
            deaths: self.deaths.clone(),
            total_infections: self.total_infections(),
            total_deaths: self.total_deaths(),
            policy_types: self.policy_type_counts(),
            calendar: self.calendar.clone(),
            degradations: self.degradations,
            decision_calls: self.decision_calls,
        }
    }
}

/// One arm compared with ground truth. Reductions are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmComparison {
    pub paradigm: Paradigm,
    pub seed: u64,
    pub infection_reduction_pct: Vec<f64>,
    pub death_reduction_pct: Vec<f64>,
    pub aggregate_infection_reduction_pct: f64,
    pub aggregate_death_reduction_pct: f64,
    pub equity: Equity,
    pub policy_types: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub scenario: String,
    pub regions: Vec<String>,
    pub ground_truth_infections: Vec<f64>,
    pub ground_truth_deaths: Vec<f64>,
    pub arms: Vec<ArmComparison>,
}

fn pct(ground: f64, arm: f64, eps: f64) -> f64 {
    100.0 * (ground - arm) / ground.abs().max(eps)
}

/// Compares every arm with the ground-truth arm among them.
pub fn compare_paradigms(arms: &[ArmSummary], eps: f64) -> Result<ComparisonTable, OrchestratorError> {
    let ground = arms
        .iter()
        .find(|r| r.paradigm == Paradigm::GroundTruth)
        .ok_or(OrchestratorError::NoGroundTruth)?;
    for r in arms {
        if r.scenario_hash != ground.scenario_hash
            || r.regions != ground.regions
            || r.start_date != ground.start_date
            || r.days != ground.days
        {
            return Err(OrchestratorError::Mismatch(format!(
                "{} ({}, seed {}) vs {} ({})",
                r.scenario, r.paradigm, r.seed, ground.scenario, ground.paradigm
            )));
        }
    }
    let rows = arms
        .iter()
        .map(|r| {
            let iv = improvements(&ground.infections, &r.infections, &ground.deaths, &r.deaths, eps);
            ArmComparison {
                paradigm: r.paradigm,
                seed: r.seed,
                infection_reduction_pct: iv.infections.iter().map(|v| 100.0 * v).collect(),
                death_reduction_pct: iv.deaths.iter().map(|v| 100.0 * v).collect(),
                aggregate_infection_reduction_pct: pct(ground.total_infections, r.total_infections, eps),
                aggregate_death_reduction_pct: pct(ground.total_deaths, r.total_deaths, eps),
                equity: equity_coefficient(&iv),
                policy_types: r.policy_types.clone(),
            }
        })
        .collect();
    Ok(ComparisonTable {
        scenario: ground.scenario.clone(),
        regions: ground.regions.clone(),
        ground_truth_infections: ground.infections.clone(),
        ground_truth_deaths: ground.deaths.clone(),
        arms: rows,
    })
}
