//! Shared domain types and scenario configuration.
//!
//! Everything downstream (dynamics, policies, agents, the episode loop) reads
//! a [`ScenarioConfig`] that has passed [`validate_scenario`]. Regions are
//! addressed by a dense `usize` index into the [`RegionSet`]; codes are only
//! used at the file boundary.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Numerical-stability floor used in the R_t posterior and equity ratios.
pub const DEFAULT_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum ValidationError {
    #[error("scenario has no regions")]
    NoRegions,
    #[error("duplicate region code {0}")]
    DuplicateRegion(String),
    #[error("unknown region code {0}")]
    UnknownRegion(String),
    #[error("negative or non-finite population in region {region}: {compartment} = {value}")]
    NegativePopulation {
        region: String,
        compartment: &'static str,
        value: f64,
    },
    #[error("region {0} has zero living population")]
    EmptyRegion(String),
    #[error("region {region}: quarantined transmission must be strictly lower than infectious transmission (beta_Q = {beta_q}, beta_I = {beta_i})")]
    QuarantineTransmission {
        region: String,
        beta_i: f64,
        beta_q: f64,
    },
    #[error("region {region}: rate {name} = {value} outside [0, 1]")]
    RateOutOfRange {
        region: String,
        name: &'static str,
        value: f64,
    },
    #[error("region {0}: parameter steps must start at day 0 and be strictly increasing")]
    BadRateSteps(String),
    #[error("expected {expected} entries for {what}, found {found}")]
    Length {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("mobility schedule covers {found} days, simulation needs {needed}")]
    ScheduleTooShort { needed: usize, found: usize },
    #[error("mobility schedule starts {found}, simulation starts {expected}")]
    ScheduleStart { expected: NaiveDate, found: NaiveDate },
    #[error("invalid mobility flow on day {day} from {origin} to {destination}: {value}")]
    BadFlow {
        day: usize,
        origin: String,
        destination: String,
        value: f64,
    },
    #[error("calendar gap: expected a cycle starting on day {expected}, found {found}")]
    CalendarGap { expected: usize, found: String },
    #[error("cycle starting on day {start} spans {days} days, strategy needs {expected}")]
    CycleLength {
        start: usize,
        days: usize,
        expected: usize,
    },
    #[error("invalid setting {name}: {reason}")]
    Setting { name: &'static str, reason: String },
    #[error("end date {end} precedes start date {start}")]
    DateRange { start: NaiveDate, end: NaiveDate },
    #[error("failed to read scenario {path}: {reason}")]
    Read { path: PathBuf, reason: String },
}

/// One region of the metapopulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub code: String,
    pub name: String,
    #[serde(default)]
    pub lat: f64,
    #[serde(default)]
    pub lon: f64,
}

/// Ordered region set; the position of a region is its dense index.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RegionSet {
    regions: Vec<Region>,
}

impl RegionSet {
    pub fn new(regions: Vec<Region>) -> Self {
        Self { regions }
    }

    pub fn from_codes<S: AsRef<str>>(codes: &[S]) -> Self {
        Self::new(
            codes
                .iter()
                .map(|c| Region {
                    code: c.as_ref().to_string(),
                    name: c.as_ref().to_string(),
                    lat: 0.0,
                    lon: 0.0,
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn get(&self, index: usize) -> &Region {
        &self.regions[index]
    }

    pub fn code(&self, index: usize) -> &str {
        &self.regions[index].code
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.regions
            .iter()
            .position(|r| r.code.eq_ignore_ascii_case(code))
    }

    pub fn resolve(&self, code: &str) -> Result<usize, ValidationError> {
        self.index_of(code)
            .ok_or_else(|| ValidationError::UnknownRegion(code.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Region> {
        self.regions.iter()
    }

    pub fn codes(&self) -> Vec<String> {
        self.regions.iter().map(|r| r.code.clone()).collect()
    }
}

/// Per-region SEIQRD person counts on one day. Counts are real-valued.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CompartmentState {
    pub s: f64,
    pub e: f64,
    pub i: f64,
    pub q: f64,
    pub r: f64,
    pub d: f64,
}

impl CompartmentState {
    pub fn new(s: f64, e: f64, i: f64, q: f64, r: f64, d: f64) -> Self {
        Self { s, e, i, q, r, d }
    }

    /// Living population `S + E + I + Q + R`.
    pub fn living(&self) -> f64 {
        self.s + self.e + self.i + self.q + self.r
    }

    /// All six compartments, deaths included.
    pub fn total(&self) -> f64 {
        self.living() + self.d
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.s, self.e, self.i, self.q, self.r, self.d]
    }

    pub const NAMES: [&'static str; 6] = ["S", "E", "I", "Q", "R", "D"];

    fn check(&self, region: &str) -> Result<(), ValidationError> {
        for (name, value) in Self::NAMES.iter().zip(self.as_array()) {
            if !value.is_finite() || value < 0.0 {
                return Err(ValidationError::NegativePopulation {
                    region: region.to_string(),
                    compartment: name,
                    value,
                });
            }
        }
        if self.living() <= 0.0 {
            return Err(ValidationError::EmptyRegion(region.to_string()));
        }
        Ok(())
    }
}

/// Daily transition rates for one region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub beta_i: f64,
    pub beta_q: f64,
    pub sigma: f64,
    pub delta: f64,
    pub gamma: f64,
    pub mu: f64,
}

impl Rates {
    pub const NAMES: [&'static str; 6] = ["beta_I", "beta_Q", "sigma", "delta", "gamma", "mu"];

    pub fn zero() -> Self {
        Self {
            beta_i: 0.0,
            beta_q: 0.0,
            sigma: 0.0,
            delta: 0.0,
            gamma: 0.0,
            mu: 0.0,
        }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [
            self.beta_i,
            self.beta_q,
            self.sigma,
            self.delta,
            self.gamma,
            self.mu,
        ]
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self {
            beta_i: v[0],
            beta_q: v[1],
            sigma: v[2],
            delta: v[3],
            gamma: v[4],
            mu: v[5],
        }
    }

    pub fn check(&self, region: &str) -> Result<(), ValidationError> {
        for (name, value) in Self::NAMES.iter().zip(self.as_array()) {
            if !(0.0..=1.0).contains(&value) {
                return Err(ValidationError::RateOutOfRange {
                    region: region.to_string(),
                    name,
                    value,
                });
            }
        }
        // beta_Q == beta_I == 0 is the "no transmission" fit and is allowed.
        let no_transmission = self.beta_i == 0.0 && self.beta_q == 0.0;
        if self.beta_q >= self.beta_i && !no_transmission {
            return Err(ValidationError::QuarantineTransmission {
                region: region.to_string(),
                beta_i: self.beta_i,
                beta_q: self.beta_q,
            });
        }
        Ok(())
    }
}

/// Rates that take effect on `start_day` and hold until the next step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateStep {
    pub start_day: usize,
    pub rates: Rates,
}

/// Piecewise-constant rates per region.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpiParams {
    steps: Vec<Vec<RateStep>>,
}

impl EpiParams {
    pub fn new(steps: Vec<Vec<RateStep>>) -> Self {
        Self { steps }
    }

    /// Same constant rates for every region.
    pub fn constant(n: usize, rates: Rates) -> Self {
        Self::per_region(vec![rates; n])
    }

    pub fn per_region(rates: Vec<Rates>) -> Self {
        Self {
            steps: rates
                .into_iter()
                .map(|rates| vec![RateStep { start_day: 0, rates }])
                .collect(),
        }
    }

    pub fn regions(&self) -> usize {
        self.steps.len()
    }

    pub fn steps(&self, region: usize) -> &[RateStep] {
        &self.steps[region]
    }

    pub fn rates(&self, region: usize, day: usize) -> &Rates {
        let steps = &self.steps[region];
        let idx = steps.partition_point(|s| s.start_day <= day);
        &steps[idx.saturating_sub(1)].rates
    }

    pub fn rates_on(&self, day: usize) -> Vec<Rates> {
        (0..self.regions()).map(|r| *self.rates(r, day)).collect()
    }

    pub fn push_step(&mut self, region: usize, step: RateStep) {
        let steps = &mut self.steps[region];
        steps.retain(|s| s.start_day < step.start_day);
        steps.push(step);
    }
}

/// Day-indexed origin→destination flow matrices; entry `(day, j, i)` is the
/// number of people travelling from `j` to `i` on that day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MobilitySchedule {
    start: NaiveDate,
    regions: usize,
    flows: Vec<f64>,
}

impl MobilitySchedule {
    pub fn zeros(start: NaiveDate, regions: usize, days: usize) -> Self {
        Self {
            start,
            regions,
            flows: vec![0.0; regions * regions * days],
        }
    }

    /// Repeats one daily matrix (row = origin, column = destination).
    pub fn constant(start: NaiveDate, matrix: &[Vec<f64>], days: usize) -> Self {
        let n = matrix.len();
        let mut s = Self::zeros(start, n, days);
        for day in 0..days {
            for (o, row) in matrix.iter().enumerate() {
                for (d, v) in row.iter().enumerate() {
                    if o != d {
                        s.set(day, o, d, *v);
                    }
                }
            }
        }
        s
    }

    pub fn start(&self) -> NaiveDate {
        self.start
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn days(&self) -> usize {
        if self.regions == 0 {
            0
        } else {
            self.flows.len() / (self.regions * self.regions)
        }
    }

    fn offset(&self, day: usize, origin: usize, destination: usize) -> usize {
        (day * self.regions + origin) * self.regions + destination
    }

    pub fn get(&self, day: usize, origin: usize, destination: usize) -> f64 {
        self.flows[self.offset(day, origin, destination)]
    }

    pub fn set(&mut self, day: usize, origin: usize, destination: usize, value: f64) {
        let off = self.offset(day, origin, destination);
        self.flows[off] = value;
    }

    /// Row-major `n×n` matrix for one day.
    pub fn day(&self, day: usize) -> &[f64] {
        let n2 = self.regions * self.regions;
        &self.flows[day * n2..(day + 1) * n2]
    }

    /// Sum of `origin → destination` flow over `days`.
    pub fn pair_total(
        &self,
        origin: usize,
        destination: usize,
        days: std::ops::Range<usize>,
    ) -> f64 {
        days.map(|d| self.get(d, origin, destination)).sum()
    }

    /// First `days` days of the schedule.
    pub fn truncated(&self, days: usize) -> Self {
        let n2 = self.regions * self.regions;
        Self {
            start: self.start,
            regions: self.regions,
            flows: self.flows[..days.min(self.days()) * n2].to_vec(),
        }
    }

    /// Window beginning `offset` days after the current start.
    pub fn slice(&self, offset: usize, days: usize) -> Self {
        let n2 = self.regions * self.regions;
        let end = (offset + days).min(self.days());
        Self {
            start: self.start + chrono::Duration::days(offset as i64),
            regions: self.regions,
            flows: self.flows[offset.min(end) * n2..end * n2].to_vec(),
        }
    }

    pub fn date(&self, day: usize) -> NaiveDate {
        self.start + chrono::Duration::days(day as i64)
    }

    fn check(&self, regions: &RegionSet) -> Result<(), ValidationError> {
        for day in 0..self.days() {
            for o in 0..self.regions {
                for d in 0..self.regions {
                    let v = self.get(day, o, d);
                    let bad = !v.is_finite() || v < 0.0 || (o == d && v != 0.0);
                    if bad {
                        return Err(ValidationError::BadFlow {
                            day,
                            origin: regions.code(o).to_string(),
                            destination: regions.code(d).to_string(),
                            value: v,
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Which intervention family the agents control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Temporal inflow reallocation.
    Tir,
    /// Spatial inflow suppression.
    Sis,
    /// Targeted inbound screening.
    Tis,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Tir => "TIR",
            Strategy::Sis => "SIS",
            Strategy::Tis => "TIS",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicySettings {
    pub sis_factor: f64,
    pub sis_window_days: usize,
    pub sis_redistribute: bool,
    pub tis_eta: f64,
    pub tis_window_days: usize,
}

impl Default for PolicySettings {
    fn default() -> Self {
        Self {
            sis_factor: 0.5,
            sis_window_days: 14,
            sis_redistribute: true,
            tis_eta: 1.0,
            tis_window_days: 14,
        }
    }
}

/// One reallocation cycle, in simulation-day offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cycle {
    pub start: usize,
    pub days: usize,
}

impl Cycle {
    pub fn end(&self) -> usize {
        self.start + self.days
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CycleCalendar {
    pub cycles: Vec<Cycle>,
}

impl CycleCalendar {
    /// Back-to-back cycles of `cycle_days` from `first` until `end`; a trailing
    /// remainder shorter than a cycle is left uncovered (and fails validation).
    pub fn regular(first: usize, cycle_days: usize, end: usize) -> Self {
        let mut cycles = Vec::new();
        let mut start = first;
        while cycle_days > 0 && start + cycle_days <= end {
            cycles.push(Cycle {
                start,
                days: cycle_days,
            });
            start += cycle_days;
        }
        Self { cycles }
    }

    pub fn len(&self) -> usize {
        self.cycles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cycles.is_empty()
    }
}

/// Decision backend assigned to a region when the agent paradigm runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    #[default]
    Expert,
    Random,
    /// Replays the listed responses, one per cycle; the last repeats.
    /// `"uniform"` and `"noop"` are shorthands, anything else is parsed
    /// as a model response.
    Scripted { steps: Vec<String> },
    /// Text-in/text-out HTTP endpoint, configured from the environment.
    Remote {
        #[serde(default)]
        model: Option<String>,
        #[serde(default = "default_max_tokens")]
        max_tokens: u32,
        #[serde(default)]
        temperature: f64,
    },
}

fn default_max_tokens() -> u32 {
    1024
}

/// A fully resolved scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub regions: RegionSet,
    pub initial: Vec<CompartmentState>,
    /// Cumulative confirmed count on day 0 (seed for the cumulative-Q counter).
    pub initial_confirmed: Vec<f64>,
    pub params: EpiParams,
    pub baseline: MobilitySchedule,
    pub start_date: NaiveDate,
    /// Number of simulated day transitions.
    pub days: usize,
    pub horizon_weeks: usize,
    pub warmup_days: usize,
    pub calendar: CycleCalendar,
    pub strategy: Strategy,
    pub policy: PolicySettings,
    pub seed: u64,
    pub backends: Vec<BackendSpec>,
    pub rounds: usize,
    pub eps: f64,
}

impl ScenarioConfig {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn end_date(&self) -> NaiveDate {
        self.date(self.days)
    }

    pub fn date(&self, day: usize) -> NaiveDate {
        self.start_date + chrono::Duration::days(day as i64)
    }

    /// Days per decision cycle for the configured strategy.
    pub fn cycle_days(&self) -> usize {
        match self.strategy {
            Strategy::Tir => 7 * self.horizon_weeks,
            Strategy::Sis => self.policy.sis_window_days,
            Strategy::Tis => self.policy.tis_window_days,
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("scenario serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self, ValidationError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ValidationError::Read {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let file: ScenarioFile = toml::from_str(&text).map_err(|e| ValidationError::Read {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        file.resolve(base)
    }
}

/// Checks every scenario invariant. Returns the config unchanged on success,
/// so validation is idempotent.
pub fn validate_scenario(config: ScenarioConfig) -> Result<ScenarioConfig, ValidationError> {
    let n = config.regions.len();
    if n == 0 {
        return Err(ValidationError::NoRegions);
    }
    let mut seen = BTreeMap::new();
    for r in config.regions.iter() {
        if seen.insert(r.code.to_ascii_uppercase(), ()).is_some() {
            return Err(ValidationError::DuplicateRegion(r.code.clone()));
        }
    }
    check_len("initial states", n, config.initial.len())?;
    check_len("initial confirmed counts", n, config.initial_confirmed.len())?;
    check_len("parameter sets", n, config.params.regions())?;
    check_len("agent backends", n, config.backends.len())?;
    for (idx, state) in config.initial.iter().enumerate() {
        state.check(config.regions.code(idx))?;
        let c = config.initial_confirmed[idx];
        if !c.is_finite() || c < 0.0 {
            return Err(ValidationError::NegativePopulation {
                region: config.regions.code(idx).to_string(),
                compartment: "confirmed",
                value: c,
            });
        }
    }
    for idx in 0..n {
        let code = config.regions.code(idx);
        let steps = config.params.steps(idx);
        let ordered = steps.windows(2).all(|w| w[0].start_day < w[1].start_day);
        if steps.is_empty() || steps[0].start_day != 0 || !ordered {
            return Err(ValidationError::BadRateSteps(code.to_string()));
        }
        for step in steps {
            step.rates.check(code)?;
        }
    }

    check_len("mobility regions", n, config.baseline.regions())?;
    if config.baseline.start() != config.start_date {
        return Err(ValidationError::ScheduleStart {
            expected: config.start_date,
            found: config.baseline.start(),
        });
    }
    if config.baseline.days() < config.days {
        return Err(ValidationError::ScheduleTooShort {
            needed: config.days,
            found: config.baseline.days(),
        });
    }
    config.baseline.check(&config.regions)?;

    if config.horizon_weeks == 0 {
        return Err(setting("horizon_weeks", "must be at least 1"));
    }
    if config.rounds == 0 {
        return Err(setting("rounds", "must be at least 1"));
    }
    if !(config.eps > 0.0 && config.eps.is_finite()) {
        return Err(setting("eps", "must be positive"));
    }
    let p = &config.policy;
    if !(p.sis_factor > 0.0 && p.sis_factor <= 1.0) {
        return Err(setting("sis_factor", "must lie in (0, 1]"));
    }
    if !(0.0..=1.0).contains(&p.tis_eta) {
        return Err(setting("tis_eta", "must lie in [0, 1]"));
    }
    if p.sis_window_days == 0 || p.tis_window_days == 0 {
        return Err(setting("window_days", "must be at least 1"));
    }
    if config.warmup_days > config.days {
        return Err(setting("warmup_days", "exceeds the simulated period"));
    }
    check_calendar(&config)?;
    Ok(config)
}

fn check_calendar(config: &ScenarioConfig) -> Result<(), ValidationError> {
    let expected_len = config.cycle_days();
    let mut next = config.warmup_days;
    for cycle in &config.calendar.cycles {
        if cycle.start != next {
            return Err(ValidationError::CalendarGap {
                expected: next,
                found: format!("day {}", cycle.start),
            });
        }
        if config.strategy == Strategy::Tir && cycle.days != expected_len {
            return Err(ValidationError::CycleLength {
                start: cycle.start,
                days: cycle.days,
                expected: expected_len,
            });
        }
        if cycle.days == 0 {
            return Err(ValidationError::CycleLength {
                start: cycle.start,
                days: 0,
                expected: expected_len,
            });
        }
        next = cycle.end();
    }
    if next != config.days {
        let found = if next < config.days {
            format!("calendar ending on day {next}")
        } else {
            format!("calendar running past the end, to day {next}")
        };
        return Err(ValidationError::CalendarGap {
            expected: config.days,
            found,
        });
    }
    Ok(())
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<(), ValidationError> {
    if expected != found {
        return Err(ValidationError::Length {
            what,
            expected,
            found,
        });
    }
    Ok(())
}

fn setting(name: &'static str, reason: &str) -> ValidationError {
    ValidationError::Setting {
        name,
        reason: reason.to_string(),
    }
}

// ---------------------------------------------------------------------------
// TOML file form

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: String,
    start_date: NaiveDate,
    end_date: NaiveDate,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_horizon")]
    horizon_weeks: usize,
    #[serde(default = "default_warmup")]
    warmup_days: usize,
    #[serde(default = "default_strategy")]
    strategy: Strategy,
    #[serde(default = "default_rounds")]
    rounds: usize,
    #[serde(default = "default_eps")]
    eps: f64,
    #[serde(default)]
    cycles: Option<Vec<CycleEntry>>,
    #[serde(default)]
    policy: PolicySettings,
    regions: Vec<RegionEntry>,
    mobility: MobilityEntry,
    #[serde(default)]
    params: Option<ParamsEntry>,
}

fn default_horizon() -> usize {
    6
}
fn default_warmup() -> usize {
    21
}
fn default_strategy() -> Strategy {
    Strategy::Tir
}
fn default_rounds() -> usize {
    2
}
fn default_eps() -> f64 {
    DEFAULT_EPS
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CycleEntry {
    start: NaiveDate,
    days: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionEntry {
    code: String,
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    lat: f64,
    #[serde(default)]
    lon: f64,
    initial: CompartmentState,
    #[serde(default)]
    confirmed: Option<f64>,
    rates: Rates,
    #[serde(default)]
    rate_steps: Vec<RateStepEntry>,
    #[serde(default)]
    backend: BackendSpec,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RateStepEntry {
    start: NaiveDate,
    #[serde(flatten)]
    rates: Rates,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MobilityEntry {
    /// Daily matrix repeated over the whole period.
    #[serde(default)]
    constant: Option<Vec<Vec<f64>>>,
    /// Flow CSV, relative to the scenario file.
    #[serde(default)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsEntry {
    csv: PathBuf,
}

impl ScenarioFile {
    fn resolve(self, base: &Path) -> Result<ScenarioConfig, ValidationError> {
        if self.end_date < self.start_date {
            return Err(ValidationError::DateRange {
                start: self.start_date,
                end: self.end_date,
            });
        }
        let days = (self.end_date - self.start_date).num_days() as usize;
        let regions = RegionSet::new(
            self.regions
                .iter()
                .map(|r| Region {
                    code: r.code.clone(),
                    name: r.name.clone().unwrap_or_else(|| r.code.clone()),
                    lat: r.lat,
                    lon: r.lon,
                })
                .collect(),
        );
        let day_of = |date: NaiveDate| -> Result<usize, ValidationError> {
            let off = (date - self.start_date).num_days();
            if off < 0 {
                return Err(setting("date", &format!("{date} precedes start date")));
            }
            Ok(off as usize)
        };

        let mut steps = Vec::with_capacity(self.regions.len());
        for r in &self.regions {
            let mut s = vec![RateStep {
                start_day: 0,
                rates: r.rates,
            }];
            for step in &r.rate_steps {
                s.push(RateStep {
                    start_day: day_of(step.start)?,
                    rates: step.rates,
                });
            }
            steps.push(s);
        }
        let mut params = EpiParams::new(steps);
        if let Some(p) = &self.params {
            let path = base.join(&p.csv);
            let fitted = crate::ingest::load_params(&path, &regions, self.start_date).map_err(
                |e| ValidationError::Read {
                    path: path.clone(),
                    reason: e.to_string(),
                },
            )?;
            params = fitted;
        }

        let baseline = match (&self.mobility.constant, &self.mobility.csv) {
            (Some(matrix), None) => {
                if matrix.len() != regions.len() || matrix.iter().any(|r| r.len() != regions.len())
                {
                    return Err(setting("mobility.constant", "must be an N×N matrix"));
                }
                MobilitySchedule::constant(self.start_date, matrix, days)
            }
            (None, Some(csv)) => {
                let path = base.join(csv);
                let loaded =
                    crate::ingest::load_flows(&path, &regions).map_err(|e| ValidationError::Read {
                        path: path.clone(),
                        reason: e.to_string(),
                    })?;
                let offset = (self.start_date - loaded.start()).num_days();
                if offset < 0 {
                    return Err(ValidationError::ScheduleStart {
                        expected: self.start_date,
                        found: loaded.start(),
                    });
                }
                loaded.slice(offset as usize, days)
            }
            _ => {
                return Err(setting(
                    "mobility",
                    "exactly one of `constant` or `csv` is required",
                ))
            }
        };

        let calendar = match &self.cycles {
            Some(entries) => CycleCalendar {
                cycles: entries
                    .iter()
                    .map(|c| {
                        Ok(Cycle {
                            start: day_of(c.start)?,
                            days: c.days,
                        })
                    })
                    .collect::<Result<_, ValidationError>>()?,
            },
            None => {
                let cycle_days = match self.strategy {
                    Strategy::Tir => 7 * self.horizon_weeks,
                    Strategy::Sis => self.policy.sis_window_days,
                    Strategy::Tis => self.policy.tis_window_days,
                };
                CycleCalendar::regular(self.warmup_days, cycle_days, days)
            }
        };

        let config = ScenarioConfig {
            name: self.name,
            initial: self.regions.iter().map(|r| r.initial).collect(),
            initial_confirmed: self
                .regions
                .iter()
                .map(|r| r.confirmed.unwrap_or(r.initial.q))
                .collect(),
            backends: self.regions.iter().map(|r| r.backend.clone()).collect(),
            regions,
            params,
            baseline,
            start_date: self.start_date,
            days,
            horizon_weeks: self.horizon_weeks,
            warmup_days: self.warmup_days,
            calendar,
            strategy: self.strategy,
            policy: self.policy,
            seed: self.seed,
            rounds: self.rounds,
            eps: self.eps,
        };
        validate_scenario(config)
    }
}

/// Programmatic scenario construction, mainly for tests and fixtures.
#[derive(Debug, Clone)]
pub struct ScenarioBuilder {
    name: String,
    regions: Vec<(String, CompartmentState, Rates)>,
    flows: Option<Vec<Vec<f64>>>,
    schedule: Option<MobilitySchedule>,
    start_date: NaiveDate,
    days: usize,
    horizon_weeks: usize,
    warmup_days: usize,
    strategy: Strategy,
    seed: u64,
    rounds: usize,
    backend: BackendSpec,
}

impl ScenarioBuilder {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            regions: Vec::new(),
            flows: None,
            schedule: None,
            start_date: NaiveDate::from_ymd_opt(2020, 4, 12).unwrap(),
            days: 0,
            horizon_weeks: 6,
            warmup_days: 0,
            strategy: Strategy::Tir,
            seed: 0,
            rounds: 2,
            backend: BackendSpec::Expert,
        }
    }

    pub fn region(mut self, code: &str, initial: CompartmentState, rates: Rates) -> Self {
        self.regions.push((code.to_string(), initial, rates));
        self
    }

    pub fn constant_flows(mut self, matrix: Vec<Vec<f64>>) -> Self {
        self.flows = Some(matrix);
        self
    }

    pub fn schedule(mut self, schedule: MobilitySchedule) -> Self {
        self.schedule = Some(schedule);
        self
    }

    pub fn start_date(mut self, date: NaiveDate) -> Self {
        self.start_date = date;
        self
    }

    pub fn days(mut self, days: usize) -> Self {
        self.days = days;
        self
    }

    pub fn horizon_weeks(mut self, h: usize) -> Self {
        self.horizon_weeks = h;
        self
    }

    pub fn warmup_days(mut self, d: usize) -> Self {
        self.warmup_days = d;
        self
    }

    pub fn strategy(mut self, s: Strategy) -> Self {
        self.strategy = s;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn rounds(mut self, k: usize) -> Self {
        self.rounds = k;
        self
    }

    pub fn backend(mut self, b: BackendSpec) -> Self {
        self.backend = b;
        self
    }

    /// Builds without validating.
    pub fn build_unchecked(self) -> ScenarioConfig {
        let n = self.regions.len();
        let baseline = match (self.schedule, self.flows) {
            (Some(s), _) => s,
            (None, Some(m)) => MobilitySchedule::constant(self.start_date, &m, self.days),
            (None, None) => MobilitySchedule::zeros(self.start_date, n, self.days),
        };
        let policy = PolicySettings::default();
        let cycle_days = match self.strategy {
            Strategy::Tir => 7 * self.horizon_weeks,
            Strategy::Sis => policy.sis_window_days,
            Strategy::Tis => policy.tis_window_days,
        };
        ScenarioConfig {
            name: self.name,
            regions: RegionSet::from_codes(
                &self.regions.iter().map(|r| r.0.clone()).collect::<Vec<_>>(),
            ),
            initial: self.regions.iter().map(|r| r.1).collect(),
            initial_confirmed: self.regions.iter().map(|r| r.1.q).collect(),
            params: EpiParams::per_region(self.regions.iter().map(|r| r.2).collect()),
            baseline,
            start_date: self.start_date,
            days: self.days,
            horizon_weeks: self.horizon_weeks,
            warmup_days: self.warmup_days,
            calendar: CycleCalendar::regular(self.warmup_days, cycle_days, self.days),
            strategy: self.strategy,
            policy,
            seed: self.seed,
            backends: vec![self.backend; n],
            rounds: self.rounds,
            eps: DEFAULT_EPS,
        }
    }

    pub fn build(self) -> Result<ScenarioConfig, ValidationError> {
        validate_scenario(self.build_unchecked())
    }
}
