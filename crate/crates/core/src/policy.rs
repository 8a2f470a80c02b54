//! Mobility interventions: temporal inflow reallocation (TIR), spatial
//! inflow suppression (SIS) and targeted inbound screening (TIS), plus the
//! strict-first / relaxed-first / balanced classification of TIR actions.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{ScreeningCalendar, ScreeningRule};
use crate::scenario::{MobilitySchedule, Strategy};

/// Entries at or below zero are floored here before renormalizing.
pub const TIR_FLOOR: f64 = 1e-4;
const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("allocation is unrecoverable: {0}")]
    Unrecoverable(String),
    #[error("allocation has {found} weeks, cycle needs {expected}")]
    HorizonMismatch { expected: usize, found: usize },
    #[error("cycle window days {start}..{end} is outside the schedule ({days} days)")]
    WindowMisaligned {
        start: usize,
        end: usize,
        days: usize,
    },
    #[error("region #{acting} has overlapping {kind} orders")]
    OverlappingOrders { acting: usize, kind: &'static str },
    #[error("invalid order: {0}")]
    InvalidOrder(String),
    #[error("classification needs a horizon of at least 3 weeks, got {0}")]
    WrongHorizon(usize),
}

/// Weekly shares of a cycle's inbound volume: every entry positive and the
/// vector sums to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TirAllocation(Vec<f64>);

impl TirAllocation {
    pub fn uniform(weeks: usize) -> Self {
        Self(vec![1.0 / weeks as f64; weeks])
    }

    pub fn fractions(&self) -> &[f64] {
        &self.0
    }

    pub fn weeks(&self) -> usize {
        self.0.len()
    }

    pub fn reversed(&self) -> Self {
        Self(self.0.iter().rev().copied().collect())
    }

    /// Wraps fractions that are already known to be valid.
    pub(crate) fn from_normalized(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl fmt::Display for TirAllocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|p| format!("{p}")).collect();
        write!(f, "{}", parts.join(";"))
    }
}

/// Floors nonpositive entries at [`TIR_FLOOR`] and rescales to sum one.
/// The flag reports whether anything had to be repaired.
pub fn normalize_tir(raw: &[f64]) -> Result<(TirAllocation, bool), PolicyError> {
    if raw.is_empty() {
        return Err(PolicyError::Unrecoverable("empty vector".into()));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(PolicyError::Unrecoverable("non-finite entry".into()));
    }
    if raw.iter().all(|v| *v <= 0.0) {
        return Err(PolicyError::Unrecoverable("no positive entry".into()));
    }
    let sum: f64 = raw.iter().sum();
    if raw.iter().all(|v| *v > 0.0) && (sum - 1.0).abs() <= SUM_TOLERANCE {
        return Ok((TirAllocation(raw.to_vec()), false));
    }
    let floored: Vec<f64> = raw.iter().map(|v| v.max(TIR_FLOOR)).collect();
    let total: f64 = floored.iter().sum();
    Ok((
        TirAllocation(floored.into_iter().map(|v| v / total).collect()),
        true,
    ))
}

/// A TIR cycle: `weeks` consecutive weeks beginning on simulation day `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TirWindow {
    pub start: usize,
    pub weeks: usize,
}

impl TirWindow {
    pub fn days(&self) -> usize {
        7 * self.weeks
    }

    pub fn end(&self) -> usize {
        self.start + self.days()
    }
}

/// Allocation per `(origin, destination)` pair for one cycle.
pub type TirPlan = BTreeMap<(usize, usize), TirAllocation>;

/// Rewrites one pair's flows inside `window`: week `h` carries
/// `p_h · M` where `M` is the pair's baseline cycle total, keeping the
/// baseline's day-of-week profile within each week.
pub fn reallocate_pair(
    target: &mut MobilitySchedule,
    baseline: &MobilitySchedule,
    origin: usize,
    destination: usize,
    allocation: &TirAllocation,
    window: TirWindow,
) -> Result<(), PolicyError> {
    if allocation.weeks() != window.weeks {
        return Err(PolicyError::HorizonMismatch {
            expected: window.weeks,
            found: allocation.weeks(),
        });
    }
    if window.end() > baseline.days() || window.end() > target.days() {
        return Err(PolicyError::WindowMisaligned {
            start: window.start,
            end: window.end(),
            days: baseline.days().min(target.days()),
        });
    }
    let total = baseline.pair_total(origin, destination, window.start..window.end());
    for (h, p) in allocation.fractions().iter().enumerate() {
        let week = window.start + 7 * h..window.start + 7 * (h + 1);
        let week_total = baseline.pair_total(origin, destination, week.clone());
        let quota = p * total;
        for day in week {
            let v = if week_total > 0.0 {
                baseline.get(day, origin, destination) * (quota / week_total)
            } else {
                quota / 7.0
            };
            target.set(day, origin, destination, v);
        }
    }
    Ok(())
}

/// Applies every allocation in `plan` to a copy of `baseline`.
pub fn apply_tir(
    baseline: &MobilitySchedule,
    plan: &TirPlan,
    window: TirWindow,
) -> Result<MobilitySchedule, PolicyError> {
    let mut out = baseline.clone();
    for ((origin, destination), allocation) in plan {
        reallocate_pair(&mut out, baseline, *origin, *destination, allocation, window)?;
    }
    Ok(out)
}

/// Destination `acting` cuts its inflow from `origin` to `factor` of the
/// baseline for `window_days` days from `start_day`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SisOrder {
    pub acting: usize,
    pub origin: usize,
    pub start_day: usize,
    pub window_days: usize,
    pub factor: f64,
    pub redistribute: bool,
}

impl SisOrder {
    fn active(&self, day: usize) -> bool {
        day >= self.start_day && day < self.start_day + self.window_days
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SisOutcome {
    /// Suppressed volume moved to non-restricting destinations.
    pub redistributed: f64,
    /// Suppressed volume with nowhere to go (every alternative also restricts).
    pub dropped: f64,
    /// `(day, origin)` pairs where no eligible alternative existed.
    pub full_coordination: Vec<(usize, usize)>,
}

fn check_overlaps<T>(
    orders: &[T],
    key: impl Fn(&T) -> (usize, usize, usize),
    kind: &'static str,
) -> Result<(), PolicyError> {
    for (a_idx, a) in orders.iter().enumerate() {
        let (acting, start, len) = key(a);
        for b in &orders[a_idx + 1..] {
            let (b_acting, b_start, b_len) = key(b);
            if acting == b_acting && start < b_start + b_len && b_start < start + len {
                return Err(PolicyError::OverlappingOrders { acting, kind });
            }
        }
    }
    Ok(())
}

/// Applies suppression orders. With redistribution on, volume removed from
/// `origin → acting` goes to the origin's other destinations in proportion
/// to their same-day flows, skipping destinations that also suppress that
/// origin; with no eligible destination the volume is dropped.
pub fn apply_sis(
    baseline: &MobilitySchedule,
    orders: &[SisOrder],
) -> Result<(MobilitySchedule, SisOutcome), PolicyError> {
    let n = baseline.regions();
    for o in orders {
        if !(o.factor > 0.0 && o.factor <= 1.0) {
            return Err(PolicyError::InvalidOrder(format!(
                "suppression factor {} outside (0, 1]",
                o.factor
            )));
        }
        if o.window_days == 0 || o.acting == o.origin || o.acting >= n || o.origin >= n {
            return Err(PolicyError::InvalidOrder(format!("{o:?}")));
        }
    }
    check_overlaps(
        orders,
        |o| (o.acting, o.start_day, o.window_days),
        "suppression",
    )?;

    let mut out = baseline.clone();
    let mut outcome = SisOutcome::default();
    let last_day = orders
        .iter()
        .map(|o| o.start_day + o.window_days)
        .max()
        .unwrap_or(0)
        .min(baseline.days());
    let first_day = orders.iter().map(|o| o.start_day).min().unwrap_or(0);

    for day in first_day..last_day {
        for origin in 0..n {
            let active: Vec<&SisOrder> = orders
                .iter()
                .filter(|o| o.origin == origin && o.active(day))
                .collect();
            if active.is_empty() {
                continue;
            }
            let mut spill = 0.0;
            for o in &active {
                let flow = baseline.get(day, origin, o.acting);
                out.set(day, origin, o.acting, flow * o.factor);
                if o.redistribute {
                    spill += flow * (1.0 - o.factor);
                }
            }
            if spill <= 0.0 {
                continue;
            }
            let eligible: Vec<(usize, f64)> = (0..n)
                .filter(|&d| d != origin && active.iter().all(|o| o.acting != d))
                .map(|d| (d, baseline.get(day, origin, d)))
                .filter(|(_, f)| *f > 0.0)
                .collect();
            let weight: f64 = eligible.iter().map(|(_, f)| f).sum();
            if weight <= 0.0 {
                log::info!(
                    "day {day}: every destination of region #{origin} restricts it; {spill:.1} travellers dropped"
                );
                outcome.dropped += spill;
                outcome.full_coordination.push((day, origin));
                continue;
            }
            for (d, f) in eligible {
                let v = out.get(day, origin, d) + spill * f / weight;
                out.set(day, origin, d, v);
            }
            outcome.redistributed += spill;
        }
    }
    Ok((out, outcome))
}

/// Destination `acting` screens arrivals from `origin` for `window_days`
/// days from `start_day`, catching a fraction `eta` of travelling E and I.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TisOrder {
    pub acting: usize,
    pub origin: usize,
    pub start_day: usize,
    pub window_days: usize,
    pub eta: f64,
}

/// Expands screening orders into the per-day calendar used by the simulator.
/// Mobility volumes are untouched.
pub fn compile_tis(orders: &[TisOrder]) -> Result<ScreeningCalendar, PolicyError> {
    for o in orders {
        if !(0.0..=1.0).contains(&o.eta) {
            return Err(PolicyError::InvalidOrder(format!(
                "detection efficacy {} outside [0, 1]",
                o.eta
            )));
        }
        if o.window_days == 0 || o.acting == o.origin {
            return Err(PolicyError::InvalidOrder(format!("{o:?}")));
        }
    }
    check_overlaps(
        orders,
        |o| (o.acting, o.start_day, o.window_days),
        "screening",
    )?;
    let mut cal = ScreeningCalendar::new();
    for o in orders {
        for day in o.start_day..o.start_day + o.window_days {
            cal.add(
                day,
                ScreeningRule {
                    origin: o.origin,
                    destination: o.acting,
                    eta: o.eta,
                },
            );
        }
    }
    Ok(cal)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PolicyType {
    StrictFirst,
    RelaxedFirst,
    Balanced,
}

impl PolicyType {
    pub const ALL: [PolicyType; 3] = [Self::StrictFirst, Self::RelaxedFirst, Self::Balanced];

    pub fn label(&self) -> &'static str {
        match self {
            Self::StrictFirst => "strict_first",
            Self::RelaxedFirst => "relaxed_first",
            Self::Balanced => "balanced",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.label() == s)
    }
}

impl fmt::Display for PolicyType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Lengths of the early / middle / late phases; remainders go to the
/// earlier phases (6 → 2,2,2; 8 → 3,3,2; 4 → 2,1,1).
pub fn phase_lengths(weeks: usize) -> Result<[usize; 3], PolicyError> {
    if weeks < 3 {
        return Err(PolicyError::WrongHorizon(weeks));
    }
    let base = weeks / 3;
    let rem = weeks % 3;
    Ok([0, 1, 2].map(|k| base + usize::from(k < rem)))
}

/// Share of the cycle's inflow in each phase.
pub fn phase_shares(allocation: &TirAllocation) -> Result<[f64; 3], PolicyError> {
    let lens = phase_lengths(allocation.weeks())?;
    let p = allocation.fractions();
    let mut shares = [0.0; 3];
    let mut at = 0;
    for (k, len) in lens.iter().enumerate() {
        shares[k] = p[at..at + len].iter().sum();
        at += len;
    }
    Ok(shares)
}

const STRICT_EARLY_MAX: f64 = 0.3;
const LATE_HIGH_MIN: f64 = 0.4;
const RELAXED_EARLY_MIN: f64 = 0.4;
const LATE_LOW_MAX: f64 = 0.3;
/// Slack on the inclusive thresholds so shares summed in floating point
/// land on the intended side.
const THRESHOLD_TOL: f64 = 1e-12;

/// Strict-first when early ≤ 0.3 and late ≥ 0.4, relaxed-first when
/// early ≥ 0.4 and late ≤ 0.3, balanced otherwise.
pub fn classify_shares(shares: [f64; 3]) -> PolicyType {
    let [early, _, late] = shares;
    let le = |x: f64, t: f64| x <= t + THRESHOLD_TOL;
    let ge = |x: f64, t: f64| x >= t - THRESHOLD_TOL;
    if le(early, STRICT_EARLY_MAX) && ge(late, LATE_HIGH_MIN) {
        PolicyType::StrictFirst
    } else if ge(early, RELAXED_EARLY_MIN) && le(late, LATE_LOW_MAX) {
        PolicyType::RelaxedFirst
    } else {
        PolicyType::Balanced
    }
}

pub fn classify_policy(allocation: &TirAllocation) -> Result<PolicyType, PolicyError> {
    Ok(classify_shares(phase_shares(allocation)?))
}

/// One applied decision, as written to the policy log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyLogEntry {
    pub cycle: usize,
    pub acting: String,
    pub origin: String,
    pub action_type: Strategy,
    /// TIR: `p1;p2;...`; SIS: the flow factor; TIS: the screening fraction.
    pub parameters: String,
    pub label: Option<PolicyType>,
}

impl PolicyLogEntry {
    /// Weekly fractions of a TIR entry.
    pub fn fractions(&self) -> Option<Vec<f64>> {
        if self.action_type != Strategy::Tir {
            return None;
        }
        self.parameters
            .split(';')
            .map(|p| p.trim().parse::<f64>().ok())
            .collect()
    }
}
