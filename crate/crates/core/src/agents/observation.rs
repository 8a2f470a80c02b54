//! What an agent sees at the start of a cycle.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::dynamics::Trajectory;
use crate::rt::{estimate_rt, RtConfig, SerialInterval};
use crate::scenario::{CompartmentState, Cycle, MobilitySchedule, PolicySettings, ScenarioConfig, Strategy};

/// Trailing window for historical averages.
pub const HISTORY_DAYS: usize = 21;
/// Half-window for the incidence trend ratio.
pub const TREND_DAYS: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub region: usize,
    pub code: String,
    pub name: String,
    pub state: CompartmentState,
    /// Mean daily incidence rate over the history window.
    pub ir: f64,
    /// Mean daily death rate over the history window.
    pub dr: f64,
    /// Active case rate on the observation day.
    pub acr: f64,
    /// Mean IR of the last 7 days over the mean IR of the 7 days before.
    pub ir_growth: f64,
    pub rt: Option<f64>,
}

impl RegionSummary {
    /// Sign of the recent IR trend.
    pub fn trend_sign(&self) -> i8 {
        if self.ir_growth > 1.0 + 1e-6 {
            1
        } else if self.ir_growth < 1.0 - 1e-6 {
            -1
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OriginInflow {
    pub origin: usize,
    pub code: String,
    pub name: String,
    pub historical_daily: f64,
    pub projected_daily: f64,
    pub projected_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub region: usize,
    pub code: String,
    pub name: String,
    pub cycle: usize,
    /// Simulation day the cycle starts on.
    pub day: usize,
    pub date: NaiveDate,
    pub strategy: Strategy,
    pub policy: PolicySettings,
    pub horizon_weeks: usize,
    pub horizon_days: usize,
    /// Days actually averaged for the historical window.
    pub history_days: usize,
    pub short_history: bool,
    pub population: f64,
    pub local: RegionSummary,
    pub neighbors: Vec<RegionSummary>,
    pub inflows: Vec<OriginInflow>,
}

impl Observation {
    pub fn origins(&self) -> Vec<usize> {
        self.inflows.iter().map(|f| f.origin).collect()
    }

    pub fn summary(&self, region: usize) -> Option<&RegionSummary> {
        std::iter::once(&self.local)
            .chain(&self.neighbors)
            .find(|s| s.region == region)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn summarize(traj: &Trajectory, config: &ScenarioConfig, region: usize, day: usize) -> RegionSummary {
    let lo = day.saturating_sub(HISTORY_DAYS);
    let daily = |t: usize, v: f64| {
        let n = traj.state(t, region).living();
        if n > 0.0 {
            v / n
        } else {
            0.0
        }
    };
    let ir: Vec<f64> = (lo..day)
        .map(|t| daily(t, traj.confirmed[t + 1][region] - traj.confirmed[t][region]))
        .collect();
    let dr: Vec<f64> = (lo..day)
        .map(|t| daily(t, traj.state(t + 1, region).d - traj.state(t, region).d))
        .collect();
    let half = (ir.len() / 2).min(TREND_DAYS);
    let ir_growth = if half == 0 {
        1.0
    } else {
        let recent = mean(&ir[ir.len() - half..]);
        let prior = mean(&ir[ir.len() - 2 * half..ir.len() - half]);
        (recent + 1e-12) / (prior + 1e-12)
    };
    let state = *traj.state(day, region);
    let living = state.living();
    let incidence = traj.new_confirmed(region);
    let rt = estimate_rt(&incidence[..day], &SerialInterval::default(), &RtConfig::default())
        .ok()
        .and_then(|s| s.last_mean());
    let r = config.regions.get(region);
    RegionSummary {
        region,
        code: r.code.clone(),
        name: r.name.clone(),
        state,
        ir: mean(&ir),
        dr: mean(&dr),
        acr: if living > 0.0 { state.q / living } else { 0.0 },
        ir_growth,
        rt,
    }
}

/// Builds the observation for `region` at the start of `cycle`.
///
/// `traj` must cover days `0..=cycle.start` with its realized flows; the
/// projection is read from `projected` over the cycle window. Origins are
/// regions with any inbound flow in either window.
pub fn build_observation(
    traj: &Trajectory,
    projected: &MobilitySchedule,
    config: &ScenarioConfig,
    region: usize,
    cycle_index: usize,
    cycle: &Cycle,
) -> Observation {
    let day = cycle.start;
    let lo = day.saturating_sub(HISTORY_DAYS);
    let history_days = day - lo;
    let end = cycle.end().min(projected.days());
    let n = config.regions.len();
    let inflows = (0..n)
        .filter(|o| *o != region)
        .filter_map(|o| {
            let hist = traj.realized.pair_total(o, region, lo..day);
            let total = projected.pair_total(o, region, day..end);
            if hist <= 0.0 && total <= 0.0 {
                return None;
            }
            let r = config.regions.get(o);
            Some(OriginInflow {
                origin: o,
                code: r.code.clone(),
                name: r.name.clone(),
                historical_daily: if history_days > 0 {
                    hist / history_days as f64
                } else {
                    0.0
                },
                projected_daily: total / cycle.days.max(1) as f64,
                projected_total: total,
            })
        })
        .collect();
    let local = summarize(traj, config, region, day);
    let neighbors = (0..n)
        .filter(|r| *r != region)
        .map(|r| summarize(traj, config, r, day))
        .collect();
    let r = config.regions.get(region);
    Observation {
        region,
        code: r.code.clone(),
        name: r.name.clone(),
        cycle: cycle_index,
        day,
        date: config.date(day),
        strategy: config.strategy,
        policy: config.policy.clone(),
        horizon_weeks: config.horizon_weeks,
        horizon_days: cycle.days,
        history_days,
        short_history: history_days < HISTORY_DAYS,
        population: local.state.living(),
        local,
        neighbors,
        inflows,
    }
}
