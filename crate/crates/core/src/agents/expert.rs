//! Rule-based baseline policy.
//!
//! Each origin gets a risk score `ir_growth × projected inflow`, where
//! `ir_growth` is the origin's 7-over-7-day incidence ratio. Relative to the
//! mean score:
//!
//! * score ≥ 1.5 × mean → strict-first template: every early-phase week at
//!   0.05, the rest spread with linearly increasing weights;
//! * score ≤ 0.5 × mean → relaxed-first template (the strict one reversed);
//! * otherwise uniform.
//!
//! SIS and TIS pick the highest-scoring origin, lowest index on ties.

use std::collections::BTreeMap;

use super::observation::Observation;
use super::PolicyAction;
use crate::policy::{phase_lengths, TirAllocation};
use crate::scenario::Strategy;

pub const HIGH_RISK_RATIO: f64 = 1.5;
pub const LOW_RISK_RATIO: f64 = 0.5;
pub const EARLY_FLOOR: f64 = 0.05;
/// Early-phase total is kept at or below this so the template still
/// classifies as strict-first for long horizons.
const EARLY_CAP: f64 = 0.25;

/// Strict-first template for `weeks` weeks (at least 3).
pub fn strict_template(weeks: usize) -> TirAllocation {
    let early = phase_lengths(weeks).map_or(1, |p| p[0]).min(weeks - 1);
    let floor = EARLY_FLOOR.min(EARLY_CAP / early as f64);
    let rest = 1.0 - floor * early as f64;
    let later = weeks - early;
    let weight_sum = (later * (later + 1)) as f64 / 2.0;
    let mut v = vec![floor; early];
    v.extend((1..=later).map(|k| rest * k as f64 / weight_sum));
    TirAllocation::from_normalized(v)
}

pub fn relaxed_template(weeks: usize) -> TirAllocation {
    strict_template(weeks).reversed()
}

/// Risk score per origin, in observation order.
pub fn risk_scores(obs: &Observation) -> Vec<(usize, f64)> {
    obs.inflows
        .iter()
        .map(|f| {
            let growth = obs.summary(f.origin).map_or(1.0, |s| s.ir_growth);
            (f.origin, growth * f.projected_total)
        })
        .collect()
}

pub fn expert_heuristic(obs: &Observation) -> PolicyAction {
    let scores = risk_scores(obs);
    match obs.strategy {
        Strategy::Tir => {
            let weeks = obs.horizon_weeks;
            let mean = scores.iter().map(|s| s.1).sum::<f64>() / scores.len().max(1) as f64;
            let all_equal = scores
                .iter()
                .all(|s| (s.1 - mean).abs() <= 1e-12 * mean.abs().max(1.0));
            let allocations: BTreeMap<usize, TirAllocation> = scores
                .iter()
                .map(|(o, s)| {
                    let alloc = if all_equal || weeks < 3 {
                        TirAllocation::uniform(weeks)
                    } else if *s >= HIGH_RISK_RATIO * mean {
                        strict_template(weeks)
                    } else if *s <= LOW_RISK_RATIO * mean {
                        relaxed_template(weeks)
                    } else {
                        TirAllocation::uniform(weeks)
                    };
                    (*o, alloc)
                })
                .collect();
            PolicyAction::Tir { allocations }
        }
        Strategy::Sis | Strategy::Tis => {
            let mut best: Option<(usize, f64)> = None;
            for (o, s) in &scores {
                if best.is_none_or(|(bo, bs)| *s > bs || (*s == bs && *o < bo)) {
                    best = Some((*o, *s));
                }
            }
            match (best, obs.strategy) {
                (None, _) => PolicyAction::NoOp,
                (Some((origin, _)), Strategy::Sis) => PolicyAction::Sis { origin },
                (Some((origin, _)), _) => PolicyAction::Tis { origin },
            }
        }
    }
}
