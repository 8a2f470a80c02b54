//! Discrete-time SEIQRD metapopulation dynamics with mobility coupling.
//!
//! One call to [`step`] advances every region by one day. All right-hand
//! sides are evaluated from day-`t` values and committed together. S, E, I
//! and R travel in proportion to their share of the origin's living
//! population; Q and D never travel.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::{CompartmentState, EpiParams, MobilitySchedule, Rates, ScenarioConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("region #{region} has no living population on day {day}")]
    DegenerateRegion { region: usize, day: usize },
    #[error("numerical instability on day {day}: region #{region} {compartment} fell to {value}")]
    Instability {
        region: usize,
        day: usize,
        compartment: &'static str,
        value: f64,
    },
    #[error("no mobility data for day {day}")]
    MissingFlows { day: usize },
    #[error("state vector has {found} regions, expected {expected}")]
    RegionCount { expected: usize, found: usize },
}

/// `λ = β_I·I/N + β_Q·Q/N` on the living population.
pub fn force_of_infection(state: &CompartmentState, rates: &Rates) -> Result<f64, DynamicsError> {
    let n = state.living();
    if n <= 0.0 {
        return Err(DynamicsError::DegenerateRegion { region: 0, day: 0 });
    }
    Ok(rates.beta_i * state.i / n + rates.beta_q * state.q / n)
}

/// Travellers in E and I from `origin` to `destination` are moved to the
/// destination's Q at rate `eta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScreeningRule {
    pub origin: usize,
    pub destination: usize,
    pub eta: f64,
}

/// Day-indexed screening rules consumed by [`step`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScreeningCalendar {
    rules: BTreeMap<usize, Vec<ScreeningRule>>,
}

impl ScreeningCalendar {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, day: usize, rule: ScreeningRule) {
        self.rules.entry(day).or_default().push(rule);
    }

    pub fn rules_on(&self, day: usize) -> &[ScreeningRule] {
        self.rules.get(&day).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn merge(&mut self, other: &ScreeningCalendar) {
        for (day, rules) in &other.rules {
            self.rules.entry(*day).or_default().extend(rules.iter().copied());
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rules.values().all(Vec::is_empty)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &ScreeningRule)> {
        self.rules
            .iter()
            .flat_map(|(day, rules)| rules.iter().map(move |r| (*day, r)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub states: Vec<CompartmentState>,
    /// Newly confirmed per region: `δ·I` plus screened arrivals.
    pub new_confirmed: Vec<f64>,
    /// Regions whose outflows were scaled down this day.
    pub capped: Vec<usize>,
}

/// Advances all regions by one day.
///
/// `flows` is the row-major `n×n` matrix for the day (row = origin).
pub fn step(
    states: &[CompartmentState],
    flows: &[f64],
    rates: &[Rates],
    screening: &[ScreeningRule],
    day: usize,
) -> Result<StepOutput, DynamicsError> {
    let n = states.len();
    if flows.len() != n * n {
        return Err(DynamicsError::MissingFlows { day });
    }
    if rates.len() != n {
        return Err(DynamicsError::RegionCount {
            expected: n,
            found: rates.len(),
        });
    }

    let living: Vec<f64> = states.iter().map(CompartmentState::living).collect();
    let mut lambda = Vec::with_capacity(n);
    for (region, (state, r)) in states.iter().zip(rates).enumerate() {
        let l = force_of_infection(state, r)
            .map_err(|_| DynamicsError::DegenerateRegion { region, day })?;
        lambda.push(l);
    }

    // Per-origin outflow scaling so no compartment is emptied past zero.
    let mut scale = vec![1.0; n];
    let mut capped = Vec::new();
    for j in 0..n {
        let out: f64 = (0..n).filter(|&i| i != j).map(|i| flows[j * n + i]).sum();
        if out <= 0.0 {
            continue;
        }
        let frac = out / living[j];
        let st = &states[j];
        let r = &rates[j];
        let remaining = [
            (st.s, st.s * (1.0 - lambda[j])),
            (st.e, st.e * (1.0 - r.sigma)),
            (st.i, st.i * (1.0 - r.delta - r.gamma - r.mu)),
            (st.r, st.r),
        ];
        let mut s = 1.0_f64;
        for (mass, rem) in remaining {
            let leaving = frac * mass;
            if mass > 0.0 && leaving > rem {
                s = s.min(rem.max(0.0) / leaving);
            }
        }
        if s < 1.0 {
            log::debug!(
                "day {day}: outflow from region #{j} exceeds available mass, scaling by {s:.6}"
            );
            scale[j] = s;
            capped.push(j);
        }
    }

    let mut next: Vec<CompartmentState> = Vec::with_capacity(n);
    let mut new_confirmed = vec![0.0; n];
    for (idx, (st, r)) in states.iter().zip(rates).enumerate() {
        let infections = lambda[idx] * st.s;
        let progression = r.sigma * st.e;
        let detection = r.delta * st.i;
        next.push(CompartmentState {
            s: st.s - infections,
            e: st.e + infections - progression,
            i: st.i + progression - (r.delta + r.gamma + r.mu) * st.i,
            q: st.q + detection - (r.gamma + r.mu) * st.q,
            r: st.r + r.gamma * st.i + r.gamma * st.q,
            d: st.d + r.mu * st.i + r.mu * st.q,
        });
        new_confirmed[idx] = detection;
    }

    for j in 0..n {
        for i in 0..n {
            if i == j {
                continue;
            }
            let m = flows[j * n + i] * scale[j];
            if m == 0.0 {
                continue;
            }
            let share = m / living[j];
            let src = &states[j];
            let (ms, me, mi, mr) = (src.s * share, src.e * share, src.i * share, src.r * share);
            let eta = screening
                .iter()
                .filter(|rule| rule.origin == j && rule.destination == i)
                .map(|rule| rule.eta)
                .fold(0.0_f64, f64::max);

            let from = &mut next[j];
            from.s -= ms;
            from.e -= me;
            from.i -= mi;
            from.r -= mr;

            let screened = eta * (me + mi);
            let to = &mut next[i];
            to.s += ms;
            to.r += mr;
            to.e += me * (1.0 - eta);
            to.i += mi * (1.0 - eta);
            to.q += screened;
            new_confirmed[i] += screened;
        }
    }

    for (region, st) in next.iter_mut().enumerate() {
        let tol = 1e-9 * living[region].max(1.0);
        let fields: [(&'static str, &mut f64); 6] = [
            ("S", &mut st.s),
            ("E", &mut st.e),
            ("I", &mut st.i),
            ("Q", &mut st.q),
            ("R", &mut st.r),
            ("D", &mut st.d),
        ];
        for (compartment, v) in fields {
            if !v.is_finite() || *v < -tol {
                return Err(DynamicsError::Instability {
                    region,
                    day,
                    compartment,
                    value: *v,
                });
            }
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }

    Ok(StepOutput {
        states: next,
        new_confirmed,
        capped,
    })
}

/// Daily snapshots of every region, `days + 1` entries long.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub start_date: NaiveDate,
    /// `states[day][region]`.
    pub states: Vec<Vec<CompartmentState>>,
    /// Cumulative confirmed (cumulative inflow into Q), `confirmed[day][region]`.
    pub confirmed: Vec<Vec<f64>>,
    /// The post-policy schedule actually applied.
    pub realized: MobilitySchedule,
}

impl Trajectory {
    /// Number of simulated transitions.
    pub fn days(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn regions(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn state(&self, day: usize, region: usize) -> &CompartmentState {
        &self.states[day][region]
    }

    pub fn date(&self, day: usize) -> NaiveDate {
        self.start_date + chrono::Duration::days(day as i64)
    }

    /// Per-region series of one compartment or counter.
    pub fn series(&self, region: usize, pick: impl Fn(&CompartmentState) -> f64) -> Vec<f64> {
        self.states.iter().map(|s| pick(&s[region])).collect()
    }

    pub fn confirmed_series(&self, region: usize) -> Vec<f64> {
        self.confirmed.iter().map(|c| c[region]).collect()
    }

    /// Daily new confirmed cases, `confirmed[t] − confirmed[t−1]` for `t ≥ 1`.
    pub fn new_confirmed(&self, region: usize) -> Vec<f64> {
        self.confirmed
            .windows(2)
            .map(|w| (w[1][region] - w[0][region]).max(0.0))
            .collect()
    }

    pub fn terminal_confirmed(&self, region: usize) -> f64 {
        self.confirmed.last().map_or(0.0, |c| c[region])
    }

    pub fn terminal_deaths(&self, region: usize) -> f64 {
        self.states.last().map_or(0.0, |s| s[region].d)
    }

    pub fn global_total(&self, day: usize) -> f64 {
        self.states[day].iter().map(CompartmentState::total).sum()
    }
}

/// Incremental simulator: lets the episode loop interleave decisions with
/// simulation while producing exactly the trajectory [`simulate`] would.
#[derive(Debug, Clone)]
pub struct Simulator<'a> {
    params: &'a EpiParams,
    start_date: NaiveDate,
    states: Vec<Vec<CompartmentState>>,
    confirmed: Vec<Vec<f64>>,
    capped_days: usize,
}

impl<'a> Simulator<'a> {
    pub fn new(config: &'a ScenarioConfig) -> Self {
        Self::from_parts(
            &config.params,
            config.start_date,
            config.initial.clone(),
            config.initial_confirmed.clone(),
        )
    }

    pub fn from_parts(
        params: &'a EpiParams,
        start_date: NaiveDate,
        initial: Vec<CompartmentState>,
        initial_confirmed: Vec<f64>,
    ) -> Self {
        Self {
            params,
            start_date,
            states: vec![initial],
            confirmed: vec![initial_confirmed],
            capped_days: 0,
        }
    }

    /// Days on which some region's outflow had to be scaled down.
    pub fn capped_days(&self) -> usize {
        self.capped_days
    }

    /// Current day index (number of completed steps).
    pub fn day(&self) -> usize {
        self.states.len() - 1
    }

    pub fn current(&self) -> &[CompartmentState] {
        self.states.last().expect("non-empty")
    }

    pub fn advance(
        &mut self,
        flows: &MobilitySchedule,
        screening: &ScreeningCalendar,
        days: usize,
    ) -> Result<(), DynamicsError> {
        for _ in 0..days {
            let day = self.day();
            if day >= flows.days() {
                return Err(DynamicsError::MissingFlows { day });
            }
            let rates = self.params.rates_on(day);
            let out = step(
                self.current(),
                flows.day(day),
                &rates,
                screening.rules_on(day),
                day,
            )?;
            if !out.capped.is_empty() {
                self.capped_days += 1;
            }
            let prev = self.confirmed.last().expect("non-empty");
            let confirmed = prev
                .iter()
                .zip(&out.new_confirmed)
                .map(|(c, n)| c + n)
                .collect();
            self.states.push(out.states);
            self.confirmed.push(confirmed);
        }
        Ok(())
    }

    /// Snapshot of the trajectory so far.
    pub fn trajectory(&self, realized: &MobilitySchedule) -> Trajectory {
        Trajectory {
            start_date: self.start_date,
            states: self.states.clone(),
            confirmed: self.confirmed.clone(),
            realized: realized.truncated(self.day()),
        }
    }

    pub fn finish(self, realized: &MobilitySchedule) -> Trajectory {
        let days = self.day();
        Trajectory {
            start_date: self.start_date,
            states: self.states,
            confirmed: self.confirmed,
            realized: realized.truncated(days),
        }
    }
}

/// Runs the scenario for `config.days` under the given realized flows and
/// screening calendar.
pub fn simulate(
    config: &ScenarioConfig,
    realized_flows: &MobilitySchedule,
    screening: &ScreeningCalendar,
) -> Result<Trajectory, DynamicsError> {
    let mut sim = Simulator::new(config);
    sim.advance(realized_flows, screening, config.days)?;
    Ok(sim.finish(realized_flows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::ScenarioBuilder;
    use proptest::prelude::*;

    fn rates(beta_i: f64, beta_q: f64, sigma: f64, delta: f64, gamma: f64, mu: f64) -> Rates {
        Rates {
            beta_i,
            beta_q,
            sigma,
            delta,
            gamma,
            mu,
        }
    }

    #[test]
    fn foi_zero_without_infectious_mass() {
        let st = CompartmentState::new(1000.0, 5.0, 0.0, 0.0, 3.0, 1.0);
        assert_eq!(
            force_of_infection(&st, &rates(0.9, 0.5, 0.1, 0.1, 0.1, 0.0)).unwrap(),
            0.0
        );
    }

    #[test]
    fn foi_hand_values() {
        let st = CompartmentState::new(900.0, 0.0, 100.0, 0.0, 0.0, 0.0);
        let l = force_of_infection(&st, &rates(0.3, 0.1, 0.0, 0.0, 0.0, 0.0)).unwrap();
        assert!((l - 0.03).abs() < 1e-15);

        let st = CompartmentState::new(900.0, 0.0, 0.0, 100.0, 0.0, 0.0);
        let l = force_of_infection(&st, &rates(0.3, 0.1, 0.0, 0.0, 0.0, 0.0)).unwrap();
        assert!((l - 0.01).abs() < 1e-15);
    }

    #[test]
    fn foi_degenerate_region() {
        let st = CompartmentState::new(0.0, 0.0, 0.0, 0.0, 0.0, 7.0);
        assert!(force_of_infection(&st, &Rates::zero()).is_err());
    }

    #[test]
    fn zero_rates_and_flows_is_fixed_point() {
        let states = vec![
            CompartmentState::new(900.0, 10.0, 20.0, 5.0, 50.0, 15.0),
            CompartmentState::new(400.0, 1.0, 2.0, 3.0, 4.0, 5.0),
        ];
        let out = step(&states, &[0.0; 4], &[Rates::zero(); 2], &[], 0).unwrap();
        assert_eq!(out.states, states);
    }

    #[test]
    fn single_region_infection_step() {
        let states = vec![CompartmentState::new(990.0, 0.0, 10.0, 0.0, 0.0, 0.0)];
        let out = step(
            &states,
            &[0.0],
            &[rates(0.5, 0.0, 0.0, 0.0, 0.0, 0.0)],
            &[],
            0,
        )
        .unwrap();
        let s = out.states[0];
        assert!((s.s - 985.05).abs() < 1e-9);
        assert!((s.e - 4.95).abs() < 1e-9);
        assert!((s.i - 10.0).abs() < 1e-12);
    }

    #[test]
    fn proportional_share_migration() {
        let states = vec![
            CompartmentState::new(800.0, 100.0, 100.0, 0.0, 0.0, 0.0),
            CompartmentState::new(1000.0, 0.0, 0.0, 0.0, 0.0, 0.0),
        ];
        let flows = [0.0, 100.0, 0.0, 0.0];
        let out = step(&states, &flows, &[Rates::zero(); 2], &[], 0).unwrap();
        let (a, b) = (out.states[0], out.states[1]);
        assert!((b.s - 1080.0).abs() < 1e-9);
        assert!((b.e - 10.0).abs() < 1e-9);
        assert!((b.i - 10.0).abs() < 1e-9);
        assert!((a.s - 720.0).abs() < 1e-9);
        assert!((a.e - 90.0).abs() < 1e-9);
        assert!((a.i - 90.0).abs() < 1e-9);
        for k in 0..6 {
            let before = states[0].as_array()[k] + states[1].as_array()[k];
            let after = a.as_array()[k] + b.as_array()[k];
            assert!((before - after).abs() < 1e-9);
        }
    }

    #[test]
    fn screening_diverts_e_and_i_into_q() {
        // E share 0.1 and I share 0.1 on a flow of 100 → 20 screened.
        let states = vec![
            CompartmentState::new(800.0, 100.0, 100.0, 0.0, 0.0, 0.0),
            CompartmentState::new(1000.0, 0.0, 0.0, 0.0, 0.0, 0.0),
        ];
        let flows = [0.0, 100.0, 0.0, 0.0];
        let rule = ScreeningRule {
            origin: 0,
            destination: 1,
            eta: 1.0,
        };
        let out = step(&states, &flows, &[Rates::zero(); 2], &[rule], 0).unwrap();
        let b = out.states[1];
        assert!((b.q - 20.0).abs() < 1e-9);
        assert_eq!(b.e, 0.0);
        assert_eq!(b.i, 0.0);
        assert!((b.s - 1080.0).abs() < 1e-9);
        assert!((out.new_confirmed[1] - 20.0).abs() < 1e-9);
    }

    #[test]
    fn eta_zero_screening_has_no_effect() {
        let states = vec![
            CompartmentState::new(800.0, 100.0, 100.0, 10.0, 0.0, 0.0),
            CompartmentState::new(1000.0, 5.0, 1.0, 0.0, 0.0, 0.0),
        ];
        let flows = [0.0, 100.0, 30.0, 0.0];
        let r = [rates(0.4, 0.1, 0.2, 0.1, 0.1, 0.01); 2];
        let plain = step(&states, &flows, &r, &[], 0).unwrap();
        let rule = ScreeningRule {
            origin: 0,
            destination: 1,
            eta: 0.0,
        };
        let screened = step(&states, &flows, &r, &[rule], 0).unwrap();
        assert_eq!(plain.states, screened.states);
    }

    #[test]
    fn oversized_outflow_is_capped() {
        let states = vec![
            CompartmentState::new(100.0, 0.0, 0.0, 0.0, 0.0, 0.0),
            CompartmentState::new(100.0, 0.0, 0.0, 0.0, 0.0, 0.0),
        ];
        let flows = [0.0, 500.0, 0.0, 0.0];
        let out = step(&states, &flows, &[Rates::zero(); 2], &[], 0).unwrap();
        assert_eq!(out.capped, vec![0]);
        assert!(out.states[0].s.abs() < 1e-12);
        assert!((out.states[1].s - 200.0).abs() < 1e-9);
    }

    #[test]
    fn zero_day_horizon_returns_initial_state() {
        let cfg = ScenarioBuilder::new("z")
            .region(
                "AA",
                CompartmentState::new(10.0, 1.0, 1.0, 0.0, 0.0, 0.0),
                rates(0.3, 0.1, 0.2, 0.1, 0.1, 0.0),
            )
            .days(0)
            .horizon_weeks(1)
            .build_unchecked();
        let traj = simulate(&cfg, &cfg.baseline, &ScreeningCalendar::new()).unwrap();
        assert_eq!(traj.states, vec![cfg.initial.clone()]);
    }

    #[test]
    fn constant_trajectory_without_rates_or_flows() {
        let cfg = ScenarioBuilder::new("z")
            .region(
                "AA",
                CompartmentState::new(10.0, 1.0, 1.0, 2.0, 0.0, 0.0),
                Rates::zero(),
            )
            .region(
                "BB",
                CompartmentState::new(20.0, 0.0, 3.0, 0.0, 0.0, 1.0),
                Rates::zero(),
            )
            .days(30)
            .build_unchecked();
        let traj = simulate(&cfg, &cfg.baseline, &ScreeningCalendar::new()).unwrap();
        assert_eq!(traj.states.len(), 31);
        assert!(traj.states.iter().all(|s| *s == cfg.initial));
    }

    #[test]
    fn incremental_matches_batch() {
        let cfg = ScenarioBuilder::new("inc")
            .region(
                "AA",
                CompartmentState::new(5000.0, 20.0, 10.0, 0.0, 0.0, 0.0),
                rates(0.4, 0.1, 0.25, 0.1, 0.1, 0.01),
            )
            .region(
                "BB",
                CompartmentState::new(8000.0, 0.0, 0.0, 0.0, 0.0, 0.0),
                rates(0.3, 0.05, 0.2, 0.15, 0.1, 0.005),
            )
            .constant_flows(vec![vec![0.0, 40.0], vec![60.0, 0.0]])
            .days(50)
            .build_unchecked();
        let batch = simulate(&cfg, &cfg.baseline, &ScreeningCalendar::new()).unwrap();
        let mut sim = Simulator::new(&cfg);
        for chunk in [7, 13, 30] {
            sim.advance(&cfg.baseline, &ScreeningCalendar::new(), chunk)
                .unwrap();
        }
        assert_eq!(sim.finish(&cfg.baseline), batch);
    }

    fn arb_state() -> impl Strategy<Value = CompartmentState> {
        (
            100.0..10_000.0f64,
            0.0..100.0f64,
            0.0..100.0f64,
            0.0..100.0f64,
            0.0..500.0f64,
            0.0..50.0f64,
        )
            .prop_map(|(s, e, i, q, r, d)| CompartmentState::new(s, e, i, q, r, d))
    }

    fn arb_rates() -> impl Strategy<Value = Rates> {
        (
            0.0..1.0f64,
            0.0..1.0f64,
            1.0 / 14.0..0.5f64,
            0.0..0.5f64,
            1.0 / 30.0..1.0 / 3.0,
            0.0..0.05f64,
        )
            .prop_map(|(b, ratio, sigma, delta, gamma, mu)| Rates {
                beta_i: b,
                beta_q: b * ratio,
                sigma,
                delta,
                gamma,
                mu,
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn population_is_conserved(
            states in proptest::collection::vec(arb_state(), 3),
            r in proptest::collection::vec(arb_rates(), 3),
            flows in proptest::collection::vec(0.0..200.0f64, 9),
        ) {
            let mut flows = flows;
            for k in 0..3 { flows[k * 3 + k] = 0.0; }
            let mut cur = states.clone();
            let total0: f64 = cur.iter().map(CompartmentState::total).sum();
            let mut cum_d: Vec<f64> = cur.iter().map(|s| s.d).collect();
            for day in 0..40 {
                cur = step(&cur, &flows, &r, &[], day).unwrap().states;
                for (k, s) in cur.iter().enumerate() {
                    prop_assert!(s.d >= cum_d[k] - 1e-12);
                    cum_d[k] = s.d;
                }
            }
            let total: f64 = cur.iter().map(CompartmentState::total).sum();
            prop_assert!(((total - total0) / total0).abs() < 1e-6);
        }

        #[test]
        fn no_mobility_decouples_regions(
            states in proptest::collection::vec(arb_state(), 3),
            r in proptest::collection::vec(arb_rates(), 3),
        ) {
            let mut joint = states.clone();
            let mut solo: Vec<CompartmentState> = states.clone();
            for day in 0..30 {
                joint = step(&joint, &[0.0; 9], &r, &[], day).unwrap().states;
                for k in 0..3 {
                    solo[k] = step(&solo[k..k + 1], &[0.0], &r[k..k + 1], &[], day).unwrap().states[0];
                }
            }
            prop_assert_eq!(joint, solo);
        }

        #[test]
        fn quarantined_and_dead_never_travel(
            states in proptest::collection::vec(arb_state(), 2),
            f01 in 0.0..500.0f64,
            f10 in 0.0..500.0f64,
        ) {
            let r = [Rates::zero(); 2];
            let out = step(&states, &[0.0, f01, f10, 0.0], &r, &[], 0).unwrap();
            for k in 0..2 {
                prop_assert_eq!(out.states[k].q, states[k].q);
                prop_assert_eq!(out.states[k].d, states[k].d);
            }
        }
    }
}
