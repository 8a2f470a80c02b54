//! Fits per-region, piecewise-constant rates to observed cumulative series.
//!
//! Windows are fitted in order; each window starts from the state the
//! previous fitted windows produce (the first is seeded from observations).
//! Within a window the six rates of one region at a time are searched with
//! Nelder–Mead on the unit cube, holding the other regions fixed, for a few
//! sweeps. The loss compares simulated and observed daily new confirmed and
//! new deaths over the whole coupled system.

use argmin::core::{CostFunction, Executor, State, TerminationReason, TerminationStatus};
use argmin::solver::neldermead::NelderMead;
use chrono::NaiveDate;
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{DynamicsError, ScreeningCalendar, Simulator, Trajectory};
use crate::scenario::{CompartmentState, EpiParams, MobilitySchedule, RateStep, Rates, RegionSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("window too short: days {start}..{end}, at least {min} days needed")]
    WindowTooShort { start: usize, end: usize, min: usize },
    #[error("window days {start}..{end} exceed the {available} observed transitions")]
    WindowOutOfRange {
        start: usize,
        end: usize,
        available: usize,
    },
    #[error("non-finite loss")]
    NonFinite,
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Cumulative observed counts, `[region][day]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedSeries {
    pub regions: RegionSet,
    pub start: NaiveDate,
    pub confirmed: Vec<Vec<f64>>,
    pub deaths: Vec<Vec<f64>>,
    pub recovered: Vec<Vec<f64>>,
    /// Days that were missing from the source and forward-filled.
    pub filled: Vec<Vec<bool>>,
    /// Cumulative values lowered back to the running maximum.
    pub repairs: usize,
}

impl ObservedSeries {
    pub fn days(&self) -> usize {
        self.confirmed.first().map_or(0, Vec::len)
    }

    pub fn active(&self, region: usize, day: usize) -> f64 {
        (self.confirmed[region][day] - self.recovered[region][day] - self.deaths[region][day]).max(0.0)
    }

    /// Series a simulation would report: the cumulative confirmed counter,
    /// deaths, and recovered chosen so that active equals Q.
    pub fn from_trajectory(traj: &Trajectory, regions: &RegionSet) -> Self {
        let n = traj.regions();
        let confirmed: Vec<Vec<f64>> = (0..n).map(|r| traj.confirmed_series(r)).collect();
        let deaths: Vec<Vec<f64>> = (0..n).map(|r| traj.series(r, |s| s.d)).collect();
        let recovered = (0..n)
            .map(|r| {
                (0..=traj.days())
                    .map(|t| (confirmed[r][t] - deaths[r][t] - traj.state(t, r).q).max(0.0))
                    .collect()
            })
            .collect();
        Self {
            regions: regions.clone(),
            start: traj.start_date,
            filled: vec![vec![false; traj.days() + 1]; n],
            confirmed,
            deaths,
            recovered,
            repairs: 0,
        }
    }

    /// Multiplies every daily increment of confirmed and deaths by an
    /// independent factor drawn uniformly from `[1 − noise, 1 + noise]`.
    /// Recovered keeps its increments, clipped so active stays nonnegative.
    pub fn with_increment_noise(&self, noise: f64, seed: u64) -> Self {
        let mut out = self.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for r in 0..out.regions.len() {
            for series in [&mut out.confirmed[r], &mut out.deaths[r]] {
                let inc: Vec<f64> = series.windows(2).map(|w| w[1] - w[0]).collect();
                for (t, d) in inc.iter().enumerate() {
                    let factor = 1.0 + noise * (2.0 * rng.random::<f64>() - 1.0);
                    series[t + 1] = series[t] + d * factor;
                }
            }
            for t in 0..out.days() {
                let cap = out.confirmed[r][t] - out.deaths[r][t];
                out.recovered[r][t] = out.recovered[r][t].min(cap).max(0.0);
            }
        }
        out
    }
}

/// Search ranges. `ratio` is `β_Q / β_I`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub beta: (f64, f64),
    pub ratio: (f64, f64),
    pub sigma: (f64, f64),
    pub delta: (f64, f64),
    pub gamma: (f64, f64),
    pub mu: (f64, f64),
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            beta: (0.0, 1.0),
            ratio: (0.0, 0.99),
            sigma: (1.0 / 14.0, 0.5),
            delta: (0.0, 1.0),
            gamma: (1.0 / 30.0, 1.0 / 3.0),
            mu: (0.0, 0.05),
        }
    }
}

impl Bounds {
    fn ranges(&self) -> [(f64, f64); 6] {
        [self.beta, self.ratio, self.sigma, self.delta, self.gamma, self.mu]
    }

    /// Maps a point of the unit cube (clamped) to rates.
    pub fn to_rates(&self, u: &[f64]) -> Rates {
        let r = self.ranges();
        let x: Vec<f64> = u
            .iter()
            .zip(r)
            .map(|(v, (lo, hi))| lo + (hi - lo) * v.clamp(0.0, 1.0))
            .collect();
        Rates {
            beta_i: x[0],
            beta_q: x[0] * x[1],
            sigma: x[2],
            delta: x[3],
            gamma: x[4],
            mu: x[5],
        }
    }

    pub fn to_unit(&self, rates: &Rates) -> Vec<f64> {
        let ratio = if rates.beta_i > 0.0 {
            rates.beta_q / rates.beta_i
        } else {
            0.0
        };
        let x = [rates.beta_i, ratio, rates.sigma, rates.delta, rates.gamma, rates.mu];
        x.iter()
            .zip(self.ranges())
            .map(|(v, (lo, hi))| {
                if hi > lo {
                    ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
                } else {
                    0.0
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub bounds: Bounds,
    pub restarts: usize,
    pub max_iters: u64,
    pub sweeps: usize,
    pub death_weight: f64,
    /// Initial E as a multiple of initial active cases.
    pub exposed_factor: f64,
    /// Initial I as a multiple of initial active cases.
    pub infectious_factor: f64,
    pub min_window_days: usize,
    /// Iteration cap for the joint least-squares refinement.
    pub lm_iters: usize,
    /// The refinement stops once the relative cost decrease over the last
    /// few accepted steps falls below this.
    pub lm_tol: f64,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            bounds: Bounds::default(),
            restarts: 3,
            max_iters: 400,
            sweeps: 1,
            death_weight: 10.0,
            exposed_factor: 2.0,
            infectious_factor: 1.0,
            min_window_days: 14,
            lm_iters: 200,
            lm_tol: 1e-4,
            seed: 0,
        }
    }
}

/// Transitions `start..end` (day offsets into the observed series).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationWindow {
    pub start: usize,
    pub end: usize,
}

impl CalibrationWindow {
    pub fn days(&self) -> usize {
        self.end.saturating_sub(self.start)
    }
}

/// Consecutive windows of `len` days over `transitions` days; a short tail
/// is merged into the last window.
pub fn regular_windows(transitions: usize, len: usize) -> Vec<CalibrationWindow> {
    let len = len.max(1);
    let mut out = Vec::new();
    let mut start = 0;
    while start + len <= transitions {
        out.push(CalibrationWindow {
            start,
            end: start + len,
        });
        start += len;
    }
    match out.last_mut() {
        Some(last) => last.end = transitions,
        None if transitions > 0 => out.push(CalibrationWindow {
            start: 0,
            end: transitions,
        }),
        None => {}
    }
    out
}

/// Compartments seeded from observations on `day`: Q = active,
/// I = active × infectious_factor, E = active × exposed_factor, R and D
/// observed, S the remainder of the population.
pub fn seed_states(
    observed: &ObservedSeries,
    populations: &[f64],
    day: usize,
    cfg: &CalibrationConfig,
) -> Result<Vec<CompartmentState>, CalibrationError> {
    (0..observed.regions.len())
        .map(|r| {
            let q = observed.active(r, day);
            let i = q * cfg.infectious_factor;
            let e = q * cfg.exposed_factor;
            let rec = observed.recovered[r][day];
            let d = observed.deaths[r][day];
            let s = populations[r] - (e + i + q + rec + d);
            if s < 0.0 {
                return Err(CalibrationError::Input(format!(
                    "region {} population {} is smaller than its seeded compartments",
                    observed.regions.code(r),
                    populations[r]
                )));
            }
            Ok(CompartmentState::new(s, e, i, q, rec, d))
        })
        .collect()
}

/// Starting point for one window's simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowStart {
    pub states: Vec<CompartmentState>,
    pub confirmed: Vec<f64>,
}

fn check_window(
    observed: &ObservedSeries,
    flows: &MobilitySchedule,
    window: CalibrationWindow,
    min: usize,
) -> Result<(), CalibrationError> {
    if window.days() < min.max(1) {
        return Err(CalibrationError::WindowTooShort {
            start: window.start,
            end: window.end,
            min: min.max(1),
        });
    }
    let available = observed.days().saturating_sub(1).min(flows.days());
    if window.end > available {
        return Err(CalibrationError::WindowOutOfRange {
            start: window.start,
            end: window.end,
            available,
        });
    }
    Ok(())
}

fn simulate_window(
    rates: &[Rates],
    flows: &MobilitySchedule,
    window: CalibrationWindow,
    start: &WindowStart,
) -> Result<Trajectory, DynamicsError> {
    let params = EpiParams::per_region(rates.to_vec());
    let slice = flows.slice(window.start, window.days());
    let mut sim = Simulator::from_parts(
        &params,
        slice.start(),
        start.states.clone(),
        start.confirmed.clone(),
    );
    sim.advance(&slice, &ScreeningCalendar::new(), window.days())?;
    Ok(sim.finish(&slice))
}

fn sse(
    traj: &Trajectory,
    observed: &ObservedSeries,
    window: CalibrationWindow,
    death_weight: f64,
) -> f64 {
    let mut total = 0.0;
    for r in 0..traj.regions() {
        for k in 0..window.days() {
            let t = window.start + k;
            let sim_c = traj.confirmed[k + 1][r] - traj.confirmed[k][r];
            let obs_c = observed.confirmed[r][t + 1] - observed.confirmed[r][t];
            let sim_d = traj.state(k + 1, r).d - traj.state(k, r).d;
            let obs_d = observed.deaths[r][t + 1] - observed.deaths[r][t];
            total += (sim_c - obs_c).powi(2) + death_weight * (sim_d - obs_d).powi(2);
        }
    }
    total
}

fn residuals(
    traj: &Trajectory,
    observed: &ObservedSeries,
    window: CalibrationWindow,
    death_weight: f64,
    out: &mut Vec<f64>,
) {
    out.clear();
    let w = death_weight.sqrt();
    for r in 0..traj.regions() {
        for k in 0..window.days() {
            let t = window.start + k;
            let sim_c = traj.confirmed[k + 1][r] - traj.confirmed[k][r];
            let obs_c = observed.confirmed[r][t + 1] - observed.confirmed[r][t];
            let sim_d = traj.state(k + 1, r).d - traj.state(k, r).d;
            let obs_d = observed.deaths[r][t + 1] - observed.deaths[r][t];
            out.push(sim_c - obs_c);
            out.push(w * (sim_d - obs_d));
        }
    }
}

const LM_STALL_STEPS: usize = 10;

/// Solves `a x = b` in place by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|x, y| a[*x][col].abs().total_cmp(&a[*y][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    Some(x)
}

/// Joint Levenberg–Marquardt refinement of every region's unit-cube
/// parameters, with forward-difference Jacobians and steps projected back
/// into the cube. Returns the refined points and whether it met tolerance.
fn levenberg_marquardt(
    units: &mut [Vec<f64>],
    pinned: &[bool],
    observed: &ObservedSeries,
    flows: &MobilitySchedule,
    window: CalibrationWindow,
    start: &WindowStart,
    cfg: &CalibrationConfig,
) -> bool {
    let n = units.len();
    let free: Vec<(usize, usize)> = (0..n)
        .flat_map(|r| (0..6).map(move |k| (r, k)))
        .filter(|(r, k)| !(pinned[*r] && *k < 2))
        .collect();
    let rates_of = |u: &[Vec<f64>]| -> Vec<Rates> {
        u.iter()
            .enumerate()
            .map(|(r, v)| {
                let mut rates = cfg.bounds.to_rates(v);
                if pinned[r] {
                    rates.beta_i = 0.0;
                    rates.beta_q = 0.0;
                }
                rates
            })
            .collect()
    };
    let eval = |u: &[Vec<f64>], out: &mut Vec<f64>| -> Option<f64> {
        let traj = simulate_window(&rates_of(u), flows, window, start).ok()?;
        residuals(&traj, observed, window, cfg.death_weight, out);
        let c: f64 = out.iter().map(|v| v * v).sum();
        c.is_finite().then_some(c)
    };
    let mut f = Vec::new();
    let Some(mut cost) = eval(units, &mut f) else {
        return false;
    };
    let mut lambda = 1e-3;
    let mut scratch = Vec::new();
    let mut history = vec![cost];
    for _ in 0..cfg.lm_iters {
        if cost == 0.0 {
            return true;
        }
        let p = free.len();
        let mut jac = vec![Vec::with_capacity(f.len()); p];
        for (col, (r, k)) in free.iter().enumerate() {
            let x = units[*r][*k];
            let h = if x + 1e-7 <= 1.0 { 1e-7 } else { -1e-7 };
            units[*r][*k] = x + h;
            let ok = eval(units, &mut scratch).is_some();
            units[*r][*k] = x;
            if !ok {
                return false;
            }
            jac[col] = scratch.iter().zip(&f).map(|(a, b)| (a - b) / h).collect();
        }
        let jtj: Vec<Vec<f64>> = (0..p)
            .map(|a| (0..p).map(|b| jac[a].iter().zip(&jac[b]).map(|(x, y)| x * y).sum()).collect())
            .collect();
        let jtf: Vec<f64> = (0..p).map(|a| jac[a].iter().zip(&f).map(|(x, y)| x * y).sum()).collect();
        let mut improved = false;
        for _ in 0..12 {
            let mut a = jtj.clone();
            for (d, row) in a.iter_mut().enumerate() {
                row[d] += lambda * jtj[d][d].max(1e-12);
            }
            let Some(delta) = solve(a, jtf.iter().map(|v| -v).collect()) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial = units.to_vec();
            for ((r, k), d) in free.iter().zip(&delta) {
                trial[*r][*k] = (trial[*r][*k] + d).clamp(0.0, 1.0);
            }
            match eval(&trial, &mut scratch) {
                Some(c) if c < cost => {
                    units.clone_from_slice(&trial);
                    std::mem::swap(&mut f, &mut scratch);
                    cost = c;
                    lambda = (lambda / 3.0).max(1e-12);
                    improved = true;
                    history.push(c);
                    if let Some(&then) = history.len().checked_sub(LM_STALL_STEPS + 1).map(|k| &history[k]) {
                        if (then - c) / then < cfg.lm_tol {
                            return true;
                        }
                    }
                    break;
                }
                _ => lambda *= 4.0,
            }
        }
        if !improved {
            // no downhill step at any damping: a stationary point
            return true;
        }
    }
    false
}

/// Squared error of daily new confirmed plus `death_weight ×` squared error
/// of daily new deaths over `window`, simulated from `start`.
pub fn window_loss(
    rates: &[Rates],
    observed: &ObservedSeries,
    flows: &MobilitySchedule,
    window: CalibrationWindow,
    start: &WindowStart,
    cfg: &CalibrationConfig,
) -> Result<f64, CalibrationError> {
    check_window(observed, flows, window, 1)?;
    let traj = simulate_window(rates, flows, window, start)?;
    let value = sse(&traj, observed, window, cfg.death_weight);
    if !value.is_finite() {
        return Err(CalibrationError::NonFinite);
    }
    Ok(value)
}

/// [`window_loss`] with the window's starting state seeded from
/// observations.
pub fn loss(
    rates: &[Rates],
    observed: &ObservedSeries,
    flows: &MobilitySchedule,
    window: CalibrationWindow,
    populations: &[f64],
    cfg: &CalibrationConfig,
) -> Result<f64, CalibrationError> {
    check_window(observed, flows, window, 1)?;
    let start = WindowStart {
        states: seed_states(observed, populations, window.start, cfg)?,
        confirmed: (0..observed.regions.len())
            .map(|r| observed.confirmed[r][window.start])
            .collect(),
    };
    window_loss(rates, observed, flows, window, &start, cfg)
}

const PENALTY: f64 = 1e300;

struct RegionProblem<'a> {
    region: usize,
    rates: &'a [Rates],
    observed: &'a ObservedSeries,
    flows: &'a MobilitySchedule,
    window: CalibrationWindow,
    start: &'a WindowStart,
    cfg: &'a CalibrationConfig,
}

impl RegionProblem<'_> {
    fn eval(&self, u: &[f64]) -> f64 {
        let mut rates = self.rates.to_vec();
        rates[self.region] = self.cfg.bounds.to_rates(u);
        match simulate_window(&rates, self.flows, self.window, self.start) {
            Ok(traj) => {
                let v = sse(&traj, self.observed, self.window, self.cfg.death_weight);
                if v.is_finite() {
                    v
                } else {
                    PENALTY
                }
            }
            Err(_) => PENALTY,
        }
    }
}

impl CostFunction for RegionProblem<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, u: &Self::Param) -> Result<f64, argmin::core::Error> {
        Ok(self.eval(u))
    }
}

fn simplex(x0: &[f64], step: f64) -> Vec<Vec<f64>> {
    let mut out = vec![x0.to_vec()];
    for k in 0..x0.len() {
        let mut v = x0.to_vec();
        v[k] = if v[k] + step <= 1.0 { v[k] + step } else { v[k] - step };
        out.push(v);
    }
    out
}

fn nelder_mead(
    problem: RegionProblem<'_>,
    x0: &[f64],
    step: f64,
    max_iters: u64,
) -> (Vec<f64>, f64, bool) {
    let fallback = (x0.to_vec(), problem.eval(x0), false);
    let Ok(solver) = NelderMead::new(simplex(x0, step)).with_sd_tolerance(1e-14) else {
        return fallback;
    };
    match Executor::new(problem, solver)
        .configure(|s| s.max_iters(max_iters))
        .run()
    {
        Ok(res) => {
            let state = res.state();
            let converged = !matches!(
                state.get_termination_status(),
                TerminationStatus::Terminated(TerminationReason::MaxItersReached)
            );
            match state.get_best_param() {
                Some(p) => (p.iter().map(|v| v.clamp(0.0, 1.0)).collect(), state.get_best_cost(), converged),
                None => fallback,
            }
        }
        Err(_) => fallback,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionFit {
    pub region: String,
    pub window: CalibrationWindow,
    pub rates: Rates,
    /// No new confirmed cases in the window; betas pinned at zero.
    pub degenerate: bool,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub params: EpiParams,
    pub fits: Vec<RegionFit>,
    pub window_losses: Vec<f64>,
    /// Some search stopped at the iteration limit.
    pub unconverged: bool,
}

/// Mid-range rates, with detection and death rates read off the first
/// observed day where the seeded state allows it.
fn moment_guess(
    observed: &ObservedSeries,
    state: &CompartmentState,
    region: usize,
    day: usize,
    bounds: &Bounds,
) -> Rates {
    let mut rates = bounds.to_rates(&[0.3, 0.3, 0.5, 0.3, 0.3, 0.2]);
    let dc = observed.confirmed[region][day + 1] - observed.confirmed[region][day];
    let dd = observed.deaths[region][day + 1] - observed.deaths[region][day];
    if state.i > 0.0 && dc > 0.0 {
        rates.delta = (dc / state.i).clamp(bounds.delta.0, bounds.delta.1);
    }
    if state.i + state.q > 0.0 && dd > 0.0 {
        rates.mu = (dd / (state.i + state.q)).clamp(bounds.mu.0, bounds.mu.1);
    }
    rates
}

/// Fits rates for each window in order. `populations` are the living
/// populations at the first window's start.
pub fn calibrate(
    observed: &ObservedSeries,
    flows: &MobilitySchedule,
    windows: &[CalibrationWindow],
    populations: &[f64],
    cfg: &CalibrationConfig,
) -> Result<CalibrationResult, CalibrationError> {
    let n = observed.regions.len();
    if populations.len() != n || flows.regions() != n {
        return Err(CalibrationError::Input(format!(
            "{} regions observed, {} populations, {} flow regions",
            n,
            populations.len(),
            flows.regions()
        )));
    }
    if windows.is_empty() {
        return Err(CalibrationError::Input("no calibration windows".into()));
    }
    for (w, next) in windows.iter().zip(windows.iter().skip(1)) {
        if w.end != next.start {
            return Err(CalibrationError::Input(format!(
                "windows must be contiguous, found {}..{} then {}..{}",
                w.start, w.end, next.start, next.end
            )));
        }
    }
    for w in windows {
        check_window(observed, flows, *w, cfg.min_window_days)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut start = WindowStart {
        states: seed_states(observed, populations, windows[0].start, cfg)?,
        confirmed: (0..n).map(|r| observed.confirmed[r][windows[0].start]).collect(),
    };
    let mut rates: Vec<Rates> = (0..n)
        .map(|r| moment_guess(observed, &start.states[r], r, windows[0].start, &cfg.bounds))
        .collect();
    let mut steps: Vec<Vec<RateStep>> = vec![Vec::new(); n];
    let mut fits = Vec::new();
    let mut window_losses = Vec::new();
    let mut unconverged = false;

    for window in windows {
        let degenerate: Vec<bool> = (0..n)
            .map(|r| {
                (window.start..window.end)
                    .all(|t| observed.confirmed[r][t + 1] - observed.confirmed[r][t] <= 0.0)
            })
            .collect();
        let mut converged = vec![true; n];
        for _ in 0..cfg.sweeps.max(1) {
            for r in 0..n {
                let problem = || RegionProblem {
                    region: r,
                    rates: &rates,
                    observed,
                    flows,
                    window: *window,
                    start: &start,
                    cfg,
                };
                let mut best_u = cfg.bounds.to_unit(&rates[r]);
                let mut best = problem().eval(&best_u);
                let mut ok = true;
                for k in 0..cfg.restarts.max(1) {
                    let x0: Vec<f64> = if k == 0 {
                        best_u.clone()
                    } else {
                        (0..6).map(|_| rng.random::<f64>()).collect()
                    };
                    let (u, value, conv) = nelder_mead(problem(), &x0, 0.15, cfg.max_iters);
                    if value < best {
                        best = value;
                        best_u = u;
                        ok = conv;
                    }
                }
                converged[r] = ok;
                rates[r] = cfg.bounds.to_rates(&best_u);
                if degenerate[r] {
                    rates[r].beta_i = 0.0;
                    rates[r].beta_q = 0.0;
                }
            }
        }
        let mut units: Vec<Vec<f64>> = rates.iter().map(|r| cfg.bounds.to_unit(r)).collect();
        let lm_ok = levenberg_marquardt(&mut units, &degenerate, observed, flows, *window, &start, cfg);
        for r in 0..n {
            rates[r] = cfg.bounds.to_rates(&units[r]);
            if degenerate[r] {
                rates[r].beta_i = 0.0;
                rates[r].beta_q = 0.0;
            }
            converged[r] = lm_ok;
        }
        let traj = simulate_window(&rates, flows, *window, &start)?;
        let value = sse(&traj, observed, *window, cfg.death_weight);
        if !value.is_finite() {
            return Err(CalibrationError::NonFinite);
        }
        window_losses.push(value);
        for r in 0..n {
            if !converged[r] {
                info!(
                    "calibration of {} over days {}..{} stopped at the iteration limit",
                    observed.regions.code(r),
                    window.start,
                    window.end
                );
                unconverged = true;
            }
            if degenerate[r] {
                warn!(
                    "no new confirmed cases for {} over days {}..{}; transmission set to zero",
                    observed.regions.code(r),
                    window.start,
                    window.end
                );
            }
            steps[r].push(RateStep {
                start_day: window.start,
                rates: rates[r],
            });
            fits.push(RegionFit {
                region: observed.regions.code(r).to_string(),
                window: *window,
                rates: rates[r],
                degenerate: degenerate[r],
                converged: converged[r],
            });
        }
        start = WindowStart {
            states: traj.states.last().expect("non-empty").clone(),
            confirmed: traj.confirmed.last().expect("non-empty").clone(),
        };
    }
    let stopped: Vec<&RegionFit> = fits.iter().filter(|f| !f.converged).collect();
    if !stopped.is_empty() {
        warn!(
            "{} of {} region fits stopped at the iteration limit",
            stopped.len(),
            fits.len()
        );
    }
    Ok(CalibrationResult {
        params: EpiParams::new(steps),
        fits,
        window_losses,
        unconverged,
    })
}
