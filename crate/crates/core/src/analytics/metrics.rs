//! Per-capita daily indicators.
//!
//! IR is new confirmed cases per capita (increment of the cumulative
//! confirmed counter), DR is new deaths per capita and ACR is the current
//! quarantined share. The divisor is the region's living population on day `t`.

use serde::{Deserialize, Serialize};

use super::AnalyticsError;
use crate::dynamics::Trajectory;

fn living(traj: &Trajectory, region: usize, day: usize) -> Result<f64, AnalyticsError> {
    let n = traj.state(day, region).living();
    if n <= 0.0 {
        return Err(AnalyticsError::EmptyRegion(region));
    }
    Ok(n)
}

fn next_day(traj: &Trajectory, day: usize) -> Result<(), AnalyticsError> {
    if day + 1 >= traj.states.len() {
        return Err(AnalyticsError::OutOfRange {
            day,
            len: traj.states.len(),
        });
    }
    Ok(())
}

pub fn incidence_rate(traj: &Trajectory, region: usize, day: usize) -> Result<f64, AnalyticsError> {
    next_day(traj, day)?;
    let delta = traj.confirmed[day + 1][region] - traj.confirmed[day][region];
    Ok(delta / living(traj, region, day)?)
}

pub fn death_rate(traj: &Trajectory, region: usize, day: usize) -> Result<f64, AnalyticsError> {
    next_day(traj, day)?;
    let delta = traj.state(day + 1, region).d - traj.state(day, region).d;
    Ok(delta / living(traj, region, day)?)
}

pub fn active_case_rate(
    traj: &Trajectory,
    region: usize,
    day: usize,
) -> Result<f64, AnalyticsError> {
    if day >= traj.states.len() {
        return Err(AnalyticsError::OutOfRange {
            day,
            len: traj.states.len(),
        });
    }
    Ok(traj.state(day, region).q / living(traj, region, day)?)
}

/// All three indicators for every region; `ir`/`dr` have one entry per
/// transition, `acr` one per snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub ir: Vec<Vec<f64>>,
    pub dr: Vec<Vec<f64>>,
    pub acr: Vec<Vec<f64>>,
}

impl MetricSeries {
    pub fn from_trajectory(traj: &Trajectory) -> Result<Self, AnalyticsError> {
        let n = traj.regions();
        let days = traj.days();
        let mut out = Self {
            ir: Vec::with_capacity(n),
            dr: Vec::with_capacity(n),
            acr: Vec::with_capacity(n),
        };
        for r in 0..n {
            out.ir.push(
                (0..days)
                    .map(|t| incidence_rate(traj, r, t))
                    .collect::<Result<_, _>>()?,
            );
            out.dr.push(
                (0..days)
                    .map(|t| death_rate(traj, r, t))
                    .collect::<Result<_, _>>()?,
            );
            out.acr.push(
                (0..=days)
                    .map(|t| active_case_rate(traj, r, t))
                    .collect::<Result<_, _>>()?,
            );
        }
        Ok(out)
    }

    pub fn mean_ir(&self, region: usize) -> f64 {
        mean(&self.ir[region])
    }

    pub fn mean_dr(&self, region: usize) -> f64 {
        mean(&self.dr[region])
    }

    pub fn mean_acr(&self, region: usize) -> f64 {
        mean(&self.acr[region])
    }
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{CompartmentState, MobilitySchedule};
    use chrono::NaiveDate;

    fn traj(states: Vec<CompartmentState>, confirmed: Vec<f64>) -> Trajectory {
        let start = NaiveDate::from_ymd_opt(2020, 4, 12).unwrap();
        Trajectory {
            start_date: start,
            realized: MobilitySchedule::zeros(start, 1, states.len() - 1),
            states: states.into_iter().map(|s| vec![s]).collect(),
            confirmed: confirmed.into_iter().map(|c| vec![c]).collect(),
        }
    }

    #[test]
    fn constant_trajectory() {
        let s = CompartmentState::new(9_000.0, 100.0, 200.0, 500.0, 150.0, 50.0);
        let t = traj(vec![s; 4], vec![600.0; 4]);
        let m = MetricSeries::from_trajectory(&t).unwrap();
        assert!(m.ir[0].iter().all(|v| *v == 0.0));
        assert!(m.dr[0].iter().all(|v| *v == 0.0));
        assert!(m.acr[0].iter().all(|v| (*v - 500.0 / 9_950.0).abs() < 1e-15));
    }

    #[test]
    fn incidence_hand_value() {
        let a = CompartmentState::new(9_750.0, 50.0, 100.0, 100.0, 0.0, 0.0);
        let b = CompartmentState::new(9_750.0, 50.0, 50.0, 150.0, 0.0, 0.0);
        let t = traj(vec![a, b], vec![100.0, 150.0]);
        assert!((incidence_rate(&t, 0, 0).unwrap() - 0.005).abs() < 1e-15);
    }

    #[test]
    fn terminal_day_is_out_of_range() {
        let s = CompartmentState::new(100.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let t = traj(vec![s; 3], vec![0.0; 3]);
        assert!(matches!(
            incidence_rate(&t, 0, 2),
            Err(AnalyticsError::OutOfRange { day: 2, .. })
        ));
        assert!(death_rate(&t, 0, 2).is_err());
        assert!(active_case_rate(&t, 0, 2).is_ok());
    }

    #[test]
    fn period_average_is_mean_of_dailies() {
        let states: Vec<CompartmentState> = (0..10)
            .map(|k| CompartmentState::new(1e4 - k as f64, 0.0, 0.0, k as f64, 0.0, 0.1 * k as f64))
            .collect();
        let confirmed: Vec<f64> = (0..10).map(|k| (k * k) as f64).collect();
        let t = traj(states, confirmed);
        let m = MetricSeries::from_trajectory(&t).unwrap();
        let direct: f64 = (0..9).map(|d| incidence_rate(&t, 0, d).unwrap()).sum::<f64>() / 9.0;
        assert!((m.mean_ir(0) - direct).abs() < 1e-12);
    }
}
