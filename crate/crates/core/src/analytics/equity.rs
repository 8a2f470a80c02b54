//! Gini-based equity of per-region improvements.

use serde::{Deserialize, Serialize};

use super::AnalyticsError;

/// Relative improvement of an arm over ground truth, per region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementVector {
    pub infections: Vec<f64>,
    pub deaths: Vec<f64>,
}

impl ImprovementVector {
    pub fn clamped_infections(&self) -> Vec<f64> {
        self.infections.iter().map(|v| v.max(0.0)).collect()
    }

    pub fn clamped_deaths(&self) -> Vec<f64> {
        self.deaths.iter().map(|v| v.max(0.0)).collect()
    }
}

fn relative(ground: f64, arm: f64, eps: f64) -> f64 {
    (ground - arm) / ground.abs().max(eps)
}

/// `Δ_i = (G_i − A_i) / max(|G_i|, ε)` for infections and deaths.
pub fn improvements(
    ground_infections: &[f64],
    arm_infections: &[f64],
    ground_deaths: &[f64],
    arm_deaths: &[f64],
    eps: f64,
) -> ImprovementVector {
    ImprovementVector {
        infections: ground_infections
            .iter()
            .zip(arm_infections)
            .map(|(g, a)| relative(*g, *a, eps))
            .collect(),
        deaths: ground_deaths
            .iter()
            .zip(arm_deaths)
            .map(|(g, a)| relative(*g, *a, eps))
            .collect(),
    }
}

/// Gini coefficient of a nonnegative vector, computed on its sorted values.
pub fn gini(x: &[f64]) -> Result<f64, AnalyticsError> {
    let total: f64 = x.iter().sum();
    if x.is_empty() || total <= 0.0 {
        return Err(AnalyticsError::UndefinedEquity);
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(r, v)| (2.0 * (r + 1) as f64 - n - 1.0) * v)
        .sum();
    Ok(weighted / (n * total))
}

/// Equity coefficients; `None` when every clamped improvement is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Equity {
    pub infections: Option<f64>,
    pub deaths: Option<f64>,
}

pub fn equity_coefficient(improvements: &ImprovementVector) -> Equity {
    let e = |v: Vec<f64>| gini(&v).ok().map(|g| 1.0 - g);
    Equity {
        infections: e(improvements.clamped_infections()),
        deaths: e(improvements.clamped_deaths()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn equal_improvements_are_perfectly_equitable() {
        assert_eq!(gini(&[0.2, 0.2, 0.2]).unwrap(), 0.0);
    }

    #[test]
    fn single_winner() {
        let g = gini(&[1.0, 0.0, 0.0]).unwrap();
        assert!((g - 2.0 / 3.0).abs() < 1e-15);
        assert!((1.0 - g - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn all_zero_is_undefined() {
        assert_eq!(gini(&[0.0, 0.0]), Err(AnalyticsError::UndefinedEquity));
        let iv = improvements(&[10.0, 5.0], &[10.0, 6.0], &[1.0, 1.0], &[1.0, 1.0], 1e-9);
        let e = equity_coefficient(&iv);
        assert_eq!(e.infections, None);
        assert_eq!(e.deaths, None);
    }

    #[test]
    fn negative_improvements_clamped() {
        let iv = improvements(&[100.0, 100.0], &[50.0, 150.0], &[1.0, 1.0], &[0.5, 0.5], 1e-9);
        assert_eq!(iv.infections, vec![0.5, -0.5]);
        assert_eq!(iv.clamped_infections(), vec![0.5, 0.0]);
        let e = equity_coefficient(&iv);
        assert!((e.infections.unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(e.deaths, Some(1.0));
    }

    proptest! {
        #[test]
        fn permutation_and_replication_invariant(
            v in proptest::collection::vec(0.0..1.0f64, 2..12),
            seed in any::<u64>(),
        ) {
            prop_assume!(v.iter().sum::<f64>() > 1e-6);
            let g = gini(&v).unwrap();
            prop_assert!((0.0..1.0).contains(&g));
            let mut perm = v.clone();
            let k = (seed as usize) % perm.len();
            perm.rotate_left(k);
            perm.reverse();
            prop_assert!((gini(&perm).unwrap() - g).abs() < 1e-12);
            let doubled: Vec<f64> = v.iter().chain(v.iter()).copied().collect();
            prop_assert!((gini(&doubled).unwrap() - g).abs() < 1e-12);
        }
    }
}
