//! Time-varying reproduction number from daily incidence.
//!
//! Renewal model with a discretized Gamma serial interval and a conjugate
//! Gamma prior over a trailing window: for each evaluation day `t ≥ W` the
//! posterior is `Gamma(a + ΣQ', b + max(ΣΛ, ε))` with the sums taken over
//! `u ∈ [t − W, t − 1]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::DEFAULT_EPS;
use crate::special::{gamma_cdf, gamma_quantile};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RtError {
    #[error("serial interval parameters must be positive (mean {mean}, sd {sd}, max lag {max_lag})")]
    SerialInterval { mean: f64, sd: f64, max_lag: usize },
    #[error("incidence series has {len} days, window needs at least {window}")]
    SeriesTooShort { len: usize, window: usize },
    #[error("window length must be at least 1")]
    EmptyWindow,
    #[error("invalid prior (shape {shape}, rate {rate})")]
    Prior { shape: f64, rate: f64 },
    #[error("posterior on day {day} is improper (zero shape)")]
    ImproperPosterior { day: usize },
    #[error("incidence contains a non-finite or negative value on day {day}")]
    BadIncidence { day: usize },
}

/// Discretized serial interval; `weights[s - 1]` is `w_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SerialInterval {
    pub mean: f64,
    pub sd: f64,
    pub shape: f64,
    pub scale: f64,
    pub weights: Vec<f64>,
}

impl SerialInterval {
    pub fn max_lag(&self) -> usize {
        self.weights.len()
    }

    /// `w_s` for `s ≥ 1`; zero beyond the maximum lag.
    pub fn weight(&self, lag: usize) -> f64 {
        if lag == 0 {
            0.0
        } else {
            self.weights.get(lag - 1).copied().unwrap_or(0.0)
        }
    }
}

impl Default for SerialInterval {
    fn default() -> Self {
        discretize_serial_interval(5.0, 2.0, 20).expect("default serial interval")
    }
}

/// `w_s = F(s) − F(s − 1)` for `s = 1..=max_lag`, Gamma with
/// `k = (mean/sd)²`, `θ = sd²/mean`, renormalized to sum to one.
pub fn discretize_serial_interval(
    mean: f64,
    sd: f64,
    max_lag: usize,
) -> Result<SerialInterval, RtError> {
    if !(mean > 0.0 && sd > 0.0 && mean.is_finite() && sd.is_finite()) || max_lag == 0 {
        return Err(RtError::SerialInterval { mean, sd, max_lag });
    }
    let shape = (mean / sd).powi(2);
    let scale = sd * sd / mean;
    let mut weights: Vec<f64> = (1..=max_lag)
        .map(|s| gamma_cdf(s as f64, shape, scale) - gamma_cdf((s - 1) as f64, shape, scale))
        .collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(SerialInterval {
        mean,
        sd,
        shape,
        scale,
        weights,
    })
}

/// Total infectiousness `Λ_u = Σ_s Q'_{u−s} w_s`, with `Q'` zero before day 0.
pub fn renewal_intensity(incidence: &[f64], si: &SerialInterval, u: usize) -> f64 {
    (1..=si.max_lag().min(u))
        .filter_map(|s| incidence.get(u - s).map(|q| q * si.weight(s)))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RtConfig {
    pub window: usize,
    pub prior_shape: f64,
    pub prior_rate: f64,
    pub eps: f64,
}

impl Default for RtConfig {
    fn default() -> Self {
        Self {
            window: 21,
            prior_shape: 1.0,
            prior_rate: 1.0,
            eps: DEFAULT_EPS,
        }
    }
}

/// Posterior summaries for days `first_day ..= first_day + len − 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtSeries {
    pub first_day: usize,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl RtSeries {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn days(&self) -> impl Iterator<Item = usize> + '_ {
        self.first_day..self.first_day + self.mean.len()
    }

    /// `(mean, lower, upper)` for day `t`, if estimated.
    pub fn at(&self, t: usize) -> Option<(f64, f64, f64)> {
        let k = t.checked_sub(self.first_day)?;
        Some((*self.mean.get(k)?, self.lower[k], self.upper[k]))
    }

    pub fn last_mean(&self) -> Option<f64> {
        self.mean.last().copied()
    }
}

/// Clamps negative daily counts to zero, returning how many were clamped.
pub fn clamp_incidence(raw: &[f64]) -> (Vec<f64>, usize) {
    let mut clamped = 0;
    let out = raw
        .iter()
        .map(|&v| {
            if v < 0.0 {
                clamped += 1;
                0.0
            } else {
                v
            }
        })
        .collect();
    if clamped > 0 {
        log::info!("clamped {clamped} negative incidence values to zero");
    }
    (out, clamped)
}

/// Sliding-window posterior for every `t` in `W ..= len`.
pub fn estimate_rt(
    incidence: &[f64],
    si: &SerialInterval,
    config: &RtConfig,
) -> Result<RtSeries, RtError> {
    let w = config.window;
    if w == 0 {
        return Err(RtError::EmptyWindow);
    }
    if incidence.len() < w {
        return Err(RtError::SeriesTooShort {
            len: incidence.len(),
            window: w,
        });
    }
    let (a, b) = (config.prior_shape, config.prior_rate);
    if !(a >= 0.0 && b >= 0.0 && a.is_finite() && b.is_finite()) {
        return Err(RtError::Prior { shape: a, rate: b });
    }
    if let Some(day) = incidence.iter().position(|q| !q.is_finite() || *q < 0.0) {
        return Err(RtError::BadIncidence { day });
    }

    let lambda: Vec<f64> = (0..incidence.len())
        .map(|u| renewal_intensity(incidence, si, u))
        .collect();

    let n_out = incidence.len() - w + 1;
    let mut series = RtSeries {
        first_day: w,
        mean: Vec::with_capacity(n_out),
        lower: Vec::with_capacity(n_out),
        upper: Vec::with_capacity(n_out),
    };
    for t in w..=incidence.len() {
        let cases: f64 = incidence[t - w..t].iter().sum();
        let infectiousness: f64 = lambda[t - w..t].iter().sum();
        let shape = a + cases;
        let rate = b + infectiousness.max(config.eps);
        if shape <= 0.0 {
            return Err(RtError::ImproperPosterior { day: t });
        }
        series.mean.push(shape / rate);
        series.lower.push(gamma_quantile(0.025, shape, rate));
        series.upper.push(gamma_quantile(0.975, shape, rate));
    }
    Ok(series)
}
