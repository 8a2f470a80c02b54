//! Local-trend extrapolation of cumulative counts.

use super::AnalyticsError;

/// Increments averaged to estimate the local slope.
pub const TREND_DAYS: usize = 14;

/// Mean of the last 14 daily increments.
pub fn mean_recent_increment(series: &[f64]) -> Result<f64, AnalyticsError> {
    if series.len() < TREND_DAYS + 1 {
        return Err(AnalyticsError::TooShort {
            len: series.len(),
            need: TREND_DAYS + 1,
        });
    }
    let t = series.len() - 1;
    Ok((series[t] - series[t - TREND_DAYS]) / TREND_DAYS as f64)
}

/// Returns `series` extended by `horizon` days with constant slope
/// `C_{T+h} = C_T + h·c̄`.
pub fn forecast_cumulative(series: &[f64], horizon: usize) -> Result<Vec<f64>, AnalyticsError> {
    let slope = mean_recent_increment(series)?;
    let last = *series.last().expect("checked length");
    let mut out = Vec::with_capacity(series.len() + horizon);
    out.extend_from_slice(series);
    out.extend((1..=horizon).map(|h| last + h as f64 * slope));
    Ok(out)
}
