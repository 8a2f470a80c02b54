//! Exact Shapley values by coalition enumeration.

use rayon::prelude::*;

use super::AnalyticsError;

pub const MAX_EXACT_FEATURES: usize = 20;

/// Shapley values of a coalitional game `value(mask)` over `m` players.
pub fn game_shapley<F>(m: usize, value: F) -> Result<Vec<f64>, AnalyticsError>
where
    F: Fn(u32) -> f64 + Sync,
{
    if m > MAX_EXACT_FEATURES {
        return Err(AnalyticsError::TooManyFeatures {
            m,
            max: MAX_EXACT_FEATURES,
        });
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let count = 1usize << m;
    let values: Vec<f64> = (0..count as u32).into_par_iter().map(&value).collect();
    // weight[s] = s!(m-s-1)!/m! = 1 / (m · C(m-1, s))
    let mut weight = vec![0.0; m];
    let mut binom = 1.0f64;
    for (s, w) in weight.iter_mut().enumerate() {
        *w = 1.0 / (m as f64 * binom);
        binom = binom * (m - 1 - s) as f64 / (s + 1) as f64;
    }
    let phi = (0..m)
        .into_par_iter()
        .map(|j| {
            let bit = 1usize << j;
            let mut acc = 0.0;
            for mask in 0..count {
                if mask & bit == 0 {
                    let s = mask.count_ones() as usize;
                    acc += weight[s] * (values[mask | bit] - values[mask]);
                }
            }
            acc
        })
        .collect();
    Ok(phi)
}

/// Shapley attribution of `predict(instance)` where absent features take
/// their background (mean) value.
pub fn shapley_values<F>(
    predict: F,
    instance: &[f64],
    background: &[f64],
) -> Result<Vec<f64>, AnalyticsError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if instance.len() != background.len() {
        return Err(AnalyticsError::Dimension {
            expected: background.len(),
            found: instance.len(),
        });
    }
    let m = instance.len();
    game_shapley(m, |mask| {
        let x: Vec<f64> = (0..m)
            .map(|j| {
                if mask & (1 << j) != 0 {
                    instance[j]
                } else {
                    background[j]
                }
            })
            .collect();
        predict(&x)
    })
}

/// Column means of a row-major dataset.
pub fn background_mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = rows.first() else {
        return Vec::new();
    };
    let mut mean = vec![0.0; first.len()];
    for row in rows {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let n = rows.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}
