//! Which observed conditions push agents toward strict-first TIR plans.
//!
//! Each applied TIR allocation becomes one row keyed by (cycle, destination,
//! origin), with the origin and destination compartments at cycle start, the
//! pair's inflow volume over the cycle and a one-hot origin indicator. A
//! small bagged tree ensemble predicts P(strict-first); Shapley values of
//! that prediction give the attribution.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::shapley::{background_mean, shapley_values};
use super::AnalyticsError;
use crate::dynamics::Trajectory;
use crate::policy::{PolicyLogEntry, PolicyType};
use crate::scenario::{CompartmentState, CycleCalendar, RegionSet, Strategy};

pub const MIN_ROWS: usize = 50;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributionDataset {
    pub feature_names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// True when the allocation was strict-first.
    pub labels: Vec<bool>,
    /// `(cycle, destination, origin)` per row.
    pub keys: Vec<(usize, String, String)>,
}

pub fn feature_names(regions: &RegionSet) -> Vec<String> {
    let mut names = Vec::new();
    for side in ["origin", "dest"] {
        for c in CompartmentState::NAMES {
            names.push(format!("{side}_{c}"));
        }
    }
    names.push("inflow".to_string());
    for code in regions.codes() {
        names.push(format!("origin_is_{code}"));
    }
    names
}

impl AttributionDataset {
    pub fn new(feature_names: Vec<String>) -> Self {
        Self {
            feature_names,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|l| **l).count()
    }

    /// Rows from one episode's TIR log entries.
    pub fn from_episode(
        traj: &Trajectory,
        regions: &RegionSet,
        calendar: &CycleCalendar,
        log: &[PolicyLogEntry],
    ) -> Result<Self, AnalyticsError> {
        let mut out = Self::new(feature_names(regions));
        out.extend_from_episode(traj, regions, calendar, log)?;
        Ok(out)
    }

    pub fn extend_from_episode(
        &mut self,
        traj: &Trajectory,
        regions: &RegionSet,
        calendar: &CycleCalendar,
        log: &[PolicyLogEntry],
    ) -> Result<(), AnalyticsError> {
        for entry in log {
            if entry.action_type != Strategy::Tir {
                continue;
            }
            let Some(label) = entry.label else { continue };
            let (Some(dest), Some(origin)) =
                (regions.index_of(&entry.acting), regions.index_of(&entry.origin))
            else {
                continue;
            };
            let Some(cycle) = calendar.cycles.get(entry.cycle) else {
                continue;
            };
            if cycle.start >= traj.states.len() {
                return Err(AnalyticsError::OutOfRange {
                    day: cycle.start,
                    len: traj.states.len(),
                });
            }
            let end = cycle.end().min(traj.realized.days());
            let mut row = Vec::with_capacity(self.feature_names.len());
            row.extend(traj.state(cycle.start, origin).as_array());
            row.extend(traj.state(cycle.start, dest).as_array());
            row.push(traj.realized.pair_total(origin, dest, cycle.start..end));
            row.extend((0..regions.len()).map(|r| if r == origin { 1.0 } else { 0.0 }));
            if row.len() != self.feature_names.len() {
                return Err(AnalyticsError::Dimension {
                    expected: self.feature_names.len(),
                    found: row.len(),
                });
            }
            self.rows.push(row);
            self.labels.push(label == PolicyType::StrictFirst);
            self.keys.push((entry.cycle, entry.acting.clone(), entry.origin.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            trees: 25,
            max_depth: 4,
            min_leaf: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    fn predict(&self, x: &[f64]) -> f64 {
        match self {
            Node::Leaf(p) => *p,
            Node::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                if x[*feature] <= *threshold {
                    left.predict(x)
                } else {
                    right.predict(x)
                }
            }
        }
    }
}

fn gini_impurity(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

fn grow(
    rows: &[Vec<f64>],
    labels: &[bool],
    idx: &mut [usize],
    depth: usize,
    cfg: &ForestConfig,
) -> Node {
    let n = idx.len();
    let pos = idx.iter().filter(|i| labels[**i]).count();
    let leaf = Node::Leaf(pos as f64 / n.max(1) as f64);
    if depth >= cfg.max_depth || pos == 0 || pos == n || n < 2 * cfg.min_leaf {
        return leaf;
    }
    let parent = gini_impurity(pos, n);
    let mut best: Option<(f64, usize, f64)> = None;
    let features = rows[idx[0]].len();
    for f in 0..features {
        idx.sort_by(|a, b| rows[*a][f].total_cmp(&rows[*b][f]));
        let mut left_pos = 0;
        for k in 1..n {
            if labels[idx[k - 1]] {
                left_pos += 1;
            }
            let lo = rows[idx[k - 1]][f];
            let hi = rows[idx[k]][f];
            if lo == hi || k < cfg.min_leaf || n - k < cfg.min_leaf {
                continue;
            }
            let weighted = (k as f64 * gini_impurity(left_pos, k)
                + (n - k) as f64 * gini_impurity(pos - left_pos, n - k))
                / n as f64;
            let gain = parent - weighted;
            if gain > 1e-12 && best.is_none_or(|(g, _, _)| gain > g) {
                best = Some((gain, f, 0.5 * (lo + hi)));
            }
        }
    }
    let Some((_, feature, threshold)) = best else {
        return leaf;
    };
    idx.sort_by(|a, b| rows[*a][feature].total_cmp(&rows[*b][feature]));
    let split = idx.partition_point(|i| rows[*i][feature] <= threshold);
    let (l, r) = idx.split_at_mut(split);
    Node::Split {
        feature,
        threshold,
        left: Box::new(grow(rows, labels, l, depth + 1, cfg)),
        right: Box::new(grow(rows, labels, r, depth + 1, cfg)),
    }
}

/// Bagged classification trees predicting P(strict-first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrictFirstModel {
    trees: Vec<Node>,
    pub feature_names: Vec<String>,
    /// Mean of feature values over the training rows, used as the Shapley
    /// background.
    pub background: Vec<f64>,
    /// Set when every training label was the same class.
    pub degenerate: bool,
}

impl StrictFirstModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn accuracy(&self, data: &AttributionDataset) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let hits = data
            .rows
            .iter()
            .zip(&data.labels)
            .filter(|(x, y)| (self.predict(x) >= 0.5) == **y)
            .count();
        hits as f64 / data.len() as f64
    }

    /// Shapley values of the prediction for one row.
    pub fn explain(&self, x: &[f64]) -> Result<Vec<f64>, AnalyticsError> {
        shapley_values(|v| self.predict(v), x, &self.background)
    }

    /// Mean absolute Shapley value per feature over `rows`.
    pub fn importance(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>, AnalyticsError> {
        let mut acc = vec![0.0; self.feature_names.len()];
        for row in rows {
            for (a, phi) in acc.iter_mut().zip(self.explain(row)?) {
                *a += phi.abs();
            }
        }
        let n = rows.len().max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }
}

pub fn build_attribution_model(
    data: &AttributionDataset,
    cfg: &ForestConfig,
) -> Result<StrictFirstModel, AnalyticsError> {
    if data.len() < MIN_ROWS {
        return Err(AnalyticsError::TooFewRows {
            rows: data.len(),
            min: MIN_ROWS,
        });
    }
    let width = data.feature_names.len();
    if let Some(bad) = data.rows.iter().find(|r| r.len() != width) {
        return Err(AnalyticsError::Dimension {
            expected: width,
            found: bad.len(),
        });
    }
    let background = background_mean(&data.rows);
    let pos = data.positives();
    if pos == 0 || pos == data.len() {
        warn!(
            "attribution dataset has a single class ({} of {} strict-first); model is constant",
            pos,
            data.len()
        );
        return Ok(StrictFirstModel {
            trees: vec![Node::Leaf(if pos == 0 { 0.0 } else { 1.0 })],
            feature_names: data.feature_names.clone(),
            background,
            degenerate: true,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = data.len();
    let trees = (0..cfg.trees.max(1))
        .map(|_| {
            let mut idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            grow(&data.rows, &data.labels, &mut idx, 0, cfg)
        })
        .collect();
    Ok(StrictFirstModel {
        trees,
        feature_names: data.feature_names.clone(),
        background,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn planted(n: usize, seed: u64) -> AttributionDataset {
        let names = (0..6).map(|j| format!("x{j}")).collect();
        let mut data = AttributionDataset::new(names);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for k in 0..n {
            let row: Vec<f64> = (0..6).map(|_| rng.random::<f64>()).collect();
            data.labels.push(row[2] > 0.5);
            data.rows.push(row);
            data.keys.push((k, "A".into(), "B".into()));
        }
        data
    }

    #[test]
    fn planted_feature_dominates() {
        let data = planted(200, 3);
        let model = build_attribution_model(&data, &ForestConfig::default()).unwrap();
        assert!(!model.degenerate);
        assert!(model.accuracy(&data) > 0.95);
        let imp = model.importance(&data.rows[..40]).unwrap();
        let top = imp
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(top, 2, "{imp:?}");
    }

    #[test]
    fn shuffled_labels_carry_no_signal() {
        let shuffle = |data: &mut AttributionDataset, seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..data.labels.len()).rev() {
                data.labels.swap(i, rng.random_range(0..=i));
            }
        };
        let mut train = planted(300, 4);
        shuffle(&mut train, 5);
        let mut held_out = planted(2000, 6);
        shuffle(&mut held_out, 7);
        let model = build_attribution_model(&train, &ForestConfig::default()).unwrap();
        let prior = held_out.positives() as f64 / held_out.len() as f64;
        let majority = prior.max(1.0 - prior);
        let acc = model.accuracy(&held_out);
        assert!((acc - majority).abs() <= 0.1 || (acc - prior).abs() <= 0.1, "{acc} vs {prior}");
    }

    #[test]
    fn deterministic_given_seed() {
        let data = planted(80, 9);
        let cfg = ForestConfig::default();
        let a = build_attribution_model(&data, &cfg).unwrap();
        let b = build_attribution_model(&data, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_class_is_constant() {
        let mut data = planted(60, 1);
        data.labels.iter_mut().for_each(|l| *l = false);
        let model = build_attribution_model(&data, &ForestConfig::default()).unwrap();
        assert!(model.degenerate);
        assert_eq!(model.predict(&data.rows[0]), 0.0);
        assert!(model.explain(&data.rows[0]).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn too_few_rows() {
        let data = planted(49, 1);
        assert!(matches!(
            build_attribution_model(&data, &ForestConfig::default()),
            Err(AnalyticsError::TooFewRows { rows: 49, min: 50 })
        ));
    }

    #[test]
    fn names_include_one_hot() {
        let names = feature_names(&RegionSet::from_codes(&["AZ", "NM"]));
        assert_eq!(names.len(), 15);
        assert_eq!(names[12], "inflow");
        assert_eq!(names[14], "origin_is_NM");
    }
}
