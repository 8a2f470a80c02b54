//! CSV loaders and writers for epidemiological, mobility, policy and
//! parameter files.
//!
//! All files are comma-separated UTF-8 with a header row and ISO-8601 dates.
//!
//! | file | columns |
//! |------|---------|
//! | epi | `date,state,lat,lon,confirmed,deaths,recovered,active` |
//! | flows | `date,origin,destination,origin_lat,origin_lon,destination_lat,destination_lon,visitors,pop_flows` |
//! | policy | `date,state,category,detail` |
//! | params | `region,window_start,window_end,beta_I,beta_Q,sigma,delta,gamma,mu` |
//! | populations | `region,population` |

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::ObservedSeries;
use crate::scenario::{EpiParams, MobilitySchedule, RateStep, Rates, Region, RegionSet};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("{path}:{line}: {reason}")]
    Row {
        path: PathBuf,
        line: u64,
        reason: String,
    },
    #[error("{path}:{line}: unknown region {code:?}")]
    UnknownRegion {
        path: PathBuf,
        line: u64,
        code: String,
    },
    #[error("{path}: duplicate row for {key} on lines {first} and {second}")]
    Duplicate {
        path: PathBuf,
        key: String,
        first: u64,
        second: u64,
    },
    #[error("{path}: {reason}")]
    Content { path: PathBuf, reason: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> IngestError {
    IngestError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn row_err(path: &Path, line: u64, e: impl std::fmt::Display) -> IngestError {
    IngestError::Row {
        path: path.to_path_buf(),
        line,
        reason: e.to_string(),
    }
}

/// Reads every data row as `(line, T)`.
fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(u64, T)>, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    let headers = reader.headers().map_err(|e| io_err(path, e))?.clone();
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            row_err(path, line, e)
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let row: T = record
            .deserialize(Some(&headers))
            .map_err(|e| row_err(path, line, e))?;
        out.push((line, row));
    }
    Ok(out)
}

fn writer(path: &Path) -> Result<csv::Writer<File>, IngestError> {
    csv::Writer::from_path(path).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpiCsvRow {
    pub date: NaiveDate,
    pub state: String,
    pub lat: f64,
    pub lon: f64,
    pub confirmed: f64,
    pub deaths: f64,
    pub recovered: f64,
    pub active: f64,
}

/// Loads cumulative case series.
///
/// With `regions` given, rows for other codes are an error; otherwise the
/// region set is built from the file, sorted by code. Missing days are
/// forward-filled and flagged; dips in cumulative columns are raised to the
/// running maximum and counted.
pub fn load_epi(path: &Path, regions: Option<&RegionSet>) -> Result<ObservedSeries, IngestError> {
    let rows: Vec<(u64, EpiCsvRow)> = read_rows(path)?;
    for (line, r) in &rows {
        for (name, v) in [
            ("confirmed", r.confirmed),
            ("deaths", r.deaths),
            ("recovered", r.recovered),
            ("active", r.active),
        ] {
            if !(v >= 0.0) {
                return Err(row_err(path, *line, format!("{name} must be nonnegative, found {v}")));
            }
        }
    }
    let regions = match regions {
        Some(r) => r.clone(),
        None => {
            let mut seen: BTreeMap<String, (f64, f64)> = BTreeMap::new();
            for (_, r) in &rows {
                seen.entry(r.state.clone()).or_insert((r.lat, r.lon));
            }
            RegionSet::new(
                seen.into_iter()
                    .map(|(code, (lat, lon))| Region {
                        name: code.clone(),
                        code,
                        lat,
                        lon,
                    })
                    .collect(),
            )
        }
    };
    if rows.is_empty() || regions.is_empty() {
        return Err(IngestError::Content {
            path: path.to_path_buf(),
            reason: "no data rows".into(),
        });
    }
    let start = rows.iter().map(|(_, r)| r.date).min().expect("non-empty");
    let end = rows.iter().map(|(_, r)| r.date).max().expect("non-empty");
    let days = (end - start).num_days() as usize + 1;
    let n = regions.len();
    let mut cells: Vec<Vec<Option<[f64; 3]>>> = vec![vec![None; days]; n];
    let mut lines: HashMap<(usize, usize), u64> = HashMap::new();
    for (line, r) in &rows {
        let region = regions
            .index_of(&r.state)
            .ok_or_else(|| IngestError::UnknownRegion {
                path: path.to_path_buf(),
                line: *line,
                code: r.state.clone(),
            })?;
        let day = (r.date - start).num_days() as usize;
        if let Some(first) = lines.insert((region, day), *line) {
            return Err(IngestError::Duplicate {
                path: path.to_path_buf(),
                key: format!("{} {}", r.date, r.state),
                first,
                second: *line,
            });
        }
        cells[region][day] = Some([r.confirmed, r.deaths, r.recovered]);
    }
    let mut series = [vec![vec![0.0; days]; n], vec![vec![0.0; days]; n], vec![vec![0.0; days]; n]];
    let mut filled = vec![vec![false; days]; n];
    let mut repairs = 0;
    for r in 0..n {
        let mut last = [0.0; 3];
        for t in 0..days {
            let value = match cells[r][t] {
                Some(v) => v,
                None => {
                    filled[r][t] = true;
                    last
                }
            };
            for k in 0..3 {
                let v = if value[k] < last[k] {
                    repairs += 1;
                    last[k]
                } else {
                    value[k]
                };
                series[k][r][t] = v;
                last[k] = v;
            }
        }
    }
    let filled_count: usize = filled.iter().flatten().filter(|f| **f).count();
    if repairs > 0 {
        warn!("{}: {repairs} cumulative values raised to the running maximum", path.display());
    }
    if filled_count > 0 {
        info!("{}: {filled_count} missing region-days forward-filled", path.display());
    }
    let [confirmed, deaths, recovered] = series;
    Ok(ObservedSeries {
        regions,
        start,
        confirmed,
        deaths,
        recovered,
        filled,
        repairs,
    })
}

/// Writes observed series in the epi schema; forward-filled days are
/// written like any other.
pub fn write_epi(observed: &ObservedSeries, path: &Path) -> Result<(), IngestError> {
    let mut w = writer(path)?;
    for t in 0..observed.days() {
        let date = observed.start + chrono::Duration::days(t as i64);
        for (r, region) in observed.regions.iter().enumerate() {
            w.serialize(EpiCsvRow {
                date,
                state: region.code.clone(),
                lat: region.lat,
                lon: region.lon,
                confirmed: observed.confirmed[r][t],
                deaths: observed.deaths[r][t],
                recovered: observed.recovered[r][t],
                active: observed.active(r, t),
            })
            .map_err(|e| io_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowCsvRow {
    pub date: NaiveDate,
    pub origin: String,
    pub destination: String,
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub destination_lat: f64,
    pub destination_lon: f64,
    pub visitors: Option<f64>,
    pub pop_flows: f64,
}

/// Loads daily origin–destination flows into dense matrices, using the
/// `pop_flows` column. Rows touching regions outside `regions` are skipped;
/// pairs without rows are zero.
pub fn load_flows(path: &Path, regions: &RegionSet) -> Result<MobilitySchedule, IngestError> {
    if regions.is_empty() {
        return Err(IngestError::Content {
            path: path.to_path_buf(),
            reason: "empty region filter".into(),
        });
    }
    let rows: Vec<(u64, FlowCsvRow)> = read_rows(path)?;
    let kept: Vec<(u64, usize, usize, &FlowCsvRow)> = rows
        .iter()
        .filter_map(|(line, r)| {
            Some((*line, regions.index_of(&r.origin)?, regions.index_of(&r.destination)?, r))
        })
        .collect();
    let Some(start) = kept.iter().map(|k| k.3.date).min() else {
        return Err(IngestError::Content {
            path: path.to_path_buf(),
            reason: "no rows for the selected regions".into(),
        });
    };
    let end = kept.iter().map(|k| k.3.date).max().expect("non-empty");
    let days = (end - start).num_days() as usize + 1;
    let mut schedule = MobilitySchedule::zeros(start, regions.len(), days);
    let mut seen: HashMap<(usize, usize, usize), u64> = HashMap::new();
    for (line, o, d, r) in kept {
        if o == d {
            return Err(row_err(path, line, "origin and destination are the same region"));
        }
        if !(r.pop_flows >= 0.0) {
            return Err(row_err(path, line, format!("pop_flows must be nonnegative, found {}", r.pop_flows)));
        }
        let day = (r.date - start).num_days() as usize;
        if let Some(first) = seen.insert((day, o, d), line) {
            return Err(IngestError::Duplicate {
                path: path.to_path_buf(),
                key: format!("{} {}->{}", r.date, r.origin, r.destination),
                first,
                second: line,
            });
        }
        schedule.set(day, o, d, r.pop_flows);
    }
    Ok(schedule)
}

/// Writes every ordered pair on every day, zeros included, so reloading
/// reproduces the schedule exactly.
pub fn write_flows(schedule: &MobilitySchedule, regions: &RegionSet, path: &Path) -> Result<(), IngestError> {
    let mut w = writer(path)?;
    for day in 0..schedule.days() {
        let date = schedule.date(day);
        for (o, origin) in regions.iter().enumerate() {
            for (d, dest) in regions.iter().enumerate() {
                if o == d {
                    continue;
                }
                w.serialize(FlowCsvRow {
                    date,
                    origin: origin.code.clone(),
                    destination: dest.code.clone(),
                    origin_lat: origin.lat,
                    origin_lon: origin.lon,
                    destination_lat: dest.lat,
                    destination_lon: dest.lon,
                    visitors: None,
                    pop_flows: schedule.get(day, o, d),
                })
                .map_err(|e| io_err(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCsvRow {
    pub date: NaiveDate,
    pub state: String,
    pub category: String,
    pub detail: String,
}

/// Loads recorded policy events (kept for reporting only).
pub fn load_policy(path: &Path) -> Result<Vec<PolicyCsvRow>, IngestError> {
    Ok(read_rows(path)?.into_iter().map(|(_, r)| r).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamsCsvRow {
    region: String,
    window_start: NaiveDate,
    window_end: NaiveDate,
    #[serde(rename = "beta_I")]
    beta_i: f64,
    #[serde(rename = "beta_Q")]
    beta_q: f64,
    sigma: f64,
    delta: f64,
    gamma: f64,
    mu: f64,
}

/// Writes piecewise-constant rates; `window_end` is exclusive and the last
/// window ends at `end_date`.
pub fn write_params(
    params: &EpiParams,
    regions: &RegionSet,
    start_date: NaiveDate,
    end_date: NaiveDate,
    path: &Path,
) -> Result<(), IngestError> {
    let mut w = writer(path)?;
    for (r, region) in regions.iter().enumerate() {
        let steps = params.steps(r);
        for (k, step) in steps.iter().enumerate() {
            let window_end = steps
                .get(k + 1)
                .map_or(end_date, |next| start_date + chrono::Duration::days(next.start_day as i64));
            w.serialize(ParamsCsvRow {
                region: region.code.clone(),
                window_start: start_date + chrono::Duration::days(step.start_day as i64),
                window_end,
                beta_i: step.rates.beta_i,
                beta_q: step.rates.beta_q,
                sigma: step.rates.sigma,
                delta: step.rates.delta,
                gamma: step.rates.gamma,
                mu: step.rates.mu,
            })
            .map_err(|e| io_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Loads a parameter CSV as rate steps relative to `start_date`. Windows
/// starting before `start_date` take effect on day 0; every region needs
/// at least one row.
pub fn load_params(path: &Path, regions: &RegionSet, start_date: NaiveDate) -> Result<EpiParams, IngestError> {
    let rows: Vec<(u64, ParamsCsvRow)> = read_rows(path)?;
    let mut steps: Vec<Vec<RateStep>> = vec![Vec::new(); regions.len()];
    for (line, row) in rows {
        let r = regions
            .index_of(&row.region)
            .ok_or_else(|| IngestError::UnknownRegion {
                path: path.to_path_buf(),
                line,
                code: row.region.clone(),
            })?;
        if row.window_end <= row.window_start {
            return Err(row_err(path, line, "window_end must be after window_start"));
        }
        let rates = Rates {
            beta_i: row.beta_i,
            beta_q: row.beta_q,
            sigma: row.sigma,
            delta: row.delta,
            gamma: row.gamma,
            mu: row.mu,
        };
        rates.check(&row.region).map_err(|e| row_err(path, line, e))?;
        let start_day = (row.window_start - start_date).num_days().max(0) as usize;
        steps[r].push(RateStep { start_day, rates });
    }
    for (r, s) in steps.iter_mut().enumerate() {
        s.sort_by_key(|step| step.start_day);
        if s.is_empty() {
            return Err(IngestError::Content {
                path: path.to_path_buf(),
                reason: format!("no parameters for region {}", regions.code(r)),
            });
        }
        if s.windows(2).any(|w| w[0].start_day == w[1].start_day) {
            return Err(IngestError::Content {
                path: path.to_path_buf(),
                reason: format!("overlapping windows for region {}", regions.code(r)),
            });
        }
        s[0].start_day = 0;
    }
    Ok(EpiParams::new(steps))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PopulationCsvRow {
    region: String,
    population: f64,
}

/// Loads one population per region, in `regions` order.
pub fn load_populations(path: &Path, regions: &RegionSet) -> Result<Vec<f64>, IngestError> {
    let rows: Vec<(u64, PopulationCsvRow)> = read_rows(path)?;
    let mut out: Vec<Option<(u64, f64)>> = vec![None; regions.len()];
    for (line, row) in rows {
        let r = regions
            .index_of(&row.region)
            .ok_or_else(|| IngestError::UnknownRegion {
                path: path.to_path_buf(),
                line,
                code: row.region.clone(),
            })?;
        if !(row.population.is_finite() && row.population > 0.0) {
            return Err(row_err(path, line, "population must be positive"));
        }
        if let Some((first, _)) = out[r] {
            return Err(IngestError::Duplicate {
                path: path.to_path_buf(),
                key: row.region,
                first,
                second: line,
            });
        }
        out[r] = Some((line, row.population));
    }
    out.iter()
        .enumerate()
        .map(|(r, v)| {
            v.map(|(_, p)| p).ok_or_else(|| IngestError::Content {
                path: path.to_path_buf(),
                reason: format!("no population for region {}", regions.code(r)),
            })
        })
        .collect()
}

pub fn write_populations(populations: &[f64], regions: &RegionSet, path: &Path) -> Result<(), IngestError> {
    let mut w = writer(path)?;
    for (region, &population) in regions.iter().zip(populations) {
        w.serialize(PopulationCsvRow {
            region: region.code.clone(),
            population,
        })
        .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    const EPI_HEADER: &str = "date,state,lat,lon,confirmed,deaths,recovered,active\n";

    #[test]
    fn clean_epi() {
        let mut body = EPI_HEADER.to_string();
        for d in 1..=10 {
            for s in ["AZ", "NM"] {
                body += &format!("2020-04-{d:02},{s},1.0,2.0,{},{},0,{}\n", d * 10, d, d * 9);
            }
        }
        let f = file(&body);
        let obs = load_epi(f.path(), None).unwrap();
        assert_eq!(obs.days(), 10);
        assert_eq!(obs.regions.codes(), vec!["AZ", "NM"]);
        assert_eq!(obs.repairs, 0);
        assert_eq!(obs.confirmed[1][9], 100.0);
    }

    #[test]
    fn dip_is_repaired() {
        let f = file(&format!(
            "{EPI_HEADER}2020-04-01,AZ,0,0,100,0,0,100\n2020-04-02,AZ,0,0,95,0,0,95\n2020-04-03,AZ,0,0,110,0,0,110\n"
        ));
        let obs = load_epi(f.path(), None).unwrap();
        assert_eq!(obs.confirmed[0], vec![100.0, 100.0, 110.0]);
        assert_eq!(obs.repairs, 1);
    }

    #[test]
    fn missing_day_forward_filled() {
        let f = file(&format!(
            "{EPI_HEADER}2020-04-01,AZ,0,0,100,1,0,99\n2020-04-03,AZ,0,0,110,2,0,108\n"
        ));
        let obs = load_epi(f.path(), None).unwrap();
        assert_eq!(obs.confirmed[0], vec![100.0, 100.0, 110.0]);
        assert_eq!(obs.filled[0], vec![false, true, false]);
    }

    #[test]
    fn negative_deaths_rejected_with_line() {
        let f = file(&format!(
            "{EPI_HEADER}2020-04-01,AZ,0,0,100,1,0,99\n2020-04-02,AZ,0,0,100,-1,0,99\n"
        ));
        let err = load_epi(f.path(), None).unwrap_err();
        assert!(matches!(err, IngestError::Row { line: 3, .. }), "{err}");
    }

    #[test]
    fn unparseable_and_unknown() {
        let f = file(&format!("{EPI_HEADER}2020-04-01,AZ,0,0,many,1,0,99\n"));
        assert!(matches!(load_epi(f.path(), None), Err(IngestError::Row { line: 2, .. })));
        let f = file(&format!("{EPI_HEADER}2020-04-01,CA,0,0,1,1,0,0\n"));
        let regions = RegionSet::from_codes(&["AZ"]);
        assert!(matches!(
            load_epi(f.path(), Some(&regions)),
            Err(IngestError::UnknownRegion { line: 2, .. })
        ));
    }

    const FLOW_HEADER: &str =
        "date,origin,destination,origin_lat,origin_lon,destination_lat,destination_lon,visitors,pop_flows\n";

    #[test]
    fn single_flow_row() {
        let f = file(&format!("{FLOW_HEADER}2020-04-01,AZ,NM,0,0,0,0,12,500\n"));
        let regions = RegionSet::from_codes(&["AZ", "NM", "TX"]);
        let s = load_flows(f.path(), &regions).unwrap();
        assert_eq!(s.days(), 1);
        assert_eq!(s.get(0, 0, 1), 500.0);
        assert_eq!(s.day(0).iter().sum::<f64>(), 500.0);
    }

    #[test]
    fn duplicate_pair_names_both_lines() {
        let f = file(&format!(
            "{FLOW_HEADER}2020-04-01,AZ,NM,0,0,0,0,,500\n2020-04-01,NM,AZ,0,0,0,0,,5\n2020-04-01,AZ,NM,0,0,0,0,,7\n"
        ));
        let err = load_flows(f.path(), &RegionSet::from_codes(&["AZ", "NM"])).unwrap_err();
        assert!(matches!(err, IngestError::Duplicate { first: 2, second: 4, .. }), "{err}");
        assert!(err.to_string().contains("lines 2 and 4"));
    }

    #[test]
    fn flows_round_trip() {
        let regions = RegionSet::from_codes(&["AZ", "NM", "TX"]);
        let start = NaiveDate::from_ymd_opt(2020, 4, 12).unwrap();
        let mut s = MobilitySchedule::zeros(start, 3, 9);
        for day in 0..9 {
            s.set(day, 0, 1, 100.0 + day as f64 / 3.0);
            s.set(day, 2, 0, 0.1 * day as f64);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flows.csv");
        write_flows(&s, &regions, &path).unwrap();
        assert_eq!(load_flows(&path, &regions).unwrap(), s);
    }

    #[test]
    fn params_round_trip() {
        let regions = RegionSet::from_codes(&["AZ", "NM"]);
        let start = NaiveDate::from_ymd_opt(2020, 4, 12).unwrap();
        let a = Rates {
            beta_i: 0.3,
            beta_q: 0.1,
            sigma: 0.2,
            delta: 0.1,
            gamma: 0.07,
            mu: 0.01,
        };
        let b = Rates { beta_i: 0.2, ..a };
        let params = EpiParams::new(vec![
            vec![RateStep { start_day: 0, rates: a }, RateStep { start_day: 14, rates: b }],
            vec![RateStep { start_day: 0, rates: b }],
        ]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.csv");
        write_params(&params, &regions, start, start + chrono::Duration::days(28), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("region,window_start,window_end,beta_I,beta_Q,sigma,delta,gamma,mu\n"));
        assert_eq!(load_params(&path, &regions, start).unwrap(), params);
    }

    #[test]
    fn populations_round_trip_and_gaps() {
        let regions = RegionSet::from_codes(&["AZ", "NM"]);
        let f = tempfile::NamedTempFile::new().unwrap();
        write_populations(&[7.0e6, 2.1e6], &regions, f.path()).unwrap();
        assert_eq!(load_populations(f.path(), &regions).unwrap(), vec![7.0e6, 2.1e6]);

        let missing = file("region,population\nAZ,7000000\n");
        assert!(matches!(
            load_populations(missing.path(), &regions),
            Err(IngestError::Content { .. })
        ));
        let dup = file("region,population\nAZ,1\nNM,2\nAZ,3\n");
        assert!(matches!(
            load_populations(dup.path(), &regions),
            Err(IngestError::Duplicate { first: 2, second: 4, .. })
        ));
    }
}
