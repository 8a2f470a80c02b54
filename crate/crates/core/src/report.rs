//! Episode output directories: CSV tables, `summary.json`, an optional
//! `transcript.jsonl` and a `manifest.json` of SHA-256 digests.
//!
//! | file | columns |
//! |------|---------|
//! | `trajectory.csv` | `date,region,S,E,I,Q,R,D,cum_Q` |
//! | `flows.csv` | flow schema of [`crate::ingest`] (post-policy schedule) |
//! | `policy_log.csv` | `cycle,acting_region,origin_region,action_type,parameters,policy_type_label` |
//! | `metrics.csv` | `date,region,IR,DR,ACR` |
//! | `rt.csv` | `date,region,rt_mean,rt_lo,rt_hi` |

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dynamics::Trajectory;
use crate::ingest::{load_flows, write_flows, IngestError};
use crate::orchestrator::{ArmSummary, EpisodeReport};
use crate::policy::{PolicyLogEntry, PolicyType};
use crate::rt::RtSeries;
use crate::scenario::{CompartmentState, MobilitySchedule, RegionSet, Strategy};

pub const MANIFEST: &str = "manifest.json";
pub const SUMMARY: &str = "summary.json";
pub const TRAJECTORY: &str = "trajectory.csv";
pub const FLOWS: &str = "flows.csv";
pub const POLICY_LOG: &str = "policy_log.csv";
pub const METRICS: &str = "metrics.csv";
pub const RT: &str = "rt.csv";
pub const TRANSCRIPT: &str = "transcript.jsonl";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ReportError {
    ReportError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn format_err(path: &Path, e: impl std::fmt::Display) -> ReportError {
    ReportError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrajectoryRow {
    date: NaiveDate,
    region: String,
    #[serde(rename = "S")]
    s: f64,
    #[serde(rename = "E")]
    e: f64,
    #[serde(rename = "I")]
    i: f64,
    #[serde(rename = "Q")]
    q: f64,
    #[serde(rename = "R")]
    r: f64,
    #[serde(rename = "D")]
    d: f64,
    #[serde(rename = "cum_Q")]
    cum_q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PolicyRow {
    cycle: usize,
    acting_region: String,
    origin_region: String,
    action_type: Strategy,
    parameters: String,
    policy_type_label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MetricsRow {
    date: NaiveDate,
    region: String,
    #[serde(rename = "IR")]
    ir: f64,
    #[serde(rename = "DR")]
    dr: f64,
    #[serde(rename = "ACR")]
    acr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RtRow {
    date: NaiveDate,
    region: String,
    rt_mean: f64,
    rt_lo: f64,
    rt_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AttributionRow<'a> {
    feature: &'a str,
    shapley_value: f64,
    instance_id: &'a str,
}

/// File name to lowercase hex SHA-256.
pub type Manifest = BTreeMap<String, String>;

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ReportError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    r.deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| format_err(path, e))
}

fn digest(path: &Path) -> Result<String, ReportError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes every output file for one episode into `dir` (created if needed)
/// and returns the manifest that was written alongside them. Wall-clock
/// time is left out so identical runs produce identical digests.
pub fn write_report(report: &EpisodeReport, regions: &RegionSet, dir: &Path) -> Result<Manifest, ReportError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let traj = &report.trajectory;
    let mut files = vec![SUMMARY, TRAJECTORY, FLOWS, POLICY_LOG, METRICS, RT];

    let path = dir.join(SUMMARY);
    let json = serde_json::to_string_pretty(&report.summary()).map_err(|e| format_err(&path, e))?;
    fs::write(&path, json + "\n").map_err(|e| io_err(&path, e))?;

    write_csv(
        &dir.join(TRAJECTORY),
        (0..traj.states.len()).flat_map(|t| {
            regions.iter().enumerate().map(move |(r, region)| {
                let s = traj.state(t, r);
                TrajectoryRow {
                    date: traj.date(t),
                    region: region.code.clone(),
                    s: s.s,
                    e: s.e,
                    i: s.i,
                    q: s.q,
                    r: s.r,
                    d: s.d,
                    cum_q: traj.confirmed[t][r],
                }
            })
        }),
    )?;

    write_flows(&traj.realized, regions, &dir.join(FLOWS))?;

    write_csv(
        &dir.join(POLICY_LOG),
        report.policy_log.iter().map(|e| PolicyRow {
            cycle: e.cycle,
            acting_region: e.acting.clone(),
            origin_region: e.origin.clone(),
            action_type: e.action_type,
            parameters: e.parameters.clone(),
            policy_type_label: e.label.map(|l| l.label().to_string()),
        }),
    )?;

    let m = &report.metrics;
    write_csv(
        &dir.join(METRICS),
        (1..=traj.days()).flat_map(|t| {
            regions.iter().enumerate().map(move |(r, region)| MetricsRow {
                date: traj.date(t),
                region: region.code.clone(),
                ir: m.ir[r][t - 1],
                dr: m.dr[r][t - 1],
                acr: m.acr[r][t],
            })
        }),
    )?;

    write_rt(&dir.join(RT), traj.start_date, &regions.codes(), &report.rt)?;

    let transcript_path = dir.join(TRANSCRIPT);
    if report.transcript.is_empty() {
        if transcript_path.exists() {
            fs::remove_file(&transcript_path).map_err(|e| io_err(&transcript_path, e))?;
        }
    } else {
        let mut f = fs::File::create(&transcript_path).map_err(|e| io_err(&transcript_path, e))?;
        for entry in &report.transcript {
            let line = serde_json::to_string(entry).map_err(|e| format_err(&transcript_path, e))?;
            writeln!(f, "{line}").map_err(|e| io_err(&transcript_path, e))?;
        }
        files.push(TRANSCRIPT);
    }

    let mut manifest = Manifest::new();
    for name in files {
        manifest.insert(name.to_string(), digest(&dir.join(name))?);
    }
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| format_err(&path, e))?;
    fs::write(&path, json + "\n").map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}

/// Writes `date,region,rt_mean,rt_lo,rt_hi`. Series are indexed by
/// transition, so estimate `k` is dated `start + k + 1` (the day its new
/// cases were counted).
pub fn write_rt(
    path: &Path,
    start: NaiveDate,
    codes: &[String],
    rt: &[Option<RtSeries>],
) -> Result<(), ReportError> {
    let mut rows = Vec::new();
    for (code, series) in codes.iter().zip(rt) {
        let Some(series) = series else { continue };
        for k in series.days() {
            let (mean, lo, hi) = series.at(k).expect("day within series");
            rows.push(RtRow {
                date: start + chrono::Duration::days(k as i64 + 1),
                region: code.clone(),
                rt_mean: mean,
                rt_lo: lo,
                rt_hi: hi,
            });
        }
    }
    rows.sort_by(|a, b| (a.date, &a.region).cmp(&(b.date, &b.region)));
    write_csv(path, rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ForecastRow {
    date: NaiveDate,
    region: String,
    cumulative: f64,
    forecast: bool,
}

/// Writes `date,region,cumulative,forecast`; the first `observed` days of
/// each series are flagged as observed.
pub fn write_forecast(
    path: &Path,
    start: NaiveDate,
    codes: &[String],
    series: &[Vec<f64>],
    observed: usize,
) -> Result<(), ReportError> {
    let days = series.iter().map(Vec::len).max().unwrap_or(0);
    write_csv(
        path,
        (0..days).flat_map(|t| {
            codes.iter().zip(series).filter_map(move |(code, s)| {
                Some(ForecastRow {
                    date: start + chrono::Duration::days(t as i64),
                    region: code.clone(),
                    cumulative: *s.get(t)?,
                    forecast: t >= observed,
                })
            })
        }),
    )
}

/// Reads `manifest.json` from an output directory.
pub fn read_manifest(dir: &Path) -> Result<Manifest, ReportError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| format_err(&path, e))
}

pub fn read_summary(dir: &Path) -> Result<ArmSummary, ReportError> {
    let path = dir.join(SUMMARY);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| format_err(&path, e))
}

/// The parts of a written episode needed for comparison and attribution.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedRun {
    pub summary: ArmSummary,
    pub regions: RegionSet,
    pub trajectory: Trajectory,
    pub policy_log: Vec<PolicyLogEntry>,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun, ReportError> {
    let summary = read_summary(dir)?;
    let regions = RegionSet::from_codes(&summary.regions);
    let n = regions.len();

    let path = dir.join(TRAJECTORY);
    let rows: Vec<TrajectoryRow> = read_csv(&path)?;
    if rows.len() != n * (summary.days + 1) {
        return Err(format_err(
            &path,
            format!("expected {} rows, found {}", n * (summary.days + 1), rows.len()),
        ));
    }
    let mut states = Vec::with_capacity(summary.days + 1);
    let mut confirmed = Vec::with_capacity(summary.days + 1);
    for (t, chunk) in rows.chunks(n).enumerate() {
        let date = summary.start_date + chrono::Duration::days(t as i64);
        for (r, row) in chunk.iter().enumerate() {
            if row.date != date || row.region != regions.code(r) {
                return Err(format_err(
                    &path,
                    format!("row for {} {} out of order", row.date, row.region),
                ));
            }
        }
        states.push(
            chunk
                .iter()
                .map(|x| CompartmentState::new(x.s, x.e, x.i, x.q, x.r, x.d))
                .collect(),
        );
        confirmed.push(chunk.iter().map(|x| x.cum_q).collect());
    }

    let realized = if n > 1 {
        load_flows(&dir.join(FLOWS), &regions)?
    } else {
        MobilitySchedule::zeros(summary.start_date, n, summary.days)
    };

    let path = dir.join(POLICY_LOG);
    let policy_log = read_csv::<PolicyRow>(&path)?
        .into_iter()
        .map(|row| {
            let label = match row.policy_type_label.as_deref() {
                None | Some("") => None,
                Some(s) => Some(
                    PolicyType::from_label(s).ok_or_else(|| format_err(&path, format!("unknown policy type {s:?}")))?,
                ),
            };
            Ok(PolicyLogEntry {
                cycle: row.cycle,
                acting: row.acting_region,
                origin: row.origin_region,
                action_type: row.action_type,
                parameters: row.parameters,
                label,
            })
        })
        .collect::<Result<_, ReportError>>()?;

    Ok(LoadedRun {
        trajectory: Trajectory {
            start_date: summary.start_date,
            states,
            confirmed,
            realized,
        },
        regions,
        summary,
        policy_log,
    })
}

/// Writes per-instance Shapley values as `feature,shapley_value,instance_id`.
pub fn write_attribution(
    path: &Path,
    feature_names: &[String],
    instances: &[(String, Vec<f64>)],
) -> Result<(), ReportError> {
    write_csv(
        path,
        instances.iter().flat_map(|(id, phi)| {
            feature_names.iter().zip(phi).map(move |(name, v)| AttributionRow {
                feature: name,
                shapley_value: *v,
                instance_id: id,
            })
        }),
    )
}
