use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::{info, warn};

use metapolicy_core::analytics::{
    build_attribution_model, forecast_cumulative, AttributionDataset, ForestConfig,
};
use metapolicy_core::calibration::{regular_windows, ObservedSeries};
use metapolicy_core::dynamics::ScreeningCalendar;
use metapolicy_core::ingest::{self, IngestError};
use metapolicy_core::orchestrator::OrchestratorError;
use metapolicy_core::report::{self, ReportError};
use metapolicy_core::rt::clamp_incidence;
use metapolicy_core::scenario::ValidationError;
use metapolicy_core::{
    calibrate, compare_paradigms, estimate_rt, run_episode, simulate, ArmSummary,
    CalibrationConfig, Paradigm, RtConfig, ScenarioConfig, SerialInterval,
};

const EXIT_FAILURE: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_DEGRADED: u8 = 3;

#[derive(Parser)]
#[command(
    name = "metapolicy",
    version,
    about = "Metapopulation epidemic policy simulation and analysis"
)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode and write its report directory.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// agent, ground_truth, expert or random.
        #[arg(long, default_value = "agent")]
        paradigm: String,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of communication rounds.
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare report directories against the ground-truth run among them.
    Compare {
        /// Directory whose subdirectories hold `summary.json` files.
        #[arg(long)]
        reports: PathBuf,
        /// Where to write the comparison (default: REPORTS/comparison.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit piecewise-constant rates to observed cumulative counts.
    Calibrate {
        #[arg(long)]
        epi: PathBuf,
        #[arg(long)]
        flows: PathBuf,
        /// CSV with `region,population`.
        #[arg(long)]
        populations: PathBuf,
        #[arg(long, default_value_t = 14)]
        window_days: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the effective reproduction number from confirmed counts.
    Rt {
        /// Epi CSV; mutually exclusive with --report.
        #[arg(long, conflicts_with = "report", required_unless_present = "report")]
        epi: Option<PathBuf>,
        /// Report directory.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 21)]
        window: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extend cumulative confirmed counts by the mean recent increment.
    Forecast {
        #[arg(long, conflicts_with = "report", required_unless_present = "report")]
        epi: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 180)]
        horizon: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Shapley attribution of strict-first reallocation decisions.
    Attribute {
        /// Report directories, or parents of report directories.
        #[arg(long, required = true, num_args = 1..)]
        reports: Vec<PathBuf>,
        /// Explain at most this many instances.
        #[arg(long)]
        max_instances: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate a scenario and write its observations as input CSVs.
    SynthObserved {
        #[arg(long)]
        scenario: PathBuf,
        /// Relative noise applied to daily increments.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A bad argument or input file detected by the CLI itself.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Invalid>() || cause.is::<ValidationError>() || cause.is::<IngestError>() {
            return EXIT_INVALID;
        }
        if let Some(ReportError::Format { .. }) = cause.downcast_ref::<ReportError>() {
            return EXIT_INVALID;
        }
        if let Some(
            OrchestratorError::Mismatch(_)
            | OrchestratorError::NoGroundTruth
            | OrchestratorError::Backend(_)
            | OrchestratorError::BackendCount(..),
        ) = cause.downcast_ref::<OrchestratorError>()
        {
            return EXIT_INVALID;
        }
    }
    EXIT_FAILURE
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn dispatch(command: Command) -> Result<u8> {
    match command {
        Command::Run {
            scenario,
            paradigm,
            seed,
            rounds,
            out,
        } => run(&scenario, &paradigm, seed, rounds, &out),
        Command::Compare { reports, out } => {
            let out = out.unwrap_or_else(|| reports.join("comparison.json"));
            compare(&reports, &out).map(|_| 0)
        }
        Command::Calibrate {
            epi,
            flows,
            populations,
            window_days,
            seed,
            out,
        } => calibrate_cmd(&epi, &flows, &populations, window_days, seed, &out).map(|_| 0),
        Command::Rt {
            epi,
            report,
            window,
            out,
        } => rt_cmd(epi.as_deref(), report.as_deref(), window, &out).map(|_| 0),
        Command::Forecast {
            epi,
            report,
            horizon,
            out,
        } => forecast_cmd(epi.as_deref(), report.as_deref(), horizon, &out).map(|_| 0),
        Command::Attribute {
            reports,
            max_instances,
            seed,
            out,
        } => attribute(&reports, max_instances, seed, &out).map(|_| 0),
        Command::SynthObserved {
            scenario,
            noise,
            seed,
            out,
        } => synth_observed(&scenario, noise, seed, &out).map(|_| 0),
    }
}

fn run(
    scenario: &Path,
    paradigm: &str,
    seed: Option<u64>,
    rounds: Option<usize>,
    out: &Path,
) -> Result<u8> {
    let paradigm: Paradigm = paradigm.parse().map_err(invalid)?;
    let mut config = ScenarioConfig::from_toml_file(scenario)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(rounds) = rounds {
        if rounds == 0 {
            return Err(invalid("--rounds must be at least 1"));
        }
        config.rounds = rounds;
    }
    let report = run_episode(&config, paradigm, None)?;
    report::write_report(&report, &config.regions, out)?;
    println!(
        "{} {} seed {}: {:.0} confirmed, {:.0} deaths, {} decision calls, {:.2}s",
        report.scenario,
        report.paradigm,
        report.seed,
        report.total_infections(),
        report.total_deaths(),
        report.decision_calls,
        report.wall_clock_secs
    );
    if report.degradations > 0 {
        warn!(
            "{} decisions fell back after exhausting retries",
            report.degradations
        );
        eprintln!("{} degraded decisions", report.degradations);
        return Ok(EXIT_DEGRADED);
    }
    Ok(0)
}

fn summary_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join(report::SUMMARY).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .with_context(|| format!("reading {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(report::SUMMARY).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn compare(reports: &Path, out: &Path) -> Result<()> {
    let dirs = summary_dirs(reports)?;
    if dirs.is_empty() {
        return Err(invalid(format!(
            "no {} under {}",
            report::SUMMARY,
            reports.display()
        )));
    }
    let arms: Vec<ArmSummary> = dirs
        .iter()
        .map(|d| report::read_summary(d))
        .collect::<Result<_, _>>()?;
    let table = compare_paradigms(&arms, metapolicy_core::scenario::DEFAULT_EPS)?;

    println!(
        "scenario {} ({} regions)",
        table.scenario,
        table.regions.len()
    );
    println!(
        "{:<14} {:>6} {:>12} {:>12} {:>10} {:>10}  policy types",
        "paradigm", "seed", "infect. %", "deaths %", "gini inf", "gini dth"
    );
    let fmt_opt = |v: Option<f64>| v.map_or("-".to_string(), |g| format!("{g:.3}"));
    for arm in &table.arms {
        let types: Vec<String> = arm
            .policy_types
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        println!(
            "{:<14} {:>6} {:>12.3} {:>12.3} {:>10} {:>10}  {}",
            arm.paradigm.label(),
            arm.seed,
            arm.aggregate_infection_reduction_pct,
            arm.aggregate_death_reduction_pct,
            fmt_opt(arm.equity.infections),
            fmt_opt(arm.equity.deaths),
            types.join(" ")
        );
    }
    let json = serde_json::to_string_pretty(&table)?;
    fs::write(out, json + "\n").with_context(|| format!("writing {}", out.display()))?;
    info!("wrote {}", out.display());
    Ok(())
}

fn calibrate_cmd(
    epi: &Path,
    flows: &Path,
    populations: &Path,
    window_days: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let observed = ingest::load_epi(epi, None)?;
    let flows = ingest::load_flows(flows, &observed.regions)?;
    let populations = ingest::load_populations(populations, &observed.regions)?;
    if observed.days() < 2 {
        return Err(invalid(format!(
            "{}: need at least two days",
            epi.display()
        )));
    }
    let windows = regular_windows(observed.days() - 1, window_days);
    let cfg = CalibrationConfig {
        min_window_days: window_days.min(CalibrationConfig::default().min_window_days),
        seed,
        ..CalibrationConfig::default()
    };
    let result = calibrate(&observed, &flows, &windows, &populations, &cfg)?;
    let end = observed.start + chrono_days(observed.days() - 1);
    ingest::write_params(&result.params, &observed.regions, observed.start, end, out)?;
    let degenerate = result.fits.iter().filter(|f| f.degenerate).count();
    println!(
        "{} regions, {} windows, {} degenerate fits, {} unconverged fits, final loss {:.4e}",
        observed.regions.len(),
        windows.len(),
        degenerate,
        result.fits.iter().filter(|f| !f.converged).count(),
        result.window_losses.last().copied().unwrap_or(0.0)
    );
    Ok(())
}

fn chrono_days(n: usize) -> chrono::Duration {
    chrono::Duration::days(n as i64)
}

/// Region codes, start date and cumulative confirmed series from either
/// an epi CSV or a report directory.
fn confirmed_source(
    epi: Option<&Path>,
    report_dir: Option<&Path>,
) -> Result<(Vec<String>, chrono::NaiveDate, Vec<Vec<f64>>)> {
    match (epi, report_dir) {
        (Some(epi), _) => {
            let observed: ObservedSeries = ingest::load_epi(epi, None)?;
            Ok((observed.regions.codes(), observed.start, observed.confirmed))
        }
        (None, Some(dir)) => {
            let run = report::load_run(dir)?;
            let series = (0..run.regions.len())
                .map(|r| run.trajectory.confirmed_series(r))
                .collect();
            Ok((run.regions.codes(), run.trajectory.start_date, series))
        }
        (None, None) => bail!(invalid("one of --epi or --report is required")),
    }
}

fn rt_cmd(epi: Option<&Path>, report_dir: Option<&Path>, window: usize, out: &Path) -> Result<()> {
    let (codes, start, confirmed) = confirmed_source(epi, report_dir)?;
    let si = SerialInterval::default();
    let cfg = RtConfig {
        window,
        ..RtConfig::default()
    };
    let mut series = Vec::with_capacity(codes.len());
    for (code, cum) in codes.iter().zip(&confirmed) {
        let raw: Vec<f64> = cum.windows(2).map(|w| w[1] - w[0]).collect();
        let (incidence, _) = clamp_incidence(&raw);
        match estimate_rt(&incidence, &si, &cfg) {
            Ok(s) => {
                if let Some(last) = s.last_mean() {
                    println!("{code}: latest R_t {last:.3}");
                }
                series.push(Some(s));
            }
            Err(e) => {
                warn!("{code}: {e}");
                series.push(None);
            }
        }
    }
    if series.iter().all(Option::is_none) {
        return Err(invalid(format!(
            "series too short for a {window}-day window"
        )));
    }
    report::write_rt(out, start, &codes, &series)?;
    Ok(())
}

fn forecast_cmd(
    epi: Option<&Path>,
    report_dir: Option<&Path>,
    horizon: usize,
    out: &Path,
) -> Result<()> {
    let (codes, start, confirmed) = confirmed_source(epi, report_dir)?;
    let observed = confirmed.first().map_or(0, Vec::len);
    let mut series = Vec::with_capacity(codes.len());
    for (code, cum) in codes.iter().zip(&confirmed) {
        let f = forecast_cumulative(cum, horizon).with_context(|| format!("forecasting {code}"))?;
        println!(
            "{code}: {:.0} now, {:.0} after {horizon} days",
            cum.last().copied().unwrap_or(0.0),
            f.last().copied().unwrap_or(0.0)
        );
series.push(f);
    }
    report::write_forecast(out, start, &codes, &series, observed)?;
    Ok(())
}

fn attribute(
    reports: &[PathBuf],
    max_instances: Option<usize>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let mut dirs = Vec::new();
    for root in reports {
        dirs.extend(summary_dirs(root)?);
    }
    let mut data: Option<AttributionDataset> = None;
    let mut regions = None;
    let mut instance_ids = Vec::new();
    for dir in &dirs {
        let run = report::load_run(dir)?;
        if run.policy_log.iter().all(|e| e.label.is_none()) {
            info!(
                "{}: no labelled reallocation decisions, skipped",
                dir.display()
            );
            continue;
        }
        match &regions {
            None => regions = Some(run.regions.clone()),
            Some(r) if *r != run.regions => {
                return Err(invalid(format!(
                    "{}: region set differs from earlier reports",
                    dir.display()
                )))
            }
            Some(_) => {}
        }
        let data = data.get_or_insert_with(|| {
            AttributionDataset::new(metapolicy_core::analytics::attribution::feature_names(
                &run.regions,
            ))
        });
        let before = data.len();
        data.extend_from_episode(
            &run.trajectory,
            &run.regions,
            &run.summary.calendar,
            &run.policy_log,
        )?;
        let name = dir.file_name().map_or_else(
            || dir.display().to_string(),
            |n| n.to_string_lossy().into_owned(),
        );
        for (cycle, dest, origin) in &data.keys[before..] {
            instance_ids.push(format!("{name}:{cycle}:{dest}:{origin}"));
        }
    }
    let Some(data) = data else {
        return Err(invalid(
            "no reallocation decisions with policy-type labels in the given reports",
        ));
    };
    let model = build_attribution_model(
        &data,
        &ForestConfig {
            seed,
            ..ForestConfig::default()
        },
    )?;
    if model.degenerate {
        warn!("every decision has the same label; attributions are all zero");
    }
    let n = max_instances.unwrap_or(data.len()).min(data.len());
    let mut explained = Vec::with_capacity(n);
    for (id, row) in instance_ids.iter().zip(&data.rows).take(n) {
        explained.push((id.clone(), model.explain(row)?));
    }
    report::write_attribution(out, &model.feature_names, &explained)?;

    let mut importance = vec![0.0; model.feature_names.len()];
    for (_, phi) in &explained {
        for (a, v) in importance.iter_mut().zip(phi) {
            *a += v.abs() / n.max(1) as f64;
        }
    }
    let mut ranked: Vec<(&String, f64)> = model.feature_names.iter().zip(importance).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    println!(
        "{} rows ({} strict-first), training accuracy {:.3}, {} explained",
        data.len(),
        data.positives(),
        model.accuracy(&data),
        n
    );
    for (name, v) in ranked.iter().take(5) {
        println!("  {name:<16} {v:.4}");
    }
    Ok(())
}

fn synth_observed(scenario: &Path, noise: f64, seed: u64, out: &Path) -> Result<()> {
    if !(0.0..1.0).contains(&noise) {
        return Err(invalid("--noise must be in [0, 1)"));
    }
    let config = ScenarioConfig::from_toml_file(scenario)?;
    let flows = config.baseline.truncated(config.days);
    let traj = simulate(&config, &flows, &ScreeningCalendar::new())?;
    let mut observed = ObservedSeries::from_trajectory(&traj, &config.regions);
    if noise > 0.0 {
        observed = observed.with_increment_noise(noise, seed);
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    ingest::write_epi(&observed, &out.join("epi.csv"))?;
    ingest::write_flows(&flows, &config.regions, &out.join("flows.csv"))?;
    let populations: Vec<f64> = config.initial.iter().map(|s| s.living()).collect();
    ingest::write_populations(&populations, &config.regions, &out.join("populations.csv"))?;
    println!(
        "{} days for {} regions written to {}",
        observed.days(),
        config.regions.len(),
        out.display()
    );
    Ok(())
}
