use metapolicy_core::orchestrator::SUMMARY_SCHEMA_VERSION;
use metapolicy_core::report::{load_run, read_manifest, write_report, TRANSCRIPT};
use metapolicy_core::{
    compare_paradigms, run_episode, BackendSpec, CompartmentState, DecisionBackend, Paradigm, Rates,
    ScenarioBuilder, ScenarioConfig, ScriptStep, ScriptedBackend, Strategy,
};

fn rates(beta_i: f64) -> Rates {
    Rates {
        beta_i,
        beta_q: 0.02,
        sigma: 0.2,
        delta: 0.1,
        gamma: 0.07,
        mu: 0.002,
    }
}

fn three_region(strategy: Strategy) -> ScenarioConfig {
    let days = match strategy {
        Strategy::Tir => 21 + 42 * 2,
        _ => 21 + 14 * 4,
    };
    ScenarioBuilder::new("three")
        .region("AZ", CompartmentState::new(7.0e6, 100.0, 50.0, 20.0, 0.0, 0.0), rates(0.19))
        .region("NM", CompartmentState::new(2.0e6, 20.0, 10.0, 5.0, 0.0, 0.0), rates(0.19))
        .region("TX", CompartmentState::new(2.9e7, 4.0e4, 2.0e4, 8.0e3, 0.0, 0.0), rates(0.19))
        .constant_flows(vec![
            vec![0.0, 1.0e4, 6.0e4],
            vec![1.0e4, 0.0, 3.0e4],
            vec![6.0e4, 3.0e4, 0.0],
        ])
        .days(days)
        .warmup_days(21)
        .strategy(strategy)
        .seed(3)
        .build()
        .unwrap()
}

fn scripted(n: usize, step: ScriptStep) -> Vec<Box<dyn DecisionBackend>> {
    (0..n)
        .map(|_| Box::new(ScriptedBackend::new(vec![step.clone()])) as Box<dyn DecisionBackend>)
        .collect()
}

#[test]
fn uniform_reallocation_matches_ground_truth() {
    let config = three_region(Strategy::Tir);
    let gt = run_episode(&config, Paradigm::GroundTruth, None).unwrap();
    let uniform = run_episode(&config, Paradigm::Agent, Some(scripted(3, ScriptStep::Uniform))).unwrap();
    for (a, b) in gt.infections.iter().zip(&uniform.infections) {
        assert!((a - b).abs() <= 1e-9 * a, "{a} vs {b}");
    }
    assert_eq!(uniform.policy_log.len(), 2 * 3 * 2);
    assert_eq!(uniform.decision_calls, 2 * 3 * config.rounds);
    assert!(gt.policy_log.is_empty());
    assert!(gt.transcript.is_empty());
}

#[test]
fn expert_beats_ground_truth_on_planted_origin() {
    let config = three_region(Strategy::Tir);
    let gt = run_episode(&config, Paradigm::GroundTruth, None).unwrap();
    let expert = run_episode(&config, Paradigm::Expert, None).unwrap();
    assert!(expert.total_infections() < gt.total_infections());
    let counts = expert.policy_type_counts();
    assert!(counts["strict_first"] > 0);
}

#[test]
fn random_arm_is_seed_deterministic() {
    let config = three_region(Strategy::Tir);
    let a = run_episode(&config, Paradigm::Random, None).unwrap();
    let b = run_episode(&config, Paradigm::Random, None).unwrap();
    assert!(a.same_outcome(&b));
    let mut other = config.clone();
    other.seed = 4;
    let c = run_episode(&other, Paradigm::Random, None).unwrap();
    assert_ne!(a.infections, c.infections);
    assert_eq!(a.scenario_hash, c.scenario_hash);
    assert_ne!(a.config_hash, c.config_hash);
}

#[test]
fn population_is_conserved_under_every_strategy() {
    for strategy in [Strategy::Tir, Strategy::Sis, Strategy::Tis] {
        let config = three_region(strategy);
        let total0: f64 = config.initial.iter().map(CompartmentState::total).sum();
        for paradigm in Paradigm::ALL {
            let report = run_episode(&config, paradigm, None).unwrap();
            let traj = &report.trajectory;
            let total = traj.global_total(traj.days());
            assert!((total - total0).abs() <= 1e-6 * total0, "{strategy} {paradigm}: {total} vs {total0}");
        }
    }
}

#[test]
fn screening_reduces_infections() {
    let config = three_region(Strategy::Tis);
    let gt = run_episode(&config, Paradigm::GroundTruth, None).unwrap();
    let expert = run_episode(&config, Paradigm::Expert, None).unwrap();
    assert!(expert.total_infections() < gt.total_infections());
    assert!(expert.policy_log.iter().all(|e| e.label.is_none()));
}

#[test]
fn failing_backends_degrade_to_uniform() {
    let config = three_region(Strategy::Tir);
    let gt = run_episode(&config, Paradigm::GroundTruth, None).unwrap();
    let failed = run_episode(&config, Paradigm::Agent, Some(scripted(3, ScriptStep::Fail))).unwrap();
    assert_eq!(failed.degradations, 2 * 3 * config.rounds);
    for (a, b) in gt.infections.iter().zip(&failed.infections) {
        assert!((a - b).abs() <= 1e-9 * a);
    }
}

#[test]
fn wrong_backend_count_is_rejected() {
    let config = three_region(Strategy::Tir);
    assert!(run_episode(&config, Paradigm::Agent, Some(scripted(2, ScriptStep::Uniform))).is_err());
}

#[test]
fn comparison_against_itself_and_half() {
    let config = three_region(Strategy::Tir);
    let gt = run_episode(&config, Paradigm::GroundTruth, None).unwrap().summary();
    assert_eq!(gt.schema_version, SUMMARY_SCHEMA_VERSION);

    let table = compare_paradigms(std::slice::from_ref(&gt), config.eps).unwrap();
    let row = &table.arms[0];
    assert!(row.infection_reduction_pct.iter().all(|v| *v == 0.0));
    assert_eq!(row.aggregate_infection_reduction_pct, 0.0);
    assert_eq!(row.equity.infections, None);

    let mut half = gt.clone();
    half.paradigm = Paradigm::Expert;
    half.infections.iter_mut().for_each(|v| *v /= 2.0);
    half.total_infections /= 2.0;
    let table = compare_paradigms(&[gt.clone(), half], config.eps).unwrap();
    let row = &table.arms[1];
    for v in &row.infection_reduction_pct {
        assert!((v - 50.0).abs() < 1e-9);
    }
    assert!((row.aggregate_infection_reduction_pct - 50.0).abs() < 1e-9);
    assert!((row.equity.infections.unwrap() - 1.0).abs() < 1e-12);

    let mut other = gt.clone();
    other.scenario_hash = "different".into();
    assert!(compare_paradigms(&[gt.clone(), other], config.eps).is_err());
    let mut expert_only = gt;
    expert_only.paradigm = Paradigm::Expert;
    assert!(compare_paradigms(&[expert_only], config.eps).is_err());
}

#[test]
fn report_round_trip_and_manifest() {
    let mut config = three_region(Strategy::Tir);
    config.backends = vec![BackendSpec::Random; 3];
    let report = run_episode(&config, Paradigm::Agent, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_report(&report, &config.regions, dir.path()).unwrap();
    assert!(manifest.contains_key(TRANSCRIPT));
    assert_eq!(read_manifest(dir.path()).unwrap(), manifest);

    let loaded = load_run(dir.path()).unwrap();
    assert_eq!(loaded.summary, report.summary());
    assert_eq!(loaded.trajectory, report.trajectory);
    assert_eq!(loaded.policy_log, report.policy_log);

    let again = run_episode(&config, Paradigm::Agent, None).unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    assert_eq!(write_report(&again, &config.regions, dir2.path()).unwrap(), manifest);

    let header = std::fs::read_to_string(dir.path().join("policy_log.csv")).unwrap();
    assert!(header.starts_with("cycle,acting_region,origin_region,action_type,parameters,policy_type_label\n"));
    let gt = run_episode(&config, Paradigm::GroundTruth, None).unwrap();
    let dir3 = tempfile::tempdir().unwrap();
    let manifest = write_report(&gt, &config.regions, dir3.path()).unwrap();
    assert!(!manifest.contains_key(TRANSCRIPT));
}

#[test]
fn scenario_file_loads() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/five_region.toml");
    let config = ScenarioConfig::from_toml_file(&path).unwrap();
    assert_eq!(config.regions.len(), 5);
    assert_eq!(config.days, 147);
    assert_eq!(config.calendar.len(), 3);
}

fn terminal_cum_q(dir: &std::path::Path, regions: &[String]) -> Vec<f64> {
    let mut reader = csv::Reader::from_path(dir.join("trajectory.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (date, region, cum_q) = (col("date"), col("region"), col("cum_Q"));
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    let last = rows.iter().map(|r| r[date].to_string()).max().unwrap();
    regions
        .iter()
        .map(|code| {
            let row = rows.iter().find(|r| r[date] == last && r[region] == *code).unwrap();
            row[cum_q].parse().unwrap()
        })
        .collect()
}

#[test]
fn reductions_match_recomputation_from_csv() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/five_region.toml");
    let config = ScenarioConfig::from_toml_file(&path).unwrap();
    let codes = config.regions.codes();
    let dir = tempfile::tempdir().unwrap();
    let mut summaries = Vec::new();
    let mut cum = Vec::new();
    for paradigm in [Paradigm::GroundTruth, Paradigm::Expert] {
        let report = run_episode(&config, paradigm, None).unwrap();
        let out = dir.path().join(paradigm.label());
        write_report(&report, &config.regions, &out).unwrap();
        summaries.push(report.summary());
        cum.push(terminal_cum_q(&out, &codes));
    }
    let table = compare_paradigms(&summaries, config.eps).unwrap();
    let expert = &table.arms[1];
    for r in 0..codes.len() {
        let by_hand = 100.0 * (cum[0][r] - cum[1][r]) / cum[0][r];
        assert!((expert.infection_reduction_pct[r] - by_hand).abs() < 1e-9);
    }
    let (g, a): (f64, f64) = (cum[0].iter().sum(), cum[1].iter().sum());
    assert!((expert.aggregate_infection_reduction_pct - 100.0 * (g - a) / g).abs() < 1e-9);
    assert!(expert.aggregate_infection_reduction_pct > 0.0);
}

#[test]
fn ground_truth_keeps_baseline_flows() {
    for strategy in [Strategy::Tir, Strategy::Sis, Strategy::Tis] {
        let config = three_region(strategy);
        let gt = run_episode(&config, Paradigm::GroundTruth, None).unwrap();
        assert_eq!(gt.trajectory.realized, config.baseline.truncated(config.days));
    }
}
