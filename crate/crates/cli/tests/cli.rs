use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_metapolicy"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Three regions, TX seeded heavily; `end` sets the length, `backend` the
/// agent backend table for every region.
fn scenario(dir: &Path, end: &str, backend: &str) -> PathBuf {
    scenario_with(dir, end, backend, "")
}

fn scenario_with(dir: &Path, end: &str, backend: &str, extra: &str) -> PathBuf {
    let region = |code: &str, s: u64, e: u64, i: u64, q: u64| {
        format!(
            "[[regions]]\ncode = \"{code}\"\ninitial = {{ s = {s}, e = {e}, i = {i}, q = {q}, r = 0, d = 0 }}\n\
             rates = {{ beta_i = 0.19, beta_q = 0.02, sigma = 0.2, delta = 0.1, gamma = 0.07, mu = 0.002 }}\n\
             backend = {backend}\n\n"
        )
    };
    let text = format!(
        "name = \"three\"\nstart_date = \"2020-04-12\"\nend_date = \"{end}\"\nseed = 1\nrounds = 1\n{extra}\n{}{}{}\
         [mobility]\nconstant = [[0, 10000, 60000], [10000, 0, 30000], [60000, 30000, 0]]\n",
        region("AZ", 7_000_000, 100, 50, 20),
        region("NM", 2_000_000, 20, 10, 5),
        region("TX", 29_000_000, 40_000, 20_000, 8_000),
    );
    let path = dir.join("scenario.toml");
    fs::write(&path, text).unwrap();
    path
}

const TIR_END: &str = "2020-07-26";

#[test]
fn run_compare_and_analyses() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = scenario(tmp.path(), TIR_END, "{ kind = \"expert\" }");
    let runs = tmp.path().join("runs");
    for (name, paradigm, seed) in [
        ("gt", "ground_truth", "1"),
        ("expert", "expert", "1"),
        ("random1", "random", "1"),
        ("random2", "random", "2"),
        ("random3", "random", "3"),
        ("random4", "random", "4"),
    ] {
        let out = run(&[
            "run", "--scenario", p(&sc), "--paradigm", paradigm, "--seed", seed, "--out",
            p(&runs.join(name)),
        ]);
        assert_eq!(code(&out), 0);
        assert!(runs.join(name).join("manifest.json").is_file());
    }

    let out = run(&["compare", "--reports", p(&runs)]);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("ground_truth") && stdout.contains("expert"));
    let table: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(runs.join("comparison.json")).unwrap()).unwrap();
    let arms = table["arms"].as_array().unwrap();
    assert_eq!(arms.len(), 6);
    let expert = arms.iter().find(|a| a["paradigm"] == "expert").unwrap();
    assert!(expert["aggregate_infection_reduction_pct"].as_f64().unwrap() > 0.0);

    let rt = tmp.path().join("rt.csv");
    assert_eq!(code(&run(&["rt", "--report", p(&runs.join("gt")), "--out", p(&rt)])), 0);
    let text = fs::read_to_string(&rt).unwrap();
    assert!(text.starts_with("date,region,rt_mean,rt_lo,rt_hi\n"));
    // 105 transitions, window 21: 85 estimates per region
    assert_eq!(text.lines().count(), 1 + 3 * 85);

    let fc = tmp.path().join("forecast.csv");
    let out = run(&["forecast", "--report", p(&runs.join("gt")), "--horizon", "30", "--out", p(&fc)]);
    assert_eq!(code(&out), 0);
    let text = fs::read_to_string(&fc).unwrap();
    assert!(text.starts_with("date,region,cumulative,forecast\n"));
    assert_eq!(text.lines().count(), 1 + 3 * (106 + 30));
    assert_eq!(text.lines().filter(|l| l.ends_with(",true")).count(), 3 * 30);

    let shap = tmp.path().join("shap.csv");
    let out = run(&[
        "attribute", "--reports", p(&runs), "--max-instances", "2", "--out", p(&shap),
    ]);
    assert_eq!(code(&out), 0);
    let text = fs::read_to_string(&shap).unwrap();
    assert!(text.starts_with("feature,shapley_value,instance_id\n"));
    // 16 features for three regions, two instances
    assert_eq!(text.lines().count(), 1 + 2 * 16);
}

#[test]
fn compare_without_ground_truth_is_invalid() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = scenario(tmp.path(), TIR_END, "{ kind = \"expert\" }");
    let runs = tmp.path().join("runs");
    let out = run(&["run", "--scenario", p(&sc), "--paradigm", "expert", "--out", p(&runs.join("e"))]);
    assert_eq!(code(&out), 0);
    let out = run(&["compare", "--reports", p(&runs)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("ground-truth"));
}

#[test]
fn failing_backends_exit_with_degradation_code() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = scenario(tmp.path(), TIR_END, "{ kind = \"scripted\", steps = [\"not json\"] }");
    let out_dir = tmp.path().join("agent");
    let out = run(&["run", "--scenario", p(&sc), "--paradigm", "agent", "--out", p(&out_dir)]);
    assert_eq!(code(&out), 3);
    assert!(out_dir.join("transcript.jsonl").is_file());
}

#[test]
fn invalid_inputs_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "name = \"x\"\n").unwrap();
    let out = run(&["run", "--scenario", p(&bad), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(code(&out), 2);

    let sc = scenario(tmp.path(), TIR_END, "{ kind = \"expert\" }");
    let out = run(&["run", "--scenario", p(&sc), "--paradigm", "oracle", "--out", p(&tmp.path().join("o"))]);
    assert_eq!(code(&out), 2);

    let epi = tmp.path().join("epi.csv");
    fs::write(
        &epi,
        "date,state,lat,lon,confirmed,deaths,recovered,active\n2020-04-12,AZ,0,0,-5,0,0,0\n",
    )
    .unwrap();
    let out = run(&["rt", "--epi", p(&epi), "--out", p(&tmp.path().join("rt.csv"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains(":2:"));
}

#[test]
fn synthetic_observations_calibrate() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = scenario_with(tmp.path(), "2020-05-17", "{ kind = \"expert\" }", "strategy = \"tis\"\n");
    let obs = tmp.path().join("obs");
    let out = run(&["synth-observed", "--scenario", p(&sc), "--out", p(&obs)]);
    assert_eq!(code(&out), 0);
    for f in ["epi.csv", "flows.csv", "populations.csv"] {
        assert!(obs.join(f).is_file(), "{f}");
    }

    let params = tmp.path().join("params.csv");
    let out = run(&[
        "calibrate",
        "--epi", p(&obs.join("epi.csv")),
        "--flows", p(&obs.join("flows.csv")),
        "--populations", p(&obs.join("populations.csv")),
        "--window-days", "14",
        "--out", p(&params),
    ]);
    assert_eq!(code(&out), 0);
    let text = fs::read_to_string(&params).unwrap();
    assert!(text.starts_with("region,window_start,window_end,beta_I,beta_Q,sigma,delta,gamma,mu\n"));
    // 35 transitions: 0..14 and 14..35
    assert_eq!(text.lines().count(), 1 + 3 * 2);
    assert!(text.contains("TX,2020-04-26,2020-05-17,"));

    // the fitted file plugs back into a scenario
    let toml = fs::read_to_string(&sc).unwrap() + "\n[params]\ncsv = \"params.csv\"\n";
    let refit = tmp.path().join("refit.toml");
    fs::write(&refit, toml).unwrap();
    let out = run(&["synth-observed", "--scenario", p(&refit), "--out", p(&tmp.path().join("obs2"))]);
    assert_eq!(code(&out), 0);
}
