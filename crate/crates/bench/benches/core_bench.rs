use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use metapolicy_core::analytics::shapley_values;
use metapolicy_core::dynamics::{step, ScreeningCalendar};
use metapolicy_core::policy::{apply_tir, normalize_tir, TirPlan, TirWindow};
use metapolicy_core::{estimate_rt, run_episode, simulate, Paradigm, RtConfig, ScenarioConfig, SerialInterval};

fn five_region() -> ScenarioConfig {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/five_region.toml");
    ScenarioConfig::from_toml_file(path).expect("fixture scenario")
}

fn dynamics(c: &mut Criterion) {
    let config = five_region();
    let flows = config.baseline.truncated(config.days);
    let screening = ScreeningCalendar::new();
    let rates = config.params.rates_on(0);
    c.bench_function("step/5_regions", |b| {
        b.iter(|| step(black_box(&config.initial), flows.day(0), &rates, &[], 0).unwrap())
    });
    c.bench_function("simulate/5_regions_147_days", |b| {
        b.iter(|| simulate(black_box(&config), &flows, &screening).unwrap())
    });
    let mut group = c.benchmark_group("episode");
    group.sample_size(10);
    for paradigm in [Paradigm::Expert, Paradigm::Random] {
        group.bench_with_input(BenchmarkId::from_parameter(paradigm), &paradigm, |b, p| {
            b.iter(|| run_episode(&config, *p, None).unwrap())
        });
    }
    group.finish();
}

fn rt(c: &mut Criterion) {
    let si = SerialInterval::default();
    let cfg = RtConfig::default();
    let mut group = c.benchmark_group("estimate_rt");
    for len in [150usize, 1000] {
        let incidence: Vec<f64> = (0..len).map(|t| 100.0 * (1.0 + (t as f64 / 20.0).sin().abs())).collect();
        group.bench_with_input(BenchmarkId::from_parameter(len), &incidence, |b, inc| {
            b.iter(|| estimate_rt(black_box(inc), &si, &cfg).unwrap())
        });
    }
    group.finish();
}

fn shapley(c: &mut Criterion) {
    let mut group = c.benchmark_group("shapley_exact");
    group.sample_size(10);
    for m in [8usize, 12, 16] {
        let weights: Vec<f64> = (0..m).map(|j| 1.0 + j as f64).collect();
        let predict = |x: &[f64]| {
            let linear: f64 = x.iter().zip(&weights).map(|(a, w)| a * w).sum();
            linear + x[0] * x[1]
        };
        let instance = vec![1.0; m];
        let background = vec![0.0; m];
        group.bench_with_input(BenchmarkId::from_parameter(m), &m, |b, _| {
            b.iter(|| shapley_values(predict, black_box(&instance), &background).unwrap())
        });
    }
    group.finish();
}

fn tir(c: &mut Criterion) {
    let config = five_region();
    let n = config.regions.len();
    let weeks = config.horizon_weeks;
    let mut plan = TirPlan::new();
    for o in 0..n {
        for d in (0..n).filter(|d| *d != o) {
            let raw: Vec<f64> = (0..weeks).map(|h| 1.0 + ((o + d + h) % 3) as f64).collect();
            plan.insert((o, d), normalize_tir(&raw).unwrap().0);
        }
    }
    let window = TirWindow {
        start: config.warmup_days,
        weeks,
    };
    c.bench_function("apply_tir/5_regions_all_pairs", |b| {
        b.iter(|| apply_tir(black_box(&config.baseline), &plan, window).unwrap())
    });
}

criterion_group!(benches, dynamics, rt, shapley, tir);
criterion_main!(benches);
