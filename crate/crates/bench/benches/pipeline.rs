use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use hab_bench::regression_problem;
use hab_core::calibrate::{fit_cutpoints, nelder_mead, CalibrationOpts, NelderMeadOpts};
use hab_core::synth::SyntheticDataset;
use hab_core::trees::{best_split, fit_forest, fit_gbdt, ForestParams, GbdtParams};
use hab_core::{ImputationMode, Region};

fn feature_assembly(c: &mut Criterion) {
    let ds = SyntheticDataset::generate(400, 100, 1);
    c.bench_function("feature_table/500", |b| {
        b.iter(|| {
            ds.feature_table(black_box(ImputationMode::On))
                .expect("features")
        })
    });
}

fn split_search(c: &mut Criterion) {
    let mut g = c.benchmark_group("best_split");
    for n in [1_000, 10_000] {
        let (x, y) = regression_problem(n, 45, 2);
        let w = vec![1.0; n];
        let rows: Vec<usize> = (0..n).collect();
        let features: Vec<usize> = (0..45).collect();
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| best_split(&x, &y, &w, &rows, &features, 1))
        });
    }
    g.finish();
}

fn model_fit(c: &mut Criterion) {
    let (x, y) = regression_problem(2_000, 45, 3);
    let w = vec![1.0; y.len()];
    let mut g = c.benchmark_group("fit");
    g.sample_size(10);
    let forest = ForestParams {
        n_estimators: 50,
        ..Default::default()
    };
    g.bench_function("forest/50", |b| {
        b.iter(|| fit_forest(&x, &y, &w, &forest, 7).expect("fit"))
    });
    let gbdt = GbdtParams {
        rounds: 100,
        ..Default::default()
    };
    g.bench_function("gbdt/100", |b| {
        b.iter(|| fit_gbdt(&x, &y, &w, &gbdt, 7).expect("fit"))
    });
    g.finish();
}

fn calibration(c: &mut Criterion) {
    let opts = NelderMeadOpts::default();
    c.bench_function("nelder_mead/rosenbrock", |b| {
        b.iter(|| {
            nelder_mead(
                |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2),
                black_box(&[-1.2, 1.0]),
                &opts,
            )
            .expect("converges")
        })
    });

    let n = 4_000;
    let oof: Vec<f64> = (0..n)
        .map(|i| 50.0 + 5_000.0 * ((i * 7919) % n) as f64 / n as f64)
        .collect();
    let sev: Vec<u8> = oof
        .iter()
        .map(|&p| {
            1 + [180.0, 440.0, 979.0, 2926.0]
                .iter()
                .filter(|&&b| p >= b)
                .count() as u8
        })
        .collect();
    let regions: Vec<Region> = (0..n).map(|i| Region::ALL[i % 4]).collect();
    let cal = CalibrationOpts::default();
    let mut g = c.benchmark_group("cutpoints");
    g.sample_size(10);
    g.bench_function("fit/4000", |b| {
        b.iter(|| fit_cutpoints(&oof, &sev, &regions, &cal).expect("fit"))
    });
    g.finish();
}

criterion_group!(
    benches,
    feature_assembly,
    split_search,
    model_fit,
    calibration
);
criterion_main!(benches);
