use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use tailtp_core::latency::{build_profile_grid, fit_predictor, run_profiler};
use tailtp_core::presets::a40_hardware;

fn predictor(c: &mut Criterion) {
    let hw = a40_hardware();
    let grid = build_profile_grid(&hw.cluster);
    let table = run_profiler(&hw, &grid).unwrap();
    let pred = fit_predictor(&table).unwrap();

    c.bench_function("profile_grid", |b| b.iter(|| run_profiler(&hw, black_box(&grid)).unwrap()));
    c.bench_function("fit_predictor", |b| b.iter(|| fit_predictor(black_box(&table)).unwrap()));
    c.bench_function("predict_decode_1k", |b| {
        b.iter(|| {
            let mut acc = 0.0;
            for i in 0..1000u32 {
                let batch = 1 + i % 200;
                let t = batch as f64 * (512 + 13 * i) as f64;
                acc += pred.predict_decode_latency([1, 2, 4, 8][(i % 4) as usize], batch, t).unwrap();
            }
            black_box(acc)
        })
    });
}

criterion_group!(benches, predictor);
criterion_main!(benches);
