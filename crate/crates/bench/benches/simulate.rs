use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use tailtp_core::controller::{est_rem_time, GroupLoad};
use tailtp_core::engine::{build_predictor, reference_scenario};
use tailtp_core::{compare, run_with, Mode, ScenarioSpec};

fn simulate(c: &mut Criterion) {
    let spec = reference_scenario(8192);
    let pred = build_predictor(&spec).unwrap();
    let mut g = c.benchmark_group("engine");
    g.sample_size(10);
    for mode in [Mode::Static, Mode::Adaptive] {
        let s = ScenarioSpec { mode, ..spec.clone() };
        g.bench_function(format!("run_{mode}_8k"), |b| b.iter(|| run_with(black_box(&s), pred.as_ref()).unwrap()));
    }
    g.bench_function("compare_8k", |b| {
        b.iter(|| compare(black_box(&spec), pred.as_ref(), &[Mode::Adaptive]).unwrap())
    });
    g.finish();

    let groups = [GroupLoad { batch: 64, agg_tokens: 64 * 2048, l_gen: 1536 }; 2];
    for chunk in [1, 64] {
        c.bench_function(&format!("est_rem_time_chunk{chunk}"), |b| {
            b.iter(|| est_rem_time(pred.as_ref(), 4, black_box(&groups), 16_384, chunk).unwrap())
        });
    }
}

criterion_group!(benches, simulate);
criterion_main!(benches);
