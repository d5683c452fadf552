//! Remaining-time estimates checked against engine-measured decode time.

use tailtp_core::controller::{est_rem_time, GroupLoad};
use tailtp_core::engine::{reference_scenario, run_with};
use tailtp_core::{Mode, PredictorSource, ScenarioSpec};

fn scenario(targets: Vec<u32>, l_max: u32, tp: u32) -> ScenarioSpec {
    let mut s = reference_scenario(l_max);
    s.global_batch = targets.len() as u32;
    s.targets = Some(targets);
    s.initial_tp = tp;
    s.prompt_len = 300;
    s.predictor = PredictorSource::Oracle;
    s.mode = Mode::Static;
    s
}

/// Decode time of the slowest group, from the engine.
fn measured_decode(s: &ScenarioSpec) -> f64 {
    let hw = s.hardware();
    let r = run_with(s, &hw).unwrap();
    r.generation_time - r.nodes[0].prefill_time
}

fn estimate(s: &ScenarioSpec) -> f64 {
    let hw = s.hardware();
    let dp = 8 / s.initial_tp;
    let groups: Vec<GroupLoad> = (0..dp)
        .map(|g| {
            let b = (0..s.global_batch).filter(|i| i % dp == g).count() as u32;
            GroupLoad { batch: b, agg_tokens: b as u64 * s.prompt_len as u64, l_gen: 0 }
        })
        .collect();
    est_rem_time(&hw, s.initial_tp, &groups, s.l_max, 1).unwrap()
}

#[test]
fn exact_when_every_sample_runs_to_l_max() {
    for tp in [1, 2, 4, 8] {
        // 16 samples split evenly, so every group has the same prefill.
        let s = scenario(vec![700; 16], 700, tp);
        let (est, got) = (estimate(&s), measured_decode(&s));
        assert!((est - got).abs() <= 1e-9 * got, "tp={tp}: estimate {est} vs engine {got}");
    }
}

#[test]
fn conservative_when_samples_stop_early() {
    for (seed, tp) in [(1u64, 1), (2, 2), (3, 4), (4, 8)] {
        let targets: Vec<u32> = (0..16).map(|i| 50 + ((i * 37 + seed as u32 * 11) % 600)).collect();
        let s = scenario(targets, 700, tp);
        let (est, got) = (estimate(&s), measured_decode(&s));
        assert!(est >= got, "tp={tp}: estimate {est} below engine {got}");
    }
}
