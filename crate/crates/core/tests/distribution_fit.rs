//! The default length mixture against closed-form lognormal tails.

use statrs::distribution::{ContinuousCDF, Normal};
use tailtp_core::workload::DistributionKind;
use tailtp_core::LengthDistribution;

fn tail(mu: f64, sigma: f64, x: f64) -> f64 {
    1.0 - Normal::new(mu, sigma).unwrap().cdf(x.ln())
}

fn analytic_exceedance(d: &LengthDistribution, x: f64) -> f64 {
    match &d.kind {
        DistributionKind::TwoComponentMixture { bulk, tail: t, weight } => {
            (1.0 - weight) * tail(bulk.mu, bulk.sigma, x) + weight * tail(t.mu, t.sigma, x)
        }
        other => panic!("default is a mixture, got {other:?}"),
    }
}

#[test]
fn closed_form_tails_hit_targets() {
    let d = LengthDistribution::long_tail_default();
    // Lengths are rounded to integers, so "> 8192" means the continuous draw exceeds 8192.5.
    let p8 = analytic_exceedance(&d, 8192.5);
    let p16 = analytic_exceedance(&d, 16_384.5);
    assert!((p8 - 0.1085).abs() < 1e-3, "P(>8K) = {p8}");
    assert!((p16 - 0.0218).abs() < 1e-3, "P(>16K) = {p16}");
}

#[test]
fn sampled_tails_agree_with_closed_form() {
    let d = LengthDistribution::long_tail_default();
    let n = 200_000;
    let lens = d.sample(n, 7).unwrap();
    for x in [1024u32, 4096, 8192, 16_384] {
        let p = analytic_exceedance(&d, x as f64 + 0.5);
        let got = lens.iter().filter(|&&l| l > x).count() as f64 / n as f64;
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        assert!((got - p).abs() < 5.0 * sd, "P(>{x}): sampled {got}, analytic {p}");
    }
    assert!(lens.iter().all(|&l| (1..=d.max_len_cap).contains(&l)));
}

#[test]
fn sampling_is_seeded() {
    let d = LengthDistribution::long_tail_default();
    assert_eq!(d.sample(1000, 3).unwrap(), d.sample(1000, 3).unwrap());
    assert_ne!(d.sample(1000, 3).unwrap(), d.sample(1000, 4).unwrap());
}
