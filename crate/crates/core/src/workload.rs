//! Rollout samples and response-length distributions.
//!
//! Target response lengths are drawn once when a scenario is built and stay
//! hidden from the controller, which only ever sees a [`BatchStatus`]:
//! active counts and current context lengths.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when checking that an empirical CDF ends at 1.0.
const CDF_END_TOL: f64 = 1e-9;

/// Parameters of one lognormal component, in log-token space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormalParams {
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DistributionKind {
    /// Points are `(length_tokens, cum_prob)`; sampled by inverse CDF with
    /// linear interpolation between consecutive points.
    EmpiricalCdf { points: Vec<(u32, f64)> },
    Lognormal(LogNormalParams),
    /// `weight` is the probability of drawing from `tail`.
    TwoComponentMixture {
        bulk: LogNormalParams,
        tail: LogNormalParams,
        weight: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthDistribution {
    #[serde(flatten)]
    pub kind: DistributionKind,
    pub max_len_cap: u32,
}

impl LengthDistribution {
    pub fn empirical(points: Vec<(u32, f64)>, max_len_cap: u32) -> Result<Self> {
        let dist = LengthDistribution {
            kind: DistributionKind::EmpiricalCdf {
                points: merge_cdf_points(points),
            },
            max_len_cap,
        };
        dist.validate()?;
        Ok(dist)
    }

    /// Long-tail reasoning-rollout default: P(len > 8192) = 10.85% and
    /// P(len > 16384) = 2.18% with a 24K cap.
    ///
    /// The bulk component is fixed (median 1500 tokens, sigma 0.6); the tail
    /// weight and median were solved numerically against the two tail
    /// probabilities. See `tests/distribution_fit.rs` for the check.
    pub fn long_tail_default() -> Self {
        LengthDistribution {
            kind: DistributionKind::TwoComponentMixture {
                bulk: LogNormalParams {
                    mu: 7.31322,
                    sigma: 0.6,
                },
                tail: LogNormalParams {
                    mu: 9.113289,
                    sigma: 0.5,
                },
                weight: 0.183434,
            },
            max_len_cap: 24_576,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_len_cap == 0 {
            return Err(Error::Config("max_len_cap must be >= 1".into()));
        }
        match &self.kind {
            DistributionKind::EmpiricalCdf { points } => validate_cdf(points, self.max_len_cap),
            DistributionKind::Lognormal(p) => validate_lognormal(p),
            DistributionKind::TwoComponentMixture { bulk, tail, weight } => {
                validate_lognormal(bulk)?;
                validate_lognormal(tail)?;
                if !(0.0..=1.0).contains(weight) {
                    return Err(Error::Config(format!(
                        "mixture weight {weight} outside [0, 1]"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Draws `n` response lengths, each in `[1, max_len_cap]`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<u32>> {
        if n == 0 {
            return Err(Error::Config("sample count must be >= 1".into()));
        }
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cap = self.max_len_cap;
        let out = match &self.kind {
            DistributionKind::EmpiricalCdf { points } => (0..n)
                .map(|_| inverse_cdf(points, rng.random::<f64>()).min(cap))
                .collect(),
            DistributionKind::Lognormal(p) => {
                let d = lognormal(p)?;
                (0..n).map(|_| round_len(d.sample(&mut rng), cap)).collect()
            }
            DistributionKind::TwoComponentMixture { bulk, tail, weight } => {
                let bulk = lognormal(bulk)?;
                let tail = lognormal(tail)?;
                (0..n)
                    .map(|_| {
                        let x = if rng.random::<f64>() < *weight {
                            tail.sample(&mut rng)
                        } else {
                            bulk.sample(&mut rng)
                        };
                        round_len(x, cap)
                    })
                    .collect()
            }
        };
        Ok(out)
    }
}

fn validate_lognormal(p: &LogNormalParams) -> Result<()> {
    if !p.mu.is_finite() || !(p.sigma.is_finite() && p.sigma > 0.0) {
        return Err(Error::Config(format!(
            "invalid lognormal parameters mu={} sigma={}",
            p.mu, p.sigma
        )));
    }
    Ok(())
}

fn lognormal(p: &LogNormalParams) -> Result<LogNormal<f64>> {
    LogNormal::new(p.mu, p.sigma).map_err(|e| Error::Config(format!("lognormal: {e}")))
}

fn round_len(x: f64, cap: u32) -> u32 {
    x.round().clamp(1.0, cap as f64) as u32
}

fn validate_cdf(points: &[(u32, f64)], cap: u32) -> Result<()> {
    let Some(&(_, last_p)) = points.last() else {
        return Err(Error::Validation("empirical CDF has no points".into()));
    };
    let mut prev: Option<(u32, f64)> = None;
    for &(len, p) in points {
        if len == 0 || len > cap {
            return Err(Error::Validation(format!(
                "CDF length {len} outside [1, {cap}]"
            )));
        }
        if !(0.0..=1.0 + CDF_END_TOL).contains(&p) {
            return Err(Error::Validation(format!(
                "cumulative probability {p} outside [0, 1]"
            )));
        }
        if let Some((plen, pp)) = prev {
            if len <= plen {
                return Err(Error::Validation(format!(
                    "CDF lengths not strictly increasing at {len}"
                )));
            }
            if p < pp {
                return Err(Error::Validation(format!(
                    "CDF decreases from {pp} to {p} at length {len}"
                )));
            }
        }
        prev = Some((len, p));
    }
    if (last_p - 1.0).abs() > CDF_END_TOL {
        return Err(Error::Validation(format!(
            "CDF ends at {last_p}, expected 1.0"
        )));
    }
    Ok(())
}

/// Sorts by length and merges duplicate lengths, keeping the larger probability.
fn merge_cdf_points(points: Vec<(u32, f64)>) -> Vec<(u32, f64)> {
    let mut merged: BTreeMap<u32, f64> = BTreeMap::new();
    for (len, p) in points {
        merged
            .entry(len)
            .and_modify(|q| *q = q.max(p))
            .or_insert(p);
    }
    merged.into_iter().collect()
}

fn inverse_cdf(points: &[(u32, f64)], u: f64) -> u32 {
    let idx = points.partition_point(|&(_, p)| p < u);
    if idx == 0 {
        return points[0].0;
    }
    if idx >= points.len() {
        return points[points.len() - 1].0;
    }
    let (l0, p0) = points[idx - 1];
    let (l1, p1) = points[idx];
    if p1 <= p0 {
        return l1;
    }
    let frac = (u - p0) / (p1 - p0);
    let x = l0 as f64 + frac * (l1 as f64 - l0 as f64);
    (x.round() as u32).clamp(l0, l1)
}

#[derive(Debug, Deserialize)]
struct TraceRow {
    length_tokens: u32,
    cum_prob: f64,
}

/// Loads an empirical length CDF from a `length_tokens,cum_prob` CSV.
/// Row order is irrelevant; duplicate lengths keep the larger probability.
/// The cap is set to the largest length in the trace.
pub fn load_trace(path: impl AsRef<Path>) -> Result<LengthDistribution> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["length_tokens", "cum_prob"] {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header `length_tokens,cum_prob`, got `{}`", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut points = Vec::new();
    for rec in rdr.deserialize::<TraceRow>() {
        let row = rec.map_err(|e| csv_error(path, e))?;
        points.push((row.length_tokens, row.cum_prob));
    }
    if points.is_empty() {
        return Err(Error::Validation(format!(
            "{}: trace has no rows",
            path.display()
        )));
    }
    let cap = points.iter().map(|p| p.0).max().unwrap_or(1);
    LengthDistribution::empirical(points, cap)
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        kind => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{kind:?}"),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleStatus {
    Active,
    Finished,
}

/// One rollout request.
///
/// `target_response_len` is already capped at the scenario's `l_max`, so a
/// sample finishes exactly when `generated_len == target_response_len`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u32,
    pub prompt_len: u32,
    pub target_response_len: u32,
    pub generated_len: u32,
    pub status: SampleStatus,
    pub node_id: u32,
    pub intra_dp_group: u32,
}

impl Sample {
    pub fn new(id: u32, prompt_len: u32, target_response_len: u32) -> Self {
        Sample {
            id,
            prompt_len,
            target_response_len,
            generated_len: 0,
            status: if target_response_len == 0 {
                SampleStatus::Finished
            } else {
                SampleStatus::Active
            },
            node_id: 0,
            intra_dp_group: 0,
        }
    }

    pub fn is_active(&self) -> bool {
        self.status == SampleStatus::Active
    }

    /// Prompt plus generated tokens: the KV context this sample occupies.
    pub fn context_len(&self) -> u64 {
        self.prompt_len as u64 + self.generated_len as u64
    }

    /// Generates one token. Returns `true` if this token finished the sample.
    pub fn advance(&mut self) -> bool {
        debug_assert!(self.is_active());
        self.generated_len += 1;
        if self.generated_len >= self.target_response_len {
            self.status = SampleStatus::Finished;
            true
        } else {
            false
        }
    }
}

/// Sum of prompt + generated tokens over active samples.
pub fn aggregate_tokens(samples: &[Sample]) -> u64 {
    samples
        .iter()
        .filter(|s| s.is_active())
        .map(Sample::context_len)
        .sum()
}

/// What the controller may observe about one active sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveSample {
    pub id: u32,
    pub context_len: u64,
    pub generated_len: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupStatus {
    pub group: u32,
    pub samples: Vec<ActiveSample>,
}

impl GroupStatus {
    pub fn active_count(&self) -> u32 {
        self.samples.len() as u32
    }

    pub fn aggregate_tokens(&self) -> u64 {
        self.samples.iter().map(|s| s.context_len).sum()
    }

    /// Least generated length among active samples (0 when empty).
    pub fn min_generated(&self) -> u32 {
        self.samples
            .iter()
            .map(|s| s.generated_len)
            .min()
            .unwrap_or(0)
    }
}

/// Per-node snapshot handed to the controller.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchStatus {
    pub node: u32,
    pub groups: Vec<GroupStatus>,
}

impl BatchStatus {
    /// Builds the snapshot from the node's samples, one entry per intra-node DP group.
    pub fn from_samples(node: u32, num_groups: u32, samples: &[Sample]) -> Self {
        let mut groups: Vec<GroupStatus> = (0..num_groups)
            .map(|group| GroupStatus {
                group,
                samples: Vec::new(),
            })
            .collect();
        for s in samples.iter().filter(|s| s.is_active() && s.node_id == node) {
            groups[s.intra_dp_group as usize].samples.push(ActiveSample {
                id: s.id,
                context_len: s.context_len(),
                generated_len: s.generated_len,
            });
        }
        BatchStatus { node, groups }
    }

    /// The remaining-batch-size list: active count per DP group.
    pub fn rbs_list(&self) -> Vec<u32> {
        self.groups.iter().map(GroupStatus::active_count).collect()
    }

    pub fn total_active(&self) -> u32 {
        self.groups.iter().map(GroupStatus::active_count).sum()
    }

    pub fn aggregate_tokens(&self) -> u64 {
        self.groups.iter().map(GroupStatus::aggregate_tokens).sum()
    }

    pub fn all_samples(&self) -> impl Iterator<Item = &ActiveSample> {
        self.groups.iter().flat_map(|g| g.samples.iter())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn active(prompt: u32, gen: u32) -> Sample {
        let mut s = Sample::new(0, prompt, gen + 100);
        s.generated_len = gen;
        s
    }

    #[test]
    fn degenerate_cdf_always_returns_its_point() {
        let d = LengthDistribution::empirical(vec![(100, 1.0)], 100).unwrap();
        assert_eq!(d.sample(3, 7).unwrap(), vec![100, 100, 100]);
    }

    #[test]
    fn two_point_cdf_mean_matches_inverse_cdf_rule() {
        // Half the mass sits at 10, the other half is uniform on (10, 20].
        let d = LengthDistribution::empirical(vec![(10, 0.5), (20, 1.0)], 20).unwrap();
        let xs = d.sample(100_000, 11).unwrap();
        let mean = xs.iter().map(|&x| x as f64).sum::<f64>() / xs.len() as f64;
        assert!((12.0..=18.0).contains(&mean), "mean {mean}");
        assert!((mean - 12.5).abs() < 0.1, "mean {mean}");
    }

    #[test]
    fn non_monotone_cdf_rejected() {
        let err = LengthDistribution::empirical(vec![(10, 0.7), (20, 0.4), (30, 1.0)], 30);
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn duplicate_lengths_merge_to_larger_probability() {
        let d = LengthDistribution::empirical(vec![(10, 0.2), (20, 1.0), (10, 0.6)], 20).unwrap();
        assert_eq!(
            d.kind,
            DistributionKind::EmpiricalCdf {
                points: vec![(10, 0.6), (20, 1.0)]
            }
        );
    }

    #[test]
    fn mixture_weight_out_of_range_rejected() {
        let mut d = LengthDistribution::long_tail_default();
        if let DistributionKind::TwoComponentMixture { weight, .. } = &mut d.kind {
            *weight = 1.5;
        }
        assert!(matches!(d.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn sampling_is_deterministic_and_capped() {
        let d = LengthDistribution::long_tail_default();
        let a = d.sample(5000, 3).unwrap();
        let b = d.sample(5000, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&x| (1..=24_576).contains(&x)));
        assert_ne!(a, d.sample(5000, 4).unwrap());
    }

    #[test]
    fn zero_samples_is_an_error() {
        let d = LengthDistribution::long_tail_default();
        assert!(d.sample(0, 1).is_err());
    }

    #[test]
    fn aggregate_tokens_cases() {
        assert_eq!(aggregate_tokens(&[]), 0);
        assert_eq!(aggregate_tokens(&[active(10, 5), active(20, 15)]), 50);
        let mut done = Sample::new(1, 100, 100);
        done.generated_len = 100;
        done.status = SampleStatus::Finished;
        assert_eq!(aggregate_tokens(&[active(10, 5), done]), 15);
    }

    #[test]
    fn advance_finishes_at_target() {
        let mut s = Sample::new(0, 4, 2);
        assert!(!s.advance());
        assert!(s.advance());
        assert_eq!(s.status, SampleStatus::Finished);
        assert_eq!(s.context_len(), 6);
    }

    #[test]
    fn batch_status_counts_active_per_group() {
        let mut samples: Vec<Sample> = (0..5).map(|i| Sample::new(i, 10, 50)).collect();
        for (i, s) in samples.iter_mut().enumerate() {
            s.intra_dp_group = (i % 2) as u32;
        }
        samples[4].status = SampleStatus::Finished;
        let st = BatchStatus::from_samples(0, 2, &samples);
        assert_eq!(st.rbs_list(), vec![2, 2]);
        assert_eq!(st.aggregate_tokens(), aggregate_tokens(&samples));
    }
}
