//! Online switch decision: stay on the current layout or reconfigure.
//!
//! For every candidate TP degree the controller estimates the time left to
//! drain the node if the remaining samples were merged onto that layout,
//! adds the one-time switch cost, and moves only when the best candidate
//! beats staying put. Remaining time assumes every active sample runs to
//! `l_max` with its group's batch size frozen, which overestimates the tail
//! but never underestimates it.

use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterSpec, ParallelConfig};
use crate::error::{Error, Result};
use crate::latency::LatencyModel;
use crate::switchcost::{CommGroupPool, SwitchCostBreakdown, SwitchCostModel};
use crate::workload::{ActiveSample, BatchStatus};

/// Steps summed per predictor query in [`est_rem_time`].
pub const DEFAULT_CHUNK_STEPS: u32 = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerParams {
    pub tp_list: Vec<u32>,
    pub eval_interval: u32,
    /// Chunk length for remaining-time summation; `<= 1` sums every step.
    #[serde(default = "default_chunk")]
    pub chunk_steps: u32,
    pub enabled: bool,
    /// Minimum predicted saving, as a fraction of `t_cur`, before switching.
    /// Zero switches on any strict improvement.
    #[serde(default)]
    pub min_gain: f64,
}

fn default_chunk() -> u32 {
    DEFAULT_CHUNK_STEPS
}

impl ControllerParams {
    pub fn validate(&self, cluster: &ClusterSpec) -> Result<()> {
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.min_gain) {
            return Err(Error::Config(format!("min_gain {} outside [0, 1)", self.min_gain)));
        }
        if self.tp_list.is_empty() {
            return Err(Error::Config("tp_list is empty".into()));
        }
        for &tp in &self.tp_list {
            ParallelConfig::new(tp, cluster)?;
        }
        Ok(())
    }
}

/// Batch, context and progress of one DP group as seen by the estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupLoad {
    pub batch: u32,
    pub agg_tokens: u64,
    /// Least generated length in the group; the group drains after `l_max - l_gen` steps.
    pub l_gen: u32,
}

impl GroupLoad {
    pub fn of(samples: &[ActiveSample]) -> Self {
        GroupLoad {
            batch: samples.len() as u32,
            agg_tokens: samples.iter().map(|s| s.context_len).sum(),
            l_gen: samples.iter().map(|s| s.generated_len).min().unwrap_or(0),
        }
    }
}

/// Time for one group to decode from `l_gen` to `l_max` at a constant batch.
pub fn group_rem_time(pred: &dyn LatencyModel, tp: u32, g: GroupLoad, l_max: u32, chunk_steps: u32) -> Result<f64> {
    if g.batch == 0 || g.l_gen >= l_max {
        return Ok(0.0);
    }
    let n = (l_max - g.l_gen) as u64;
    let b = g.batch as u64;
    let t0 = g.agg_tokens as f64;
    let mut total = 0.0;
    if chunk_steps <= 1 {
        for k in 0..n {
            total += pred.decode_latency(tp, g.batch, (g.agg_tokens + b * k) as f64)?;
        }
        return Ok(total);
    }
    let c = chunk_steps as u64;
    let mut k0 = 0;
    while k0 < n {
        let len = c.min(n - k0);
        let mid = k0 as f64 + (len - 1) as f64 / 2.0;
        total += len as f64 * pred.decode_latency(tp, g.batch, t0 + b as f64 * mid)?;
        k0 += len;
    }
    Ok(total)
}

/// The node finishes when its slowest group does.
pub fn est_rem_time(pred: &dyn LatencyModel, tp: u32, groups: &[GroupLoad], l_max: u32, chunk_steps: u32) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for &g in groups {
        worst = worst.max(group_rem_time(pred, tp, g, l_max, chunk_steps)?);
    }
    Ok(worst)
}

/// Balanced redistribution of the node's active samples over the target
/// layout's DP groups; the first `total % dp` groups take one extra.
pub fn compute_merged_bs(rbs_list: &[u32], tp_tgt: u32, cluster: &ClusterSpec) -> Result<Vec<u32>> {
    let cfg = ParallelConfig::new(tp_tgt, cluster)?;
    if cfg.dp_intra as usize == rbs_list.len() {
        return Ok(rbs_list.to_vec());
    }
    let total: u32 = rbs_list.iter().sum();
    let (q, r) = (total / cfg.dp_intra, total % cfg.dp_intra);
    Ok((0..cfg.dp_intra).map(|g| q + u32::from(g < r)).collect())
}

/// Assigns the node's active samples to `dp_tgt` groups.
///
/// Group sizes follow [`compute_merged_bs`]. Samples are placed longest
/// context first (ties by id) into the open group with the fewest aggregate
/// tokens (ties by index). An unchanged group count keeps the current placement.
pub fn merge_samples(status: &BatchStatus, dp_tgt: u32) -> Vec<Vec<ActiveSample>> {
    if dp_tgt as usize == status.groups.len() {
        return status.groups.iter().map(|g| g.samples.clone()).collect();
    }
    let total = status.total_active();
    let (q, r) = (total / dp_tgt, total % dp_tgt);
    let caps: Vec<u32> = (0..dp_tgt).map(|g| q + u32::from(g < r)).collect();
    let mut samples: Vec<ActiveSample> = status.all_samples().copied().collect();
    samples.sort_by(|a, b| b.context_len.cmp(&a.context_len).then(a.id.cmp(&b.id)));
    let mut out: Vec<Vec<ActiveSample>> = vec![Vec::new(); dp_tgt as usize];
    let mut load = vec![0u64; dp_tgt as usize];
    for s in samples {
        let g = (0..dp_tgt as usize)
            .filter(|&g| (out[g].len() as u32) < caps[g])
            .min_by_key(|&g| (load[g], g))
            .expect("capacities sum to the sample count");
        load[g] += s.context_len;
        out[g].push(s);
    }
    out
}

/// Prices a prospective switch. Implemented by [`SwitchCostModel`]; tests
/// substitute fixed costs.
pub trait SwitchQuote {
    fn quote(
        &self,
        pool: &CommGroupPool,
        contexts: &[u64],
        src: ParallelConfig,
        tgt: ParallelConfig,
    ) -> Result<SwitchCostBreakdown>;
}

impl SwitchQuote for SwitchCostModel<'_> {
    fn quote(
        &self,
        pool: &CommGroupPool,
        contexts: &[u64],
        src: ParallelConfig,
        tgt: ParallelConfig,
    ) -> Result<SwitchCostBreakdown> {
        SwitchCostModel::quote(self, pool, contexts, src, tgt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Stay,
    Switch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateEval {
    pub tp: u32,
    pub t_rem: f64,
    pub t_switch: f64,
    pub t_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchDecision {
    pub action: Action,
    pub current: ParallelConfig,
    pub target: Option<ParallelConfig>,
    pub t_cur: f64,
    pub t_best: f64,
    pub breakdown: Option<SwitchCostBreakdown>,
    pub evaluated: Vec<CandidateEval>,
}

impl SwitchDecision {
    pub fn is_switch(&self) -> bool {
        self.action == Action::Switch
    }
}

/// Everything `evaluate` reads besides the node status.
#[derive(Clone, Copy)]
pub struct EvalContext<'a> {
    pub params: &'a ControllerParams,
    pub pred: &'a dyn LatencyModel,
    pub cost: &'a dyn SwitchQuote,
    pub pool: &'a CommGroupPool,
    pub cluster: &'a ClusterSpec,
    pub l_max: u32,
}

/// Runs one evaluation for a node.
///
/// `lags[g]` is how far group `g`'s clock trails the node's most advanced
/// group (empty: all in sync). Staying finishes at `max_g(rem_g - lag_g)`
/// after the leading clock; a switch starts from that clock after a barrier.
pub fn evaluate(
    ctx: &EvalContext<'_>,
    status: &BatchStatus,
    current: ParallelConfig,
    lags: &[f64],
) -> Result<SwitchDecision> {
    let chunk = ctx.params.chunk_steps;
    let mut t_cur: f64 = 0.0;
    for (i, g) in status.groups.iter().enumerate() {
        let rem = group_rem_time(ctx.pred, current.tp, GroupLoad::of(&g.samples), ctx.l_max, chunk)?;
        t_cur = t_cur.max(rem - lags.get(i).copied().unwrap_or(0.0));
    }
    let contexts: Vec<u64> = status.all_samples().map(|s| s.context_len).collect();

    let mut tps = ctx.params.tp_list.clone();
    tps.sort_unstable();
    tps.dedup();
    let mut evaluated = Vec::with_capacity(tps.len());
    let mut best: Option<(usize, ParallelConfig, Option<SwitchCostBreakdown>)> = None;
    for tp in tps {
        let (eval, cfg, breakdown) = if tp == current.tp {
            let e = CandidateEval {
                tp,
                t_rem: t_cur,
                t_switch: 0.0,
                t_total: t_cur,
            };
            (e, current, None)
        } else {
            let cfg = ParallelConfig::new(tp, ctx.cluster)?;
            let loads: Vec<GroupLoad> = merge_samples(status, cfg.dp_intra)
                .iter()
                .map(|g| GroupLoad::of(g))
                .collect();
            let t_rem = est_rem_time(ctx.pred, tp, &loads, ctx.l_max, chunk)?;
            let b = ctx.cost.quote(ctx.pool, &contexts, current, cfg)?;
            let e = CandidateEval {
                tp,
                t_rem,
                t_switch: b.total,
                t_total: t_rem + b.total,
            };
            (e, cfg, Some(b))
        };
        evaluated.push(eval);
        // Strict comparison: on ties the smaller TP (visited first) wins.
        if best.as_ref().is_none_or(|(i, _, _)| eval.t_total < evaluated[*i].t_total) {
            best = Some((evaluated.len() - 1, cfg, breakdown));
        }
    }
    let Some((i, cfg, breakdown)) = best else {
        return Ok(SwitchDecision {
            action: Action::Stay,
            current,
            target: None,
            t_cur,
            t_best: t_cur,
            breakdown: None,
            evaluated,
        });
    };
    let t_best = evaluated[i].t_total;
    let switch = ctx.params.enabled
        && cfg.tp != current.tp
        && t_cur > t_best
        && t_cur - t_best >= ctx.params.min_gain * t_cur;
    Ok(SwitchDecision {
        action: if switch { Action::Switch } else { Action::Stay },
        current,
        target: switch.then_some(cfg),
        t_cur,
        t_best,
        breakdown: if switch { breakdown } else { None },
        evaluated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::test_cluster;
    use crate::switchcost::StateMethod;
    use crate::workload::GroupStatus;

    /// Per-step latency depends only on tp.
    struct PerTp(Vec<(u32, f64)>);

    impl LatencyModel for PerTp {
        fn decode_latency(&self, tp: u32, _: u32, _: f64) -> Result<f64> {
            self.0
                .iter()
                .find(|(t, _)| *t == tp)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::Lookup(format!("tp={tp}")))
        }
        fn prefill_latency(&self, _: u32, _: u32, _: f64) -> Result<f64> {
            Ok(0.0)
        }
    }

    struct Affine;

    impl LatencyModel for Affine {
        fn decode_latency(&self, _: u32, _: u32, t: f64) -> Result<f64> {
            Ok(1e-3 + 1e-6 * t)
        }
        fn prefill_latency(&self, _: u32, _: u32, _: f64) -> Result<f64> {
            Ok(0.0)
        }
    }

    struct FixedCost(f64);

    impl SwitchQuote for FixedCost {
        fn quote(&self, _: &CommGroupPool, _: &[u64], _: ParallelConfig, _: ParallelConfig) -> Result<SwitchCostBreakdown> {
            Ok(SwitchCostBreakdown::new((0.0, StateMethod::Migrate), 0.0, 0.0, 0.0, self.0))
        }
    }

    fn load(batch: u32, agg_tokens: u64, l_gen: u32) -> GroupLoad {
        GroupLoad { batch, agg_tokens, l_gen }
    }

    fn status(groups: Vec<Vec<(u32, u64, u32)>>) -> BatchStatus {
        BatchStatus {
            node: 0,
            groups: groups
                .into_iter()
                .enumerate()
                .map(|(g, v)| GroupStatus {
                    group: g as u32,
                    samples: v
                        .into_iter()
                        .map(|(id, context_len, generated_len)| ActiveSample { id, context_len, generated_len })
                        .collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn constant_predictor_remaining_time() {
        let p = PerTp(vec![(1, 0.01)]);
        let t = est_rem_time(&p, 1, &[load(1, 10, 90)], 100, 64).unwrap();
        assert!((t - 0.1).abs() < 1e-12);
        let t = est_rem_time(&p, 1, &[load(1, 10, 90), load(1, 10, 80)], 100, 1).unwrap();
        assert!((t - 0.2).abs() < 1e-12);
    }

    #[test]
    fn affine_predictor_step_sum() {
        let t = est_rem_time(&Affine, 1, &[load(2, 100, 7)], 10, 1).unwrap();
        let want: f64 = [100.0, 102.0, 104.0].iter().map(|x| 1e-3 + 1e-6 * x).sum();
        assert!((t - want).abs() < 1e-15);
        // Chunked midpoint summation is exact for an affine curve.
        let c = est_rem_time(&Affine, 1, &[load(2, 100, 0)], 1000, 64).unwrap();
        let e = est_rem_time(&Affine, 1, &[load(2, 100, 0)], 1000, 1).unwrap();
        assert!((c - e).abs() < 1e-9 * e);
    }

    #[test]
    fn merged_batch_sizes() {
        let c = test_cluster(8, 1);
        assert_eq!(compute_merged_bs(&[3, 5, 2, 2], 8, &c).unwrap(), vec![12]);
        assert_eq!(compute_merged_bs(&[3, 5, 2, 2], 4, &c).unwrap(), vec![6, 6]);
        assert_eq!(compute_merged_bs(&[3, 5, 2, 2], 2, &c).unwrap(), vec![3, 5, 2, 2]);
        assert_eq!(compute_merged_bs(&[1, 0, 0, 0], 4, &c).unwrap(), vec![1, 0]);
        assert!(compute_merged_bs(&[1], 3, &c).is_err());
    }

    #[test]
    fn merge_balances_tokens() {
        let s = status(vec![
            vec![(0, 100, 0), (1, 10, 0)],
            vec![(2, 90, 0)],
            vec![(3, 20, 0)],
            vec![],
        ]);
        let m = merge_samples(&s, 2);
        let ids: Vec<Vec<u32>> = m.iter().map(|g| g.iter().map(|s| s.id).collect()).collect();
        assert_eq!(ids, vec![vec![0, 1], vec![2, 3]]);
        assert_eq!(merge_samples(&s, 4)[1][0].id, 2);
        assert_eq!(merge_samples(&s, 1)[0].len(), 4);
    }

    fn decide(remaining: u32, tp_list: Vec<u32>) -> SwitchDecision {
        let cluster = test_cluster(8, 1 << 20);
        let params = ControllerParams {
            tp_list,
            eval_interval: 1,
            chunk_steps: 1,
            enabled: true,
            min_gain: 0.0,
        };
        let pred = PerTp(vec![(2, 15.37e-3), (8, 9.64e-3)]);
        let pool = CommGroupPool::new(0.0);
        let ctx = EvalContext {
            params: &params,
            pred: &pred,
            cost: &FixedCost(5.52),
            pool: &pool,
            cluster: &cluster,
            l_max: 10_000,
        };
        let s = status(vec![vec![(0, 5000, 10_000 - remaining)], vec![], vec![], vec![]]);
        evaluate(&ctx, &s, cluster.config_for_tp(2).unwrap(), &[]).unwrap()
    }

    #[test]
    fn long_tail_switches_to_tp8() {
        let d = decide(1000, vec![2, 8]);
        assert_eq!(d.action, Action::Switch);
        assert_eq!(d.target.unwrap().tp, 8);
        assert!((d.t_cur - 15.37).abs() < 1e-9);
        assert!((d.t_best - 15.16).abs() < 1e-9);
        assert_eq!(d.evaluated.len(), 2);
    }

    #[test]
    fn short_tail_stays() {
        let d = decide(100, vec![2, 8]);
        assert_eq!(d.action, Action::Stay);
        assert!((d.t_cur - 1.537).abs() < 1e-9);
        assert!((d.evaluated[1].t_total - 6.484).abs() < 1e-9);
    }

    #[test]
    fn current_only_always_stays() {
        assert_eq!(decide(5000, vec![2]).action, Action::Stay);
    }
}
