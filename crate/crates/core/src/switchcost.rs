//! One-time cost of moving a node from one TP/DP layout to another.
//!
//! ```text
//! S_kv   = sum_i 2 * M * ctx_i * (H / tp_src) * s      bytes sent per rank
//! T_move = S_kv / B_uni
//! L_rms  = sqrt(mean(ctx_i^2))
//! T_rec  = prefill(B, L_rms; tp_tgt)
//! T_switch = min(T_move, T_rec) + T_weights + T_graphs + T_comm + T_fixed
//! ```

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterSpec, ModelSpec, ParallelConfig};
use crate::error::{Error, Result};
use crate::latency::LatencyModel;
use crate::workload::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateMethod {
    Migrate,
    Recompute,
}

impl std::fmt::Display for StateMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StateMethod::Migrate => "migrate",
            StateMethod::Recompute => "recompute",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchCostBreakdown {
    pub t_state_handling: f64,
    pub state_method: StateMethod,
    pub t_weight_reshard: f64,
    pub t_graph_recapture: f64,
    pub t_comm_group_init: f64,
    pub t_fixed_control: f64,
    pub total: f64,
}

impl SwitchCostBreakdown {
    pub fn new(
        (t_state_handling, state_method): (f64, StateMethod),
        t_weight_reshard: f64,
        t_graph_recapture: f64,
        t_comm_group_init: f64,
        t_fixed_control: f64,
    ) -> Self {
        SwitchCostBreakdown {
            t_state_handling,
            state_method,
            t_weight_reshard,
            t_graph_recapture,
            t_comm_group_init,
            t_fixed_control,
            total: t_state_handling + t_weight_reshard + t_graph_recapture + t_comm_group_init + t_fixed_control,
        }
    }

    pub fn components(&self) -> [f64; 5] {
        [
            self.t_state_handling,
            self.t_weight_reshard,
            self.t_graph_recapture,
            self.t_comm_group_init,
            self.t_fixed_control,
        ]
    }

    /// Same breakdown with the state-handling term replaced; total recomputed.
    pub fn with_state_handling(&self, t: f64) -> Self {
        Self::new(
            (t, self.state_method),
            self.t_weight_reshard,
            self.t_graph_recapture,
            self.t_comm_group_init,
            self.t_fixed_control,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphCaptureCalibration {
    pub capture_buckets: Vec<u32>,
    pub cost_per_bucket: f64,
    pub small_batch_threshold: u32,
}

impl Default for GraphCaptureCalibration {
    /// Six small-batch buckets; a nine-sample tail group recaptures five of them for 0.73 s.
    fn default() -> Self {
        GraphCaptureCalibration {
            capture_buckets: vec![1, 2, 4, 8, 16, 32],
            cost_per_bucket: 0.146,
            small_batch_threshold: 32,
        }
    }
}

impl GraphCaptureCalibration {
    pub fn validate(&self) -> Result<()> {
        if self.capture_buckets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("capture_buckets must be strictly ascending".into()));
        }
        if !(self.cost_per_bucket >= 0.0 && self.cost_per_bucket.is_finite()) {
            return Err(Error::Config("cost_per_bucket must be >= 0".into()));
        }
        Ok(())
    }
}

/// Totals charged by a restart-style switch that re-prefills everything,
/// reloads weights from storage and recaptures every graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaiveCalibration {
    pub full_prefill: f64,
    pub weight_reload: f64,
    pub full_recapture: f64,
    /// Process teardown, re-initialization and everything else.
    pub restart_residual: f64,
}

impl Default for NaiveCalibration {
    fn default() -> Self {
        NaiveCalibration {
            full_prefill: 19.01,
            weight_reload: 7.47,
            full_recapture: 3.59,
            restart_residual: 58.98 - (19.01 + 7.47 + 3.59),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchCalibration {
    #[serde(default)]
    pub graph: GraphCaptureCalibration,
    pub init_cost_per_config: f64,
    /// Memory release, garbage collection and engine pause/resume, lumped.
    pub t_fixed_control: f64,
    #[serde(default)]
    pub naive: NaiveCalibration,
}

impl Default for SwitchCalibration {
    fn default() -> Self {
        SwitchCalibration {
            graph: GraphCaptureCalibration::default(),
            init_cost_per_config: 0.8,
            t_fixed_control: 1.40,
            naive: NaiveCalibration::default(),
        }
    }
}

impl SwitchCalibration {
    pub fn validate(&self) -> Result<()> {
        self.graph.validate()?;
        let n = &self.naive;
        for v in [
            self.init_cost_per_config,
            self.t_fixed_control,
            n.full_prefill,
            n.weight_reload,
            n.full_recapture,
            n.restart_residual,
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config("switch-cost constants must be >= 0".into()));
            }
        }
        Ok(())
    }
}

/// Lazily initialized, persistently cached communication groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommGroupPool {
    initialized: BTreeSet<ParallelConfig>,
    pub init_cost_per_config: f64,
}

impl CommGroupPool {
    pub fn new(init_cost_per_config: f64) -> Self {
        CommGroupPool {
            initialized: BTreeSet::new(),
            init_cost_per_config,
        }
    }

    /// Cost of obtaining `config` without touching the pool.
    pub fn quote(&self, config: ParallelConfig) -> f64 {
        if self.initialized.contains(&config) {
            0.0
        } else {
            self.init_cost_per_config
        }
    }

    /// Obtains `config`, initializing and caching it on first use.
    pub fn request(&mut self, config: ParallelConfig) -> f64 {
        if self.initialized.insert(config) {
            self.init_cost_per_config
        } else {
            0.0
        }
    }

    pub fn contains(&self, config: ParallelConfig) -> bool {
        self.initialized.contains(&config)
    }

    pub fn len(&self) -> usize {
        self.initialized.len()
    }

    pub fn is_empty(&self) -> bool {
        self.initialized.is_empty()
    }
}

/// Functional form of [`CommGroupPool::request`].
pub fn comm_group_cost(pool: &CommGroupPool, config: ParallelConfig) -> (f64, CommGroupPool) {
    let mut next = pool.clone();
    let cost = next.request(config);
    (cost, next)
}

fn shard_width(model: &ModelSpec, tp: u32) -> Result<u64> {
    if tp == 0 || !model.hidden_dim.is_multiple_of(tp) {
        return Err(Error::Layout(format!(
            "hidden dim {} not divisible by tp={tp}",
            model.hidden_dim
        )));
    }
    Ok((model.hidden_dim / tp) as u64)
}

/// Bytes each source rank sends for the given per-sample context lengths.
pub fn kv_send_bytes_for_contexts(contexts: &[u64], model: &ModelSpec, tp_src: u32) -> Result<u64> {
    let width = shard_width(model, tp_src)?;
    let tokens: u64 = contexts.iter().sum();
    Ok(2 * model.num_layers as u64 * tokens * width * model.bytes_per_elem as u64)
}

/// Bytes each source rank sends to migrate the KV cache of the active samples.
pub fn kv_send_bytes_per_rank(samples: &[Sample], model: &ModelSpec, tp_src: u32) -> Result<u64> {
    let ctx: Vec<u64> = samples
        .iter()
        .filter(|s| s.is_active())
        .map(Sample::context_len)
        .collect();
    kv_send_bytes_for_contexts(&ctx, model, tp_src)
}

pub fn kv_migration_time(bytes_per_rank: u64, cluster: &ClusterSpec) -> f64 {
    bytes_per_rank as f64 / cluster.intra_bw_unidir
}

/// Root-mean-square context length; `B * L_rms^2` equals the sum of squares.
pub fn rms_context_length(contexts: &[u64]) -> Result<f64> {
    if contexts.is_empty() {
        return Err(Error::Domain("RMS context length of zero samples".into()));
    }
    let sq: f64 = contexts.iter().map(|&l| (l as f64) * (l as f64)).sum();
    Ok((sq / contexts.len() as f64).sqrt())
}

pub fn recomputation_time(pred: &dyn LatencyModel, contexts: &[u64], tp_tgt: u32) -> Result<f64> {
    let l = rms_context_length(contexts)?;
    pred.prefill_latency(tp_tgt, contexts.len() as u32, l)
}

/// Cheaper of migrating and recomputing the KV cache; ties migrate.
pub fn state_handling_cost(
    pred: &dyn LatencyModel,
    contexts: &[u64],
    tp_src: u32,
    tp_tgt: u32,
    model: &ModelSpec,
    cluster: &ClusterSpec,
) -> Result<(f64, StateMethod)> {
    if contexts.is_empty() {
        return Ok((0.0, StateMethod::Migrate));
    }
    let t_move = kv_migration_time(kv_send_bytes_for_contexts(contexts, model, tp_src)?, cluster);
    let t_rec = recomputation_time(pred, contexts, tp_tgt)?;
    Ok(pick_state_method(t_move, t_rec))
}

pub fn pick_state_method(t_move: f64, t_recomp: f64) -> (f64, StateMethod) {
    if t_move <= t_recomp {
        (t_move, StateMethod::Migrate)
    } else {
        (t_recomp, StateMethod::Recompute)
    }
}

/// Layer-by-layer all-gather within the larger of the two TP groups: each
/// rank receives `(g-1)/g` of every layer. Zero when the layout is unchanged.
pub fn weight_reshard_time(model: &ModelSpec, tp_src: u32, tp_tgt: u32, cluster: &ClusterSpec) -> f64 {
    weight_reshard_bytes_per_rank(model, tp_src, tp_tgt) as f64 / cluster.intra_bw_unidir
}

pub fn weight_reshard_bytes_per_rank(model: &ModelSpec, tp_src: u32, tp_tgt: u32) -> u64 {
    if tp_src == tp_tgt {
        return 0;
    }
    let g = tp_src.max(tp_tgt) as u64;
    let per_layer = model.layer_param_bytes * (g - 1) / g;
    model.num_layers as u64 * per_layer
}

pub fn graph_recapture_cost(calib: &GraphCaptureCalibration, merged_batch: u32) -> f64 {
    if merged_batch > calib.small_batch_threshold {
        return 0.0;
    }
    let limit = calib
        .capture_buckets
        .iter()
        .copied()
        .find(|&b| b >= merged_batch)
        .map_or(calib.small_batch_threshold, |b| b.min(calib.small_batch_threshold));
    let n = calib.capture_buckets.iter().filter(|&&b| b <= limit).count();
    n as f64 * calib.cost_per_bucket
}

/// Everything needed to price a switch.
#[derive(Clone, Copy)]
pub struct SwitchCostModel<'a> {
    pub pred: &'a dyn LatencyModel,
    pub calib: &'a SwitchCalibration,
    pub model: &'a ModelSpec,
    pub cluster: &'a ClusterSpec,
}

impl SwitchCostModel<'_> {
    /// Prices `src -> tgt` for a node holding `contexts`, against the
    /// current pool state. The pool is not modified.
    pub fn quote(
        &self,
        pool: &CommGroupPool,
        contexts: &[u64],
        src: ParallelConfig,
        tgt: ParallelConfig,
    ) -> Result<SwitchCostBreakdown> {
        let state = state_handling_cost(self.pred, contexts, src.tp, tgt.tp, self.model, self.cluster)?;
        let merged_batch = (contexts.len() as u32).div_ceil(tgt.dp_intra).max(1);
        Ok(SwitchCostBreakdown::new(
            state,
            weight_reshard_time(self.model, src.tp, tgt.tp, self.cluster),
            graph_recapture_cost(&self.calib.graph, merged_batch),
            pool.quote(tgt),
            self.calib.t_fixed_control,
        ))
    }
}

pub fn total_switch_cost(
    cost: &SwitchCostModel<'_>,
    pool: &CommGroupPool,
    contexts: &[u64],
    src: ParallelConfig,
    tgt: ParallelConfig,
) -> Result<SwitchCostBreakdown> {
    cost.quote(pool, contexts, src, tgt)
}

/// Restart-style switch: full re-prefill, weight reload, full recapture.
pub fn naive_switch_cost(calib: &NaiveCalibration) -> SwitchCostBreakdown {
    SwitchCostBreakdown::new(
        (calib.full_prefill, StateMethod::Recompute),
        calib.weight_reload,
        calib.full_recapture,
        0.0,
        calib.restart_residual,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::test_cluster;
    use crate::presets;

    struct Fixed {
        prefill: f64,
    }

    impl LatencyModel for Fixed {
        fn decode_latency(&self, _: u32, _: u32, _: f64) -> Result<f64> {
            Ok(0.01)
        }
        fn prefill_latency(&self, _: u32, _: u32, _: f64) -> Result<f64> {
            Ok(self.prefill)
        }
    }

    fn geom(m: u32, h: u32, s: u32) -> ModelSpec {
        ModelSpec {
            name: "t".into(),
            num_layers: m,
            hidden_dim: h,
            bytes_per_elem: s,
            layer_param_bytes: 1,
        }
    }

    #[test]
    fn kv_bytes_examples() {
        assert_eq!(kv_send_bytes_for_contexts(&[1], &geom(1, 2, 1), 1).unwrap(), 4);
        assert_eq!(kv_send_bytes_for_contexts(&[100, 200], &geom(4, 1024, 2), 2).unwrap(), 2_457_600);
        assert_eq!(kv_send_bytes_for_contexts(&[], &geom(4, 1024, 2), 2).unwrap(), 0);
        assert!(matches!(
            kv_send_bytes_for_contexts(&[1], &geom(1, 6, 1), 4),
            Err(Error::Layout(_))
        ));
    }

    #[test]
    fn finished_samples_send_nothing() {
        let mut a = Sample::new(0, 10, 5);
        let b = Sample::new(1, 10, 5);
        for _ in 0..5 {
            a.advance();
        }
        let m = geom(1, 2, 1);
        assert_eq!(kv_send_bytes_per_rank(&[a, b], &m, 1).unwrap(), 2 * 10 * 2);
    }

    #[test]
    fn migration_time() {
        let mut c = test_cluster(8, 1);
        c.intra_bw_unidir = 2_457_600.0;
        assert_eq!(kv_migration_time(2_457_600, &c), 1.0);
        assert_eq!(kv_migration_time(0, &c), 0.0);
    }

    #[test]
    fn rms_examples() {
        assert_eq!(rms_context_length(&[5, 5, 5]).unwrap(), 5.0);
        assert!((rms_context_length(&[3, 4]).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
        assert!(matches!(rms_context_length(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn tie_prefers_migration() {
        assert_eq!(pick_state_method(1.0, 2.0), (1.0, StateMethod::Migrate));
        assert_eq!(pick_state_method(2.0, 1.0), (1.0, StateMethod::Recompute));
        assert_eq!(pick_state_method(1.5, 1.5).1, StateMethod::Migrate);
    }

    #[test]
    fn weight_reshard_examples() {
        let mut m = geom(2, 8, 2);
        m.layer_param_bytes = 1_000_000_000;
        let mut c = test_cluster(8, 1);
        c.intra_bw_unidir = 3e9;
        assert!((weight_reshard_time(&m, 1, 4, &c) - 0.5).abs() < 1e-12);
        assert_eq!(weight_reshard_time(&m, 1, 1, &c), 0.0);
    }

    #[test]
    fn graph_recapture_examples() {
        let c = GraphCaptureCalibration {
            capture_buckets: vec![1, 2, 4, 8],
            cost_per_bucket: 0.1,
            small_batch_threshold: 8,
        };
        assert!((graph_recapture_cost(&c, 3) - 0.3).abs() < 1e-12);
        assert_eq!(graph_recapture_cost(&c, 9), 0.0);
        assert!((graph_recapture_cost(&c, 8) - 0.4).abs() < 1e-12);
        let d = GraphCaptureCalibration::default();
        assert!((graph_recapture_cost(&d, 9) - 0.73).abs() < 1e-9);
    }

    #[test]
    fn pool_caches() {
        let c = test_cluster(8, 1);
        let mut pool = CommGroupPool::new(0.8);
        let tp4 = c.config_for_tp(4).unwrap();
        assert_eq!(pool.quote(tp4), 0.8);
        assert_eq!(pool.len(), 0);
        assert_eq!(pool.request(tp4), 0.8);
        assert_eq!(pool.request(tp4), 0.0);
        for tp in [1, 2, 4, 8] {
            pool.request(c.config_for_tp(tp).unwrap());
        }
        assert_eq!(pool.len(), 4);
        let (cost, next) = comm_group_cost(&CommGroupPool::new(1.0), tp4);
        assert_eq!((cost, next.len()), (1.0, 1));
    }

    #[test]
    fn zeroed_calibration_leaves_fixed_control() {
        let cluster = test_cluster(8, 1);
        let model = geom(1, 8, 2);
        let calib = SwitchCalibration {
            graph: GraphCaptureCalibration {
                capture_buckets: vec![1],
                cost_per_bucket: 0.0,
                small_batch_threshold: 1,
            },
            init_cost_per_config: 0.0,
            t_fixed_control: 1.4,
            naive: NaiveCalibration::default(),
        };
        let pred = Fixed { prefill: 0.0 };
        let cost = SwitchCostModel { pred: &pred, calib: &calib, model: &model, cluster: &cluster };
        let b = cost
            .quote(
                &CommGroupPool::new(0.0),
                &[],
                cluster.config_for_tp(2).unwrap(),
                cluster.config_for_tp(2).unwrap(),
            )
            .unwrap();
        assert_eq!(b.total, 1.4);
    }

    #[test]
    fn reference_switch_breakdown() {
        let hw = presets::a40_hardware();
        let calib = SwitchCalibration::default();
        let (src, tgt) = (hw.cluster.config_for_tp(2).unwrap(), hw.cluster.config_for_tp(8).unwrap());
        let cost = SwitchCostModel { pred: &hw, calib: &calib, model: &hw.model, cluster: &hw.cluster };
        let mut pool = CommGroupPool::new(calib.init_cost_per_config);
        pool.request(tgt);
        let b = cost.quote(&pool, &[12_288; 9], src, tgt).unwrap();
        assert_eq!(b.state_method, StateMethod::Migrate);
        assert!((b.t_state_handling - 2.36).abs() < 0.3 * 2.36);
        assert!((b.t_weight_reshard - 1.03).abs() < 0.3 * 1.03);
        assert!((b.t_graph_recapture - 0.73).abs() < 1e-9);
        assert!((b.total - 5.52).abs() < 0.3 * 5.52);
        assert_eq!(b.total, b.components().iter().sum::<f64>());
    }

    #[test]
    fn naive_total() {
        let b = naive_switch_cost(&NaiveCalibration::default());
        assert!((b.total - 58.98).abs() < 1e-9);
    }
}
