//! Discrete-event simulation of one generation stage.
//!
//! Every node runs independently. Within a node each DP group advances on its
//! own clock: one decode step adds a token to every active sample of the
//! group and costs one oracle step latency at the group's (tp, B, T). The
//! controller is consulted on a cadence; a committed switch pauses the whole
//! node at its most advanced clock, charges the switch cost, merges the
//! unfinished samples onto the new layout and resumes.

use std::collections::HashMap;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{candidate_configs, token_budget, ClusterSpec, ModelSpec, ParallelConfig};
use crate::controller::{evaluate, merge_samples, ControllerParams, EvalContext};
use crate::error::{Error, Result};
use crate::latency::{
    build_profile_grid, fit_predictor, run_profiler, AnalyticHardwareModel, LatencyModel, OracleCalibration,
};
use crate::report::{
    EventKind, NodeReport, NodeTail, ScenarioSummary, SimReport, SwitchRecord, TailReport, TimelineEvent,
};
use crate::reshard::{
    peak_extra_memory, plan_kv_migration, plan_weight_reshard, verify_plan, KvMove, ShardLayout,
};
use crate::switchcost::{
    kv_send_bytes_for_contexts, naive_switch_cost, rms_context_length, weight_reshard_bytes_per_rank,
    CommGroupPool, StateMethod, SwitchCalibration, SwitchCostModel,
};
use crate::workload::{ActiveSample, BatchStatus, GroupStatus, LengthDistribution, Sample};

/// Group steps summarized by one step-block timeline event.
pub const STEP_BLOCK: u32 = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Adaptive,
    Static,
    NaiveSwitch,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Adaptive => "adaptive",
            Mode::Static => "static",
            Mode::NaiveSwitch => "naive-switch",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(Mode::Adaptive),
            "static" => Ok(Mode::Static),
            "naive-switch" | "naive" => Ok(Mode::NaiveSwitch),
            _ => Err(Error::Config(format!(
                "unknown mode `{s}` (expected adaptive, static or naive-switch)"
            ))),
        }
    }
}

/// Latency model the controller plans with.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorSource {
    /// Piecewise-linear predictor fitted from a profile of the oracle.
    #[default]
    Profiled,
    /// The oracle itself (perfect prediction).
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub model: ModelSpec,
    pub cluster: ClusterSpec,
    pub oracle: OracleCalibration,
    pub switch: SwitchCalibration,
    pub distribution: LengthDistribution,
    pub prompt_len: u32,
    pub global_batch: u32,
    pub l_max: u32,
    pub initial_tp: u32,
    pub controller: ControllerParams,
    #[serde(default)]
    pub predictor: PredictorSource,
    pub seed: u64,
    pub prep_time: f64,
    pub train_time: f64,
    pub mode: Mode,
    /// Explicit response lengths, bypassing the distribution.
    #[serde(default)]
    pub targets: Option<Vec<u32>>,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.cluster.validate()?;
        self.oracle.validate()?;
        self.switch.validate()?;
        self.distribution.validate()?;
        self.controller.validate(&self.cluster)?;
        self.initial_config()?;
        if self.global_batch == 0 || !self.global_batch.is_multiple_of(self.cluster.num_nodes) {
            return Err(Error::Config(format!(
                "global_batch {} must be a positive multiple of num_nodes {}",
                self.global_batch, self.cluster.num_nodes
            )));
        }
        if self.l_max == 0 || self.prompt_len == 0 {
            return Err(Error::Config("l_max and prompt_len must be >= 1".into()));
        }
        if let Some(t) = &self.targets {
            if t.len() != self.global_batch as usize {
                return Err(Error::Config(format!(
                    "{} explicit targets for global_batch {}",
                    t.len(),
                    self.global_batch
                )));
            }
        }
        for v in [self.prep_time, self.train_time] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config("prep_time and train_time must be >= 0".into()));
            }
        }
        Ok(())
    }

    pub fn initial_config(&self) -> Result<ParallelConfig> {
        ParallelConfig::new(self.initial_tp, &self.cluster)
    }

    pub fn hardware(&self) -> AnalyticHardwareModel {
        AnalyticHardwareModel {
            cluster: self.cluster.clone(),
            model: self.model.clone(),
            calibration: self.oracle.clone(),
        }
    }

    /// Response lengths, already capped at `l_max`.
    pub fn draw_targets(&self) -> Result<Vec<u32>> {
        let raw = match &self.targets {
            Some(t) => t.clone(),
            None => self.distribution.sample(self.global_batch as usize, self.seed)?,
        };
        Ok(raw.into_iter().map(|t| t.min(self.l_max)).collect())
    }
}

/// The latency model named by `spec.predictor`.
pub fn build_predictor(spec: &ScenarioSpec) -> Result<Box<dyn LatencyModel>> {
    let hw = spec.hardware();
    Ok(match spec.predictor {
        PredictorSource::Oracle => Box::new(hw),
        PredictorSource::Profiled => {
            let grid = build_profile_grid(&hw.cluster);
            Box::new(fit_predictor(&run_profiler(&hw, &grid)?)?)
        }
    })
}

/// Samples placed and prefilled, ready to decode.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub config: ParallelConfig,
    pub samples: Vec<Sample>,
    /// Per node, per DP group: clock after prefill.
    pub group_clocks: Vec<Vec<f64>>,
}

/// Draws targets, places samples round-robin over nodes and then DP groups,
/// checks KV admission and charges prefill per group.
pub fn init_scenario(spec: &ScenarioSpec) -> Result<SimState> {
    spec.validate()?;
    let config = spec.initial_config()?;
    let hw = spec.hardware();
    let targets = spec.draw_targets()?;
    let nodes = spec.cluster.num_nodes;
    let mut samples: Vec<Sample> = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let mut s = Sample::new(i as u32, spec.prompt_len, t);
            s.node_id = i as u32 % nodes;
            s.intra_dp_group = (i as u32 / nodes) % config.dp_intra;
            s
        })
        .collect();
    let budget = token_budget(&spec.cluster, &config);
    let mut group_clocks = Vec::with_capacity(nodes as usize);
    for node in 0..nodes {
        let peak: u64 = samples
            .iter()
            .filter(|s| s.node_id == node)
            .map(|s| s.prompt_len as u64 + s.target_response_len as u64)
            .sum();
        if peak > budget {
            return Err(Error::Scenario(format!(
                "node {node} needs {peak} KV tokens at peak, budget is {budget}"
            )));
        }
        let clocks = (0..config.dp_intra)
            .map(|g| {
                let b = samples
                    .iter()
                    .filter(|s| s.node_id == node && s.intra_dp_group == g)
                    .count() as u32;
                if b == 0 {
                    0.0
                } else {
                    hw.oracle_prefill_latency(config.tp, b, spec.prompt_len as f64)
                }
            })
            .collect();
        group_clocks.push(clocks);
    }
    samples.sort_by_key(|s| (s.node_id, s.id));
    Ok(SimState {
        config,
        samples,
        group_clocks,
    })
}

pub fn run(spec: &ScenarioSpec) -> Result<SimReport> {
    let pred = build_predictor(spec)?;
    run_with(spec, pred.as_ref())
}

/// Runs the scenario with a caller-supplied planning model.
pub fn run_with(spec: &ScenarioSpec, pred: &dyn LatencyModel) -> Result<SimReport> {
    let state = init_scenario(spec)?;
    let hw = spec.hardware();
    let nodes: Vec<u32> = (0..spec.cluster.num_nodes).collect();
    let outcomes: Vec<NodeOutcome> = nodes
        .par_iter()
        .map(|&node| {
            let samples: Vec<Sample> = state.samples.iter().filter(|s| s.node_id == node).cloned().collect();
            NodeSim::new(spec, &hw, pred, node, state.config, samples, &state.group_clocks[node as usize]).run()
        })
        .collect::<Result<_>>()?;

    let expected: u64 = state.samples.iter().map(|s| s.target_response_len as u64).sum();
    let tokens: u64 = outcomes.iter().flat_map(|o| &o.samples).map(|s| s.generated_len as u64).sum();
    if tokens != expected {
        return Err(Error::Internal(format!(
            "token ledger mismatch: generated {tokens}, expected {expected}"
        )));
    }
    let generation_time = outcomes.iter().map(|o| o.report.generation_time).fold(0.0, f64::max);
    let mut timeline = Vec::new();
    let mut switches = Vec::new();
    let mut node_reports = Vec::new();
    let mut tails = Vec::new();
    for o in outcomes {
        timeline.extend(o.events);
        switches.extend(o.switches);
        node_reports.push(o.report);
        tails.push(o.tail);
    }
    Ok(SimReport {
        scenario: ScenarioSummary {
            mode: spec.mode.to_string(),
            seed: spec.seed,
            global_batch: spec.global_batch,
            prompt_len: spec.prompt_len,
            l_max: spec.l_max,
            initial_config: state.config,
            num_nodes: spec.cluster.num_nodes,
            gpus_per_node: spec.cluster.gpus_per_node,
        },
        generation_time,
        prep_time: spec.prep_time,
        train_time: spec.train_time,
        iteration_time: generation_time + spec.prep_time + spec.train_time,
        tokens_generated: tokens,
        throughput: if generation_time > 0.0 { tokens as f64 / generation_time } else { 0.0 },
        nodes: node_reports,
        switches,
        tail: TailReport::from_nodes(tails),
        timeline,
    })
}

struct NodeOutcome {
    samples: Vec<Sample>,
    events: Vec<TimelineEvent>,
    switches: Vec<SwitchRecord>,
    report: NodeReport,
    tail: NodeTail,
}

#[derive(Debug, Clone)]
struct Group {
    /// Indices into `NodeSim::samples` of active members.
    members: Vec<usize>,
    clock: f64,
    since_eval: u32,
    block_steps: u32,
    /// Active count when this group was formed.
    start_count: usize,
    single_time: f64,
    single_tokens: u64,
}

impl Group {
    fn new(members: Vec<usize>, clock: f64) -> Self {
        Group {
            start_count: members.len(),
            members,
            clock,
            since_eval: 0,
            block_steps: 0,
            single_time: 0.0,
            single_tokens: 0,
        }
    }
}

struct NodeSim<'a> {
    spec: &'a ScenarioSpec,
    hw: &'a AnalyticHardwareModel,
    pred: &'a dyn LatencyModel,
    node: u32,
    config: ParallelConfig,
    samples: Vec<Sample>,
    groups: Vec<Group>,
    pool: CommGroupPool,
    events: Vec<TimelineEvent>,
    switches: Vec<SwitchRecord>,
    completions: Vec<f64>,
    /// (end time, tokens) per decode step.
    steps: Vec<(f64, u32)>,
    /// Best (single_time, single_tokens) over retired groups.
    retired_single: (f64, u64),
    bubble_time: f64,
    switch_time: f64,
    prefill_end: f64,
    pending_eval: bool,
}

impl<'a> NodeSim<'a> {
    fn new(
        spec: &'a ScenarioSpec,
        hw: &'a AnalyticHardwareModel,
        pred: &'a dyn LatencyModel,
        node: u32,
        config: ParallelConfig,
        samples: Vec<Sample>,
        clocks: &[f64],
    ) -> Self {
        let groups: Vec<Group> = (0..config.dp_intra)
            .map(|g| {
                let members = samples
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.is_active() && s.intra_dp_group == g)
                    .map(|(i, _)| i)
                    .collect();
                Group::new(members, clocks[g as usize])
            })
            .collect();
        let prefill_end = groups
            .iter()
            .filter(|g| !g.members.is_empty())
            .map(|g| g.clock)
            .fold(f64::INFINITY, f64::min);
        let mut pool = CommGroupPool::new(spec.switch.init_cost_per_config);
        pool.request(config);
        NodeSim {
            spec,
            hw,
            pred,
            node,
            config,
            samples,
            groups,
            pool,
            events: Vec::new(),
            switches: Vec::new(),
            completions: Vec::new(),
            steps: Vec::new(),
            retired_single: (0.0, 0),
            bubble_time: 0.0,
            switch_time: 0.0,
            prefill_end: if prefill_end.is_finite() { prefill_end } else { 0.0 },
            pending_eval: true,
        }
    }

    fn controller_active(&self) -> bool {
        self.spec.mode != Mode::Static && self.spec.controller.enabled
    }

    fn lead_clock(&self) -> f64 {
        self.groups.iter().map(|g| g.clock).fold(0.0, f64::max)
    }

    fn push_event(&mut self, time_s: f64, event: EventKind, detail: String) {
        self.events.push(TimelineEvent {
            time_s,
            node: self.node,
            event,
            active_count: 0,
            tp: self.config.tp,
            detail,
        });
    }

    fn status(&self) -> BatchStatus {
        BatchStatus {
            node: self.node,
            groups: self
                .groups
                .iter()
                .enumerate()
                .map(|(g, grp)| GroupStatus {
                    group: g as u32,
                    samples: grp
                        .members
                        .iter()
                        .map(|&i| {
                            let s = &self.samples[i];
                            ActiveSample {
                                id: s.id,
                                context_len: s.context_len(),
                                generated_len: s.generated_len,
                            }
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    fn eval_due(&self) -> bool {
        self.pending_eval
            || self
                .groups
                .iter()
                .filter(|g| !g.members.is_empty())
                .all(|g| g.since_eval >= self.spec.controller.eval_interval)
    }

    fn run(mut self) -> Result<NodeOutcome> {
        loop {
            let next = self
                .groups
                .iter()
                .enumerate()
                .filter(|(_, g)| !g.members.is_empty())
                .min_by(|a, b| a.1.clock.total_cmp(&b.1.clock).then(a.0.cmp(&b.0)))
                .map(|(i, _)| i);
            let Some(g) = next else { break };
            if self.controller_active() && self.eval_due() {
                self.evaluate()?;
                continue;
            }
            self.step(g);
        }
        Ok(self.finish())
    }

    fn step(&mut self, gi: usize) {
        let tp = self.config.tp;
        let group = &self.groups[gi];
        let b = group.members.len() as u32;
        let t: u64 = group.members.iter().map(|&i| self.samples[i].context_len()).sum();
        let lat = self.hw.oracle_decode_latency(tp, b, t as f64);
        let clock = group.clock + lat;
        let mut finished = Vec::new();
        for &i in &group.members {
            if self.samples[i].advance() {
                finished.push(i);
            }
        }
        let group = &mut self.groups[gi];
        if b == 1 && group.start_count >= 2 {
            group.single_time += lat;
            group.single_tokens += 1;
        }
        group.clock = clock;
        group.since_eval += 1;
        group.block_steps += 1;
        group.members.retain(|i| !finished.contains(i));
        let drained = group.members.is_empty();
        let block = group.block_steps;
        if block == STEP_BLOCK || (drained && block > 0) {
            group.block_steps = 0;
            self.push_event(clock, EventKind::StepBlock, format!("group={gi} steps={block}"));
        }
        self.steps.push((clock, b));
        for i in finished {
            let s = &self.samples[i];
            let detail = format!("sample={} group={gi} generated={}", s.id, s.generated_len);
            self.completions.push(clock);
            self.push_event(clock, EventKind::Completion, detail);
            self.pending_eval = true;
        }
    }

    fn evaluate(&mut self) -> Result<()> {
        let lead = self.lead_clock();
        let lags: Vec<f64> = self.groups.iter().map(|g| lead - g.clock).collect();
        let status = self.status();
        let cost = SwitchCostModel {
            pred: self.pred,
            calib: &self.spec.switch,
            model: &self.spec.model,
            cluster: &self.spec.cluster,
        };
        let ctx = EvalContext {
            params: &self.spec.controller,
            pred: self.pred,
            cost: &cost,
            pool: &self.pool,
            cluster: &self.spec.cluster,
            l_max: self.spec.l_max,
        };
        let decision = evaluate(&ctx, &status, self.config, &lags)?;
        for g in &mut self.groups {
            g.since_eval = 0;
        }
        self.pending_eval = false;
        let best_tp = decision.target.map_or(self.config.tp, |c| c.tp);
        self.push_event(
            lead,
            EventKind::Evaluation,
            format!(
                "action={} t_cur={:.6} t_best={:.6} best_tp={best_tp}",
                if decision.is_switch() { "switch" } else { "stay" },
                decision.t_cur,
                decision.t_best
            ),
        );
        if let (Some(target), Some(predicted)) = (decision.target, decision.breakdown) {
            if decision.t_best.partial_cmp(&decision.t_cur) != Some(std::cmp::Ordering::Less) {
                return Err(Error::Internal("switch without predicted gain".into()));
            }
            self.commit_switch(lead, status, target, predicted, decision.t_cur, decision.t_best, decision.evaluated)?;
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn commit_switch(
        &mut self,
        barrier: f64,
        status: BatchStatus,
        target: ParallelConfig,
        predicted: crate::switchcost::SwitchCostBreakdown,
        t_cur: f64,
        t_best: f64,
        evaluated: Vec<crate::controller::CandidateEval>,
    ) -> Result<()> {
        let from = self.config;
        let contexts: Vec<u64> = status.all_samples().map(|s| s.context_len).collect();
        let model = &self.spec.model;

        let realized = if self.spec.mode == Mode::NaiveSwitch {
            naive_switch_cost(&self.spec.switch.naive)
        } else {
            let comm = self.pool.request(target);
            let mut r = predicted;
            if comm != r.t_comm_group_init {
                return Err(Error::Internal("pool changed between quote and commit".into()));
            }
            if r.state_method == StateMethod::Recompute {
                let l = rms_context_length(&contexts)?;
                r = r.with_state_handling(self.hw.oracle_prefill_latency(target.tp, contexts.len() as u32, l));
            }
            r
        };

        let merged = merge_samples(&status, target.dp_intra);
        let index: HashMap<u32, usize> = self
            .groups
            .iter()
            .flat_map(|g| g.members.iter().map(|&i| (self.samples[i].id, i)))
            .collect();
        let mut moves = Vec::with_capacity(contexts.len());
        for (tg, members) in merged.iter().enumerate() {
            for s in members {
                let i = index[&s.id];
                moves.push(KvMove {
                    sample_id: s.id,
                    context_len: s.context_len,
                    src_group: self.samples[i].intra_dp_group,
                    tgt_group: tg as u32,
                });
            }
        }

        let dim = model.hidden_dim;
        let tgt_layout = ShardLayout::canonical(target.tp, dim)?;
        let weight_plan = plan_weight_reshard(model, &ShardLayout::canonical(from.tp, dim)?, &tgt_layout)?;
        let mut peak = peak_extra_memory(&weight_plan);
        let mut plans = vec![weight_plan];
        let kv_bytes = kv_send_bytes_for_contexts(&contexts, model, from.tp)?;
        if realized.state_method == StateMethod::Migrate {
            let kv_plan = plan_kv_migration(&moves, model, from.tp, target.tp)?;
            if kv_plan.total_per_rank_bytes != kv_bytes {
                return Err(Error::Internal(format!(
                    "KV plan moves {} bytes/rank, cost model charged {kv_bytes}",
                    kv_plan.total_per_rank_bytes
                )));
            }
            peak = peak.max(peak_extra_memory(&kv_plan));
            plans.push(kv_plan);
        }
        for plan in &plans {
            let report = verify_plan(plan, &tgt_layout);
            if !report.is_ok() {
                let v: Vec<String> = report.violations.iter().map(ToString::to_string).collect();
                return Err(Error::Internal(format!("reshard plan rejected: {}", v.join("; "))));
            }
        }

        for g in &self.groups {
            self.bubble_time += barrier - g.clock;
            if g.single_time > self.retired_single.0 {
                self.retired_single = (g.single_time, g.single_tokens);
            }
        }
        let resume = barrier + realized.total;
        let mut groups = Vec::with_capacity(merged.len());
        for m in &moves {
            self.samples[index[&m.sample_id]].intra_dp_group = m.tgt_group;
        }
        for members in &merged {
            groups.push(Group::new(members.iter().map(|s| index[&s.id]).collect(), resume));
        }
        self.groups = groups;
        self.config = target;
        self.switch_time += realized.total;
        self.pending_eval = true;

        self.push_event(
            barrier,
            EventKind::Switch,
            format!(
                "from={from} to={target} cost={:.6} method={} moved={}",
                realized.total,
                realized.state_method,
                contexts.len()
            ),
        );
        self.switches.push(SwitchRecord {
            node: self.node,
            time_s: barrier,
            from,
            to: target,
            predicted,
            realized,
            samples_moved: contexts.len() as u32,
            t_cur,
            t_best,
            evaluated,
            kv_bytes_per_rank: if realized.state_method == StateMethod::Migrate { kv_bytes } else { 0 },
            weight_bytes_per_rank: weight_reshard_bytes_per_rank(model, from.tp, target.tp),
            peak_extra_memory: peak,
        });
        Ok(())
    }

    fn finish(mut self) -> NodeOutcome {
        let end = self.lead_clock();
        let initial = self.completions.len();
        let mut done = self.completions.clone();
        done.sort_by(f64::total_cmp);

        // Timeline: stable time order, then the node's active count at each event.
        self.events.sort_by(|a, b| a.time_s.total_cmp(&b.time_s));
        for e in &mut self.events {
            let finished = done.partition_point(|&c| c <= e.time_s);
            e.active_count = (initial - finished) as u32;
        }

        let decode_start = self.prefill_end;
        let duration = (end - decode_start).max(0.0);
        let mut best = self.retired_single;
        for g in &self.groups {
            if g.single_time > best.0 {
                best = (g.single_time, g.single_tokens);
            }
        }
        let node_single = if initial >= 2 {
            let (a, b) = (done[initial - 2], done[initial - 1]);
            let tokens: u64 = self.steps.iter().filter(|(t, _)| *t > a && *t <= b).map(|(_, n)| *n as u64).sum();
            (b - a, tokens)
        } else {
            (0.0, 0)
        };
        if node_single.0 > best.0 {
            best = node_single;
        }
        let aligned_end = if initial == 0 { decode_start } else { done[initial / 2] };
        let aligned_tokens: u64 = self
            .steps
            .iter()
            .filter(|(t, _)| *t <= aligned_end)
            .map(|(_, n)| *n as u64)
            .sum();
        let frac = |x: f64| if duration > 0.0 { (x / duration).clamp(0.0, 1.0) } else { 0.0 };
        let rate = |tokens: u64, secs: f64| if secs > 0.0 { tokens as f64 / secs } else { 0.0 };
        let tail = NodeTail {
            node: self.node,
            decode_start,
            decode_end: end,
            single_sample_time: best.0,
            single_sample_fraction: frac(best.0),
            node_single_sample_fraction: frac(node_single.0),
            aligned_end,
            aligned_tokens,
            aligned_throughput: rate(aligned_tokens, aligned_end - decode_start),
            tail_tokens: best.1,
            tail_throughput: rate(best.1, best.0),
        };
        let report = NodeReport {
            node: self.node,
            generation_time: end,
            prefill_time: decode_start,
            decode_steps: self.steps.len() as u64,
            bubble_time: self.bubble_time,
            switch_time: self.switch_time,
            final_config: self.config,
        };
        NodeOutcome {
            samples: self.samples,
            events: self.events,
            switches: self.switches,
            report,
            tail,
        }
    }
}

/// One row of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub l_max: u32,
    pub mode: String,
    pub config: String,
    pub generation_time: f64,
    pub iteration_time: f64,
    /// Best-static iteration time over this row's.
    pub speedup: f64,
    /// Best-static generation time over this row's.
    pub generation_speedup: f64,
    pub switches: u32,
    pub switch_cost: f64,
    pub tail_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub l_max: u32,
    pub best_static: ParallelConfig,
    pub statics: Vec<SimReport>,
    pub adaptive: Option<SimReport>,
    pub naive: Option<SimReport>,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn best_static_report(&self) -> &SimReport {
        self.statics
            .iter()
            .find(|r| r.scenario.initial_config == self.best_static)
            .expect("best static is among the static runs")
    }

    /// Iteration-level speedup of the adaptive run (1.0 if it was not run).
    pub fn speedup(&self) -> f64 {
        self.row("adaptive").map_or(1.0, |r| r.speedup)
    }

    pub fn generation_speedup(&self) -> f64 {
        self.row("adaptive").map_or(1.0, |r| r.generation_speedup)
    }

    pub fn row(&self, mode: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }
}

fn row(l_max: u32, mode: &str, r: &SimReport, best: &SimReport) -> ComparisonRow {
    let cfgs: Vec<String> = r.nodes.iter().map(|n| n.final_config.to_string()).collect();
    let config = if r.switches.is_empty() {
        r.scenario.initial_config.to_string()
    } else {
        format!("{}->{}", r.scenario.initial_config, cfgs.join("|"))
    };
    ComparisonRow {
        l_max,
        mode: mode.to_string(),
        config,
        generation_time: r.generation_time,
        iteration_time: r.iteration_time,
        speedup: best.iteration_time / r.iteration_time,
        generation_speedup: best.generation_time / r.generation_time,
        switches: r.switches.len() as u32,
        switch_cost: r.total_switch_cost(),
        tail_fraction: r.tail.single_sample_fraction,
    }
}

/// Every static layout in `tp_list` plus the requested dynamic modes on the
/// same drawn workload. The best static layout (ties: smaller TP) is the baseline.
pub fn compare(spec: &ScenarioSpec, pred: &dyn LatencyModel, modes: &[Mode]) -> Result<Comparison> {
    spec.validate()?;
    let statics: Vec<ParallelConfig> = candidate_configs(&spec.cluster)
        .into_iter()
        .filter(|c| spec.controller.tp_list.contains(&c.tp))
        .collect();
    let mut jobs: Vec<ScenarioSpec> = statics
        .iter()
        .map(|c| ScenarioSpec {
            mode: Mode::Static,
            initial_tp: c.tp,
            ..spec.clone()
        })
        .collect();
    let dynamic: Vec<Mode> = modes.iter().copied().filter(|m| *m != Mode::Static).collect();
    jobs.extend(dynamic.iter().map(|&mode| ScenarioSpec {
        mode,
        ..spec.clone()
    }));
    let mut reports: Vec<SimReport> = jobs.par_iter().map(|s| run_with(s, pred)).collect::<Result<_>>()?;
    let dyn_reports = reports.split_off(statics.len());

    let best_i = (0..reports.len())
        .min_by(|&a, &b| {
            reports[a]
                .generation_time
                .total_cmp(&reports[b].generation_time)
                .then(a.cmp(&b))
        })
        .ok_or_else(|| Error::Config("no static configuration to compare against".into()))?;
    let best = &reports[best_i];
    let mut rows = vec![row(spec.l_max, "static", best, best)];
    let mut adaptive = None;
    let mut naive = None;
    for (mode, r) in dynamic.iter().zip(dyn_reports) {
        rows.push(row(spec.l_max, mode.as_str(), &r, best));
        match mode {
            Mode::Adaptive => adaptive = Some(r),
            Mode::NaiveSwitch => naive = Some(r),
            Mode::Static => {}
        }
    }
    Ok(Comparison {
        l_max: spec.l_max,
        best_static: statics[best_i],
        statics: reports,
        adaptive,
        naive,
        rows,
    })
}

/// Runs [`compare`] once per `l_max`, reusing one predictor. Results come
/// back in input order regardless of scheduling.
pub fn sweep(spec: &ScenarioSpec, pred: &dyn LatencyModel, l_max_values: &[u32], modes: &[Mode]) -> Result<Vec<Comparison>> {
    l_max_values
        .par_iter()
        .map(|&l_max| compare(&ScenarioSpec { l_max, ..spec.clone() }, pred, modes))
        .collect()
}

/// A default-calibrated 8-GPU scenario with the long-tail distribution.
pub fn reference_scenario(l_max: u32) -> ScenarioSpec {
    let hw = crate::presets::a40_hardware();
    ScenarioSpec {
        model: hw.model,
        cluster: hw.cluster,
        oracle: hw.calibration,
        switch: SwitchCalibration::default(),
        distribution: LengthDistribution::long_tail_default(),
        prompt_len: 512,
        global_batch: 128,
        l_max,
        initial_tp: 4,
        controller: ControllerParams {
            tp_list: vec![1, 2, 4, 8],
            eval_interval: 64,
            chunk_steps: crate::controller::DEFAULT_CHUNK_STEPS,
            enabled: true,
            min_gain: 0.05,
        },
        predictor: PredictorSource::Profiled,
        seed: 2,
        prep_time: 0.0,
        train_time: 0.0,
        mode: Mode::Adaptive,
        targets: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(targets: Vec<u32>, l_max: u32, gpus: u32, tp: u32) -> ScenarioSpec {
        let mut s = reference_scenario(l_max);
        s.cluster.gpus_per_node = gpus;
        s.global_batch = targets.len() as u32;
        s.targets = Some(targets);
        s.initial_tp = tp;
        s.prompt_len = 16;
        s.predictor = PredictorSource::Oracle;
        s.controller.tp_list = candidate_configs(&s.cluster).iter().map(|c| c.tp).collect();
        s
    }

    #[test]
    fn round_robin_placement() {
        let mut s = tiny(vec![5; 8], 10, 4, 2);
        s.cluster.num_nodes = 2;
        let st = init_scenario(&s).unwrap();
        for node in 0..2 {
            for g in 0..2 {
                let n = st.samples.iter().filter(|x| x.node_id == node && x.intra_dp_group == g).count();
                assert_eq!(n, 2);
            }
        }
        assert_eq!(init_scenario(&s).unwrap(), st);
    }

    #[test]
    fn over_budget_is_rejected() {
        let mut s = tiny(vec![100; 4], 100, 1, 1);
        s.cluster.kv_tokens_per_gpu = 4 * 116 - 1;
        assert!(matches!(init_scenario(&s), Err(Error::Scenario(_))));
        s.cluster.kv_tokens_per_gpu = 4 * 116;
        assert!(init_scenario(&s).is_ok());
    }

    #[test]
    fn static_uniform_run_is_prefill_plus_steps() {
        let mut s = tiny(vec![20; 3], 20, 1, 1);
        s.mode = Mode::Static;
        let r = run(&s).unwrap();
        let hw = s.hardware();
        let mut want = hw.oracle_prefill_latency(1, 3, 16.0);
        for k in 0..20u64 {
            want += hw.oracle_decode_latency(1, 3, (3 * 16 + 3 * k) as f64);
        }
        assert!((r.generation_time - want).abs() < 1e-12);
        assert_eq!(r.tail.single_sample_fraction, 0.0);
        assert_eq!(r.tokens_generated, 60);
    }

    #[test]
    fn two_sample_tail_fraction() {
        let mut s = tiny(vec![10, 1000], 1000, 1, 1);
        s.mode = Mode::Static;
        s.oracle.kv_bytes_per_token = 0.0;
        s.oracle.tile_quantum = 1;
        s.oracle.token_overhead = 0.0;
        let r = run(&s).unwrap();
        assert!((r.tail.single_sample_fraction - 0.99).abs() < 0.002, "{}", r.tail.single_sample_fraction);
    }

    #[test]
    fn runs_are_deterministic() {
        let s = tiny(vec![3, 40, 7, 64], 64, 8, 2);
        let a = run(&s).unwrap().to_json();
        assert_eq!(a, run(&s).unwrap().to_json());
    }

    #[test]
    fn switch_charges_breakdown_exactly() {
        let mut s = tiny(vec![4, 4, 4, 4000], 4000, 8, 2);
        s.controller.eval_interval = 16;
        let r = run(&s).unwrap();
        assert!(!r.switches.is_empty());
        for sw in &r.switches {
            assert!(sw.t_best < sw.t_cur);
            assert_eq!(sw.realized.total, sw.realized.components().iter().sum::<f64>());
        }
        assert_eq!(r.nodes[0].switch_time, r.total_switch_cost());
        let times: Vec<f64> = r.timeline.iter().map(|e| e.time_s).collect();
        assert!(times.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("naive-switch".parse::<Mode>().unwrap(), Mode::NaiveSwitch);
        assert!("fast".parse::<Mode>().is_err());
    }
}
