//! Layer-wise All-Gather + Slice schedules for weights and KV caches.
//!
//! Every plan processes one layer at a time: the shards of a layer are
//! gathered into a full copy inside a gather group, after which each target
//! rank keeps only its canonical slice and the full copy is dropped. Peak
//! extra memory is therefore one layer's worth of data, never the model.
//!
//! Local shards are not reused even when they already match the target
//! slice; the byte accounting follows the all-gather volume.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::cluster::ModelSpec;
use crate::error::{Error, Result};

/// Rank-to-range assignment over a sharded dimension of size `dim`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardLayout {
    pub tp: u32,
    pub dim: u32,
    pub ranges: Vec<Range<u32>>,
}

impl ShardLayout {
    /// Rank `r` owns `[r * dim / tp, (r + 1) * dim / tp)`.
    pub fn canonical(tp: u32, dim: u32) -> Result<Self> {
        if tp == 0 || !dim.is_multiple_of(tp) {
            return Err(Error::Layout(format!("dim {dim} not divisible by tp={tp}")));
        }
        let w = dim / tp;
        Ok(ShardLayout {
            tp,
            dim,
            ranges: (0..tp).map(|r| r * w..(r + 1) * w).collect(),
        })
    }

    pub fn is_canonical(&self) -> bool {
        ShardLayout::canonical(self.tp, self.dim).is_ok_and(|c| c.ranges == self.ranges)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanKind {
    Weights,
    Kv,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReshardStep {
    pub layer: u32,
    /// Target DP group this step materializes (always 0 for weights).
    pub group: u32,
    pub gather_ranks: Vec<u32>,
    /// Bytes each participating rank receives from the others during the gather.
    pub recv_bytes_per_rank: u64,
    /// Slice kept by each target rank, indexed by target rank.
    pub slices: Vec<Range<u32>>,
    /// Full-layer buffer held while gathering.
    pub working_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReshardPlan {
    pub kind: PlanKind,
    pub dim: u32,
    pub steps: Vec<ReshardStep>,
    pub peak_working_bytes: u64,
    pub total_per_rank_bytes: u64,
    /// Upper bound on working memory: one full layer of the data being moved.
    pub peak_bound: u64,
}

impl ReshardPlan {
    fn empty(kind: PlanKind, dim: u32) -> Self {
        ReshardPlan {
            kind,
            dim,
            steps: Vec::new(),
            peak_working_bytes: 0,
            total_per_rank_bytes: 0,
            peak_bound: 0,
        }
    }

    fn from_steps(kind: PlanKind, dim: u32, steps: Vec<ReshardStep>, peak_bound: u64) -> Self {
        ReshardPlan {
            kind,
            dim,
            peak_working_bytes: steps.iter().map(|s| s.working_bytes).max().unwrap_or(0),
            total_per_rank_bytes: steps.iter().map(|s| s.recv_bytes_per_rank).sum(),
            steps,
            peak_bound,
        }
    }
}

/// Human-readable schedule: one line per step.
impl fmt::Display for ReshardPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            PlanKind::Weights => "weights",
            PlanKind::Kv => "kv",
        };
        writeln!(
            f,
            "# {kind} plan: {} steps, {} bytes/rank, peak {} bytes",
            self.steps.len(),
            self.total_per_rank_bytes,
            self.peak_working_bytes
        )?;
        writeln!(f, "layer\tgroup\tbytes\tranks\tslices")?;
        for s in &self.steps {
            let ranks: Vec<String> = s.gather_ranks.iter().map(u32::to_string).collect();
            let slices: Vec<String> = s.slices.iter().map(|r| format!("{}..{}", r.start, r.end)).collect();
            writeln!(
                f,
                "{}\t{}\t{}\t{}\t{}",
                s.layer,
                s.group,
                s.recv_bytes_per_rank,
                ranks.join(","),
                slices.join(",")
            )?;
        }
        Ok(())
    }
}

fn check_layouts(src: &ShardLayout, tgt: &ShardLayout) -> Result<()> {
    if src.dim != tgt.dim {
        return Err(Error::Validation(format!(
            "layouts cover different dims ({} vs {})",
            src.dim, tgt.dim
        )));
    }
    for l in [src, tgt] {
        if !l.is_canonical() {
            return Err(Error::Validation(format!("tp={} layout is not canonical", l.tp)));
        }
    }
    Ok(())
}

/// Weight plan covering one gather domain of `max(tp_src, tp_tgt)` ranks;
/// the node's other domains run the identical schedule in parallel.
pub fn plan_weight_reshard(model: &ModelSpec, src: &ShardLayout, tgt: &ShardLayout) -> Result<ReshardPlan> {
    check_layouts(src, tgt)?;
    let identity = src.tp == tgt.tp;
    let g = src.tp.max(tgt.tp);
    let layer = model.layer_param_bytes;
    let recv = if identity { 0 } else { layer * (g as u64 - 1) / g as u64 };
    let steps = (0..model.num_layers)
        .map(|l| ReshardStep {
            layer: l,
            group: 0,
            gather_ranks: if identity { Vec::new() } else { (0..g).collect() },
            recv_bytes_per_rank: recv,
            slices: tgt.ranges.clone(),
            working_bytes: if identity { 0 } else { layer },
        })
        .collect();
    Ok(ReshardPlan::from_steps(PlanKind::Weights, src.dim, steps, layer))
}

/// One unfinished sample's KV cache and where it lives before and after the merge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvMove {
    pub sample_id: u32,
    pub context_len: u64,
    pub src_group: u32,
    pub tgt_group: u32,
}

/// KV plan: samples are first assigned to target DP groups (`tgt_group`),
/// then each target group gathers its samples' shards layer by layer and
/// every target rank slices out its head range.
///
/// `recv_bytes_per_rank` of a step is what one source rank position sends
/// for that group and layer, so the plan total equals
/// `sum_i 2 * M * ctx_i * (H / tp_src) * s`.
pub fn plan_kv_migration(moves: &[KvMove], model: &ModelSpec, tp_src: u32, tp_tgt: u32) -> Result<ReshardPlan> {
    let dim = model.hidden_dim;
    let src = ShardLayout::canonical(tp_src, dim)?;
    let tgt = ShardLayout::canonical(tp_tgt, dim)?;
    if moves.is_empty() || tp_src == tp_tgt {
        return Ok(ReshardPlan::empty(PlanKind::Kv, dim));
    }
    let s = model.bytes_per_elem as u64;
    let shard = (dim / src.tp) as u64;
    let full = dim as u64;
    let num_groups = moves.iter().map(|m| m.tgt_group).max().unwrap_or(0) + 1;
    let bound: u64 = moves.iter().map(|m| 2 * m.context_len * full * s).sum();

    let mut steps = Vec::new();
    for layer in 0..model.num_layers {
        for group in 0..num_groups {
            let members: Vec<&KvMove> = moves.iter().filter(|m| m.tgt_group == group).collect();
            if members.is_empty() {
                continue;
            }
            let tokens: u64 = members.iter().map(|m| m.context_len).sum();
            let mut src_groups: Vec<u32> = members.iter().map(|m| m.src_group).collect();
            src_groups.sort_unstable();
            src_groups.dedup();
            let mut ranks: Vec<u32> = src_groups
                .iter()
                .flat_map(|&sg| (0..tp_src).map(move |r| sg * tp_src + r))
                .chain((0..tp_tgt).map(|r| group * tp_tgt + r))
                .collect();
            ranks.sort_unstable();
            ranks.dedup();
            steps.push(ReshardStep {
                layer,
                group,
                gather_ranks: ranks,
                recv_bytes_per_rank: 2 * tokens * shard * s,
                slices: tgt.ranges.clone(),
                working_bytes: 2 * tokens * full * s,
            });
        }
    }
    Ok(ReshardPlan::from_steps(PlanKind::Kv, dim, steps, bound))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    /// Target slices of a step do not tile the dimension exactly once.
    Coverage { layer: u32, group: u32, detail: String },
    /// Slices tile the dimension but differ from the canonical target layout.
    NonCanonical { layer: u32, group: u32 },
    Memory { peak: u64, bound: u64 },
    Order { index: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Coverage { layer, group, detail } => {
                write!(f, "layer {layer} group {group}: coverage: {detail}")
            }
            Violation::NonCanonical { layer, group } => {
                write!(f, "layer {layer} group {group}: slices are not canonical")
            }
            Violation::Memory { peak, bound } => write!(f, "peak {peak} bytes exceeds bound {bound}"),
            Violation::Order { index } => write!(f, "step {index} is out of layer order"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub violations: Vec<Violation>,
}

impl VerificationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

fn coverage_error(slices: &[Range<u32>], dim: u32) -> Option<String> {
    let mut sorted = slices.to_vec();
    sorted.sort_by_key(|r| (r.start, r.end));
    let mut next = 0;
    for r in &sorted {
        if r.start < next {
            return Some(format!("overlap at {}", r.start));
        }
        if r.start > next {
            return Some(format!("gap [{next}, {})", r.start));
        }
        next = r.end;
    }
    (next != dim).then(|| format!("covers [0, {next}) of [0, {dim})"))
}

pub fn verify_plan(plan: &ReshardPlan, tgt: &ShardLayout) -> VerificationReport {
    let mut violations = Vec::new();
    for (i, w) in plan.steps.windows(2).enumerate() {
        let ordered = match plan.kind {
            PlanKind::Weights => w[0].layer < w[1].layer,
            PlanKind::Kv => (w[0].layer, w[0].group) < (w[1].layer, w[1].group),
        };
        if !ordered {
            violations.push(Violation::Order { index: i + 1 });
        }
    }
    for s in &plan.steps {
        if let Some(detail) = coverage_error(&s.slices, plan.dim) {
            violations.push(Violation::Coverage {
                layer: s.layer,
                group: s.group,
                detail,
            });
        } else if s.slices != tgt.ranges {
            violations.push(Violation::NonCanonical {
                layer: s.layer,
                group: s.group,
            });
        }
    }
    let peak = plan
        .steps
        .iter()
        .map(|s| s.working_bytes)
        .max()
        .unwrap_or(0)
        .max(plan.peak_working_bytes);
    if peak > plan.peak_bound {
        violations.push(Violation::Memory {
            peak,
            bound: plan.peak_bound,
        });
    }
    VerificationReport { violations }
}

/// Largest per-step working buffer.
pub fn peak_extra_memory(plan: &ReshardPlan) -> u64 {
    plan.steps.iter().map(|s| s.working_bytes).max().unwrap_or(0)
}
