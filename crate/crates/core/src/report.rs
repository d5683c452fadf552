//! Simulation reports, the event timeline and tail metrics.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::ParallelConfig;
use crate::controller::CandidateEval;
use crate::error::{Error, Result};
use crate::switchcost::SwitchCostBreakdown;

pub const TIMELINE_HEADER: [&str; 6] = ["time_s", "node", "event", "active_count", "tp", "detail"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    StepBlock,
    Completion,
    Evaluation,
    Switch,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::StepBlock => "step-block",
            EventKind::Completion => "completion",
            EventKind::Evaluation => "evaluation",
            EventKind::Switch => "switch",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            EventKind::StepBlock,
            EventKind::Completion,
            EventKind::Evaluation,
            EventKind::Switch,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEvent {
    pub time_s: f64,
    pub node: u32,
    pub event: EventKind,
    /// Active samples on the node after the event.
    pub active_count: u32,
    pub tp: u32,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchRecord {
    pub node: u32,
    pub time_s: f64,
    pub from: ParallelConfig,
    pub to: ParallelConfig,
    /// Cost the controller was quoted when deciding.
    pub predicted: SwitchCostBreakdown,
    /// Cost charged to the node clock.
    pub realized: SwitchCostBreakdown,
    pub samples_moved: u32,
    pub t_cur: f64,
    pub t_best: f64,
    pub evaluated: Vec<CandidateEval>,
    pub kv_bytes_per_rank: u64,
    pub weight_bytes_per_rank: u64,
    pub peak_extra_memory: u64,
}

/// Straggler statistics of one node.
///
/// A *scope* is the whole node or one DP group between two reconfigurations.
/// Its single-sample period is the time during which it serves exactly one
/// remaining sample after starting with two or more. The node's fraction is
/// the longest such period over all scopes divided by the node's decode time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeTail {
    pub node: u32,
    pub decode_start: f64,
    pub decode_end: f64,
    pub single_sample_time: f64,
    pub single_sample_fraction: f64,
    /// Node scope only: time with exactly one active sample on the whole node.
    pub node_single_sample_fraction: f64,
    /// First time the active count falls below half of the initial count.
    pub aligned_end: f64,
    pub aligned_tokens: u64,
    pub aligned_throughput: f64,
    pub tail_tokens: u64,
    pub tail_throughput: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    pub nodes: Vec<NodeTail>,
    /// Max over nodes.
    pub single_sample_fraction: f64,
    pub node_single_sample_fraction: f64,
    /// Aligned / tail tokens-per-second on the node with the largest fraction.
    pub throughput_ratio: f64,
    pub aligned_duration: f64,
    pub tail_duration: f64,
}

impl TailReport {
    pub fn from_nodes(nodes: Vec<NodeTail>) -> Self {
        let pick = nodes
            .iter()
            .enumerate()
            .max_by(|a, b| {
                a.1.single_sample_fraction
                    .total_cmp(&b.1.single_sample_fraction)
                    .then(b.0.cmp(&a.0))
            })
            .map(|(i, _)| i);
        let (ratio, aligned, tail) = match pick.map(|i| &nodes[i]) {
            Some(n) if n.tail_throughput > 0.0 => (
                n.aligned_throughput / n.tail_throughput,
                n.aligned_end - n.decode_start,
                n.single_sample_time,
            ),
            Some(n) => (0.0, n.aligned_end - n.decode_start, 0.0),
            None => (0.0, 0.0, 0.0),
        };
        TailReport {
            single_sample_fraction: nodes.iter().map(|n| n.single_sample_fraction).fold(0.0, f64::max),
            node_single_sample_fraction: nodes
                .iter()
                .map(|n| n.node_single_sample_fraction)
                .fold(0.0, f64::max),
            throughput_ratio: ratio,
            aligned_duration: aligned,
            tail_duration: tail,
            nodes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    pub node: u32,
    pub generation_time: f64,
    pub prefill_time: f64,
    pub decode_steps: u64,
    pub bubble_time: f64,
    pub switch_time: f64,
    pub final_config: ParallelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub mode: String,
    pub seed: u64,
    pub global_batch: u32,
    pub prompt_len: u32,
    pub l_max: u32,
    pub initial_config: ParallelConfig,
    pub num_nodes: u32,
    pub gpus_per_node: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub scenario: ScenarioSummary,
    pub generation_time: f64,
    pub prep_time: f64,
    pub train_time: f64,
    pub iteration_time: f64,
    pub tokens_generated: u64,
    /// Tokens per second over the whole generation stage.
    pub throughput: f64,
    pub nodes: Vec<NodeReport>,
    pub switches: Vec<SwitchRecord>,
    pub tail: TailReport,
    pub timeline: Vec<TimelineEvent>,
}

impl SimReport {
    pub fn total_switch_cost(&self) -> f64 {
        self.switches.iter().fold(0.0, |acc, s| acc + s.realized.total)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Validation(format!("report JSON: {e}")))
    }

    pub fn write_timeline_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        write_timeline_csv(&self.timeline, w)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn save_timeline(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_timeline_csv(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

pub fn write_timeline_csv(events: &[TimelineEvent], w: &mut impl Write) -> std::io::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(TIMELINE_HEADER)?;
    for e in events {
        wr.write_record([
            e.time_s.to_string(),
            e.node.to_string(),
            e.event.as_str().to_string(),
            e.active_count.to_string(),
            e.tp.to_string(),
            e.detail.clone(),
        ])?;
    }
    wr.flush()
}

pub fn read_timeline_csv(path: impl AsRef<Path>) -> Result<Vec<TimelineEvent>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| crate::workload::csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| crate::workload::csv_error(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != TIMELINE_HEADER {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header `{}`", TIMELINE_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| crate::workload::csv_error(path, e))?;
        let line = i as u64 + 2;
        let bad = |m: &str| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: m.to_string(),
        };
        let num = |j: usize| rec.get(j).ok_or_else(|| bad("missing field"));
        out.push(TimelineEvent {
            time_s: num(0)?.parse().map_err(|_| bad("bad time_s"))?,
            node: num(1)?.parse().map_err(|_| bad("bad node"))?,
            event: EventKind::parse(num(2)?).ok_or_else(|| bad("bad event"))?,
            active_count: num(3)?.parse().map_err(|_| bad("bad active_count"))?,
            tp: num(4)?.parse().map_err(|_| bad("bad tp"))?,
            detail: num(5)?.to_string(),
        });
    }
    Ok(out)
}

pub fn tail_metrics(report: &SimReport) -> TailReport {
    report.tail.clone()
}
