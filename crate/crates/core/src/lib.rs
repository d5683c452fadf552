//! Simulation and planning library for adaptive tensor-parallel
//! reconfiguration during long-tail rollout generation.

pub mod cluster;
pub mod controller;
pub mod engine;
pub mod error;
pub mod latency;
pub mod presets;
pub mod report;
pub mod reshard;
pub mod switchcost;
pub mod workload;

pub use cluster::{candidate_configs, token_budget, ClusterSpec, ModelSpec, ParallelConfig};
pub use controller::{ControllerParams, SwitchDecision};
pub use engine::{compare, init_scenario, run, run_with, sweep, Comparison, Mode, PredictorSource, ScenarioSpec};
pub use error::{Error, Result};
pub use latency::{
    AnalyticHardwareModel, LatencyModel, LatencyPredictor, OracleCalibration, ProfileTable,
};
pub use report::{SimReport, TailReport, TimelineEvent};
pub use reshard::{ReshardPlan, ShardLayout};
pub use switchcost::{CommGroupPool, SwitchCalibration, SwitchCostBreakdown};
pub use workload::{BatchStatus, LengthDistribution, Sample, SampleStatus};
