//! Built-in calibrations. The CLI config presets carry the same numbers.

use crate::cluster::{ClusterSpec, ModelSpec};
use crate::latency::{AnalyticHardwareModel, OracleCalibration};

/// One node of 8x A40 on PCIe 4.0.
pub fn a40_cluster() -> ClusterSpec {
    ClusterSpec {
        num_nodes: 1,
        gpus_per_node: 8,
        intra_bw_unidir: 12.28e9,
        kv_tokens_per_gpu: 131_072,
        hbm_bw: 770.5e9,
        peak_flops: 100e12,
        per_layer_tp_comm_base: 173.557e-6,
    }
}

pub fn a40_hardware() -> AnalyticHardwareModel {
    AnalyticHardwareModel {
        cluster: a40_cluster(),
        model: ModelSpec::llama31_8b(),
        calibration: OracleCalibration::a40_llama8b(),
    }
}
