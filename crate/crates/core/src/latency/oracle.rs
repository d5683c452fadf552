//! Closed-form stand-in for real hardware.
//!
//! Per-step decode latency of one DP group at TP degree `tp`, batch `B` and
//! aggregate context `T`:
//!
//! ```text
//! Bp   = ceil(B / q) * q                                  (tile-padded batch)
//! mem  = (W + T * kv_bytes_per_token) / tp / hbm_bw
//! comp = Bp * flops_per_token / (tp * peak_flops)
//! comm = layers * (tp - 1) / tp * (per_layer_tp_comm_base + comm_per_token * Bp)
//! lat  = max(mem, comp) + comm + kernel_overhead_base + token_overhead * Bp
//! ```
//!
//! Memory traffic shrinks with TP while collective cost grows with it, so the
//! preferred TP degree flips between small and large batches. The tile
//! padding makes latency a step function of `B`, which a predictor that
//! interpolates between profiled batch sizes cannot reproduce exactly.
//!
//! Prefill: `a * B * L^2 / tp + b * B * L / tp + c`.

use serde::{Deserialize, Serialize};

use super::LatencyModel;
use crate::cluster::{ClusterSpec, ModelSpec, ParallelConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCalibration {
    /// Total weight bytes streamed per decode step at TP=1 (incl. embeddings).
    pub weight_bytes: f64,
    /// KV bytes read per context token per step (GQA-aware).
    pub kv_bytes_per_token: f64,
    pub flops_per_token: f64,
    /// Per-layer collective cost per padded batch slot, seconds.
    pub comm_per_token: f64,
    /// Unsharded per-slot cost (sampling, logits post-processing), seconds.
    pub token_overhead: f64,
    pub kernel_overhead_base: f64,
    pub tile_quantum: u32,
    #[serde(default)]
    pub noise_rel: f64,
    #[serde(default)]
    pub noise_seed: u64,
    pub prefill_quadratic: f64,
    pub prefill_linear: f64,
    pub prefill_constant: f64,
}

impl OracleCalibration {
    /// 8x A40 over PCIe 4.0 with LLaMA-3.1-8B.
    ///
    /// `hbm_bw`, `per_layer_tp_comm_base` (on the cluster) and
    /// `token_overhead` were least-squares fitted to four measured node-level
    /// per-token decode latencies: global batch 1 at 4096 context
    /// (TP2: 15.37 ms, TP8: 9.64 ms) and global batch 128 at 2048 context per
    /// sample (TP2: 24.41 ms, TP8: 30.87 ms). The global batch is split evenly
    /// over the node's DP groups. `kernel_overhead_base`, `comm_per_token` and
    /// `peak_flops` were held fixed during the fit.
    pub fn a40_llama8b() -> Self {
        OracleCalibration {
            weight_bytes: 16.06e9,
            kv_bytes_per_token: 131_072.0,
            flops_per_token: 16.06e9,
            comm_per_token: 20e-9,
            token_overhead: 131.8807e-6,
            kernel_overhead_base: 1.0e-3,
            tile_quantum: 8,
            noise_rel: 0.0,
            noise_seed: 0,
            prefill_quadratic: 5.0e-9,
            prefill_linear: 1.2e-4,
            prefill_constant: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile_quantum == 0 {
            return Err(Error::Config("tile_quantum must be >= 1".into()));
        }
        if !(0.0..=0.2).contains(&self.noise_rel) {
            return Err(Error::Config(format!(
                "noise_rel {} outside [0, 0.2]",
                self.noise_rel
            )));
        }
        let nonneg = [
            self.weight_bytes,
            self.kv_bytes_per_token,
            self.flops_per_token,
            self.comm_per_token,
            self.token_overhead,
            self.kernel_overhead_base,
            self.prefill_quadratic,
            self.prefill_linear,
            self.prefill_constant,
        ];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("oracle constants must be finite and >= 0".into()));
        }
        if self.prefill_quadratic + self.prefill_linear <= 0.0 {
            return Err(Error::Config("prefill cost must grow with context".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticHardwareModel {
    pub cluster: ClusterSpec,
    pub model: ModelSpec,
    pub calibration: OracleCalibration,
}

impl AnalyticHardwareModel {
    pub fn new(cluster: ClusterSpec, model: ModelSpec, calibration: OracleCalibration) -> Result<Self> {
        cluster.validate()?;
        model.validate()?;
        calibration.validate()?;
        Ok(AnalyticHardwareModel {
            cluster,
            model,
            calibration,
        })
    }

    fn padded(&self, batch: u32) -> f64 {
        let q = self.calibration.tile_quantum;
        (batch.div_ceil(q) * q) as f64
    }

    pub fn oracle_decode_latency(&self, tp: u32, batch: u32, agg_tokens: f64) -> f64 {
        let c = &self.calibration;
        let cl = &self.cluster;
        let tpf = tp as f64;
        let bp = self.padded(batch.max(1));
        let mem = (c.weight_bytes + agg_tokens * c.kv_bytes_per_token) / tpf / cl.hbm_bw;
        let comp = bp * c.flops_per_token / (tpf * cl.peak_flops);
        let comm = self.model.num_layers as f64 * (tpf - 1.0) / tpf
            * (cl.per_layer_tp_comm_base + c.comm_per_token * bp);
        let lat = mem.max(comp) + comm + c.kernel_overhead_base + c.token_overhead * bp;
        lat * self.noise_factor(tp, batch, agg_tokens.to_bits())
    }

    pub fn oracle_prefill_latency(&self, tp: u32, batch: u32, ctx_len: f64) -> f64 {
        let c = &self.calibration;
        let b = batch as f64;
        let tpf = tp as f64;
        c.prefill_quadratic * b * ctx_len * ctx_len / tpf
            + c.prefill_linear * b * ctx_len / tpf
            + c.prefill_constant
    }

    /// Node-wide step latency for a global batch split evenly over the DP
    /// groups of `config`: the busiest group sets the pace.
    pub fn node_decode_latency(&self, config: ParallelConfig, global_batch: u32, ctx_per_sample: u64) -> f64 {
        let per_group = global_batch.div_ceil(config.dp_intra).max(1);
        self.oracle_decode_latency(config.tp, per_group, (per_group as u64 * ctx_per_sample) as f64)
    }

    /// Deterministic multiplicative noise in `[1 - noise_rel, 1 + noise_rel]`.
    fn noise_factor(&self, tp: u32, batch: u32, t_bits: u64) -> f64 {
        let rel = self.calibration.noise_rel;
        if rel == 0.0 {
            return 1.0;
        }
        let mut h = self.calibration.noise_seed ^ 0x9E37_79B9_7F4A_7C15;
        for v in [tp as u64, batch as u64, t_bits] {
            h = splitmix64(h ^ v);
        }
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        1.0 + rel * (2.0 * u - 1.0)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl LatencyModel for AnalyticHardwareModel {
    fn decode_latency(&self, tp: u32, batch: u32, agg_tokens: f64) -> Result<f64> {
        Ok(self.oracle_decode_latency(tp, batch, agg_tokens))
    }

    fn prefill_latency(&self, tp: u32, batch: u32, ctx_len: f64) -> Result<f64> {
        Ok(self.oracle_prefill_latency(tp, batch, ctx_len))
    }
}
