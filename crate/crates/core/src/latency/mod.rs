//! Hardware oracle, offline profiler and online latency predictor.

pub mod oracle;
pub mod predictor;
pub mod profile;

pub use oracle::{AnalyticHardwareModel, OracleCalibration};
pub use predictor::{fit_predictor, LatencyPredictor, PiecewiseLinear};
pub use profile::{
    build_profile_grid, grid_batches, grid_lengths, load_table, profiled_decode_latency, run_profiler,
    save_table, GridPoint, ProfilePoint, ProfileTable, PROFILE_DECODE_STEPS,
};

use crate::error::Result;

/// Anything that can price a decode step or a prefill: the oracle itself or
/// a predictor fitted from it.
pub trait LatencyModel: Send + Sync {
    /// Seconds for one decode step of `batch` samples holding `agg_tokens` context in total.
    fn decode_latency(&self, tp: u32, batch: u32, agg_tokens: f64) -> Result<f64>;
    /// Seconds to prefill `batch` samples of `ctx_len` tokens each.
    fn prefill_latency(&self, tp: u32, batch: u32, ctx_len: f64) -> Result<f64>;
}
