//! Offline profiling grid and the resulting latency table.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::oracle::AnalyticHardwareModel;
use crate::cluster::{candidate_configs, token_budget};
use crate::error::{Error, Result};
use crate::workload::csv_error;

/// Decode steps averaged per profiling point.
pub const PROFILE_DECODE_STEPS: u32 = 60;

pub const TABLE_HEADER: [&str; 5] = ["tp", "batch", "ctx_len", "decode_ms", "prefill_ms"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridPoint {
    pub tp: u32,
    pub batch: u32,
    pub ctx_len: u32,
}

/// One profiled (tp, B, L) point. Latencies are kept in milliseconds, the
/// unit of the on-disk table, so that save/load round-trips bit-exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub tp: u32,
    pub batch: u32,
    pub ctx_len: u32,
    pub decode_ms: f64,
    pub prefill_ms: f64,
}

impl ProfilePoint {
    pub fn decode_latency(&self) -> f64 {
        self.decode_ms / 1e3
    }

    pub fn prefill_latency(&self) -> f64 {
        self.prefill_ms / 1e3
    }

    /// Aggregate tokens at the start of the profiled window.
    pub fn agg_tokens(&self) -> u64 {
        self.batch as u64 * self.ctx_len as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileTable {
    pub points: Vec<ProfilePoint>,
    pub grid_batches: Vec<u32>,
    pub grid_lengths: Vec<u32>,
    /// Largest `B * L` in the table; equals the profiling budget whenever the
    /// grid reaches it.
    pub t_cap: u64,
}

impl ProfileTable {
    pub fn from_points(points: Vec<ProfilePoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Validation("profile table has no points".into()));
        }
        for p in &points {
            if p.batch == 0 || p.ctx_len == 0 || p.tp == 0 {
                return Err(Error::Validation(format!("degenerate profile point {p:?}")));
            }
            if !(p.decode_ms > 0.0 && p.prefill_ms > 0.0 && p.decode_ms.is_finite() && p.prefill_ms.is_finite()) {
                return Err(Error::Validation(format!("non-positive latency in {p:?}")));
            }
        }
        let grid_batches: BTreeSet<u32> = points.iter().map(|p| p.batch).collect();
        let grid_lengths: BTreeSet<u32> = points.iter().map(|p| p.ctx_len).collect();
        let t_cap = points.iter().map(ProfilePoint::agg_tokens).max().unwrap_or(0);
        Ok(ProfileTable {
            points,
            grid_batches: grid_batches.into_iter().collect(),
            grid_lengths: grid_lengths.into_iter().collect(),
            t_cap,
        })
    }

    pub fn tps(&self) -> Vec<u32> {
        let s: BTreeSet<u32> = self.points.iter().map(|p| p.tp).collect();
        s.into_iter().collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_csv(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "{}", TABLE_HEADER.join(","))?;
        for p in &self.points {
            // `{}` on f64 prints the shortest representation that parses back exactly.
            writeln!(w, "{},{},{},{},{}", p.tp, p.batch, p.ctx_len, p.decode_ms, p.prefill_ms)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
        if headers.iter().collect::<Vec<_>>() != TABLE_HEADER {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("expected header `{}`", TABLE_HEADER.join(",")),
            });
        }
        let mut points = Vec::new();
        for rec in rdr.deserialize::<ProfilePoint>() {
            points.push(rec.map_err(|e| csv_error(path, e))?);
        }
        if points.is_empty() {
            return Err(Error::Validation(format!("{}: table has no rows", path.display())));
        }
        Self::from_points(points)
    }
}

pub fn save_table(table: &ProfileTable, path: impl AsRef<Path>) -> Result<()> {
    table.save(path)
}

pub fn load_table(path: impl AsRef<Path>) -> Result<ProfileTable> {
    ProfileTable::load(path)
}

/// Ten batch sizes log-spaced over [1, 256].
pub fn grid_batches() -> Vec<u32> {
    (0..10)
        .map(|i| 256f64.powf(i as f64 / 9.0).round() as u32)
        .collect()
}

/// Powers of two from 8 to 128K, with geometric midpoints added below 512.
pub fn grid_lengths() -> Vec<u32> {
    let mut out = Vec::new();
    for k in 3..=17 {
        let l = 1u32 << k;
        out.push(l);
        if l < 512 {
            out.push((l as f64 * std::f64::consts::SQRT_2).round() as u32);
        }
    }
    out
}

/// All (tp, B, L) points with `B * L <= T_cap`, identical for every TP.
pub fn build_profile_grid(cluster: &crate::cluster::ClusterSpec) -> Vec<GridPoint> {
    let configs = candidate_configs(cluster);
    let Some(first) = configs.first() else {
        return Vec::new();
    };
    let t_cap = token_budget(cluster, first);
    let batches = grid_batches();
    let lengths = grid_lengths();
    let mut out = Vec::new();
    for cfg in &configs {
        for &batch in &batches {
            for &ctx_len in &lengths {
                if batch as u64 * ctx_len as u64 <= t_cap {
                    out.push(GridPoint {
                        tp: cfg.tp,
                        batch,
                        ctx_len,
                    });
                }
            }
        }
    }
    out
}

/// Mean oracle latency over the profiled decode window starting at context `L`.
pub fn profiled_decode_latency(hw: &AnalyticHardwareModel, p: GridPoint) -> f64 {
    let b = p.batch as u64;
    let start = b * p.ctx_len as u64;
    let first = hw.oracle_decode_latency(p.tp, p.batch, start as f64);
    // Accumulate offsets from the first step so a flat window returns it exactly.
    let drift: f64 = (1..PROFILE_DECODE_STEPS as u64)
        .map(|k| hw.oracle_decode_latency(p.tp, p.batch, (start + b * k) as f64) - first)
        .sum();
    first + drift / PROFILE_DECODE_STEPS as f64
}

pub fn run_profiler(hw: &AnalyticHardwareModel, grid: &[GridPoint]) -> Result<ProfileTable> {
    if grid.is_empty() {
        return Err(Error::Validation("profiling grid is empty".into()));
    }
    let points: Vec<ProfilePoint> = grid
        .par_iter()
        .map(|&p| ProfilePoint {
            tp: p.tp,
            batch: p.batch,
            ctx_len: p.ctx_len,
            decode_ms: profiled_decode_latency(hw, p) * 1e3,
            prefill_ms: hw.oracle_prefill_latency(p.tp, p.batch, p.ctx_len as f64) * 1e3,
        })
        .collect();
    ProfileTable::from_points(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    #[test]
    fn batch_grid_has_ten_values_from_1_to_256() {
        let b = grid_batches();
        assert_eq!(b.len(), 10);
        assert_eq!((b[0], b[9]), (1, 256));
        assert!(b.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn length_grid_is_denser_below_512() {
        let l = grid_lengths();
        assert_eq!((l[0], *l.last().unwrap()), (8, 131_072));
        assert!(l.windows(2).all(|w| w[0] < w[1]));
        let short = l.iter().filter(|&&x| x < 512).count();
        assert_eq!(short, 12);
    }

    #[test]
    fn grid_respects_token_budget() {
        let hw = presets::a40_hardware();
        let grid = build_profile_grid(&hw.cluster);
        assert!(!grid.iter().any(|p| p.batch == 256 && p.ctx_len == 8192));
        assert!(grid.iter().any(|p| p.batch == 1 && p.ctx_len == 8));
        assert!(grid.iter().all(|p| p.batch as u64 * p.ctx_len as u64 <= 1 << 20));
        let per_tp = |tp: u32| -> Vec<(u32, u32)> {
            grid.iter().filter(|p| p.tp == tp).map(|p| (p.batch, p.ctx_len)).collect()
        };
        for tp in [2, 4, 8] {
            assert_eq!(per_tp(1), per_tp(tp));
        }
    }

    #[test]
    fn flat_oracle_profiles_to_single_step_value() {
        let mut hw = presets::a40_hardware();
        hw.calibration.kv_bytes_per_token = 0.0;
        let p = GridPoint { tp: 2, batch: 3, ctx_len: 64 };
        let t = run_profiler(&hw, &[p]).unwrap();
        assert_eq!(t.points.len(), 1);
        assert_eq!(t.points[0].decode_ms, hw.oracle_decode_latency(2, 3, 192.0) * 1e3);
    }

    #[test]
    fn profiled_value_is_window_mean() {
        let hw = presets::a40_hardware();
        let p = GridPoint { tp: 4, batch: 6, ctx_len: 1024 };
        let mean: f64 = (0..60)
            .map(|k| hw.oracle_decode_latency(4, 6, (6 * 1024 + 6 * k) as f64))
            .sum::<f64>()
            / 60.0;
        assert!((profiled_decode_latency(&hw, p) - mean).abs() <= 1e-15 * mean.max(1.0));
    }

    #[test]
    fn profiler_is_deterministic() {
        let hw = presets::a40_hardware();
        let grid = build_profile_grid(&hw.cluster);
        let a = run_profiler(&hw, &grid).unwrap();
        let b = run_profiler(&hw, &grid).unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        a.write_csv(&mut x).unwrap();
        b.write_csv(&mut y).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn save_load_round_trip() {
        let hw = presets::a40_hardware();
        let grid = build_profile_grid(&hw.cluster);
        let table = run_profiler(&hw, &grid).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        save_table(&table, &path).unwrap();
        assert_eq!(load_table(&path).unwrap(), table);
    }

    #[test]
    fn load_rejects_empty_and_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, "").unwrap();
        assert!(load_table(&empty).is_err());

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "tp,batch,ctx_len,decode_ms,prefill_ms\n1,1,8,1.0,2.0\n1,x,16,1.0,2.0\n").unwrap();
        match load_table(&bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn load_hand_written_table() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(
            &path,
            "tp,batch,ctx_len,decode_ms,prefill_ms\n1,1,8,10,20\n1,1,16,11,21\n2,1,8,9,19\n2,1,16,10,20\n",
        )
        .unwrap();
        let t = load_table(&path).unwrap();
        assert_eq!(t.points.len(), 4);
        assert_eq!(t.tps(), vec![1, 2]);
        assert_eq!(t.grid_lengths, vec![8, 16]);
    }
}
