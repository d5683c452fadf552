//! Piecewise-linear latency predictor fitted from a [`ProfileTable`].
//!
//! For each (tp, B) the decode latency is a polyline over aggregate tokens
//! `T = B * L` and the prefill latency a polyline over `L`. Queries at an
//! unprofiled batch interpolate linearly between the two bracketing batches.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::profile::ProfileTable;
use super::LatencyModel;
use crate::error::{Error, Result};

/// Polyline through `(xs[i], ys[i])`, `xs` strictly ascending.
///
/// Flat below the first knot; above the last knot it follows the last
/// segment's slope but never drops below the last knot's value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinear {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl PiecewiseLinear {
    pub fn new(mut knots: Vec<(f64, f64)>) -> Result<Self> {
        knots.sort_by(|a, b| a.0.total_cmp(&b.0));
        if knots.len() < 2 {
            return Err(Error::Fit(format!("need >= 2 knots, got {}", knots.len())));
        }
        if knots.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Fit("duplicate knot abscissa".into()));
        }
        let (xs, ys) = knots.into_iter().unzip();
        Ok(PiecewiseLinear { xs, ys })
    }

    pub fn knots(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.xs.iter().copied().zip(self.ys.iter().copied())
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return self.ys[0];
        }
        if x >= self.xs[n - 1] {
            let slope = (self.ys[n - 1] - self.ys[n - 2]) / (self.xs[n - 1] - self.xs[n - 2]);
            return (self.ys[n - 1] + slope * (x - self.xs[n - 1])).max(self.ys[n - 1]);
        }
        let i = self.xs.partition_point(|&k| k <= x);
        // xs[i-1] <= x < xs[i]
        let (x0, x1, y0, y1) = (self.xs[i - 1], self.xs[i], self.ys[i - 1], self.ys[i]);
        if x == x0 {
            return y0;
        }
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchCurves {
    pub batch: u32,
    /// Seconds per step vs aggregate tokens.
    pub decode: PiecewiseLinear,
    /// Seconds vs per-sample context length.
    pub prefill: PiecewiseLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyPredictor {
    /// Curves per TP degree, ascending by batch.
    curves: BTreeMap<u32, Vec<BatchCurves>>,
}

/// (ctx_len, decode, prefill) samples per (tp, batch).
type Grouped = BTreeMap<(u32, u32), Vec<(f64, f64, f64)>>;

pub fn fit_predictor(table: &ProfileTable) -> Result<LatencyPredictor> {
    let mut grouped: Grouped = BTreeMap::new();
    for p in &table.points {
        grouped.entry((p.tp, p.batch)).or_default().push((
            p.ctx_len as f64,
            p.decode_latency(),
            p.prefill_latency(),
        ));
    }
    let mut curves: BTreeMap<u32, Vec<BatchCurves>> = BTreeMap::new();
    for ((tp, batch), pts) in grouped {
        if pts.len() < 2 {
            return Err(Error::Fit(format!(
                "tp={tp} batch={batch} has {} length point(s); need >= 2",
                pts.len()
            )));
        }
        let b = batch as f64;
        let decode = PiecewiseLinear::new(pts.iter().map(|&(l, d, _)| (b * l, d)).collect())
            .map_err(|e| Error::Fit(format!("tp={tp} batch={batch}: {e}")))?;
        let prefill = PiecewiseLinear::new(pts.iter().map(|&(l, _, p)| (l, p)).collect())
            .map_err(|e| Error::Fit(format!("tp={tp} batch={batch}: {e}")))?;
        curves.entry(tp).or_default().push(BatchCurves {
            batch,
            decode,
            prefill,
        });
    }
    Ok(LatencyPredictor { curves })
}

impl LatencyPredictor {
    pub fn tps(&self) -> Vec<u32> {
        self.curves.keys().copied().collect()
    }

    fn interpolate(
        &self,
        tp: u32,
        batch: u32,
        eval: impl Fn(&BatchCurves) -> f64,
    ) -> Result<f64> {
        let rows = self
            .curves
            .get(&tp)
            .ok_or_else(|| Error::Lookup(format!("tp={tp} was not profiled")))?;
        let i = rows.partition_point(|c| c.batch < batch);
        if i == rows.len() {
            return Ok(eval(&rows[i - 1]));
        }
        if rows[i].batch == batch || i == 0 {
            return Ok(eval(&rows[i]));
        }
        let (lo, hi) = (&rows[i - 1], &rows[i]);
        let w = (batch - lo.batch) as f64 / (hi.batch - lo.batch) as f64;
        let (a, b) = (eval(lo), eval(hi));
        Ok(a + (b - a) * w)
    }

    /// Predicted seconds per decode step.
    pub fn predict_decode_latency(&self, tp: u32, batch: u32, agg_tokens: f64) -> Result<f64> {
        self.interpolate(tp, batch, |c| c.decode.eval(agg_tokens))
    }

    /// Predicted prefill seconds for `batch` samples of `ctx_len` tokens each.
    pub fn predict_prefill_latency(&self, tp: u32, batch: u32, ctx_len: f64) -> Result<f64> {
        self.interpolate(tp, batch, |c| c.prefill.eval(ctx_len))
    }
}

impl LatencyModel for LatencyPredictor {
    fn decode_latency(&self, tp: u32, batch: u32, agg_tokens: f64) -> Result<f64> {
        self.predict_decode_latency(tp, batch, agg_tokens)
    }

    fn prefill_latency(&self, tp: u32, batch: u32, ctx_len: f64) -> Result<f64> {
        self.predict_prefill_latency(tp, batch, ctx_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latency::profile::ProfilePoint;

    fn pt(tp: u32, batch: u32, ctx_len: u32, decode_ms: f64, prefill_ms: f64) -> ProfilePoint {
        ProfilePoint {
            tp,
            batch,
            ctx_len,
            decode_ms,
            prefill_ms,
        }
    }

    fn fit(points: Vec<ProfilePoint>) -> LatencyPredictor {
        fit_predictor(&ProfileTable::from_points(points).unwrap()).unwrap()
    }

    #[test]
    fn linear_between_two_points() {
        let p = fit(vec![pt(1, 1, 100, 1.0, 5.0), pt(1, 1, 200, 2.0, 7.0)]);
        assert!((p.predict_decode_latency(1, 1, 150.0).unwrap() - 1.5e-3).abs() < 1e-15);
        assert!((p.predict_prefill_latency(1, 1, 150.0).unwrap() - 6.0e-3).abs() < 1e-15);
    }

    #[test]
    fn extrapolation_follows_last_segment_and_is_clamped() {
        let p = fit(vec![pt(1, 1, 100, 1.0, 5.0), pt(1, 1, 200, 2.0, 7.0)]);
        assert!((p.predict_decode_latency(1, 1, 300.0).unwrap() - 3.0e-3).abs() < 1e-15);
        assert_eq!(p.predict_decode_latency(1, 1, 10.0).unwrap(), 1.0e-3);

        let down = fit(vec![pt(1, 1, 100, 2.0, 5.0), pt(1, 1, 200, 1.0, 7.0)]);
        assert_eq!(down.predict_decode_latency(1, 1, 400.0).unwrap(), 1.0e-3);
    }

    #[test]
    fn batch_interpolation() {
        let p = fit(vec![
            pt(2, 2, 10, 10.0, 1.0),
            pt(2, 2, 20, 10.0, 2.0),
            pt(2, 4, 10, 14.0, 3.0),
            pt(2, 4, 20, 14.0, 4.0),
        ]);
        // B=2 curve is over T in [20, 40], B=4 over [40, 80]; both flat.
        assert!((p.predict_decode_latency(2, 3, 40.0).unwrap() - 12.0e-3).abs() < 1e-15);
        assert!((p.predict_prefill_latency(2, 3, 15.0).unwrap() - 2.5e-3).abs() < 1e-15);
        // Clamped outside the batch range.
        assert_eq!(p.predict_decode_latency(2, 1, 40.0).unwrap(), 10.0e-3);
        assert_eq!(p.predict_decode_latency(2, 9, 40.0).unwrap(), 14.0e-3);
    }

    #[test]
    fn unprofiled_tp_is_a_lookup_error() {
        let p = fit(vec![pt(1, 1, 100, 1.0, 5.0), pt(1, 1, 200, 2.0, 7.0)]);
        assert!(matches!(p.predict_decode_latency(8, 1, 100.0), Err(Error::Lookup(_))));
    }

    #[test]
    fn single_length_point_is_a_fit_error() {
        let t = ProfileTable::from_points(vec![pt(1, 1, 100, 1.0, 5.0)]).unwrap();
        assert!(matches!(fit_predictor(&t), Err(Error::Fit(_))));
    }
}
