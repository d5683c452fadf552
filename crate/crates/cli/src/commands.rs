//! Subcommand implementations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use tailtp_core::engine::{build_predictor, ComparisonRow};
use tailtp_core::latency::{build_profile_grid, fit_predictor, profiled_decode_latency, run_profiler, GridPoint};
use tailtp_core::{compare, run_with, sweep, Comparison, LatencyModel, LatencyPredictor, Mode, ProfileTable};

use crate::config::{ExperimentConfig, Format};
use crate::failure::{CliResult, Failure};

pub const PROFILE_FILE: &str = "profile.csv";
pub const PREDICTOR_FILE: &str = "predictor.json";
pub const REPORT_FILE: &str = "report.json";
pub const TIMELINE_FILE: &str = "timeline.csv";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const COMPARISON_JSON: &str = "comparison.json";

/// Everything a subcommand needs after flags have been folded into the config.
pub struct Job {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub formats: Vec<Format>,
}

impl Job {
    fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }

    fn out_dir(&self) -> CliResult<&Path> {
        std::fs::create_dir_all(&self.out).map_err(|e| Failure::io(&self.out, e))?;
        Ok(&self.out)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.out_dir()?.join(name);
        std::fs::write(&path, bytes).map_err(|e| Failure::io(&path, e))?;
        Ok(path)
    }

    fn profile(&self) -> CliResult<ProfileTable> {
        match &self.cfg.output.profile {
            Some(p) => Ok(ProfileTable::load(p)?),
            None => {
                let hw = self.cfg.scenario.hardware();
                Ok(run_profiler(&hw, &build_profile_grid(&hw.cluster))?)
            }
        }
    }

    /// A supplied profile table takes precedence over the scenario's predictor source.
    fn predictor(&self) -> CliResult<Box<dyn LatencyModel>> {
        match &self.cfg.output.profile {
            Some(p) => Ok(Box::new(fit_predictor(&ProfileTable::load(p)?)?)),
            None => Ok(build_predictor(&self.cfg.scenario)?),
        }
    }
}

pub fn profile(job: &Job) -> CliResult<()> {
    let start = Instant::now();
    let hw = job.cfg.scenario.hardware();
    let grid = build_profile_grid(&hw.cluster);
    let table = run_profiler(&hw, &grid)?;
    let mut buf = Vec::new();
    table.write_csv(&mut buf).map_err(|e| Failure::io(&job.out, e))?;
    let path = job.write(PROFILE_FILE, &buf)?;
    println!(
        "profiled {} grid points (T_cap {}) in {:.2}s -> {}",
        grid.len(),
        table.t_cap,
        start.elapsed().as_secs_f64(),
        path.display()
    );
    Ok(())
}

pub fn fit(job: &Job) -> CliResult<()> {
    let table = job.profile()?;
    let pred = fit_predictor(&table)?;
    let json = serde_json::to_string_pretty(&pred).map_err(|e| Failure::scenario(e.to_string()))?;
    let path = job.write(PREDICTOR_FILE, (json + "\n").as_bytes())?;
    let (mean, max, n) = midpoint_error(&job.cfg, &table, &pred)?;
    println!(
        "fitted {} points over tp {:?}; off-grid decode error vs oracle: mean {:.2}% max {:.2}% ({n} queries) -> {}",
        table.points.len(),
        pred.tps(),
        mean * 100.0,
        max * 100.0,
        path.display()
    );
    Ok(())
}

/// Relative decode error at geometric midpoints between profiled lengths.
fn midpoint_error(cfg: &ExperimentConfig, table: &ProfileTable, pred: &LatencyPredictor) -> CliResult<(f64, f64, usize)> {
    let hw = cfg.scenario.hardware();
    let mut errs = Vec::new();
    for tp in table.tps() {
        for &b in &table.grid_batches {
            for w in table.grid_lengths.windows(2) {
                let l = ((w[0] as f64) * (w[1] as f64)).sqrt().round() as u32;
                if b as u64 * w[1] as u64 > table.t_cap {
                    continue;
                }
                let truth = profiled_decode_latency(&hw, GridPoint { tp, batch: b, ctx_len: l });
                let got = pred.predict_decode_latency(tp, b, b as f64 * l as f64)?;
                errs.push((got - truth).abs() / truth);
            }
        }
    }
    let n = errs.len();
    let mean = if n == 0 { 0.0 } else { errs.iter().sum::<f64>() / n as f64 };
    Ok((mean, errs.iter().copied().fold(0.0, f64::max), n))
}

pub fn simulate(job: &Job) -> CliResult<()> {
    let pred = job.predictor()?;
    let report = run_with(&job.cfg.scenario, pred.as_ref())?;
    if job.wants(Format::Json) {
        job.write(REPORT_FILE, (report.to_json() + "\n").as_bytes())?;
    }
    if job.wants(Format::Csv) {
        let mut buf = Vec::new();
        report.write_timeline_csv(&mut buf).map_err(|e| Failure::io(&job.out, e))?;
        job.write(TIMELINE_FILE, &buf)?;
    }
    println!(
        "{} {}: generation {:.2}s, iteration {:.2}s, {} switches ({:.2}s), single-sample fraction {:.3}",
        report.scenario.mode,
        report.scenario.initial_config,
        report.generation_time,
        report.iteration_time,
        report.switches.len(),
        report.total_switch_cost(),
        report.tail.single_sample_fraction
    );
    Ok(())
}

pub fn compare_cmd(job: &Job, modes: &[Mode]) -> CliResult<()> {
    let pred = job.predictor()?;
    let c = compare(&job.cfg.scenario, pred.as_ref(), modes)?;
    emit_comparisons(job, &[c])
}

pub fn sweep_cmd(job: &Job, modes: &[Mode], l_max: &[u32]) -> CliResult<()> {
    if l_max.is_empty() {
        return Err(Failure::scenario("sweep needs l_max values (--l-max or output.sweep)"));
    }
    let pred = job.predictor()?;
    let cs = sweep(&job.cfg.scenario, pred.as_ref(), l_max, modes)?;
    emit_comparisons(job, &cs)
}

fn emit_comparisons(job: &Job, cs: &[Comparison]) -> CliResult<()> {
    let rows: Vec<&ComparisonRow> = cs.iter().flat_map(|c| &c.rows).collect();
    if job.wants(Format::Csv) {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &rows {
            w.serialize(r).map_err(|e| Failure::io(&job.out, e))?;
        }
        let buf = w.into_inner().map_err(|e| Failure::io(&job.out, e))?;
        job.write(COMPARISON_CSV, &buf)?;
    }
    if job.wants(Format::Json) {
        let json = serde_json::to_string_pretty(&rows).map_err(|e| Failure::scenario(e.to_string()))?;
        job.write(COMPARISON_JSON, (json + "\n").as_bytes())?;
    }
    print!("{}", render_table(cs));
    Ok(())
}

/// Fixed-width table, one block per `l_max`, then a speedup summary line.
pub fn render_table(cs: &[Comparison]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>7}  {:<12}  {:<22}  {:>9}  {:>9}  {:>7}  {:>8}  {:>9}  {:>6}",
        "l_max", "mode", "config", "gen (s)", "iter (s)", "speedup", "switches", "sw cost", "tail"
    );
    for c in cs {
        for r in &c.rows {
            let _ = writeln!(
                s,
                "{:>7}  {:<12}  {:<22}  {:>9.2}  {:>9.2}  {:>6.3}x  {:>8}  {:>9.2}  {:>6.3}",
                r.l_max,
                r.mode,
                r.config,
                r.generation_time,
                r.iteration_time,
                r.speedup,
                r.switches,
                r.switch_cost,
                r.tail_fraction
            );
        }
    }
    if cs.iter().any(|c| c.adaptive.is_some()) {
        let parts: Vec<String> = cs
            .iter()
            .map(|c| format!("{}K {:.3}x", c.l_max as f64 / 1024.0, c.speedup()))
            .collect();
        let _ = writeln!(s, "adaptive speedup vs best static: {}", parts.join(" | "));
    }
    s
}
