//! Experiment configuration files.
//!
//! A config is TOML with one section per module. Every key is optional and
//! overrides the built-in A40 reference scenario:
//!
//! ```toml
//! [scenario]      # prompt_len, global_batch, l_max, initial_tp, seed, mode,
//!                 # predictor, prep_time, train_time, targets
//! [model]
//! [cluster]
//! [oracle]
//! [switch]        # plus [switch.graph] and [switch.naive]
//! [controller]
//! [workload]      # a length distribution, or `trace = "lengths.csv"`
//! [output]        # dir, formats, sweep, profile
//! ```
//!
//! Unknown keys are rejected so that typos do not silently fall back to defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tailtp_core::engine::reference_scenario;
use tailtp_core::workload::load_trace;
use tailtp_core::ScenarioSpec;
use toml::{Table, Value};

use crate::failure::{CliResult, Failure};

/// Env var naming the directory searched for relative `--config` paths.
pub const CONFIG_DIR_ENV: &str = "TAILTP_CONFIG_DIR";

const NESTED: [(&str, &str); 6] = [
    ("model", "model"),
    ("cluster", "cluster"),
    ("oracle", "oracle"),
    ("switch", "switch"),
    ("controller", "controller"),
    ("workload", "distribution"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
    /// `l_max` values for `sweep`, ascending.
    #[serde(default)]
    pub sweep: Vec<u32>,
    /// Precomputed profile table; generated on the fly when absent.
    #[serde(default)]
    pub profile: Option<PathBuf>,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_formats() -> Vec<Format> {
    vec![Format::Json, Format::Csv]
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: default_dir(),
            formats: default_formats(),
            sweep: Vec::new(),
            profile: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: ScenarioSpec,
    pub output: OutputSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: reference_scenario(16_384),
            output: OutputSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> CliResult<()> {
        self.scenario.validate()?;
        if self.output.sweep.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Failure::scenario("output.sweep must be strictly ascending"));
        }
        if self.output.sweep.contains(&0) {
            return Err(Failure::scenario("output.sweep values must be >= 1"));
        }
        Ok(())
    }

    /// Resolves `path` against the working directory, then against the
    /// directory named by [`CONFIG_DIR_ENV`].
    pub fn locate(path: &Path) -> PathBuf {
        if path.is_absolute() || path.exists() {
            return path.to_path_buf();
        }
        match std::env::var_os(CONFIG_DIR_ENV) {
            Some(dir) => Path::new(&dir).join(path),
            None => path.to_path_buf(),
        }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let path = Self::locate(path);
        let text = std::fs::read_to_string(&path).map_err(|e| Failure::io(&path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|f| Failure::new(f.kind, f.error.context(path.display().to_string())))
    }

    /// Parses config text; relative paths inside it resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> CliResult<Self> {
        let user: Table = toml::from_str(text).map_err(|e| Failure::scenario(format!("invalid config: {e}")))?;
        let mut merged = Table::try_from(reference_scenario(16_384))
            .map_err(|e| Failure::scenario(format!("default scenario: {e}")))?;
        let mut output = OutputSection::default();
        let mut checked = Table::new();

        for (section, value) in &user {
            let Value::Table(t) = value else {
                return Err(Failure::scenario(format!("`{section}` must be a section")));
            };
            match section.as_str() {
                "scenario" => {
                    for (k, v) in t {
                        if NESTED.iter().any(|(_, field)| field == k) {
                            return Err(Failure::scenario(format!("scenario.{k} belongs in its own section")));
                        }
                        merged.insert(k.clone(), v.clone());
                        checked.insert(k.clone(), v.clone());
                    }
                }
                "output" => {
                    output = t
                        .clone()
                        .try_into()
                        .map_err(|e| Failure::scenario(format!("[output]: {e}")))?;
                    resolve(&mut output.profile, base);
                }
                "workload" if t.contains_key("trace") => {
                    if t.len() > 1 {
                        return Err(Failure::scenario("[workload] with `trace` takes no other keys"));
                    }
                    let rel = t["trace"]
                        .as_str()
                        .ok_or_else(|| Failure::scenario("workload.trace must be a path string"))?;
                    let dist = load_trace(base.join(rel))?;
                    let v = Value::try_from(dist).map_err(|e| Failure::scenario(e.to_string()))?;
                    merged.insert("distribution".into(), v);
                }
                "workload" if t.contains_key("kind") => {
                    // A new distribution family replaces the default outright.
                    merged.insert("distribution".into(), value.clone());
                    checked.insert("distribution".into(), value.clone());
                }
                s => {
                    let field = NESTED
                        .iter()
                        .find(|(sec, _)| *sec == s)
                        .map(|(_, f)| *f)
                        .ok_or_else(|| Failure::scenario(format!("unknown section [{s}]")))?;
                    let slot = merged.entry(field).or_insert_with(|| Value::Table(Table::new()));
                    deep_merge(slot, value);
                    checked.insert(field.into(), value.clone());
                }
            }
        }

        let scenario: ScenarioSpec = Value::Table(merged)
            .try_into()
            .map_err(|e| Failure::scenario(format!("invalid config: {e}")))?;
        let echoed = Value::try_from(&scenario).map_err(|e| Failure::scenario(e.to_string()))?;
        check_known(&Value::Table(checked), &echoed, "")?;

        let cfg = ExperimentConfig { scenario, output };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The effective configuration in the same layout [`parse`](Self::parse) accepts.
    pub fn to_toml(&self) -> String {
        let mut v = Table::try_from(&self.scenario).expect("scenario serializes");
        let mut out = Table::new();
        let mut scenario = Table::new();
        for (section, field) in NESTED {
            if let Some(t) = v.remove(field) {
                out.insert(section.into(), t);
            }
        }
        scenario.extend(v);
        let mut doc = Table::new();
        doc.insert("scenario".into(), Value::Table(scenario));
        doc.extend(out);
        doc.insert(
            "output".into(),
            Value::try_from(&self.output).expect("output section serializes"),
        );
        toml::to_string(&doc).expect("config serializes")
    }
}

fn resolve(p: &mut Option<PathBuf>, base: &Path) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

fn deep_merge(dst: &mut Value, src: &Value) {
    match (dst, src) {
        (Value::Table(d), Value::Table(s)) => {
            for (k, v) in s {
                match d.get_mut(k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        d.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (d, s) => *d = s.clone(),
    }
}

/// Every key the user wrote must survive a deserialize/serialize round trip.
fn check_known(user: &Value, echoed: &Value, path: &str) -> CliResult<()> {
    let (Value::Table(u), Value::Table(e)) = (user, echoed) else {
        return Ok(());
    };
    for (k, v) in u {
        let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        match e.get(k) {
            Some(ev) => check_known(v, ev, &here)?,
            None => return Err(Failure::scenario(format!("unknown config key `{here}`"))),
        }
    }
    Ok(())
}
