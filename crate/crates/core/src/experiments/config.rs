//! Experiment configuration: TOML files plus dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::AgentSpec;
use crate::error::{Error, Result};
use crate::protocol::HistoryPolicy;
use crate::taskgen::{TaskSpec, TaskVariant};

/// Version of the config file schema.
pub const SCHEMA_VERSION: u32 = 1;

fn default_schema() -> u32 {
    SCHEMA_VERSION
}
fn default_parallel() -> usize {
    1
}
fn default_history() -> HistoryPolicy {
    HistoryPolicy::Full
}
fn default_thresholds() -> Vec<f64> {
    vec![0.5]
}
fn default_threshold() -> f64 {
    0.8
}
fn default_samples() -> usize {
    2000
}
fn default_bound() -> usize {
    4096
}
fn default_offset_low() -> i64 {
    -99
}
fn default_offset_high() -> i64 {
    99
}
fn default_variants() -> Vec<TaskVariant> {
    vec![
        TaskVariant::KvSum,
        TaskVariant::RetrievalOnly,
        TaskVariant::AdditionOnly,
        TaskVariant::PrefixSum,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExperimentKind {
    TurnsScaling,
    Counterfactual {
        slice_turn: usize,
        error_rates: Vec<f64>,
        trials_per_rate: usize,
        #[serde(default = "default_offset_low")]
        offset_low: i64,
        #[serde(default = "default_offset_high")]
        offset_high: i64,
    },
    MaxKSearch {
        #[serde(default = "default_threshold")]
        threshold: f64,
        #[serde(default = "default_samples")]
        samples_per_probe: usize,
        #[serde(default = "default_bound")]
        k_max_bound: usize,
    },
    FixedOpsSweep {
        total_steps: usize,
        k_values: Vec<usize>,
    },
    ContextWindowSweep {
        windows: Vec<usize>,
    },
    DecomposedBaselines {
        #[serde(default = "default_variants")]
        variants: Vec<TaskVariant>,
    },
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::TurnsScaling => "turns_scaling",
            ExperimentKind::Counterfactual { .. } => "counterfactual",
            ExperimentKind::MaxKSearch { .. } => "max_k_search",
            ExperimentKind::FixedOpsSweep { .. } => "fixed_ops_sweep",
            ExperimentKind::ContextWindowSweep { .. } => "context_window_sweep",
            ExperimentKind::DecomposedBaselines { .. } => "decomposed_baselines",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub name: String,
    #[serde(default = "default_parallel")]
    pub parallel: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Estimate token counts (≈ 4 characters per token) when the agent
    /// reports none.
    #[serde(default)]
    pub estimate_tokens: bool,
    #[serde(default = "default_history")]
    pub history: HistoryPolicy,
    #[serde(default = "default_thresholds")]
    pub horizon_thresholds: Vec<f64>,
    /// Wordlist file; the bundled list is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wordlist: Option<PathBuf>,
    pub task: TaskSpec,
    pub agent: AgentSpec,
    pub experiment: ExperimentKind,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.parallel == 0 {
            return Err(Error::config("parallel: must be >= 1"));
        }
        if let Some(s) = self.horizon_thresholds.iter().find(|s| !(**s > 0.0 && **s < 1.0)) {
            return Err(Error::config(format!("horizon_thresholds: {s} outside (0, 1)")));
        }
        self.history.validate().map_err(|e| Error::config(format!("history: {e}")))?;
        self.task.validate().map_err(|e| Error::config(format!("task: {e}")))?;
        self.agent.validate().map_err(|e| Error::config(format!("agent: {e}")))?;
        match &self.experiment {
            ExperimentKind::TurnsScaling => {}
            ExperimentKind::Counterfactual {
                slice_turn,
                error_rates,
                trials_per_rate,
                offset_low,
                offset_high,
            } => {
                if *slice_turn == 0 || *slice_turn > self.task.num_turns {
                    return Err(Error::config(format!(
                        "experiment.slice_turn: {slice_turn} must lie in 1..={}",
                        self.task.num_turns
                    )));
                }
                if error_rates.is_empty() || error_rates.iter().any(|e| !(0.0..=1.0).contains(e)) {
                    return Err(Error::config("experiment.error_rates: need at least one rate, all in [0, 1]"));
                }
                if *trials_per_rate == 0 {
                    return Err(Error::config("experiment.trials_per_rate: must be >= 1"));
                }
                crate::protocol::validate_offset_range(*offset_low, *offset_high)?;
            }
            ExperimentKind::MaxKSearch {
                threshold,
                samples_per_probe,
                k_max_bound,
            } => {
                if !(*threshold > 0.0 && *threshold <= 1.0) {
                    return Err(Error::config(format!("experiment.threshold: {threshold} outside (0, 1]")));
                }
                if *samples_per_probe == 0 || *k_max_bound == 0 {
                    return Err(Error::config("experiment: samples_per_probe and k_max_bound must be >= 1"));
                }
            }
            ExperimentKind::FixedOpsSweep { total_steps, k_values } => {
                if *total_steps == 0 || k_values.is_empty() {
                    return Err(Error::config("experiment: total_steps and k_values must be non-empty"));
                }
                if let Some(k) = k_values.iter().find(|&&k| k == 0 || total_steps % k != 0) {
                    return Err(Error::config(format!(
                        "experiment.k_values: {k} does not divide total_steps = {total_steps}"
                    )));
                }
            }
            ExperimentKind::ContextWindowSweep { windows } => {
                if windows.is_empty() || windows.contains(&0) {
                    return Err(Error::config("experiment.windows: need at least one window, all >= 1"));
                }
            }
            ExperimentKind::DecomposedBaselines { variants } => {
                if variants.is_empty() {
                    return Err(Error::config("experiment.variants: need at least one variant"));
                }
            }
        }
        Ok(())
    }

    /// Canonical TOML form, used as the run's config snapshot.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        parse_config(text, &[])
    }
}

/// Parses `text`, applies `overrides` (`dotted.key=value`, value in TOML
/// syntax or a bare string) and validates the result.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
    for ov in overrides {
        apply_override(&mut table, ov)?;
    }
    let cfg: ExperimentConfig = table.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, overrides)
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub fn apply_override(table: &mut toml::Table, ov: &str) -> Result<()> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{ov}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("override `{ov}` has an empty key segment")));
    }
    let (last, parents) = path.split_last().expect("non-empty");
    let mut cur = table;
    for p in parents {
        let next = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = next
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override `{ov}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}
