//! Run configuration, resolved from defaults, an optional policy preset,
//! command-line flags and a TOML file (later layers win).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::engine::{BatchSchedule, IterationPolicy, PRESETS};
use crate::learner::{RemoteConfig, SyntheticParams};
use crate::metrics::{SdOptions, Window};

/// Environment variable consulted for the remote learner's base URL.
pub const REMOTE_URL_ENV: &str = "ADASTAR_REMOTE_URL";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    #[default]
    Synthetic,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub backend: Backend,
    pub synthetic: SyntheticParams,
    pub remote: RemoteConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Share of the corpus held out for evaluation.
    pub holdout_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            holdout_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub model_params: f64,
    pub sd_windows: Vec<Window>,
    pub sd: SdOptions,
    pub quartile_base: Window,
    pub quartile_offset: u32,
    pub histogram_bin: u64,
    /// Window used for the SD column of matrix tables (clipped to the run).
    pub matrix_window: Window,
    pub heap_snapshots: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            model_params: 3e9,
            sd_windows: vec![Window::new(1, 2), Window::new(1, 10), Window::new(1, 20)],
            sd: SdOptions::default(),
            quartile_base: Window::new(1, 10),
            quartile_offset: 3,
            histogram_bin: 1,
            matrix_window: Window::new(1, 10),
            heap_snapshots: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub corpus_limit: Option<usize>,
    pub exemplars: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub max_iters: u32,
    pub policy: IterationPolicy,
    pub schedule: BatchSchedule,
    pub learner: LearnerConfig,
    pub eval: EvalConfig,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::new(),
            corpus_limit: None,
            exemplars: None,
            output_dir: PathBuf::from("out"),
            seed: 10,
            max_iters: 10,
            policy: IterationPolicy::default(),
            schedule: BatchSchedule::default(),
            learner: LearnerConfig::default(),
            eval: EvalConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.corpus.as_os_str().is_empty() {
            return invalid("no corpus path given".into());
        }
        if self.max_iters == 0 {
            return invalid("max_iters must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.eval.holdout_fraction) {
            return invalid("eval.holdout_fraction must lie in [0, 1)".into());
        }
        if self.schedule.initial_steps == 0 || self.schedule.per_step_batch == 0 {
            return invalid("schedule steps and per-step batch must be positive".into());
        }
        if !(self.schedule.growth.is_finite() && self.schedule.growth >= 1.0) {
            return invalid("schedule.growth must be a finite value >= 1".into());
        }
        if self.metrics.histogram_bin == 0 {
            return invalid("metrics.histogram_bin must be positive".into());
        }
        if self.learner.backend == Backend::Remote && self.learner.remote.base_url.is_empty() {
            return invalid(format!(
                "remote backend needs learner.remote.base_url or {REMOTE_URL_ENV}"
            ));
        }
        self.policy
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Fills the remote base URL from the environment when unset.
    pub fn apply_env(&mut self) {
        if self.learner.remote.base_url.is_empty() {
            if let Ok(url) = std::env::var(REMOTE_URL_ENV) {
                self.learner.remote.base_url = url;
            }
        }
    }

    /// Merges layers over the defaults. A `preset` key in any layer (the last
    /// one wins) replaces the default policy before the layers apply.
    pub fn resolve(layers: &[Table]) -> Result<Self, ConfigError> {
        let mut layers = layers.to_vec();
        let mut preset = None;
        for layer in &mut layers {
            if let Some(v) = layer.remove("preset") {
                let name = v
                    .as_str()
                    .ok_or_else(|| ConfigError::Parse("preset must be a string".into()))?;
                preset = Some(name.to_owned());
            }
        }
        let mut base = RunConfig::default();
        if let Some(name) = preset {
            base.policy =
                IterationPolicy::preset(&name).ok_or(ConfigError::UnknownPreset(name.clone()))?;
        }
        let mut merged = to_table(&base)?;
        for layer in layers {
            merge(&mut merged, layer);
        }
        Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        toml::to_string(self).map_err(|e| ConfigError::Parse(e.to_string()))
    }
}

pub fn preset_names() -> &'static [&'static str] {
    PRESETS
}

pub fn to_table<T: Serialize>(value: &T) -> Result<Table, ConfigError> {
    match Value::try_from(value).map_err(|e| ConfigError::Parse(e.to_string()))? {
        Value::Table(t) => Ok(t),
        _ => Err(ConfigError::Parse("expected a table".into())),
    }
}

pub fn read_table(path: &Path) -> Result<Table, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    text.parse::<Table>()
        .map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))
}

/// Recursive table merge; `over` wins on scalar conflicts.
pub fn merge(base: &mut Table, over: Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Variant;

    fn table(text: &str) -> Table {
        text.parse().unwrap()
    }

    #[test]
    fn default_protocol_values() {
        let c = RunConfig::default();
        assert_eq!(c.seed, 10);
        assert_eq!(c.schedule.beta(1), 320);
        assert_eq!(c.learner.remote.temperature, 1.0);
    }

    #[test]
    fn file_layer_overrides_flags() {
        let flags = table("seed = 3\nmax_iters = 4\n[policy]\nk = 2\n");
        let file = table("seed = 7\n[policy]\nrationalize = false\n");
        let c = RunConfig::resolve(&[flags, file]).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.max_iters, 4);
        assert!(!c.policy.rationalize);
    }

    #[test]
    fn preset_then_overrides() {
        let c = RunConfig::resolve(&[table("preset = \"star-acc\"\n[policy]\nk = 1\n")]).unwrap();
        assert_eq!(c.policy.variant, Variant::StarRandom);
        assert!(c.policy.accumulate);
        assert_eq!(c.policy.k, 1);
        assert!(RunConfig::resolve(&[table("preset = \"nope\"")]).is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::resolve(&[table("sede = 3")]).is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let mut c = RunConfig::resolve(&[table("preset = \"restem\"\ncorpus = \"x.jsonl\"")]).unwrap();
        c.metrics.heap_snapshots = true;
        let text = c.to_toml().unwrap();
        let back = RunConfig::resolve(&[table(&text)]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn remote_requires_url() {
        let mut c = RunConfig::resolve(&[table("corpus = \"x\"\n[learner]\nbackend = \"remote\"")]).unwrap();
        assert!(c.validate().is_err());
        c.learner.remote.base_url = "http://localhost:1".into();
        c.validate().unwrap();
    }
}
