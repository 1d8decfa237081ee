//! Experiment configuration: TOML files with typed validation plus
//! `--set key=value` overrides applied before deserialization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::ArchSpec;
use crate::data::ShardStrategy;
use crate::error::{Error, Result};
use crate::federation::{Scheme, TopkScope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeName {
    Centralized,
    Fedavg,
    Splitnn,
    SplitSparse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShardStrategyName {
    Iid,
    LabelSorted,
}

impl From<ShardStrategyName> for ShardStrategy {
    fn from(s: ShardStrategyName) -> Self {
        match s {
            ShardStrategyName::Iid => ShardStrategy::Iid,
            ShardStrategyName::LabelSorted => ShardStrategy::LabelSorted,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopkScopeName {
    Batch,
    Sample,
}

impl From<TopkScopeName> for TopkScope {
    fn from(s: TopkScopeName) -> Self {
        match s {
            TopkScopeName::Batch => TopkScope::Batch,
            TopkScopeName::Sample => TopkScope::Sample,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub scheme: SchemeName,
    #[serde(default = "default_devices")]
    pub devices: usize,
    /// Top-K fraction for split-sparse.
    #[serde(default = "default_k")]
    pub k: f64,
    #[serde(default)]
    pub error_feedback: bool,
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Builtin architecture name (`desk_small`, `reference_full`) or a path
    /// to an architecture file.
    #[serde(default = "default_arch")]
    pub arch: String,
    #[serde(default = "default_cut_index")]
    pub cut_index: usize,
    #[serde(default = "default_shard_strategy")]
    pub shard_strategy: ShardStrategyName,
    /// Evaluate on the test set every this many rounds (and on the last).
    #[serde(default = "default_eval_every")]
    pub eval_every: u32,
    #[serde(default = "default_topk_scope")]
    pub topk_scope: TopkScopeName,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default = "default_source")]
    pub source: DataSource,
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    #[serde(default = "default_positive_rate")]
    pub positive_rate: f64,
    /// CSV paths, required when `source = "csv"`.
    #[serde(default)]
    pub train_path: Option<String>,
    #[serde(default)]
    pub test_path: Option<String>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: default_source(),
            train_size: default_train_size(),
            test_size: default_test_size(),
            positive_rate: default_positive_rate(),
            train_path: None,
            test_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f32,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            learning_rate: default_learning_rate(),
            momentum: default_momentum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
}

fn default_devices() -> usize {
    8
}
fn default_k() -> f64 {
    0.1
}
fn default_rounds() -> u32 {
    300
}
fn default_batch_size() -> usize {
    32
}
fn default_seed() -> u64 {
    42
}
fn default_arch() -> String {
    "desk_small".to_string()
}
fn default_cut_index() -> usize {
    1
}
fn default_shard_strategy() -> ShardStrategyName {
    ShardStrategyName::Iid
}
fn default_eval_every() -> u32 {
    10
}
fn default_topk_scope() -> TopkScopeName {
    TopkScopeName::Batch
}
fn default_out_dir() -> String {
    "runs".to_string()
}
fn default_source() -> DataSource {
    DataSource::Synthetic
}
fn default_train_size() -> usize {
    4096
}
fn default_test_size() -> usize {
    1024
}
fn default_positive_rate() -> f64 {
    0.5
}
fn default_learning_rate() -> f32 {
    0.01
}
fn default_momentum() -> f32 {
    0.9
}

impl ExperimentConfig {
    pub fn from_str_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = text
            .parse()
            .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        for pair in overrides {
            apply_override(&mut value, pair)?;
        }
        let cfg: ExperimentConfig = value
            .try_into()
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_str_with_overrides(&text, overrides)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.devices == 0 {
            return Err(Error::Config("devices must be >= 1".to_string()));
        }
        if e.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".to_string()));
        }
        if e.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".to_string()));
        }
        if e.scheme == SchemeName::SplitSparse && !(e.k > 0.0 && e.k <= 1.0) {
            return Err(Error::Config(format!("k = {} outside (0, 1]", e.k)));
        }
        if self.data.source == DataSource::Csv
            && (self.data.train_path.is_none() || self.data.test_path.is_none())
        {
            return Err(Error::Config(
                "csv data source needs train_path and test_path".to_string(),
            ));
        }
        if !(0.0..=1.0).contains(&self.data.positive_rate) {
            return Err(Error::Config(format!(
                "positive_rate {} outside [0, 1]",
                self.data.positive_rate
            )));
        }
        Ok(())
    }

    pub fn scheme(&self) -> Scheme {
        match self.experiment.scheme {
            SchemeName::Centralized => Scheme::Centralized,
            SchemeName::Fedavg => Scheme::FedAvg,
            SchemeName::Splitnn => Scheme::SplitNn,
            SchemeName::SplitSparse => Scheme::SplitSparse {
                fraction: self.experiment.k,
                error_feedback: self.experiment.error_feedback,
            },
        }
    }

    /// Resolves the `arch` field: a builtin name or an architecture file.
    pub fn arch_spec(&self) -> Result<ArchSpec> {
        match self.experiment.arch.as_str() {
            "desk_small" => Ok(ArchSpec::desk_small()),
            "reference_full" => Ok(ArchSpec::reference_full()),
            path => ArchSpec::load(path),
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Applies one `dotted.path=value` override to a parsed TOML document.
/// The value side is parsed as TOML (so strings need quotes unless they
/// parse as a bare value, in which case they fall back to a string).
fn apply_override(root: &mut toml::Value, pair: &str) -> Result<()> {
    let (path, raw) = pair
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{pair}' is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override '{pair}' has an empty key segment")));
    }
    let parsed: toml::Value = match format!("v = {}", raw.trim()).parse::<toml::Value>() {
        Ok(toml::Value::Table(mut t)) => t.remove("v").expect("key v present"),
        _ => toml::Value::String(raw.trim().to_string()),
    };
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        node = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("'{key}' is not a table")))?
            .entry((*key).to_string())
            .or_insert(toml::Value::Table(toml::map::Map::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::Config(format!("'{path}' is not a table")))?
        .insert(keys[keys.len() - 1].to_string(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[experiment]\nscheme = \"split-sparse\"\n";

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::from_str_with_overrides(MINIMAL, &[]).unwrap();
        assert_eq!(cfg.experiment.devices, 8);
        assert_eq!(cfg.experiment.k, 0.1);
        assert_eq!(cfg.experiment.batch_size, 32);
        assert_eq!(cfg.experiment.seed, 42);
        assert!(!cfg.experiment.error_feedback);
        assert_eq!(cfg.data.train_size, 4096);
        assert_eq!(cfg.data.test_size, 1024);
        assert_eq!(cfg.optimizer.learning_rate, 0.01);
        assert_eq!(cfg.optimizer.momentum, 0.9);
        assert_eq!(
            cfg.scheme(),
            Scheme::SplitSparse { fraction: 0.1, error_feedback: false }
        );
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = "[experiment]\nscheme = \"fedavg\"\nbogus = 1\n";
        assert!(ExperimentConfig::from_str_with_overrides(text, &[]).is_err());
        let text = "[experiment]\nscheme = \"fedavg\"\n[extra]\nx = 1\n";
        assert!(ExperimentConfig::from_str_with_overrides(text, &[]).is_err());
    }

    #[test]
    fn type_errors_rejected() {
        let text = "[experiment]\nscheme = \"fedavg\"\ndevices = \"many\"\n";
        assert!(ExperimentConfig::from_str_with_overrides(text, &[]).is_err());
    }

    #[test]
    fn overrides_apply_with_types() {
        let cfg = ExperimentConfig::from_str_with_overrides(
            MINIMAL,
            &[
                "experiment.devices=16".to_string(),
                "experiment.k=0.05".to_string(),
                "experiment.error_feedback=true".to_string(),
                "optimizer.learning_rate=0.1".to_string(),
                "experiment.arch=reference_full".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.experiment.devices, 16);
        assert_eq!(cfg.experiment.k, 0.05);
        assert!(cfg.experiment.error_feedback);
        assert_eq!(cfg.optimizer.learning_rate, 0.1);
        assert_eq!(cfg.experiment.arch, "reference_full");
    }

    #[test]
    fn override_with_wrong_type_rejected() {
        let bad = ExperimentConfig::from_str_with_overrides(
            MINIMAL,
            &["experiment.devices=fast".to_string()],
        );
        assert!(bad.is_err());
    }

    #[test]
    fn semantic_validation() {
        for bad in [
            "experiment.k=0.0",
            "experiment.k=1.5",
            "experiment.devices=0",
            "experiment.batch_size=0",
            "experiment.eval_every=0",
        ] {
            let r = ExperimentConfig::from_str_with_overrides(MINIMAL, &[bad.to_string()]);
            assert!(r.is_err(), "{bad} should be rejected");
        }
        let r = ExperimentConfig::from_str_with_overrides(
            MINIMAL,
            &["data.source=\"csv\"".to_string()],
        );
        assert!(r.is_err(), "csv without paths should be rejected");
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::from_str_with_overrides(MINIMAL, &[]).unwrap();
        let text = cfg.to_toml_string();
        let back = ExperimentConfig::from_str_with_overrides(&text, &[]).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn builtin_arch_names_resolve() {
        let cfg = ExperimentConfig::from_str_with_overrides(MINIMAL, &[]).unwrap();
        assert_eq!(cfg.arch_spec().unwrap().name, "desk_small");
        let cfg = ExperimentConfig::from_str_with_overrides(
            MINIMAL,
            &["experiment.arch=\"reference_full\"".to_string()],
        )
        .unwrap();
        assert_eq!(cfg.arch_spec().unwrap().name, "reference_full");
        let cfg = ExperimentConfig::from_str_with_overrides(
            MINIMAL,
            &["experiment.arch=\"/nonexistent/x.cfg\"".to_string()],
        )
        .unwrap();
        assert!(cfg.arch_spec().is_err());
    }
}
