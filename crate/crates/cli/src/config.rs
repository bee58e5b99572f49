//! Run configuration: a TOML file with one table per component.
//!
//! Unknown keys are hard errors. A `preset` key selects the defaults that unspecified
//! fields fall back to; the fully resolved configuration is written next to every output.

use std::fmt;
use std::path::{Path, PathBuf};

use patprune_core::data::SyntheticSpec;
use patprune_core::model::{AttentionPruneConfig, EncoderConfig};
use patprune_core::pattern::{self, ProjectionMode, SparsityConfig};
use patprune_core::srste::SrsteConfig;
use patprune_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

/// File name of the resolved configuration written into every output directory.
pub const RESOLVED_NAME: &str = "config.resolved.toml";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Small encoder trained from scratch on a synthetic task.
    #[default]
    Toy,
    /// Fine-tuning settings for a pre-trained BERT-base model.
    BertScale,
}

impl Preset {
    pub fn train(self) -> TrainConfig {
        match self {
            Preset::Toy => TrainConfig { rho: TOY_RHO, epochs_admm: TOY_ADMM_EPOCHS, ..TrainConfig::toy() },
            Preset::BertScale => TrainConfig::bert_scale(),
        }
    }
}

/// ADMM penalty weight of the toy preset.
pub const TOY_RHO: f64 = 0.05;
/// ADMM epochs of the toy preset.
pub const TOY_ADMM_EPOCHS: usize = 15;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Tsv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub synthetic: SyntheticSpec,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    /// Truncation length for TSV text; synthetic data uses `synthetic.seq_len`.
    pub max_seq_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { source: DataSource::Synthetic, synthetic: SyntheticSpec::default(), train_path: None, test_path: None, max_seq_len: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub target: String,
    pub sections: usize,
    pub epsilon: f64,
    pub bins: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { target: "layer0.wq".into(), sections: 3, epsilon: 1e-3, bins: 101 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub model: EncoderConfig,
    pub train: TrainConfig,
    pub sparsity: SparsityConfig,
    pub srste: SrsteConfig,
    pub attention: AttentionPruneConfig,
    pub data: DataConfig,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_preset(Preset::Toy)
    }
}

/// A configuration problem, with the offending field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid configuration: {0}")]
    Parse(String),
    #[error("invalid configuration:\n{}", .0.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<FieldError>),
}

fn field(field: &str, message: impl Into<String>) -> FieldError {
    FieldError { field: field.into(), message: message.into() }
}

/// Merges `over` into `base`, table by table.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    pub fn for_preset(preset: Preset) -> Self {
        Self {
            preset,
            seed: 0,
            out_dir: None,
            model: EncoderConfig::default(),
            train: preset.train(),
            sparsity: SparsityConfig::default(),
            srste: SrsteConfig::default(),
            attention: AttentionPruneConfig::default(),
            data: DataConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }

    /// Parses TOML text. Fields missing from the text take the selected preset's values.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        // A direct parse reports unknown keys and type errors with their location.
        let direct: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let user: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let explicit_train_seed = user.get("train").and_then(|t| t.get("seed")).is_some();
        if explicit_train_seed && direct.train.seed != direct.seed {
            return Err(ConfigError::Invalid(vec![field("train.seed", "differs from the top-level `seed`; set only `seed`")]));
        }
        let mut base = toml::Table::try_from(Self::for_preset(direct.preset)).map_err(|e| ConfigError::Parse(e.to_string()))?;
        merge(&mut base, user);
        let mut cfg: RunConfig = base.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    /// The run seed drives initialization and shuffling; the synthetic data keeps its own
    /// seed so different runs see the same task.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes to TOML")
    }

    /// Every violated constraint, with field names.
    pub fn problems(&self) -> Vec<FieldError> {
        let mut out = Vec::new();
        if let Err(e) = self.model.validate() {
            out.push(field("model", e.to_string()));
        }
        if let Err(e) = self.train.validate() {
            out.push(field("train", e.to_string()));
        }
        if self.seed > i64::MAX as u64 {
            out.push(field("seed", "must fit in a signed 64-bit integer"));
        }
        match self.sparsity.validate() {
            Err(e) => out.push(field("sparsity", e.to_string())),
            Ok(()) => {
                let s = &self.sparsity;
                for (name, v) in [("model.d_model", self.model.d_model), ("model.d_ff", self.model.d_ff)] {
                    if v % s.block_rows != 0 || v % s.block_cols != 0 {
                        out.push(field(
                            name,
                            format!("{v} is not divisible by the {}x{} pattern block (sparsity.block_rows/block_cols)", s.block_rows, s.block_cols),
                        ));
                    }
                }
            }
        }
        if let Err(e) = self.srste.validate() {
            out.push(field("srste", e.to_string()));
        }
        let seq_len = match self.data.source {
            DataSource::Synthetic => {
                let syn = &self.data.synthetic;
                if self.model.vocab_size < syn.vocab_size {
                    out.push(field(
                        "model.vocab_size",
                        format!("{} is smaller than data.synthetic.vocab_size = {}", self.model.vocab_size, syn.vocab_size),
                    ));
                }
                if self.model.n_classes != 2 {
                    out.push(field("model.n_classes", "synthetic tasks are binary; must be 2"));
                }
                syn.seq_len
            }
            DataSource::Tsv => {
                if self.data.train_path.is_none() {
                    out.push(field("data.train_path", "required when data.source = \"tsv\""));
                }
                if self.data.test_path.is_none() {
                    out.push(field("data.test_path", "required when data.source = \"tsv\""));
                }
                if self.data.max_seq_len == 0 {
                    out.push(field("data.max_seq_len", "must be positive"));
                }
                self.data.max_seq_len
            }
        };
        if seq_len > self.model.max_seq_len {
            out.push(field("model.max_seq_len", format!("{} is shorter than the data sequence length {seq_len}", self.model.max_seq_len)));
        }
        if self.attention.enabled {
            let a = &self.attention.cfg;
            if let Err(e) = a.validate() {
                out.push(field("attention.cfg", e.to_string()));
            } else {
                if a.block_rows != a.block_cols {
                    out.push(field("attention.cfg", "attention blocks must be square"));
                }
                let padded = seq_len.div_ceil(a.block_rows) * a.block_rows;
                if padded > self.model.max_seq_len {
                    out.push(field(
                        "model.max_seq_len",
                        format!(
                            "{} cannot hold sequences padded to {padded}, a multiple of the attention block {}",
                            self.model.max_seq_len, a.block_rows
                        ),
                    ));
                }
            }
        }
        if self.analysis.sections == 0 {
            out.push(field("analysis.sections", "must be positive"));
        }
        if self.analysis.bins == 0 {
            out.push(field("analysis.bins", "must be positive"));
        }
        if !(self.analysis.epsilon > 0.0) {
            out.push(field("analysis.epsilon", "must be positive"));
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }
}

/// Named sparsity settings used by the feasibility audit and `verify`.
pub fn sparsity_presets() -> Vec<(&'static str, SparsityConfig)> {
    vec![
        ("pattern-4x4", SparsityConfig::default()),
        ("topk-4x4", SparsityConfig { mode: ProjectionMode::TopKOnly, ..SparsityConfig::default() }),
        ("pattern-8x8", SparsityConfig { block_rows: 8, block_cols: 8, keep_k: 32, pool_size: 32, mode: ProjectionMode::PoolConstrained }),
        ("nm-2-4", pattern::nm_config(4, 2).expect("valid N:M setting")),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_toy_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.rho, TOY_RHO);
    }

    #[test]
    fn preset_supplies_missing_fields() {
        let cfg = RunConfig::from_toml("preset = \"bert-scale\"\n[train]\nbatch_size = 8\n").unwrap();
        assert_eq!(cfg.train.learning_rate, 7e-5);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.train.rho, 0.01);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = RunConfig::from_toml("[train]\nrho = 0.01\nrh = 2.0\n").unwrap_err().to_string();
        assert!(err.contains("rh"), "{err}");
    }

    #[test]
    fn cross_field_messages_name_fields() {
        let err = RunConfig::from_toml("[model]\nd_model = 30\nn_heads = 3\n").unwrap_err().to_string();
        assert!(err.contains("model.d_model"), "{err}");
    }

    #[test]
    fn resolved_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set_seed(17);
        cfg.train.learning_rate = 1.25e-3;
        cfg.attention.enabled = true;
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn presets_are_valid() {
        for (name, s) in sparsity_presets() {
            let cfg = RunConfig { sparsity: s, ..RunConfig::default() };
            assert!(cfg.problems().is_empty(), "{name}");
        }
    }
}
