//! Run configuration: defaults, then the TOML file, then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use hagcn::attention::Branch;
use hagcn::ingest::{DataConfig, StreamKind};
use hagcn::network::ModelConfig;
use hagcn::training::{SyntheticSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Dataset caches used by `train`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds model initialization, shuffling and synthetic data.
    pub seed: u64,
    /// Branch switched off at evaluation time.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disable: Option<Branch>,
    pub paths: Paths,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub synthetic: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            disable: None,
            paths: Paths::default(),
            model: ModelConfig::ntu(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            synthetic: SyntheticSpec::default(),
        }
    }
}

/// Flags shared by every subcommand that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub stream: Option<StreamKind>,
    pub disable: Option<Branch>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, base: RunConfig, flags: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text, base)?
            }
            None => base,
        };
        if let Some(seed) = flags.seed {
            cfg.seed = seed;
        }
        if let Some(stream) = flags.stream {
            cfg.data.stream = stream;
        }
        if flags.disable.is_some() {
            cfg.disable = flags.disable;
        }
        cfg.train.seed = cfg.seed;
        cfg.synthetic.seed = cfg.seed;
        cfg.model.validate().map_err(CliError::from)?;
        cfg.train.validate().map_err(CliError::from)?;
        Ok(cfg)
    }

    /// Parses `text` on top of `base`: tables present in the file replace
    /// the matching defaults field by field.
    fn from_toml(text: &str, base: RunConfig) -> Result<Self, CliError> {
        let mut merged =
            toml::Table::try_from(&base).map_err(|e| CliError::config(e.to_string()))?;
        let file: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::config(e.message()))?;
        merge(&mut merged, file);
        toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(e.message()))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::config(e.to_string()))
    }

    /// Writes the effective configuration to `dir/config.toml`.
    pub fn echo(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(CliError::runtime)?;
        fs::write(dir.join("config.toml"), self.to_toml()?).map_err(CliError::runtime)
    }
}

fn merge(dst: &mut toml::Table, src: toml::Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(toml::Value::Table(d)), toml::Value::Table(s)) => merge(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}
