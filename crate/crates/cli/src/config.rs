use std::fs;
use std::path::{Path, PathBuf};

use lms_fd::data::CipherConfig;
use lms_fd::model::ModelConfig;
use lms_fd::training::TrainConfig;
use lms_fd::{Error, Result};
use serde::{Deserialize, Serialize};

/// Where a run's sentence pairs come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Synthetic cipher corpus generated from this description.
    Cipher(CipherConfig),
    /// Four-column TSV files; the validation file is optional.
    Tsv { train: PathBuf, valid: Option<PathBuf> },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Cipher(CipherConfig::default())
    }
}

/// One experiment. `model.vocab_size` and `model.languages` are derived from
/// the data when the run starts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSource,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Reads a config file. Relative data and output paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DataSource::Tsv { train, valid } = &mut cfg.data {
            resolve(train);
            if let Some(v) = valid {
                resolve(v);
            }
        }
        if let Some(out) = &mut cfg.output_dir {
            resolve(out);
        }
        Ok(cfg)
    }

    /// Checks everything that can be checked before data is loaded.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let DataSource::Tsv { train, valid } = &self.data {
            for p in std::iter::once(train).chain(valid) {
                if !p.is_file() {
                    return Err(Error::Config(format!("data file {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }
}
