use std::path::{Path, PathBuf};

use bridgekit::evaluation::EvalConfig;
use bridgekit::losses::LossConfig;
use bridgekit::prior::SyntheticTaskSpec;
use bridgekit::trainer::TrainConfig;
use bridgekit::{Error, Result};
use serde::{Deserialize, Serialize};

/// Example counts for generated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 20_000,
            n_valid: 500,
            n_test: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// Everything a run needs, as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, replaces `train.seed` and `eval.seed`.
    pub seed: Option<u64>,
    pub task: SyntheticTaskSpec,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Reads and resolves a config file; `None` gives the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        cfg.resolve()
    }

    /// Applies the top-level seed and validates every section.
    pub fn resolve(mut self) -> Result<Self> {
        if let Some(seed) = self.seed.take() {
            self.train.seed = seed;
            self.eval.seed = seed;
        }
        self.task.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_seed_override() {
        let text = "seed = 7\n[train]\nsteps = 10\n[task]\nkind = \"cipher\"\n";
        let cfg: RunConfig = toml::from_str(text).unwrap();
        let cfg = cfg.resolve().unwrap();
        assert_eq!((cfg.train.seed, cfg.eval.seed, cfg.train.steps), (7, 7, 10));
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nstepz = 3\n").is_err());
    }
}
