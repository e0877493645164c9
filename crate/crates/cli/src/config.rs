//! Run configuration: a JSON file whose fields command-line flags override.

use std::fs;
use std::path::{Path, PathBuf};

use cyclone_core::dataset::synth::SynthConfig;
use cyclone_core::dataset::SamplerConfig;
use cyclone_core::models::OverlapPolicy;
use cyclone_core::network::NetworkConfig;
use cyclone_core::training::{TrainConfig, TrainingHyper};
use cyclone_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// File written into every output directory.
pub const RUN_CONFIG_FILE: &str = "run_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset directory holding `labels.csv` and `images/`.
    pub data: Option<PathBuf>,
    /// Labels file to use instead of `<data>/labels.csv`.
    pub labels: Option<PathBuf>,
    /// Separate validation labels; otherwise a storm-disjoint split of `labels`.
    pub val_labels: Option<PathBuf>,
    pub synth: SynthConfig,
    pub network: NetworkConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    /// Ensemble size.
    pub members: usize,
    pub overlap: OverlapPolicy,
    pub seed: u64,
    pub val_fraction: f64,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            labels: None,
            val_labels: None,
            synth: SynthConfig::new(2000, 64, 0),
            network: NetworkConfig::small(),
            sampler: SamplerConfig::default(),
            train: TrainConfig::default(),
            members: 5,
            overlap: OverlapPolicy::default(),
            seed: 0,
            val_fraction: 0.2,
            output: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.sampler.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.members == 0 {
            return Err(Error::Config("members must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        Ok(())
    }

    pub fn hyper(&self) -> TrainingHyper {
        TrainingHyper {
            network: self.network.clone(),
            sampler: self.sampler.clone(),
            train: self.train.clone(),
        }
    }

    pub fn output(&self) -> Result<&Path> {
        self.output
            .as_deref()
            .ok_or_else(|| Error::Config("no output directory (--out or \"output\")".into()))
    }

    pub fn data_dir(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::Config("no dataset (--data or \"data\")".into()))
    }

    /// `(image directory, labels file)`. Images live in `<data>/images` when
    /// that exists, else directly in `<data>`.
    pub fn dataset_paths(&self) -> Result<(PathBuf, PathBuf)> {
        let dir = self.data_dir()?;
        let images = dir.join("images");
        let images = if images.is_dir() { images } else { dir.to_path_buf() };
        let labels = self.labels.clone().unwrap_or_else(|| dir.join("labels.csv"));
        Ok((images, labels))
    }

    /// Writes the effective configuration into `dir`.
    pub fn record(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.into(),
            source: e,
        })?;
        let path = dir.join(RUN_CONFIG_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::Io { path, source: e })
    }
}
