//! Run configuration: one TOML document covering data generation, training,
//! loss weights, evaluation and variant selection.
//!
//! Every field has a default, unknown keys are rejected, and a single master
//! seed drives the generator, the split, training and the bootstrap.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::DEFAULT_BOOTSTRAP;
use crate::synthdata::SynthConfig;
use crate::training::{TrainConfig, VariantSpec};

/// Environment variable naming the config file used when `--config` is absent.
pub const CONFIG_ENV: &str = "CCKD_CONFIG";

/// File name of the effective config written into every output directory.
pub const EFFECTIVE_CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; copied into `synth.seed` and `train.seed` by [`RunConfig::with_seed`].
    pub seed: u64,
    pub train_fraction: f64,
    pub bootstrap_resamples: usize,
    pub variants: Vec<VariantSpec>,
    pub synth: SynthConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            train_fraction: 0.8,
            bootstrap_resamples: DEFAULT_BOOTSTRAP,
            variants: VariantSpec::ALL.to_vec(),
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
        }
        .with_seed(0)
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let cfg = cfg.clone().with_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// `explicit`, else the file named by [`CONFIG_ENV`], else defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self> {
        if let Some(p) = explicit {
            return Self::load(p);
        }
        match std::env::var_os(CONFIG_ENV) {
            Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
            _ => Ok(Self::default()),
        }
    }

    /// Sets the master seed and every seed derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.bootstrap_resamples == 0 {
            return Err(Error::Config("bootstrap_resamples must be at least 1".into()));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("variants must name at least one variant".into()));
        }
        self.synth
            .validate()
            .map_err(|e| Error::Config(format!("[synth] {e}")))?;
        self.train.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Writes the effective config into `dir`.
    pub fn write_effective(&self, dir: &Path) -> Result<()> {
        let path = dir.join(EFFECTIVE_CONFIG_FILE);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }
}
