use std::path::Path;

use anyhow::{bail, Context, Result};
use qfa_core::evo::{CollectConfig, PredictorConfig, SearchConfig};
use qfa_core::qat::{AblationVariant, ToyDataConfig, TrainConfig};
use qfa_core::supernet::{NetworkConfig, SearchSpaceSpec};
use serde::{Deserialize, Serialize};

/// Environment variable consulted when neither a flag nor the config file sets a seed.
pub const SEED_ENV: &str = "QFA_SEED";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SpaceKind {
    #[default]
    Desk,
    Paper,
}

impl SpaceKind {
    pub fn spec(self) -> SearchSpaceSpec {
        match self {
            Self::Desk => SearchSpaceSpec::desk(),
            Self::Paper => SearchSpaceSpec::paper(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub batches: usize,
    pub batch_size: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            batches: 4,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub steps: usize,
    pub variants: Vec<AblationVariant>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            variants: AblationVariant::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtremeValueConfig {
    pub lambda: f64,
    pub sizes: Vec<u64>,
    pub trials: u64,
    /// Batches per sampling mode for the activation-maximum probe.
    pub probe_batches: usize,
}

impl Default for ExtremeValueConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            sizes: vec![1, 10, 100, 1000, 10_000],
            trials: 10_000,
            probe_batches: 40,
        }
    }
}

/// Every tunable of every subcommand. Seeds of the sections are overwritten
/// by the top-level seed when the config is resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub space: SpaceKind,
    pub net: NetworkConfig,
    pub data: ToyDataConfig,
    pub train: TrainConfig,
    pub calibration: CalibrationConfig,
    pub collect: CollectConfig,
    pub predictor: PredictorConfig,
    pub search: SearchConfig,
    pub ablation: AblationConfig,
    pub analysis: ExtremeValueConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            space: SpaceKind::Desk,
            net: NetworkConfig::desk(),
            data: ToyDataConfig::default(),
            train: TrainConfig::default(),
            calibration: CalibrationConfig::default(),
            collect: CollectConfig::default(),
            predictor: PredictorConfig::default(),
            search: SearchConfig::desk(),
            ablation: AblationConfig::default(),
            analysis: ExtremeValueConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, then the TOML file, then the seed (flag, else file, else
    /// `QFA_SEED`, else 0). Subcommand flags are applied by the caller
    /// before [`Self::finish`].
    pub fn load(file: Option<&Path>, seed_flag: Option<u64>) -> Result<Self> {
        let (mut cfg, file_seed) = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                let value: toml::Table =
                    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
                let has_seed = value.contains_key("seed");
                let cfg: RunConfig = value
                    .try_into()
                    .with_context(|| format!("invalid config {}", path.display()))?;
                let seed = has_seed.then_some(cfg.seed);
                (cfg, seed)
            }
            None => (Self::default(), None),
        };
        cfg.seed = match seed_flag.or(file_seed) {
            Some(s) => s,
            None => match std::env::var(SEED_ENV) {
                Ok(v) => v
                    .trim()
                    .parse()
                    .with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer"))?,
                Err(_) => 0,
            },
        };
        Ok(cfg)
    }

    /// Propagates the seed and validates the sections.
    pub fn finish(mut self) -> Result<Self> {
        let s = self.seed;
        self.train.seed = s;
        self.collect.seed = s;
        self.predictor.seed = s;
        self.search.seed = s;
        self.train.validate()?;
        self.search.validate()?;
        let spec = self.space.spec();
        spec.validate()?;
        if self.calibration.batches == 0 || self.calibration.batch_size == 0 {
            bail!("calibration needs at least one batch of at least one sample");
        }
        Ok(self)
    }

    pub fn spec(&self) -> SearchSpaceSpec {
        self.space.spec()
    }
}
