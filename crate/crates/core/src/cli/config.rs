use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::Baseline;
use crate::binio::read_json;
use crate::conditioning::ConditioningConfig;
use crate::error::Result;
use crate::hashing::config_hash;
use crate::minicube::{Split, SplitSpec, SyntheticWorldParams};
use crate::models::{Family, ModelConfig};
use crate::training::TrainConfig;

/// JSON run configuration. Every field is optional; precedence is
/// built-in desk defaults < config file < command-line flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: Option<String>,
    pub dataset: Option<PathBuf>,
    pub family: Option<Family>,
    pub meteo: Option<bool>,
    pub conditioning: Option<ConditioningConfig>,
    /// Full model configuration; `family`, `meteo`, `conditioning` and `seed` still override it.
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
    pub world: Option<SyntheticWorldParams>,
    pub splits: Option<SplitSpec>,
    /// Total number of cubes to generate, spread round-robin over the splits.
    pub cubes: Option<usize>,
    /// Split to evaluate.
    pub split: Option<Split>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub shuffle: Option<bool>,
    pub baseline: Option<Baseline>,
    pub checkpoint: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn family(&self) -> Family {
        self.family.or(self.model.as_ref().map(|m| m.family)).unwrap_or(Family::ConvlstmMeteo)
    }

    pub fn model_config(&self) -> ModelConfig {
        let family = self.family();
        let mut m = match &self.model {
            Some(m) if m.family == family => m.clone(),
            _ => ModelConfig::desk(family),
        };
        if let Some(c) = self.conditioning {
            m.conditioning = c;
        }
        if let Some(on) = self.meteo {
            m.meteo = on;
        }
        if let Some(s) = self.seed {
            m.seed = s;
        }
        m
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone().unwrap_or_else(|| TrainConfig::desk(self.family()));
        if let Some(s) = self.seed {
            t.seed = s;
        }
        if let Some(s) = self.shuffle {
            t.shuffle = s;
        }
        t
    }

    pub fn world(&self) -> SyntheticWorldParams {
        let mut w = self.world.clone().unwrap_or_else(|| SyntheticWorldParams::desk(0));
        if let Some(s) = self.seed {
            w.seed = s;
        }
        w
    }

    pub fn split_spec(&self) -> SplitSpec {
        self.splits.clone().unwrap_or_else(SplitSpec::desk)
    }

    pub fn split(&self) -> Split {
        self.split.unwrap_or(Split::OodT)
    }

    /// Hash of the configuration without its paths, so runs in different
    /// directories hash alike.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.dataset = None;
        c.out = None;
        c.checkpoint = None;
        config_hash(&c)
    }
}
