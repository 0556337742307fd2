use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbones::EncoderDecoderConfig;
use crate::conditioning::{ConditioningConfig, Location, Method};
use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "convlstm-meteo")]
    ConvlstmMeteo,
    #[serde(rename = "predrnn-meteo")]
    PredrnnMeteo,
    #[serde(rename = "simvp-meteo")]
    SimvpMeteo,
    #[serde(rename = "lstm-1x1")]
    Lstm1x1,
    #[serde(rename = "unet-next-frame")]
    UnetNextFrame,
    #[serde(rename = "unet-next-cuboid")]
    UnetNextCuboid,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::ConvlstmMeteo,
        Family::PredrnnMeteo,
        Family::SimvpMeteo,
        Family::Lstm1x1,
        Family::UnetNextFrame,
        Family::UnetNextCuboid,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::ConvlstmMeteo => "convlstm-meteo",
            Family::PredrnnMeteo => "predrnn-meteo",
            Family::SimvpMeteo => "simvp-meteo",
            Family::Lstm1x1 => "lstm-1x1",
            Family::UnetNextFrame => "unet-next-frame",
            Family::UnetNextCuboid => "unet-next-cuboid",
        }
    }

    /// Conditioning each family uses unless configured otherwise.
    pub fn default_conditioning(self) -> ConditioningConfig {
        match self {
            Family::ConvlstmMeteo | Family::Lstm1x1 => ConditioningConfig::new(Method::Cat, Location::Early),
            Family::PredrnnMeteo => ConditioningConfig::new(Method::Film, Location::Early),
            Family::SimvpMeteo | Family::UnetNextFrame | Family::UnetNextCuboid => {
                ConditioningConfig::new(Method::Film, Location::Latent)
            }
        }
    }

    /// Whether the family's rollout feeds its own single-frame predictions back.
    pub fn is_next_frame(self) -> bool {
        matches!(self, Family::PredrnnMeteo | Family::UnetNextFrame)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Contract(format!("unknown model family {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: Family,
    pub conditioning: ConditioningConfig,
    pub encdec: EncoderDecoderConfig,
    pub seed: u64,
    /// When off, no conditioning parameters exist and weather is never read.
    pub meteo: bool,
    pub context_len: usize,
    pub target_len: usize,
    /// Recurrent cells per network (ConvLSTM, ST-LSTM).
    pub layers: usize,
    /// GSTA blocks in the SimVP translator.
    pub translator_blocks: usize,
    /// Hidden channels of the SimVP translator.
    pub translator_hidden: usize,
    pub unet_depth: usize,
}

impl ModelConfig {
    /// Small configuration for 32×32 desk-scale runs.
    pub fn desk(family: Family) -> Self {
        let mut c = Self::paper(family);
        c.encdec = EncoderDecoderConfig { hidden: 16, kernel: 3, downsample: 4, norm_groups: 4, skips: true };
        c.conditioning.hidden = 16;
        c.translator_hidden = 64;
        c.unet_depth = 3;
        if family == Family::Lstm1x1 {
            c.encdec.kernel = 1;
        }
        c
    }

    /// Hyperparameters of the original experiments (64 hidden channels, kernel 3, two cells).
    pub fn paper(family: Family) -> Self {
        let mut encdec = EncoderDecoderConfig::default();
        if family == Family::Lstm1x1 {
            encdec.kernel = 1;
        }
        Self {
            family,
            conditioning: family.default_conditioning(),
            encdec,
            seed: 0,
            meteo: true,
            context_len: 10,
            target_len: 20,
            layers: 2,
            translator_blocks: 2,
            translator_hidden: 256,
            unet_depth: 5,
        }
    }

    /// Conditioning actually in effect (none when meteo is off).
    pub fn effective_conditioning(&self) -> ConditioningConfig {
        if self.meteo {
            self.conditioning
        } else {
            ConditioningConfig { method: Method::None, ..self.conditioning }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encdec;
        ensure!(e.hidden > 0, "hidden width must be positive");
        ensure!(self.context_len > 0 && self.target_len > 0, "context and target lengths must be positive");
        e.validate()?;
        let cond = self.effective_conditioning();
        cond.validate(e.hidden)?;
        let method_on = cond.method != Method::None;
        match self.family {
            Family::ConvlstmMeteo | Family::Lstm1x1 => {
                ensure!(self.layers > 0, "{} needs at least one cell", self.family);
                ensure!(
                    !method_on || cond.location != Location::Latent,
                    "{} has no latent stage; use early or all fusion",
                    self.family
                );
                if self.family == Family::Lstm1x1 {
                    ensure!(e.kernel == 1, "lstm-1x1 requires kernel size 1, got {}", e.kernel);
                }
            }
            Family::PredrnnMeteo => ensure!(self.layers > 0, "predrnn-meteo needs at least one cell"),
            Family::SimvpMeteo => {
                ensure!(
                    !method_on || cond.location != Location::Early,
                    "simvp-meteo requires latent fusion (or all, or none)"
                );
                ensure!(self.translator_blocks > 0 && self.translator_hidden > 0, "simvp translator must be non-empty");
                if cond.method == Method::Xattn {
                    ensure!(self.translator_hidden % cond.heads == 0, "heads must divide the translator width");
                }
            }
            Family::UnetNextFrame | Family::UnetNextCuboid => {
                ensure!(self.unet_depth > 0, "UNet depth must be positive");
                ensure!(e.hidden % e.norm_groups == 0, "norm groups must divide the UNet width");
            }
        }
        Ok(())
    }
}
