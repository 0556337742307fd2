use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nn::{Conv2d, ConvBlock, Ctx, GroupNorm, Init, LEAKY_SLOPE};
use crate::tensor::{Float, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDecoderConfig {
    pub hidden: usize,
    pub kernel: usize,
    /// Total spatial reduction, a power of two.
    pub downsample: usize,
    pub norm_groups: usize,
    pub skips: bool,
}

impl Default for EncoderDecoderConfig {
    fn default() -> Self {
        Self { hidden: 64, kernel: 3, downsample: 4, norm_groups: 16, skips: true }
    }
}

impl EncoderDecoderConfig {
    pub fn levels(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.hidden > 0, "hidden width must be positive");
        ensure!(self.kernel % 2 == 1, "kernel size {} must be odd", self.kernel);
        ensure!(self.downsample.is_power_of_two(), "downsampling factor {} must be a power of two", self.downsample);
        ensure!(
            self.norm_groups > 0 && self.hidden % self.norm_groups == 0,
            "{} norm groups do not divide hidden width {}",
            self.norm_groups,
            self.hidden
        );
        Ok(())
    }

    pub fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        ensure!(
            h % self.downsample == 0 && w % self.downsample == 0 && h > 0 && w > 0,
            "spatial dims {h}x{w} are not divisible by the downsampling factor {}",
            self.downsample
        );
        Ok(())
    }
}

/// Pixel-unshuffle by 2 followed by a 1×1 projection, GroupNorm and LeakyReLU.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub proj: Conv2d,
    pub norm: GroupNorm,
}

impl PatchMerge {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, cin: usize, cout: usize, groups: usize, rng: &mut impl Rng) -> Self {
        Self {
            proj: Conv2d::new(store, &format!("{name}.proj"), 4 * cin, cout, 1, Init::FanIn, rng),
            norm: GroupNorm::new(store, &format!("{name}.norm"), groups, cout),
        }
    }

    pub fn forward<'g, F: Float>(&self, cx: &Ctx<'g, F>, x: Var<'g, F>) -> Var<'g, F> {
        self.norm.forward(cx, self.proj.forward(cx, x.pixel_unshuffle(2))).leaky_relu(LEAKY_SLOPE)
    }
}

/// 1×1 projection to four times the width followed by pixel-shuffle by 2.
#[derive(Clone, Debug)]
pub struct PatchExpand {
    pub proj: Conv2d,
}

impl PatchExpand {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self { proj: Conv2d::new(store, &format!("{name}.proj"), cin, 4 * cout, 1, Init::FanIn, rng) }
    }

    pub fn forward<'g, F: Float>(&self, cx: &Ctx<'g, F>, x: Var<'g, F>) -> Var<'g, F> {
        self.proj.forward(cx, x).pixel_shuffle(2)
    }
}

/// Per-frame spatial encoder; no temporal mixing.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderDecoderConfig,
    pub stem: ConvBlock,
    pub levels: Vec<(PatchMerge, ConvBlock)>,
}

/// Latent map plus one skip tensor per resolution above the latent (finest first).
pub struct Encoded<'g, F: Float> {
    pub latent: Var<'g, F>,
    pub skips: Vec<Var<'g, F>>,
}

impl Encoder {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        in_channels: usize,
        config: EncoderDecoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (d, k, g) = (config.hidden, config.kernel, config.norm_groups);
        let stem = ConvBlock::new(store, &format!("{name}.stem"), in_channels, d, k, g, rng);
        let levels = (0..config.levels())
            .map(|l| {
                (
                    PatchMerge::new(store, &format!("{name}.down{l}"), d, d, g, rng),
                    ConvBlock::new(store, &format!("{name}.block{l}"), d, d, k, g, rng),
                )
            })
            .collect();
        Ok(Self { config, stem, levels })
    }

    pub fn forward<'g, F: Float>(&self, cx: &Ctx<'g, F>, x: Var<'g, F>) -> Result<Encoded<'g, F>> {
        let (_, _, h, w) = x.dims4();
        self.config.check_dims(h, w)?;
        let mut z = self.stem.forward(cx, x);
        let mut skips = Vec::with_capacity(self.levels.len());
        for (down, block) in &self.levels {
            skips.push(z);
            z = block.forward(cx, down.forward(cx, z));
        }
        Ok(Encoded { latent: z, skips })
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: EncoderDecoderConfig,
    pub levels: Vec<(PatchExpand, ConvBlock)>,
    pub head: Conv2d,
}

impl Decoder {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        out_channels: usize,
        config: EncoderDecoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (d, k, g) = (config.hidden, config.kernel, config.norm_groups);
        let cin = if config.skips { 2 * d } else { d };
        let levels = (0..config.levels())
            .map(|l| {
                (
                    PatchExpand::new(store, &format!("{name}.up{l}"), d, d, rng),
                    ConvBlock::new(store, &format!("{name}.block{l}"), cin, d, k, g, rng),
                )
            })
            .collect();
        let head = Conv2d::new(store, &format!("{name}.head"), d, out_channels, 1, Init::FanIn, rng);
        Ok(Self { config, levels, head })
    }

    /// Features at full resolution before the output head.
    pub fn features<'g, F: Float>(&self, cx: &Ctx<'g, F>, latent: Var<'g, F>, skips: &[Var<'g, F>]) -> Var<'g, F> {
        let mut z = latent;
        for (l, (up, block)) in self.levels.iter().enumerate().rev() {
            z = up.forward(cx, z);
            if self.config.skips {
                z = cx.graph.concat(&[z, skips[l]], 1);
            }
            z = block.forward(cx, z);
        }
        z
    }

    pub fn forward<'g, F: Float>(&self, cx: &Ctx<'g, F>, latent: Var<'g, F>, skips: &[Var<'g, F>]) -> Var<'g, F> {
        self.head.forward(cx, self.features(cx, latent, skips))
    }
}
