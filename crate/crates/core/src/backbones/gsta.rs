use rand::Rng;

use crate::conditioning::{Fusion, Stage};
use crate::error::{ensure, Result};
use crate::nn::{Conv2d, Ctx, Init};
use crate::tensor::{Float, ParamStore, Var};

/// Depthwise spatial conv, then a 1×1 channel (temporal) mixing conv producing
/// a value and a gate: `σ(gate) ⊙ value`.
#[derive(Clone, Debug)]
pub struct GstaBlock {
    pub spatial: Conv2d,
    pub mix: Conv2d,
    pub channels: usize,
}

impl GstaBlock {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, channels: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        Self {
            spatial: Conv2d::grouped(store, &format!("{name}.spatial"), channels, channels, kernel, channels, Init::FanIn, rng),
            mix: Conv2d::new(store, &format!("{name}.mix"), channels, 2 * channels, 1, Init::FanIn, rng),
            channels,
        }
    }

    pub fn forward<'g, F: Float>(&self, cx: &Ctx<'g, F>, x: Var<'g, F>) -> Var<'g, F> {
        let z = self.mix.forward(cx, self.spatial.forward(cx, x));
        let c = self.channels;
        z.narrow(1, c, c).sigmoid().mul(z.narrow(1, 0, c))
    }
}

/// Maps the channel-stacked context latents `[B, T·d, H′, W′]` to `[B, K·d, H′, W′]`.
#[derive(Clone, Debug)]
pub struct GstaTranslator {
    pub input: Conv2d,
    pub blocks: Vec<GstaBlock>,
    pub output: Conv2d,
    pub context_len: usize,
    pub target_len: usize,
    pub width: usize,
    pub hidden: usize,
}

impl GstaTranslator {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        context_len: usize,
        target_len: usize,
        width: usize,
        hidden: usize,
        blocks: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            input: Conv2d::new(store, &format!("{name}.input"), context_len * width, hidden, 1, Init::FanIn, rng),
            blocks: (0..blocks).map(|i| GstaBlock::new(store, &format!("{name}.block{i}"), hidden, kernel, rng)).collect(),
            output: Conv2d::new(store, &format!("{name}.output"), hidden, target_len * width, 1, Init::FanIn, rng),
            context_len,
            target_len,
            width,
            hidden,
        }
    }
}

/// Runs the translator; `weather` is fused before every block at `Stage::Block(i)`.
pub fn gsta_translate<'g, F: Float>(
    tr: &GstaTranslator,
    cx: &Ctx<'g, F>,
    stack: Var<'g, F>,
    weather: Option<(&Fusion, Var<'g, F>)>,
) -> Result<Var<'g, F>> {
    let (_, ch, _, _) = stack.dims4();
    ensure!(
        ch == tr.context_len * tr.width,
        "translator expects {}·{} stacked channels, got {ch}",
        tr.context_len,
        tr.width
    );
    let mut z = tr.input.forward(cx, stack);
    for (i, block) in tr.blocks.iter().enumerate() {
        if let Some((fusion, c)) = weather {
            z = fusion.fuse(cx, Stage::Block(i), z, c)?;
        }
        z = block.forward(cx, z);
    }
    Ok(tr.output.forward(cx, z))
}
