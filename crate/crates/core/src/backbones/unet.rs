use rand::Rng;

use super::PatchMerge;
use crate::conditioning::{Fusion, Stage};
use crate::error::{ensure, Result};
use crate::nn::{Conv2d, ConvBlock, Ctx, Init};
use crate::tensor::{Float, ParamStore, Tensor, Var};

/// UNet with PatchMerge downsampling, nearest upsampling and concatenated skips.
/// Width doubles per level.
#[derive(Clone, Debug)]
pub struct UNet {
    pub depth: usize,
    pub stem: ConvBlock,
    pub down: Vec<(PatchMerge, ConvBlock)>,
    pub up: Vec<ConvBlock>,
    pub head: Conv2d,
    pub widths: Vec<usize>,
}

impl UNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        hidden: usize,
        depth: usize,
        norm_groups: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        ensure!(hidden > 0 && depth > 0, "UNet needs positive width and depth");
        ensure!(hidden % norm_groups == 0, "{norm_groups} norm groups do not divide width {hidden}");
        let widths: Vec<usize> = (0..=depth).map(|l| hidden << l).collect();
        let stem = ConvBlock::new(store, &format!("{name}.stem"), in_channels, hidden, 3, norm_groups, rng);
        let down = (0..depth)
            .map(|l| {
                (
                    PatchMerge::new(store, &format!("{name}.down{l}"), widths[l], widths[l + 1], norm_groups, rng),
                    ConvBlock::new(store, &format!("{name}.enc{l}"), widths[l + 1], widths[l + 1], 3, norm_groups, rng),
                )
            })
            .collect();
        let up = (0..depth)
            .map(|l| ConvBlock::new(store, &format!("{name}.dec{l}"), widths[l + 1] + widths[l], widths[l], 3, norm_groups, rng))
            .collect();
        let head = Conv2d::new(store, &format!("{name}.head"), hidden, out_channels, 1, Init::FanIn, rng);
        Ok(Self { depth, stem, down, up, head, widths })
    }

    pub fn bottleneck_width(&self) -> usize {
        self.widths[self.depth]
    }
}

/// Forward pass; `weather` is fused on the input and at the bottleneck
/// (`Stage::PostEncoder`). `ablate_skips` replaces every skip by zeros.
pub fn unet_forward<'g, F: Float>(
    net: &UNet,
    cx: &Ctx<'g, F>,
    input: Var<'g, F>,
    weather: Option<(&Fusion, Var<'g, F>)>,
    ablate_skips: bool,
) -> Result<Var<'g, F>> {
    let (_, _, h, w) = input.dims4();
    let f = 1usize << net.depth;
    ensure!(h % f == 0 && w % f == 0, "spatial dims {h}x{w} are not divisible by 2^{}", net.depth);
    let mut x = input;
    if let Some((fusion, c)) = weather {
        if fusion.stages().any(|s| s == Stage::Input) {
            x = fusion.fuse(cx, Stage::Input, x, c)?;
        }
    }
    let mut z = net.stem.forward(cx, x);
    let mut skips = Vec::with_capacity(net.depth);
    for (merge, block) in &net.down {
        skips.push(z);
        z = block.forward(cx, merge.forward(cx, z));
    }
    if let Some((fusion, c)) = weather {
        z = fusion.fuse(cx, Stage::PostEncoder, z, c.avg_pool(f))?;
    }
    for l in (0..net.depth).rev() {
        let skip = if ablate_skips { cx.graph.constant(Tensor::zeros(skips[l].shape())) } else { skips[l] };
        z = net.up[l].forward(cx, cx.graph.concat(&[z.upsample_nearest(2), skip], 1));
    }
    Ok(net.head.forward(cx, z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{ConditioningConfig, Location, Method, StageSpec};
    use crate::gradcheck::{check_gradients, randomize_params};
    use crate::tensor::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn preserves_spatial_shape_and_rejects_indivisible_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let net = UNet::new(&mut store, "u", 5, 2, 8, 3, 4, &mut rng).unwrap();
        let g = Graph::inference();
        let cx = Ctx::new(&g, &store);
        let y = unet_forward(&net, &cx, g.constant(Tensor::zeros(vec![2, 5, 32, 32])), None, false).unwrap();
        assert_eq!(y.shape(), vec![2, 2, 32, 32]);
        assert!(unet_forward(&net, &cx, g.constant(Tensor::zeros(vec![1, 5, 12, 12])), None, false).is_err());
    }

    #[test]
    fn skips_are_live() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f32>::new();
        let net = UNet::new(&mut store, "u", 1, 1, 4, 2, 2, &mut rng).unwrap();
        let g = Graph::inference();
        let cx = Ctx::new(&g, &store);
        let x = g.constant(Tensor::from_fn(vec![1, 1, 8, 8], |i| (i as f32 * 0.3).sin()));
        let a = unet_forward(&net, &cx, x, None, false).unwrap().value();
        let b = unet_forward(&net, &cx, x, None, true).unwrap().value();
        let diff = a.zip_map(&b, |p, q| (p - q).abs()).max_abs();
        assert!(diff > 1e-4, "{diff}");
    }

    #[test]
    fn bottleneck_film_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let mut store = ParamStore::<f64>::new();
            let net = UNet::new(&mut store, "u", 2, 1, 2, 2, 2, &mut rng).unwrap();
            let mut cfg = ConditioningConfig::new(Method::Film, Location::Latent);
            cfg.hidden = 3;
            let specs = [
                StageSpec { stage: Stage::Input, width: 2, n_feat: 1 },
                StageSpec { stage: Stage::PostEncoder, width: net.bottleneck_width(), n_feat: 1 },
            ];
            let fusion = Fusion::new(&mut store, "w", cfg, 2, &specs, &mut rng).unwrap();
            randomize_params(&mut store, 0.7, &mut rng);
            let x = Tensor::from_fn(vec![1, 2, 8, 8], |_| rng.random_range(-1.0..1.0));
            let c = Tensor::from_fn(vec![1, 2, 8, 8], |_| rng.random_range(-1.0..1.0));
            let rep = check_gradients(
                &store,
                &[x, c],
                |cx, v| unet_forward(&net, cx, v[0], Some((&fusion, v[1])), false).unwrap(),
                4,
                &mut rng,
            );
            worst = worst.max(rep.max_rel_error);
        }
        assert!(worst <= 1e-4, "{worst}");
    }
}
