//! Parameterized layers shared by the conditioning modules, backbones and models.

use rand::Rng;

use crate::tensor::{Float, Graph, ParamId, ParamStore, Var};

/// Negative slope of every LeakyReLU in the crate.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Epsilon of all normalization layers.
pub const NORM_EPS: f64 = 1e-5;

/// What a forward pass needs: the tape and the parameters it reads.
#[derive(Clone, Copy)]
pub struct Ctx<'g, F: Float> {
    pub graph: &'g Graph<F>,
    pub store: &'g ParamStore<F>,
}

impl<'g, F: Float> Ctx<'g, F> {
    pub fn new(graph: &'g Graph<F>, store: &'g ParamStore<F>) -> Self {
        Self { graph, store }
    }

    pub fn param(&self, id: ParamId) -> Var<'g, F> {
        self.graph.param(self.store, id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform `±1/sqrt(fan_in)`.
    FanIn,
    Zeros,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
}

impl Conv2d {
    /// Odd kernels get "same" zero padding.
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        Self::grouped(store, name, cin, cout, kernel, 1, init, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn grouped<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        groups: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(cin % groups == 0 && cout % groups == 0, "{name}: groups {groups} must divide {cin}->{cout}");
        let cin_g = cin / groups;
        let shape = [cout, cin_g, kernel, kernel];
        let fan_in = cin_g * kernel * kernel;
        let (weight, bias) = match init {
            Init::FanIn => (
                store.add_uniform(format!("{name}.weight"), &shape, fan_in, rng),
                store.add_uniform(format!("{name}.bias"), &[cout], fan_in, rng),
            ),
            Init::Zeros => (
                store.add_const(format!("{name}.weight"), &shape, 0.0),
                store.add_const(format!("{name}.bias"), &[cout], 0.0),
            ),
        };
        Self { weight, bias: Some(bias), cin, cout, kernel, stride: 1, groups }
    }

    /// Same as [`Conv2d::new`] without a bias term.
    pub fn unbiased<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = store.add_uniform(format!("{name}.weight"), &[cout, cin, kernel, kernel], fan_in, rng);
        Self { weight, bias: None, cin, cout, kernel, stride: 1, groups: 1 }
    }

    pub fn forward<'g, F: Float>(&self, cx: &Ctx<'g, F>, x: Var<'g, F>) -> Var<'g, F> {
        let w = cx.param(self.weight);
        let b = self.bias.map(|b| cx.param(b));
        x.conv2d(w, b, self.stride, self.kernel / 2, self.groups)
    }

    pub fn param_count(&self) -> usize {
        self.cout * (self.cin / self.groups) * self.kernel * self.kernel + self.bias.map_or(0, |_| self.cout)
    }
}

/// GroupNorm with per-channel affine.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub channels: usize,
}

impl GroupNorm {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, groups: usize, channels: usize) -> Self {
        assert!(groups > 0 && channels % groups == 0, "{name}: {groups} groups must divide {channels} channels");
        Self {
            gamma: store.add_const(format!("{name}.gamma"), &[1, channels, 1, 1], 1.0),
            beta: store.add_const(format!("{name}.beta"), &[1, channels, 1, 1], 0.0),
            groups,
            channels,
        }
    }

    pub fn forward<'g, F: Float>(&self, cx: &Ctx<'g, F>, x: Var<'g, F>) -> Var<'g, F> {
        let (b, c, h, w) = x.dims4();
        assert_eq!(c, self.channels, "GroupNorm channel mismatch");
        x.reshape(&[b, self.groups, (c / self.groups) * h * w])
            .normalize(2, NORM_EPS)
            .reshape(&[b, c, h, w])
            .mul_bc(cx.param(self.gamma))
            .add_bc(cx.param(self.beta))
    }
}

/// Per-pixel normalization over the channel (feature) axis, no affine.
pub fn feature_norm<'g, F: Float>(x: Var<'g, F>) -> Var<'g, F> {
    x.normalize(1, NORM_EPS)
}

/// Two-layer pointwise MLP: `conv1x1 -> LeakyReLU -> conv1x1`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Conv2d,
    pub out: Conv2d,
}

impl Mlp {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        hidden: usize,
        cout: usize,
        final_init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            hidden: Conv2d::new(store, &format!("{name}.0"), cin, hidden, 1, Init::FanIn, rng),
            out: Conv2d::new(store, &format!("{name}.1"), hidden, cout, 1, final_init, rng),
        }
    }

    pub fn forward<'g, F: Float>(&self, cx: &Ctx<'g, F>, x: Var<'g, F>) -> Var<'g, F> {
        let h = self.hidden.forward(cx, x).leaky_relu(LEAKY_SLOPE);
        self.out.forward(cx, h)
    }
}

/// `conv3x3 -> GroupNorm -> LeakyReLU`.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

impl ConvBlock {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        groups: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, kernel, Init::FanIn, rng),
            norm: GroupNorm::new(store, &format!("{name}.norm"), groups, cout),
        }
    }

    pub fn forward<'g, F: Float>(&self, cx: &Ctx<'g, F>, x: Var<'g, F>) -> Var<'g, F> {
        self.norm.forward(cx, self.conv.forward(cx, x)).leaky_relu(LEAKY_SLOPE)
    }
}
